//! Entity representation learning: token states from a small trainable
//! encoder, BIO span tagging with its loss, mention and sentence context
//! vectors, and the entity-pair co-event auxiliary loss.
//!
//! The token state is GELU(W [embed(token) ; sentence-mean-embed] + b), so a
//! token sees its own identity plus a bag-of-words summary of its sentence.
//! The per-sentence context vector is the mean of its token states.

use crate::decoder::{EventRecord, MlpVars};
use crate::diffcore::{Tape, Var};
use crate::{Error, Result};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Token-to-id mapping with reserved padding and unknown ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    map: BTreeMap<String, usize>,
}

impl Vocab {
    /// Builds a vocab from known tokens, dropping duplicates while keeping
    /// first-seen order. Reserved tokens are prepended.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut all = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let mut map = BTreeMap::new();
        map.insert(PAD_TOKEN.to_string(), PAD_ID);
        map.insert(UNK_TOKEN.to_string(), UNK_ID);
        for tok in tokens {
            if !map.contains_key(&tok) {
                map.insert(tok.clone(), all.len());
                all.push(tok);
            }
        }
        Vocab { tokens: all, map }
    }

    /// Builds a vocab from a corpus: sorted unique tokens.
    pub fn from_corpus<'a, I: IntoIterator<Item = &'a Vec<Vec<String>>>>(docs: I) -> Self {
        let uniq: std::collections::BTreeSet<String> = docs
            .into_iter()
            .flatten()
            .flatten()
            .cloned()
            .collect();
        Vocab::from_tokens(uniq)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        *self.map.get(token).unwrap_or(&UNK_ID)
    }

    pub fn encode_sentence(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// One token per line; the first two lines are the reserved pad and
    /// unknown tokens.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for tok in &self.tokens {
            writeln!(f, "{}", tok)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let lines: Vec<String> = BufReader::new(f).lines().collect::<std::io::Result<_>>()?;
        if lines.len() < 2 || lines[0] != PAD_TOKEN || lines[1] != UNK_TOKEN {
            return Err(Error::Validation(format!(
                "{}: vocab file must start with the reserved {} and {} lines",
                path.display(),
                PAD_TOKEN,
                UNK_TOKEN
            )));
        }
        Ok(Vocab::from_tokens(lines[2..].iter().cloned()))
    }
}

// ---- token states -----------------------------------------------------------

/// Encoder weights registered on the current tape.
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    /// (|V|, d_emb) token embedding table.
    pub embed: Var,
    /// (2 d_emb, d_h) projection.
    pub w: Var,
    /// (d_h,) bias.
    pub b: Var,
}

/// Per-sentence token-state matrices plus pooled context vectors.
#[derive(Debug)]
pub struct TokenStates {
    /// One (tokens, d_h) matrix per sentence.
    pub sentences: Vec<Var>,
    /// One (d_h,) pooled vector per sentence.
    pub context: Vec<Var>,
}

/// Encodes a document's token ids into per-token hidden states.
pub fn encode(tape: &mut Tape, sentences: &[Vec<usize>], vars: EncoderVars) -> Result<TokenStates> {
    let mut out_states = Vec::with_capacity(sentences.len());
    let mut out_context = Vec::with_capacity(sentences.len());
    for (i, ids) in sentences.iter().enumerate() {
        if ids.is_empty() {
            return Err(Error::Validation(format!("sentence {} is empty", i)));
        }
        let embeds = tape.gather_rows(vars.embed, ids)?;
        let sent_mean = tape.mean_rows(embeds)?;
        let mean_rows = tape.repeat_row(sent_mean, ids.len())?;
        let features = tape.concat_cols(embeds, mean_rows)?;
        let projected = tape.matmul(features, vars.w)?;
        let shifted = tape.add_row(projected, vars.b)?;
        let states = tape.gelu(shifted);
        let context = tape.mean_rows(states)?;
        out_states.push(states);
        out_context.push(context);
    }
    Ok(TokenStates {
        sentences: out_states,
        context: out_context,
    })
}

// ---- BIO tagging --------------------------------------------------------------

/// BIO label indices: 0 = B, 1 = I, 2 = O.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BioLabel {
    B,
    I,
    O,
}

impl BioLabel {
    pub fn class(self) -> usize {
        match self {
            BioLabel::B => 0,
            BioLabel::I => 1,
            BioLabel::O => 2,
        }
    }

    pub fn from_class(class: usize) -> Self {
        match class {
            0 => BioLabel::B,
            1 => BioLabel::I,
            _ => BioLabel::O,
        }
    }
}

/// Tagger weights: (d_h, 3) and (3,).
#[derive(Debug, Clone, Copy)]
pub struct BioVars {
    pub w: Var,
    pub b: Var,
}

/// Per-token distributions over {B, I, O} for every sentence, plus the mean
/// token-level cross-entropy against gold labels when provided.
pub fn tag_bio(
    tape: &mut Tape,
    states: &TokenStates,
    vars: BioVars,
    gold: Option<&[Vec<BioLabel>]>,
) -> Result<(Vec<Var>, Option<Var>)> {
    if let Some(gold) = gold {
        if gold.len() != states.sentences.len() {
            return Err(Error::Validation(format!(
                "gold BIO has {} sentences, document has {}",
                gold.len(),
                states.sentences.len()
            )));
        }
    }
    let mut probs = Vec::with_capacity(states.sentences.len());
    let mut ce_terms = Vec::new();
    for (si, &h) in states.sentences.iter().enumerate() {
        let logits = tape.matmul(h, vars.w)?;
        let logits = tape.add_row(logits, vars.b)?;
        let p = tape.softmax_rows(logits)?;
        if let Some(gold) = gold {
            let n_tokens = tape.shape(h)[0];
            if gold[si].len() != n_tokens {
                return Err(Error::Validation(format!(
                    "gold BIO for sentence {} has {} labels, sentence has {} tokens",
                    si,
                    gold[si].len(),
                    n_tokens
                )));
            }
            for (ti, label) in gold[si].iter().enumerate() {
                let row = tape.row(p, ti)?;
                ce_terms.push(tape.cross_entropy(row, label.class())?);
            }
        }
        probs.push(p);
    }
    let loss = if gold.is_some() {
        let stacked = tape.concat(&ce_terms)?;
        Some(tape.mean_all(stacked)?)
    } else {
        None
    };
    Ok((probs, loss))
}

/// Gold BIO sequence for a sentence given its entity spans.
pub fn gold_bio(sentence_len: usize, spans: &[(usize, usize)]) -> Vec<BioLabel> {
    let mut labels = vec![BioLabel::O; sentence_len];
    for &(start, end) in spans {
        labels[start] = BioLabel::B;
        for l in labels.iter_mut().take(end).skip(start + 1) {
            *l = BioLabel::I;
        }
    }
    labels
}

/// Greedy span decoding: B starts a span, I extends one. An I with no open
/// span is repaired into a fresh span start, so decoding is total.
pub fn decode_spans(labels: &[BioLabel]) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut open: Option<usize> = None;
    for (i, label) in labels.iter().enumerate() {
        match label {
            BioLabel::B => {
                if let Some(s) = open.take() {
                    spans.push((s, i));
                }
                open = Some(i);
            }
            BioLabel::I => {
                if open.is_none() {
                    open = Some(i);
                }
            }
            BioLabel::O => {
                if let Some(s) = open.take() {
                    spans.push((s, i));
                }
            }
        }
    }
    if let Some(s) = open {
        spans.push((s, labels.len()));
    }
    spans
}

// ---- mentions -------------------------------------------------------------------

/// A token span addressing one entity mention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub sentence: usize,
    pub start: usize,
    pub end: usize,
}

/// One mention with its pooled representation.
#[derive(Debug)]
pub struct MentionRep {
    pub mention_id: usize,
    pub entity_id: i64,
    pub span: Span,
    pub vector: Var,
}

/// Mean of the token states across a span.
pub fn mention_vector(tape: &mut Tape, states: &TokenStates, span: &Span) -> Result<Var> {
    if span.sentence >= states.sentences.len() {
        return Err(Error::index(
            "mention_vector",
            format!("sentence {} out of range", span.sentence),
        ));
    }
    let h = states.sentences[span.sentence];
    let n_tokens = tape.shape(h)[0];
    if span.start >= span.end || span.end > n_tokens {
        return Err(Error::index(
            "mention_vector",
            format!(
                "span {}..{} out of range for sentence {} with {} tokens",
                span.start, span.end, span.sentence, n_tokens
            ),
        ));
    }
    let idx: Vec<usize> = (span.start..span.end).collect();
    let rows = tape.gather_rows(h, &idx)?;
    tape.mean_rows(rows)
}

/// Builds mention representations in span order with caller-assigned entity
/// ids.
pub fn mention_reps(
    tape: &mut Tape,
    states: &TokenStates,
    spans: &[Span],
    entity_ids: &[i64],
) -> Result<Vec<MentionRep>> {
    if spans.len() != entity_ids.len() {
        return Err(Error::shape(
            "mention_reps",
            format!("{} spans vs {} entity ids", spans.len(), entity_ids.len()),
        ));
    }
    spans
        .iter()
        .zip(entity_ids)
        .enumerate()
        .map(|(i, (span, &entity_id))| {
            Ok(MentionRep {
                mention_id: i,
                entity_id,
                span: *span,
                vector: mention_vector(tape, states, span)?,
            })
        })
        .collect()
}

/// Groups spans by exact surface token-sequence equality; returns one group
/// index per span, `0..n_groups` in first-appearance order.
pub fn group_spans_by_surface(sentences: &[Vec<String>], spans: &[Span]) -> Vec<usize> {
    let mut groups: Vec<Vec<String>> = Vec::new();
    let mut out = Vec::with_capacity(spans.len());
    for span in spans {
        let surface: Vec<String> = sentences[span.sentence][span.start..span.end].to_vec();
        let gid = match groups.iter().position(|g| g == &surface) {
            Some(g) => g,
            None => {
                groups.push(surface);
                groups.len() - 1
            }
        };
        out.push(gid);
    }
    out
}

// ---- entity-pair co-event loss ---------------------------------------------------

/// Gold labels for all unordered mention pairs in canonical (i < j) order:
/// 1 iff the two mentions' entities co-occur in at least one gold event.
pub fn coevent_pair_labels(mention_entity_ids: &[i64], gold_events: &[EventRecord]) -> Vec<f64> {
    let event_entities: Vec<Vec<i64>> = gold_events
        .iter()
        .map(|e| e.args.iter().map(|a| a.entity_id).collect())
        .collect();
    let co_event = |a: i64, b: i64| {
        event_entities
            .iter()
            .any(|ents| ents.contains(&a) && ents.contains(&b))
    };
    let n = mention_entity_ids.len();
    let mut labels = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            labels.push(if co_event(mention_entity_ids[i], mention_entity_ids[j]) {
                1.0
            } else {
                0.0
            });
        }
    }
    labels
}

/// Pair probabilities and summed binary cross-entropy over all unordered
/// mention pairs (canonical order: i < j by mention index). Fewer than two
/// mentions yield a constant zero loss.
pub fn pair_coevent_loss(
    tape: &mut Tape,
    mentions: &[MentionRep],
    gold_events: &[EventRecord],
    vars: MlpVars,
) -> Result<(Var, Vec<f64>)> {
    if mentions.len() < 2 {
        let zero = tape.scalar_const(0.0);
        return Ok((zero, Vec::new()));
    }
    let ids: Vec<i64> = mentions.iter().map(|m| m.entity_id).collect();
    let labels = coevent_pair_labels(&ids, gold_events);
    let vectors: Vec<Var> = mentions.iter().map(|m| m.vector).collect();
    let stacked = tape.stack_rows(&vectors)?;
    let mut left_idx = Vec::new();
    let mut right_idx = Vec::new();
    for i in 0..mentions.len() {
        for j in (i + 1)..mentions.len() {
            left_idx.push(i);
            right_idx.push(j);
        }
    }
    let left = tape.gather_rows(stacked, &left_idx)?;
    let right = tape.gather_rows(stacked, &right_idx)?;
    let features = tape.concat_cols(left, right)?;
    let logits = crate::decoder::mlp(tape, features, vars)?;
    let n_pairs = left_idx.len();
    let flat = tape.reshape(logits, vec![n_pairs])?;
    let probs = tape.sigmoid(flat);
    let loss = tape.binary_cross_entropy(probs, labels)?;
    let prob_values = tape.value(probs).to_vec();
    Ok((loss, prob_values))
}
