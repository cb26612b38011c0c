//! Training and evaluation: the full per-document forward pass, the Adam
//! loop with gradient accumulation, dev-based checkpoint selection, the
//! ablation variants, and embedding export.
//!
//! Training uses gold entity spans to build mentions so the matching loss
//! is not disturbed by tagger noise; evaluation decodes spans from the BIO
//! tagger and groups them into entities by exact surface match.

use crate::datakit::{validate_document, Document, ScoreReport};
use crate::decoder::{
    aggregate_entity, classify_argument, classify_event_type, decode_events, EventRecord,
    ProxyBatch, Schema,
};
use crate::diffcore::{
    load_checkpoint, save_checkpoint, Adam, AdamConfig, Tape, Var,
};
use crate::encoder::{
    decode_spans, encode, gold_bio, group_spans_by_surface, mention_reps, pair_coevent_loss,
    tag_bio, BioLabel, Span,
};
use crate::matching::{
    constrained_hausdorff_with, pad_gold, solve_assignment, total_loss, Assignment, CostMatrix,
};
use crate::model::{Model, ModelDims, ModelStructure, ModelVars};
use crate::proxygraph::{build_graph, film_layer};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Entity ids assigned to predicted surfaces with no gold counterpart start
/// here, so they can never collide with gold ids.
const UNSEEN_ENTITY_BASE: i64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    NoHypernetwork,
    NoProxy,
    NoHdm,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoHypernetwork => "no_hypernetwork",
            Ablation::NoProxy => "no_proxy",
            Ablation::NoHdm => "no_hdm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no_hypernetwork" => Ok(Ablation::NoHypernetwork),
            "no_proxy" => Ok(Ablation::NoProxy),
            "no_hdm" => Ok(Ablation::NoHdm),
            other => Err(Error::Config(format!("unknown ablation mode {}", other))),
        }
    }

    pub fn structure(self) -> ModelStructure {
        ModelStructure {
            hypernetwork: self != Ablation::NoHypernetwork,
            distinct_proxies: self != Ablation::NoProxy,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub d_emb: usize,
    pub d_h: usize,
    pub n_proxies: usize,
    pub mha_heads: usize,
    pub lr_encoder: f64,
    pub lr_rest: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Consecutive non-improving epochs tolerated before stopping; 0 stops
    /// after the first epoch.
    pub patience: usize,
    pub seed: u64,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d_emb: 32,
            d_h: 32,
            n_proxies: 8,
            mha_heads: 4,
            lr_encoder: 1e-3,
            lr_rest: 1e-3,
            batch_size: 32,
            max_epochs: 100,
            patience: 30,
            seed: 0,
            ablation: Ablation::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        Ok(())
    }

    pub fn dims(&self, vocab_len: usize, schema: &Schema) -> ModelDims {
        ModelDims {
            vocab: vocab_len,
            d_emb: self.d_emb,
            d_h: self.d_h,
            n_proxies: self.n_proxies,
            heads: self.mha_heads,
            type_classes: schema.n_type_classes(),
            role_classes: schema.n_role_classes(),
        }
    }
}

// ---- forward pass ------------------------------------------------------------

/// Everything one forward pass produces for the loss and for decoding.
pub struct ForwardOutcome {
    pub batch: ProxyBatch,
    /// Entity-representation loss L_er + L_epc (constant zero in eval mode).
    pub l_e: Var,
    pub l_er: f64,
    pub l_epc: f64,
    /// Updated proxy vectors after the graph layer.
    pub proxies_hat: Var,
    /// (span, entity id) per mention, in mention order.
    pub mentions: Vec<(Span, i64)>,
    pub mention_vars: Vec<Var>,
}

fn gold_spans(doc: &Document) -> (Vec<Span>, Vec<i64>) {
    let spans: Vec<Span> = doc
        .entities
        .iter()
        .map(|e| Span {
            sentence: e.sentence,
            start: e.start,
            end: e.end,
        })
        .collect();
    let ids = doc.entities.iter().map(|e| e.entity_id).collect();
    (spans, ids)
}

fn predicted_spans(
    tape: &Tape,
    doc: &Document,
    bio_probs: &[Var],
) -> (Vec<Span>, Vec<i64>) {
    let mut spans = Vec::new();
    for (si, &p) in bio_probs.iter().enumerate() {
        let shape = tape.shape(p);
        let (rows, cols) = (shape[0], shape[1]);
        let data = tape.value(p);
        let labels: Vec<BioLabel> = (0..rows)
            .map(|t| {
                BioLabel::from_class(crate::decoder::argmax_tie_low(
                    &data[t * cols..(t + 1) * cols],
                ))
            })
            .collect();
        for (start, end) in decode_spans(&labels) {
            spans.push(Span {
                sentence: si,
                start,
                end,
            });
        }
    }
    // group by surface, then map groups onto gold ids where surfaces match
    let groups = group_spans_by_surface(&doc.sentences, &spans);
    let mut group_ids: Vec<Option<i64>> = Vec::new();
    let mut ids = Vec::with_capacity(spans.len());
    for (span, &gid) in spans.iter().zip(&groups) {
        if group_ids.len() <= gid {
            group_ids.resize(gid + 1, None);
        }
        if group_ids[gid].is_none() {
            let surface = doc.sentences[span.sentence][span.start..span.end].join(" ");
            let resolved = doc
                .entities
                .iter()
                .find(|e| e.surface == surface)
                .map(|e| e.entity_id)
                .unwrap_or(UNSEEN_ENTITY_BASE + gid as i64);
            group_ids[gid] = Some(resolved);
        }
        ids.push(group_ids[gid].unwrap());
    }
    (spans, ids)
}

/// Runs encoder, graph, and decoding heads for one document. With
/// `use_gold_spans` the losses L_er and L_epc are computed against the gold
/// annotation; otherwise spans come from the BIO tagger and `l_e` is zero.
pub fn forward_document(
    tape: &mut Tape,
    model: &Model,
    vars: &ModelVars,
    doc: &Document,
    vocab: &crate::encoder::Vocab,
    schema: &Schema,
    use_gold_spans: bool,
) -> Result<ForwardOutcome> {
    let _ = schema;
    let ids: Vec<Vec<usize>> = doc.sentences.iter().map(|s| vocab.encode_sentence(s)).collect();
    let states = encode(tape, &ids, vars.encoder)?;

    let (spans, entity_ids, l_er_var, l_epc_var, l_er, l_epc);
    if use_gold_spans {
        let (s, e) = gold_spans(doc);
        let mut per_sentence: Vec<Vec<(usize, usize)>> = vec![Vec::new(); doc.sentences.len()];
        for span in &s {
            per_sentence[span.sentence].push((span.start, span.end));
        }
        let gold: Vec<Vec<BioLabel>> = doc
            .sentences
            .iter()
            .zip(&per_sentence)
            .map(|(sent, spans)| gold_bio(sent.len(), spans))
            .collect();
        let (_probs, loss) = tag_bio(tape, &states, vars.bio, Some(&gold))?;
        let er = loss.expect("loss present in training mode");
        let mentions = mention_reps(tape, &states, &s, &e)?;
        let (epc, _pair_probs) = pair_coevent_loss(tape, &mentions, &doc.events, vars.epc)?;
        l_er = tape.scalar_value(er);
        l_epc = tape.scalar_value(epc);
        spans = s;
        entity_ids = e;
        l_er_var = Some(er);
        l_epc_var = Some(epc);
    } else {
        let (probs, _) = tag_bio(tape, &states, vars.bio, None)?;
        let (s, e) = predicted_spans(tape, doc, &probs);
        spans = s;
        entity_ids = e;
        l_er = 0.0;
        l_epc = 0.0;
        l_er_var = None;
        l_epc_var = None;
    }

    let mentions = mention_reps(tape, &states, &spans, &entity_ids)?;
    let mention_vars: Vec<Var> = mentions.iter().map(|m| m.vector).collect();
    let graph = build_graph(tape, vars.proxies, &mention_vars, &states.context)?;
    let proxies_hat = film_layer(tape, &graph, vars.film)?;

    let type_probs = classify_event_type(tape, proxies_hat, vars.etype)?;
    // unique entities in first-mention order
    let mut unique_ids: Vec<i64> = Vec::new();
    for m in &mentions {
        if !unique_ids.contains(&m.entity_id) {
            unique_ids.push(m.entity_id);
        }
    }
    let mut arg_vars = Vec::with_capacity(unique_ids.len());
    for &uid in &unique_ids {
        let rows: Vec<Var> = mentions
            .iter()
            .filter(|m| m.entity_id == uid)
            .map(|m| m.vector)
            .collect();
        let stacked = tape.stack_rows(&rows)?;
        let aggregated = aggregate_entity(tape, proxies_hat, stacked, vars.mha)?;
        arg_vars.push(classify_argument(tape, proxies_hat, aggregated, vars.arg)?);
    }
    let batch = ProxyBatch::from_tape(tape, type_probs, arg_vars, unique_ids);

    let l_e = match (l_er_var, l_epc_var) {
        (Some(a), Some(b)) => tape.add(a, b)?,
        _ => tape.scalar_const(0.0),
    };
    let _ = model;
    Ok(ForwardOutcome {
        batch,
        l_e,
        l_er,
        l_epc,
        proxies_hat,
        mentions: mentions.iter().map(|m| (m.span, m.entity_id)).collect(),
        mention_vars,
    })
}

// ---- evaluation -----------------------------------------------------------------

/// Decodes predictions for every document with frozen parameters.
pub fn predict(
    model: &Model,
    docs: &[Document],
    vocab: &crate::encoder::Vocab,
    schema: &Schema,
) -> Result<Vec<Vec<EventRecord>>> {
    docs.iter()
        .map(|doc| {
            let mut tape = Tape::new();
            let vars = model.register(&mut tape)?;
            let fwd = forward_document(&mut tape, model, &vars, doc, vocab, schema, false)?;
            Ok(decode_events(&fwd.batch, schema))
        })
        .collect()
}

/// Scores a model over a corpus.
pub fn evaluate(
    model: &Model,
    docs: &[Document],
    vocab: &crate::encoder::Vocab,
    schema: &Schema,
) -> Result<(ScoreReport, Vec<Vec<EventRecord>>)> {
    let predictions = predict(model, docs, vocab, schema)?;
    let gold: Vec<Vec<EventRecord>> = docs.iter().map(|d| d.events.clone()).collect();
    let report = crate::datakit::score(&predictions, &gold, schema)?;
    Ok((report, predictions))
}

// ---- training ----------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub run_dir: PathBuf,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
    pub report_json: PathBuf,
    pub final_report: ScoreReport,
    pub epochs_run: usize,
    pub best_dev_f1: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,step,L_total,D_hat,avg_hausdorff_diag,L_er,L_epc,dev_P,dev_R,dev_F1";

#[derive(Debug)]
struct StepLog {
    total: f64,
    d_hat: f64,
    avg_h: f64,
    l_er: f64,
    l_epc: f64,
}

/// Trains on `train_docs`, selecting the best checkpoint by dev micro F1.
/// Artifacts (metrics CSV, last/best checkpoints, final dev report) land in
/// `run_dir`, which is created if needed.
pub fn train(
    train_docs: &[Document],
    dev_docs: &[Document],
    schema: &Schema,
    vocab: &crate::encoder::Vocab,
    config: &TrainConfig,
    run_dir: &Path,
) -> Result<RunArtifacts> {
    config.validate()?;
    if train_docs.is_empty() || dev_docs.is_empty() {
        return Err(Error::Config("training and dev corpora must be nonempty".into()));
    }
    for doc in train_docs.iter().chain(dev_docs) {
        validate_document(doc, schema)?;
        if doc.events.len() > config.n_proxies {
            return Err(Error::Config(format!(
                "document {} has {} events but only {} proxy nodes; increase n_proxies",
                doc.id,
                doc.events.len(),
                config.n_proxies
            )));
        }
    }
    std::fs::create_dir_all(run_dir)?;
    let dims = config.dims(vocab.len(), schema);
    let mut model = Model::init(dims, config.ablation.structure(), config.seed)?;
    let mut adam = Adam::new(
        AdamConfig {
            lr_encoder: config.lr_encoder,
            lr_rest: config.lr_rest,
            ..AdamConfig::default()
        },
        &model.store,
    );
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5348_5546));
    let mut match_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x4d41_5443));

    let metrics_csv = run_dir.join("metrics.csv");
    let mut metrics = std::fs::File::create(&metrics_csv)?;
    writeln!(metrics, "{}", METRICS_HEADER)?;
    let last_ckpt = run_dir.join("last.ckpt");
    let best_ckpt = run_dir.join("best.ckpt");

    let mut best_f1 = f64::NEG_INFINITY;
    let mut since_improved = 0usize;
    let mut step = 0u64;
    let mut epochs_run = 0usize;

    'epochs: for epoch in 1..=config.max_epochs {
        epochs_run = epoch;
        let mut order: Vec<usize> = (0..train_docs.len()).collect();
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(config.batch_size) {
            model.store.zero_grads();
            let mut log = StepLog {
                total: 0.0,
                d_hat: 0.0,
                avg_h: 0.0,
                l_er: 0.0,
                l_epc: 0.0,
            };
            for &di in chunk {
                let doc = &train_docs[di];
                let (loss_values, tape, vars, loss) =
                    train_step(&model, doc, vocab, schema, config, &mut match_rng)?;
                let mut tape = tape;
                tape.backward(loss)?;
                model.store.harvest_grads(&tape, &vars);
                log.total += loss_values.total;
                log.d_hat += loss_values.d_hat;
                log.avg_h += loss_values.avg_h;
                log.l_er += loss_values.l_er;
                log.l_epc += loss_values.l_epc;
            }
            if !model.store.grads_finite() {
                return Err(Error::Divergence {
                    doc_id: train_docs[chunk[0]].id,
                    detail: "non-finite gradient in batch".into(),
                });
            }
            let n = chunk.len() as f64;
            model.store.scale_grads(1.0 / n);
            adam.step(&mut model.store)?;
            step += 1;
            writeln!(
                metrics,
                "{},{},{},{},{},{},{},,,",
                epoch,
                step,
                log.total / n,
                log.d_hat / n,
                log.avg_h / n,
                log.l_er / n,
                log.l_epc / n
            )?;
        }
        let (report, _) = evaluate(&model, dev_docs, vocab, schema)?;
        writeln!(
            metrics,
            "{},{},,,,,,{},{},{}",
            epoch, step, report.precision, report.recall, report.f1
        )?;
        save_checkpoint(&model.store, &last_ckpt)?;
        if report.f1 > best_f1 {
            best_f1 = report.f1;
            since_improved = 0;
            save_checkpoint(&model.store, &best_ckpt)?;
        } else {
            since_improved += 1;
        }
        if best_f1 >= 1.0 {
            break 'epochs;
        }
        if since_improved >= config.patience {
            break 'epochs;
        }
    }
    drop(metrics);

    let loaded = load_checkpoint(&best_ckpt)?;
    model.load_values(&loaded)?;
    let (final_report, _) = evaluate(&model, dev_docs, vocab, schema)?;
    let report_json = run_dir.join("report.json");
    let json = serde_json::to_string_pretty(&final_report)
        .map_err(|e| Error::Validation(format!("report serialization: {}", e)))?;
    std::fs::write(&report_json, json)?;

    Ok(RunArtifacts {
        run_dir: run_dir.to_path_buf(),
        best_checkpoint: best_ckpt,
        last_checkpoint: last_ckpt,
        metrics_csv,
        report_json,
        final_report,
        epochs_run,
        best_dev_f1: best_f1,
    })
}

/// One training forward pass: loss graph plus logged component values.
fn train_step(
    model: &Model,
    doc: &Document,
    vocab: &crate::encoder::Vocab,
    schema: &Schema,
    config: &TrainConfig,
    match_rng: &mut ChaCha8Rng,
) -> Result<(StepLog, Tape, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape)?;
    let fwd = forward_document(&mut tape, model, &vars, doc, vocab, schema, true)?;
    let gold = pad_gold(&doc.events, &fwd.batch.entity_ids, schema, config.n_proxies)?;
    let outcome = if config.ablation == Ablation::NoHdm {
        let matcher = |cost: &CostMatrix| -> Result<Assignment> {
            let mut cols: Vec<usize> = (0..cost.rows).collect();
            cols.shuffle(match_rng);
            let cost_sum = cols
                .iter()
                .enumerate()
                .map(|(r, &c)| cost.at(r, c))
                .sum();
            Ok(Assignment {
                row_to_col: cols,
                cost: cost_sum,
            })
        };
        constrained_hausdorff_with(&mut tape, &fwd.batch, &gold, matcher)?
    } else {
        constrained_hausdorff_with(&mut tape, &fwd.batch, &gold, solve_assignment)?
    };
    let loss = total_loss(&mut tape, outcome.loss, fwd.l_e)?;
    let total = tape.scalar_value(loss);
    if !total.is_finite() {
        return Err(Error::Divergence {
            doc_id: doc.id,
            detail: format!("loss = {}", total),
        });
    }
    let all_vars = vars.all.clone();
    Ok((
        StepLog {
            total,
            d_hat: tape.scalar_value(outcome.loss),
            avg_h: outcome.avg_hausdorff,
            l_er: fwd.l_er,
            l_epc: fwd.l_epc,
        },
        tape,
        all_vars,
        loss,
    ))
}

/// Trains with an ablation mode and reports scores on `eval_docs` using the
/// best checkpoint.
pub fn run_ablation(
    mode: Ablation,
    train_docs: &[Document],
    dev_docs: &[Document],
    eval_docs: &[Document],
    schema: &Schema,
    vocab: &crate::encoder::Vocab,
    config: &TrainConfig,
    run_dir: &Path,
) -> Result<ScoreReport> {
    let config = TrainConfig {
        ablation: mode,
        ..config.clone()
    };
    let artifacts = train(train_docs, dev_docs, schema, vocab, &config, run_dir)?;
    let loaded = load_checkpoint(&artifacts.best_checkpoint)?;
    let dims = config.dims(vocab.len(), schema);
    let mut model = Model::init(dims, mode.structure(), config.seed)?;
    model.load_values(&loaded)?;
    let (report, _) = evaluate(&model, eval_docs, vocab, schema)?;
    Ok(report)
}

// ---- embedding export -----------------------------------------------------------

/// One exported vector: an entity mention or a proxy node, with the gold
/// event-membership bit per gold event of the document.
#[derive(Debug, Clone, Serialize)]
pub struct EmbeddingRow {
    pub kind: String,
    pub id: i64,
    pub membership: Vec<u8>,
    pub vector: Vec<f64>,
}

/// Extracts mention vectors (entity-level space) and updated proxy vectors
/// (event-level space) for one document, with gold membership bits. Proxy
/// membership marks the gold event the proxy is matched to, all zeros for
/// proxies matched to padding.
pub fn export_embeddings(
    model: &Model,
    doc: &Document,
    vocab: &crate::encoder::Vocab,
    schema: &Schema,
) -> Result<Vec<EmbeddingRow>> {
    validate_document(doc, schema)?;
    let mut tape = Tape::new();
    let vars = model.register(&mut tape)?;
    let fwd = forward_document(&mut tape, model, &vars, doc, vocab, schema, true)?;
    let gold = pad_gold(&doc.events, &fwd.batch.entity_ids, schema, model.dims.n_proxies)?;
    let cost = crate::matching::build_cost_matrix(&fwd.batch, &gold)?;
    let assignment = solve_assignment(&cost)?;

    let n_events = doc.events.len();
    let member = |entity_id: i64| -> Vec<u8> {
        doc.events
            .iter()
            .map(|e| u8::from(e.args.iter().any(|a| a.entity_id == entity_id)))
            .collect()
    };
    let mut rows = Vec::new();
    for (i, (_, entity_id)) in fwd.mentions.iter().enumerate() {
        rows.push(EmbeddingRow {
            kind: "entity".into(),
            id: *entity_id,
            membership: member(*entity_id),
            vector: tape.value(fwd.mention_vars[i]).to_vec(),
        });
    }
    let d_h = model.dims.d_h;
    let hat = tape.value(fwd.proxies_hat);
    for p in 0..model.dims.n_proxies {
        let matched = assignment.row_to_col[p];
        let mut membership = vec![0u8; n_events];
        if matched < n_events {
            membership[matched] = 1;
        }
        rows.push(EmbeddingRow {
            kind: "proxy".into(),
            id: p as i64,
            membership,
            vector: hat[p * d_h..(p + 1) * d_h].to_vec(),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::{generate, GenConfig};

    fn tiny_gen() -> GenConfig {
        GenConfig {
            num_docs: 6,
            ..GenConfig::default()
        }
    }

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            d_emb: 8,
            d_h: 8,
            n_proxies: 4,
            mha_heads: 2,
            batch_size: 4,
            max_epochs: 2,
            patience: 5,
            ..TrainConfig::default()
        }
    }

    fn corpus_fixture() -> (Vec<Document>, Schema, crate::encoder::Vocab) {
        let corpus = generate(&tiny_gen()).unwrap();
        let vocab = crate::encoder::Vocab::from_tokens(corpus.inventory.tokens());
        (corpus.documents, corpus.schema, vocab)
    }

    #[test]
    fn zero_model_yields_uniform_distributions() {
        let (docs, schema, vocab) = corpus_fixture();
        let config = tiny_train_config();
        let dims = config.dims(vocab.len(), &schema);
        let model = Model::zeros(dims, ModelStructure::default()).unwrap();
        let mut tape = Tape::new();
        let vars = model.register(&mut tape).unwrap();
        let fwd =
            forward_document(&mut tape, &model, &vars, &docs[0], &vocab, &schema, true).unwrap();
        let tc = schema.n_type_classes() as f64;
        for row in &fwd.batch.type_probs {
            for &p in row {
                assert!((p - 1.0 / tc).abs() < 1e-12);
            }
        }
        let rc = schema.n_role_classes() as f64;
        for per_entity in &fwd.batch.arg_probs {
            for row in per_entity {
                for &p in row {
                    assert!((p - 1.0 / rc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn document_without_events_still_yields_all_proxies() {
        let (mut docs, schema, vocab) = corpus_fixture();
        let doc = &mut docs[0];
        doc.events.clear();
        doc.entities.clear();
        let config = tiny_train_config();
        let dims = config.dims(vocab.len(), &schema);
        let model = Model::init(dims, ModelStructure::default(), 3).unwrap();
        let mut tape = Tape::new();
        let vars = model.register(&mut tape).unwrap();
        let fwd =
            forward_document(&mut tape, &model, &vars, doc, &vocab, &schema, true).unwrap();
        assert_eq!(fwd.batch.n_proxies(), config.n_proxies);
        let gold = pad_gold(&doc.events, &fwd.batch.entity_ids, &schema, config.n_proxies).unwrap();
        assert_eq!(gold.events.len(), config.n_proxies);
        assert!(gold.events.iter().all(|e| e.padded));
    }

    #[test]
    fn sampled_parameter_gradients_match_finite_differences() {
        // 1% sample of parameters on a small document
        let (docs, schema, vocab) = corpus_fixture();
        let doc = docs
            .iter()
            .find(|d| !d.entities.is_empty())
            .unwrap()
            .clone();
        let config = TrainConfig {
            d_emb: 4,
            d_h: 4,
            n_proxies: 3,
            mha_heads: 2,
            ..tiny_train_config()
        };
        let dims = config.dims(vocab.len(), &schema);
        let model = Model::init(dims, ModelStructure::default(), 11).unwrap();

        let loss_at = |m: &Model| -> f64 {
            let mut tape = Tape::new();
            let vars = m.register(&mut tape).unwrap();
            let fwd =
                forward_document(&mut tape, m, &vars, &doc, &vocab, &schema, true).unwrap();
            let gold =
                pad_gold(&doc.events, &fwd.batch.entity_ids, &schema, config.n_proxies).unwrap();
            let outcome =
                constrained_hausdorff_with(&mut tape, &fwd.batch, &gold, solve_assignment)
                    .unwrap();
            let loss = total_loss(&mut tape, outcome.loss, fwd.l_e).unwrap();
            tape.scalar_value(loss)
        };

        // analytic gradients
        let mut tape = Tape::new();
        let vars = model.register(&mut tape).unwrap();
        let fwd =
            forward_document(&mut tape, &model, &vars, &doc, &vocab, &schema, true).unwrap();
        let gold =
            pad_gold(&doc.events, &fwd.batch.entity_ids, &schema, config.n_proxies).unwrap();
        let outcome =
            constrained_hausdorff_with(&mut tape, &fwd.batch, &gold, solve_assignment).unwrap();
        let loss = total_loss(&mut tape, outcome.loss, fwd.l_e).unwrap();
        tape.backward(loss).unwrap();

        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let eps = 1e-6;
        let mut checked = 0;
        for (pi, p) in model.store.clone().iter().enumerate() {
            for vi in 0..p.data.len() {
                if rng.gen_range(0.0..1.0) > 0.01 {
                    continue;
                }
                checked += 1;
                let mut plus = model.clone();
                plus.store.get_mut(crate::diffcore::ParamId(pi)).data[vi] += eps;
                let mut minus = model.clone();
                minus.store.get_mut(crate::diffcore::ParamId(pi)).data[vi] -= eps;
                let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * eps);
                let analytic = tape.grad(vars.all[pi]).map(|g| g[vi]).unwrap_or(0.0);
                let scale = fd.abs().max(analytic.abs());
                if scale < 1e-6 {
                    assert!((fd - analytic).abs() < 1e-6, "{}[{}]", p.name, vi);
                } else {
                    assert!(
                        (fd - analytic).abs() / scale < 1e-3,
                        "{}[{}]: fd {} vs analytic {}",
                        p.name,
                        vi,
                        fd,
                        analytic
                    );
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn patience_zero_stops_after_one_epoch() {
        let (docs, schema, vocab) = corpus_fixture();
        let dir = tempfile::tempdir().unwrap();
        let config = TrainConfig {
            patience: 0,
            max_epochs: 50,
            ..tiny_train_config()
        };
        let artifacts = train(&docs[..4], &docs[4..], &schema, &vocab, &config, dir.path()).unwrap();
        assert_eq!(artifacts.epochs_run, 1);
    }

    #[test]
    fn same_seed_reproduces_metrics_bytes() {
        let (docs, schema, vocab) = corpus_fixture();
        let config = tiny_train_config();
        let run = |dir: &Path| {
            train(&docs[..4], &docs[4..], &schema, &vocab, &config, dir).unwrap();
            std::fs::read(dir.join("metrics.csv")).unwrap()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        assert_eq!(run(d1.path()), run(d2.path()));
    }

    #[test]
    fn metrics_components_sum_to_total() {
        let (docs, schema, vocab) = corpus_fixture();
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_train_config();
        train(&docs[..4], &docs[4..], &schema, &vocab, &config, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let mut checked = 0;
        for line in text.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols[2].is_empty() {
                continue; // epoch summary row
            }
            let total: f64 = cols[2].parse().unwrap();
            let d: f64 = cols[3].parse().unwrap();
            let er: f64 = cols[5].parse().unwrap();
            let epc: f64 = cols[6].parse().unwrap();
            assert!((total - (d + er + epc)).abs() < 1e-9, "{}", line);
            checked += 1;
        }
        assert!(checked > 0);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_scores() {
        let (docs, schema, vocab) = corpus_fixture();
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_train_config();
        let artifacts =
            train(&docs[..4], &docs[4..], &schema, &vocab, &config, dir.path()).unwrap();
        let dims = config.dims(vocab.len(), &schema);
        let mut model = Model::init(dims, ModelStructure::default(), config.seed).unwrap();
        let loaded = load_checkpoint(&artifacts.best_checkpoint).unwrap();
        model.load_values(&loaded).unwrap();
        let (report, _) = evaluate(&model, &docs[4..], &vocab, &schema).unwrap();
        assert_eq!(report, artifacts.final_report);
    }

    #[test]
    fn export_rows_cover_mentions_and_proxies() {
        let (docs, schema, vocab) = corpus_fixture();
        let doc = docs.iter().find(|d| d.entities.len() >= 2).unwrap();
        let config = tiny_train_config();
        let dims = config.dims(vocab.len(), &schema);
        let model = Model::init(dims, ModelStructure::default(), 0).unwrap();
        let rows = export_embeddings(&model, doc, &vocab, &schema).unwrap();
        let entity_rows = rows.iter().filter(|r| r.kind == "entity").count();
        let proxy_rows = rows.iter().filter(|r| r.kind == "proxy").count();
        assert_eq!(entity_rows, doc.entities.len());
        assert_eq!(proxy_rows, config.n_proxies);
        for r in &rows {
            assert_eq!(r.membership.len(), doc.events.len());
            assert_eq!(r.vector.len(), config.d_h);
        }
    }

    #[test]
    fn divergence_reports_document_id() {
        let (docs, schema, vocab) = corpus_fixture();
        let config = tiny_train_config();
        let dims = config.dims(vocab.len(), &schema);
        let mut model = Model::init(dims, ModelStructure::default(), 0).unwrap();
        // poison a parameter on every forward path
        let enc_b = model
            .store
            .iter()
            .position(|p| p.name == "enc.b")
            .unwrap();
        model.store.get_mut(crate::diffcore::ParamId(enc_b)).data[0] = f64::NAN;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = train_step(&model, &docs[0], &vocab, &schema, &config, &mut rng).unwrap_err();
        match err {
            Error::Divergence { doc_id, .. } => assert_eq!(doc_id, docs[0].id),
            other => panic!("expected divergence, got {}", other),
        }
    }
}
