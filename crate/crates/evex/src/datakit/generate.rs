//! Deterministic synthetic multi-event corpus generator.
//!
//! Each event renders into one sentence per filled role: an event-type
//! marker token, a role marker token, the entity's multi-token surface, and
//! common-token padding. Multiple events per document get distinct types;
//! consecutive events may share an entity, which then appears as a mention
//! in both events' sentences under (usually) different roles. Sentences are
//! shuffled so arguments scatter across the document.

use super::document::{Document, EntitySpan, DOC_FORMAT_VERSION};
use crate::decoder::{EventArg, EventRecord, EventTypeDef, Schema};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub seed: u64,
    pub vocab_size: usize,
    pub num_docs: usize,
    pub event_types: usize,
    pub min_roles_per_type: usize,
    pub max_roles_per_type: usize,
    /// Weight of generating 1, 2, ... events per document.
    pub events_per_doc_weights: Vec<f64>,
    /// Probability that two consecutive events of a document share an entity.
    pub entity_sharing: f64,
    /// Soft minimum sentence count; reached by appending noise sentences.
    pub sentences_per_doc: usize,
    pub tokens_per_sentence: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            vocab_size: 64,
            num_docs: 300,
            event_types: 3,
            min_roles_per_type: 3,
            max_roles_per_type: 5,
            events_per_doc_weights: vec![0.55, 0.30, 0.15],
            entity_sharing: 0.3,
            sentences_per_doc: 5,
            tokens_per_sentence: 8,
        }
    }
}

impl GenConfig {
    fn validate(&self) -> Result<()> {
        if self.num_docs == 0
            || self.event_types == 0
            || self.min_roles_per_type == 0
            || self.sentences_per_doc == 0
            || self.tokens_per_sentence == 0
        {
            return Err(Error::Config("generator counts must be at least 1".into()));
        }
        if self.max_roles_per_type < self.min_roles_per_type {
            return Err(Error::Config(
                "max_roles_per_type is below min_roles_per_type".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.entity_sharing) {
            return Err(Error::Config(format!(
                "entity_sharing {} outside [0, 1]",
                self.entity_sharing
            )));
        }
        if self.events_per_doc_weights.is_empty()
            || self.events_per_doc_weights.iter().any(|&w| w < 0.0)
            || self.events_per_doc_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::Config("events-per-document weights are invalid".into()));
        }
        if self.events_per_doc_weights.len() > self.event_types {
            return Err(Error::Config(format!(
                "up to {} events per document but only {} event types (types are distinct within a document)",
                self.events_per_doc_weights.len(),
                self.event_types
            )));
        }
        Ok(())
    }

    /// The deterministic schema implied by this config.
    pub fn schema(&self) -> Result<Schema> {
        let span = self.max_roles_per_type - self.min_roles_per_type + 1;
        let mut event_types = Vec::new();
        let mut roles = Vec::new();
        for t in 0..self.event_types {
            let n_roles = self.min_roles_per_type + (t % span);
            let type_roles: Vec<String> =
                (0..n_roles).map(|r| format!("evt{}_r{}", t, r)).collect();
            roles.extend(type_roles.clone());
            event_types.push(EventTypeDef {
                name: format!("evt{}", t),
                roles: type_roles,
            });
        }
        Schema::new(event_types, roles)
    }
}

/// The generator's token pools. Entity surfaces start with an initial name
/// token followed by continuation name tokens, so span boundaries are
/// recoverable from token identity alone.
#[derive(Debug, Clone)]
pub struct TokenInventory {
    pub type_markers: Vec<String>,
    pub role_markers: Vec<String>,
    pub common: Vec<String>,
    pub name_initial: Vec<String>,
    pub name_cont: Vec<String>,
}

impl TokenInventory {
    fn build(config: &GenConfig, schema: &Schema) -> Result<Self> {
        let type_markers: Vec<String> = (0..schema.event_types.len())
            .map(|t| format!("T{}", t))
            .collect();
        let role_markers: Vec<String> =
            (0..schema.roles.len()).map(|r| format!("R{}", r)).collect();
        let reserved = 2 + type_markers.len() + role_markers.len();
        if config.vocab_size <= reserved + 10 {
            return Err(Error::Config(format!(
                "vocab size {} leaves no room for name tokens ({} reserved for markers)",
                config.vocab_size, reserved
            )));
        }
        let remaining = config.vocab_size - reserved;
        let n_common = (remaining / 4).clamp(4, 12);
        let n_names = remaining - n_common;
        let n_initial = n_names.div_ceil(2);
        let n_cont = n_names - n_initial;
        if n_initial < 3 || n_cont < 2 {
            return Err(Error::Config(format!(
                "vocab size {} cannot produce enough distinct entity fillers",
                config.vocab_size
            )));
        }
        // crude capacity check against the worst-case filler demand
        let combos = n_initial * (1 + n_cont + n_cont * n_cont);
        let max_fillers = config.events_per_doc_weights.len() * config.max_roles_per_type;
        if combos < 2 * max_fillers {
            return Err(Error::Config(format!(
                "vocab size {} offers {} surface combinations, fewer than the {} needed",
                config.vocab_size,
                combos,
                2 * max_fillers
            )));
        }
        Ok(TokenInventory {
            type_markers,
            role_markers,
            common: (0..n_common).map(|i| format!("w{}", i)).collect(),
            name_initial: (0..n_initial).map(|i| format!("na{}", i)).collect(),
            name_cont: (0..n_cont).map(|i| format!("nb{}", i)).collect(),
        })
    }

    /// Every emittable token, in stable id order (padding/unknown excluded).
    pub fn tokens(&self) -> Vec<String> {
        let mut all = Vec::new();
        all.extend(self.type_markers.iter().cloned());
        all.extend(self.role_markers.iter().cloned());
        all.extend(self.common.iter().cloned());
        all.extend(self.name_initial.iter().cloned());
        all.extend(self.name_cont.iter().cloned());
        all
    }
}

#[derive(Debug)]
pub struct GeneratedCorpus {
    pub schema: Schema,
    pub inventory: TokenInventory,
    pub documents: Vec<Document>,
}

fn sample_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen_range(0.0..total);
    for (i, &w) in weights.iter().enumerate() {
        if x < w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

fn sample_surface(rng: &mut ChaCha8Rng, inv: &TokenInventory) -> Vec<String> {
    let len = match sample_weighted(rng, &[0.35, 0.45, 0.20]) {
        0 => 1,
        1 => 2,
        _ => 3,
    };
    let mut tokens = vec![inv.name_initial.choose(rng).unwrap().clone()];
    for _ in 1..len {
        tokens.push(inv.name_cont.choose(rng).unwrap().clone());
    }
    tokens
}

struct Slot {
    event: usize,
    role_class: usize,
    entity: usize, // index into the doc's entity table
}

/// Generates a corpus deterministically from the config seed.
pub fn generate(config: &GenConfig) -> Result<GeneratedCorpus> {
    config.validate()?;
    let schema = config.schema()?;
    let inventory = TokenInventory::build(config, &schema)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut documents = Vec::with_capacity(config.num_docs);
    for doc_id in 0..config.num_docs {
        documents.push(generate_doc(
            doc_id as i64,
            config,
            &schema,
            &inventory,
            &mut rng,
        )?);
    }
    Ok(GeneratedCorpus {
        schema,
        inventory,
        documents,
    })
}

fn generate_doc(
    doc_id: i64,
    config: &GenConfig,
    schema: &Schema,
    inv: &TokenInventory,
    rng: &mut ChaCha8Rng,
) -> Result<Document> {
    let n_events = sample_weighted(rng, &config.events_per_doc_weights) + 1;
    let mut type_classes: Vec<usize> = (1..=schema.event_types.len()).collect();
    type_classes.shuffle(rng);
    type_classes.truncate(n_events);

    // pick filled roles per event
    let mut event_slots: Vec<Vec<usize>> = Vec::new(); // role classes per event
    for &tc in &type_classes {
        let legal: Vec<usize> = schema.legal_role_classes(tc).into_iter().collect();
        let mut filled: Vec<usize> = legal
            .iter()
            .copied()
            .filter(|_| rng.gen_bool(0.85))
            .collect();
        if filled.is_empty() {
            filled.push(legal[0]);
        }
        event_slots.push(filled);
    }

    // distinct surfaces for every slot
    let mut surfaces: Vec<Vec<String>> = Vec::new();
    let mut used: Vec<String> = Vec::new();
    let mut slots: Vec<Slot> = Vec::new();
    for (ei, roles) in event_slots.iter().enumerate() {
        for &rc in roles {
            let mut surface = None;
            for _ in 0..200 {
                let cand = sample_surface(rng, inv);
                let key = cand.join(" ");
                if !used.contains(&key) {
                    used.push(key);
                    surface = Some(cand);
                    break;
                }
            }
            let surface = surface.ok_or_else(|| {
                Error::Config(format!(
                    "vocab too small to produce distinct fillers for document {}",
                    doc_id
                ))
            })?;
            surfaces.push(surface);
            slots.push(Slot {
                event: ei,
                role_class: rc,
                entity: surfaces.len() - 1,
            });
        }
    }

    // entity sharing between consecutive events
    for ei in 1..n_events {
        if !rng.gen_bool(config.entity_sharing) {
            continue;
        }
        let sources: Vec<usize> = slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.event == ei - 1)
            .map(|(i, _)| i)
            .collect();
        let targets: Vec<usize> = slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.event == ei)
            .map(|(i, _)| i)
            .collect();
        let src = *sources.choose(rng).unwrap();
        let tgt = *targets.choose(rng).unwrap();
        let shared = slots[src].entity;
        slots[tgt].entity = shared;
    }

    // dense entity ids in order of first slot appearance
    let mut entity_ids: Vec<i64> = vec![-1; surfaces.len()];
    let mut next_id = 0i64;
    for slot in &slots {
        if entity_ids[slot.entity] < 0 {
            entity_ids[slot.entity] = next_id;
            next_id += 1;
        }
    }

    // one sentence per slot, then noise sentences
    struct SentencePlan {
        tokens: Vec<String>,
        slot: Option<(usize, usize, usize)>, // (slot index, start, end)
    }
    let mut plans: Vec<SentencePlan> = Vec::new();
    for (si, slot) in slots.iter().enumerate() {
        let mut tokens = vec![
            inv.type_markers[type_classes[slot.event] - 1].clone(),
            inv.role_markers[slot.role_class - 1].clone(),
        ];
        let start = tokens.len();
        tokens.extend(surfaces[slot.entity].iter().cloned());
        let end = tokens.len();
        while tokens.len() < config.tokens_per_sentence {
            tokens.push(inv.common.choose(rng).unwrap().clone());
        }
        plans.push(SentencePlan {
            tokens,
            slot: Some((si, start, end)),
        });
    }
    while plans.len() < config.sentences_per_doc {
        let tokens = (0..config.tokens_per_sentence)
            .map(|_| inv.common.choose(rng).unwrap().clone())
            .collect();
        plans.push(SentencePlan { tokens, slot: None });
    }
    plans.shuffle(rng);

    let sentences: Vec<Vec<String>> = plans.iter().map(|p| p.tokens.clone()).collect();
    let mut entities = Vec::new();
    for (sent_idx, plan) in plans.iter().enumerate() {
        if let Some((si, start, end)) = plan.slot {
            let slot = &slots[si];
            entities.push(EntitySpan {
                entity_id: entity_ids[slot.entity],
                sentence: sent_idx,
                start,
                end,
                surface: surfaces[slot.entity].join(" "),
            });
        }
    }
    entities.sort_by_key(|s| (s.sentence, s.start));

    let mut events = Vec::new();
    for (ei, &tc) in type_classes.iter().enumerate() {
        let mut args: Vec<EventArg> = slots
            .iter()
            .filter(|s| s.event == ei)
            .map(|s| EventArg {
                role: schema.role_name(s.role_class).to_string(),
                entity_id: entity_ids[s.entity],
            })
            .collect();
        args.sort();
        events.push(EventRecord {
            event_type: schema.type_name(tc).to_string(),
            args,
        });
    }

    Ok(Document {
        format_version: DOC_FORMAT_VERSION,
        id: doc_id,
        sentences,
        entities,
        events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::validate_document;
    use std::collections::BTreeSet;

    fn small_config() -> GenConfig {
        GenConfig {
            num_docs: 40,
            ..GenConfig::default()
        }
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = generate(&small_config()).unwrap();
        let b = generate(&small_config()).unwrap();
        assert_eq!(a.documents, b.documents);
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate(&small_config()).unwrap();
        let b = generate(&GenConfig {
            seed: 1,
            ..small_config()
        })
        .unwrap();
        assert_ne!(a.documents, b.documents);
    }

    #[test]
    fn generated_documents_validate() {
        let corpus = generate(&small_config()).unwrap();
        for doc in &corpus.documents {
            validate_document(doc, &corpus.schema).unwrap();
        }
    }

    fn entity_events(doc: &Document) -> Vec<BTreeSet<i64>> {
        doc.events
            .iter()
            .map(|e| e.args.iter().map(|a| a.entity_id).collect())
            .collect()
    }

    #[test]
    fn sharing_zero_keeps_events_disjoint() {
        let corpus = generate(&GenConfig {
            entity_sharing: 0.0,
            ..small_config()
        })
        .unwrap();
        for doc in &corpus.documents {
            let sets = entity_events(doc);
            for i in 0..sets.len() {
                for j in (i + 1)..sets.len() {
                    assert!(sets[i].is_disjoint(&sets[j]), "document {}", doc.id);
                }
            }
        }
    }

    #[test]
    fn sharing_one_links_consecutive_events() {
        let corpus = generate(&GenConfig {
            entity_sharing: 1.0,
            events_per_doc_weights: vec![0.0, 1.0],
            ..small_config()
        })
        .unwrap();
        let mut saw_multi = false;
        for doc in &corpus.documents {
            let sets = entity_events(doc);
            if sets.len() == 2 {
                saw_multi = true;
                assert!(
                    !sets[0].is_disjoint(&sets[1]),
                    "document {} events share no entity",
                    doc.id
                );
            }
        }
        assert!(saw_multi);
    }

    #[test]
    fn event_types_are_distinct_within_document() {
        let corpus = generate(&small_config()).unwrap();
        for doc in &corpus.documents {
            let types: BTreeSet<&String> = doc.events.iter().map(|e| &e.event_type).collect();
            assert_eq!(types.len(), doc.events.len());
        }
    }

    #[test]
    fn vocab_too_small_is_config_error() {
        let err = generate(&GenConfig {
            vocab_size: 20,
            ..small_config()
        })
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn inventory_fits_vocab_budget() {
        let cfg = small_config();
        let corpus = generate(&cfg).unwrap();
        assert!(corpus.inventory.tokens().len() + 2 <= cfg.vocab_size);
        let all = corpus.inventory.tokens();
        let unique: BTreeSet<&String> = all.iter().collect();
        assert_eq!(unique.len(), all.len());
    }
}
