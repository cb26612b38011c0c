//! Event decoding: per-proxy event-type classification, proxy-queried
//! multi-head attention over entity mentions, per-entity argument-role
//! classification, and schema-filtered argmax decoding.
//!
//! Class index 0 is reserved for the null event type and the null argument
//! role throughout; a proxy decoding to the null type produces no event, an
//! entity decoding to the null role is dropped from that proxy's event.

use crate::diffcore::{Tape, Var};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

// ---- schema ----------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EventTypeDef {
    pub name: String,
    pub roles: Vec<String>,
}

/// Event schema: the non-null event types with their legal argument roles,
/// plus the global role list. Class indices are 1-based; 0 means null.
#[derive(Debug, Clone, PartialEq)]
pub struct Schema {
    pub event_types: Vec<EventTypeDef>,
    pub roles: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct SchemaFile {
    format_version: u32,
    event_types: Vec<EventTypeDef>,
    roles: Vec<String>,
}

pub const SCHEMA_FORMAT_VERSION: u32 = 1;

impl Schema {
    pub fn new(event_types: Vec<EventTypeDef>, roles: Vec<String>) -> Result<Self> {
        let s = Schema { event_types, roles };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for t in &self.event_types {
            if !seen.insert(&t.name) {
                return Err(Error::Validation(format!("duplicate event type {}", t.name)));
            }
            for r in &t.roles {
                if !self.roles.contains(r) {
                    return Err(Error::Validation(format!(
                        "role {} of event type {} is not in the global role list",
                        r, t.name
                    )));
                }
            }
        }
        let mut seen_roles = BTreeSet::new();
        for r in &self.roles {
            if !seen_roles.insert(r) {
                return Err(Error::Validation(format!("duplicate role {}", r)));
            }
        }
        Ok(())
    }

    /// Number of event-type classes including null.
    pub fn n_type_classes(&self) -> usize {
        self.event_types.len() + 1
    }

    /// Number of argument-role classes including null.
    pub fn n_role_classes(&self) -> usize {
        self.roles.len() + 1
    }

    pub fn type_class(&self, name: &str) -> Result<usize> {
        self.event_types
            .iter()
            .position(|t| t.name == name)
            .map(|i| i + 1)
            .ok_or_else(|| Error::Validation(format!("unknown event type {}", name)))
    }

    pub fn role_class(&self, name: &str) -> Result<usize> {
        self.roles
            .iter()
            .position(|r| r == name)
            .map(|i| i + 1)
            .ok_or_else(|| Error::Validation(format!("unknown role {}", name)))
    }

    pub fn type_name(&self, class: usize) -> &str {
        &self.event_types[class - 1].name
    }

    pub fn role_name(&self, class: usize) -> &str {
        &self.roles[class - 1]
    }

    /// Role classes legal for a (non-null) event type class.
    pub fn legal_role_classes(&self, type_class: usize) -> BTreeSet<usize> {
        self.event_types[type_class - 1]
            .roles
            .iter()
            .map(|r| self.role_class(r).expect("validated at construction"))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = SchemaFile {
            format_version: SCHEMA_FORMAT_VERSION,
            event_types: self.event_types.clone(),
            roles: self.roles.clone(),
        };
        let json = serde_json::to_string_pretty(&file)
            .map_err(|e| Error::Validation(format!("schema serialization: {}", e)))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: SchemaFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        if file.format_version != SCHEMA_FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "{}: unsupported schema format version {}",
                path.display(),
                file.format_version
            )));
        }
        Schema::new(file.event_types, file.roles)
    }
}

// ---- event records ---------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq, PartialOrd, Ord)]
pub struct EventArg {
    pub role: String,
    pub entity_id: i64,
}

/// One event: a type plus a table of (role, entity) arguments. Used for both
/// gold annotations and predictions.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct EventRecord {
    pub event_type: String,
    pub args: Vec<EventArg>,
}

// ---- classification heads ---------------------------------------------------

/// Two-layer MLP weights registered on the current tape.
#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Multi-head attention weights registered on the current tape.
#[derive(Debug, Clone, Copy)]
pub struct MhaVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub heads: usize,
}

/// GELU MLP: `softmax` is applied by the callers that need probabilities.
pub fn mlp(tape: &mut Tape, x: Var, vars: MlpVars) -> Result<Var> {
    let h = tape.matmul(x, vars.w1)?;
    let h = tape.add_row(h, vars.b1)?;
    let h = tape.gelu(h);
    let logits = tape.matmul(h, vars.w2)?;
    tape.add_row(logits, vars.b2)
}

/// Event-type distributions for all proxies: rows of softmax(MLP(h_z)).
pub fn classify_event_type(tape: &mut Tape, proxies: Var, vars: MlpVars) -> Result<Var> {
    let logits = mlp(tape, proxies, vars)?;
    tape.softmax_rows(logits)
}

/// Aggregates the mentions of one entity for every proxy at once: scaled
/// dot-product attention with the proxy vectors as queries and the mention
/// vectors as keys and values. Returns one aggregated row per proxy.
pub fn aggregate_entity(
    tape: &mut Tape,
    proxies: Var,
    mentions: Var,
    vars: MhaVars,
) -> Result<Var> {
    let (n_mentions, d) = {
        let s = tape.shape(mentions);
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::shape(
                "aggregate_entity",
                format!("mention matrix has shape {:?}", s),
            ));
        }
        (s[0], s[1])
    };
    let _ = n_mentions;
    if vars.heads == 0 || d % vars.heads != 0 {
        return Err(Error::Config(format!(
            "attention heads ({}) must divide the hidden size ({})",
            vars.heads, d
        )));
    }
    let dk = d / vars.heads;
    let q = tape.matmul(proxies, vars.wq)?;
    let k = tape.matmul(mentions, vars.wk)?;
    let v = tape.matmul(mentions, vars.wv)?;
    let mut head_outs = Vec::with_capacity(vars.heads);
    for h in 0..vars.heads {
        let (lo, hi) = (h * dk, (h + 1) * dk);
        let qh = tape.col_slice(q, lo, hi)?;
        let kh = tape.col_slice(k, lo, hi)?;
        let vh = tape.col_slice(v, lo, hi)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, 1.0 / (dk as f64).sqrt());
        let attn = tape.softmax_rows(scaled)?;
        head_outs.push(tape.matmul(attn, vh)?);
    }
    let mut merged = head_outs[0];
    for &h in &head_outs[1..] {
        merged = tape.concat_cols(merged, h)?;
    }
    tape.matmul(merged, vars.wo)
}

/// Argument-role distributions of one entity for all proxies:
/// softmax(MLP([h_z ; h_{z,entity}])) per proxy row.
pub fn classify_argument(
    tape: &mut Tape,
    proxies: Var,
    aggregated: Var,
    vars: MlpVars,
) -> Result<Var> {
    let features = tape.concat_cols(proxies, aggregated)?;
    let logits = mlp(tape, features, vars)?;
    tape.softmax_rows(logits)
}

// ---- proxy predictions and decoding -----------------------------------------

/// All per-proxy distributions of one document, as both tape handles (for
/// the matching loss) and plain values (for decoding and the cost matrix).
pub struct ProxyBatch {
    pub type_probs_var: Var,
    pub type_probs: Vec<Vec<f64>>,
    pub arg_probs_vars: Vec<Var>,
    pub arg_probs: Vec<Vec<Vec<f64>>>,
    pub entity_ids: Vec<i64>,
}

impl ProxyBatch {
    /// Snapshots values from the tape after the heads have run.
    pub fn from_tape(
        tape: &Tape,
        type_probs_var: Var,
        arg_probs_vars: Vec<Var>,
        entity_ids: Vec<i64>,
    ) -> Self {
        let split = |v: Var| -> Vec<Vec<f64>> {
            let shape = tape.shape(v);
            let (rows, cols) = (shape[0], shape[1]);
            let data = tape.value(v);
            (0..rows).map(|i| data[i * cols..(i + 1) * cols].to_vec()).collect()
        };
        let type_probs = split(type_probs_var);
        let arg_probs = arg_probs_vars.iter().map(|&v| split(v)).collect();
        ProxyBatch {
            type_probs_var,
            type_probs,
            arg_probs_vars,
            arg_probs,
            entity_ids,
        }
    }

    pub fn n_proxies(&self) -> usize {
        self.type_probs.len()
    }

    pub fn n_entities(&self) -> usize {
        self.entity_ids.len()
    }
}

/// Argmax with ties broken toward the lowest index.
pub fn argmax_tie_low(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Decodes every proxy into at most one event: null-type proxies and
/// null-role entities are dropped, schema-illegal roles are removed, and a
/// role claimed by several entities keeps the entity with the highest
/// probability for that role (ties toward the lowest entity index).
pub fn decode_events(batch: &ProxyBatch, schema: &Schema) -> Vec<EventRecord> {
    let mut events = Vec::new();
    for i in 0..batch.n_proxies() {
        let type_class = argmax_tie_low(&batch.type_probs[i]);
        if type_class == 0 {
            continue;
        }
        let legal = schema.legal_role_classes(type_class);
        // role class -> (entity index, probability)
        let mut by_role: Vec<Option<(usize, f64)>> = vec![None; schema.n_role_classes()];
        for (k, _) in batch.entity_ids.iter().enumerate() {
            let dist = &batch.arg_probs[k][i];
            let role_class = argmax_tie_low(dist);
            if role_class == 0 || !legal.contains(&role_class) {
                continue;
            }
            let p = dist[role_class];
            match by_role[role_class] {
                Some((_, best)) if best >= p => {}
                _ => by_role[role_class] = Some((k, p)),
            }
        }
        let mut args = Vec::new();
        for (role_class, slot) in by_role.iter().enumerate() {
            if let Some((k, _)) = slot {
                args.push(EventArg {
                    role: schema.role_name(role_class).to_string(),
                    entity_id: batch.entity_ids[*k],
                });
            }
        }
        events.push(EventRecord {
            event_type: schema.type_name(type_class).to_string(),
            args,
        });
    }
    events
}
