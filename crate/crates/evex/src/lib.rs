//! Document-level multi-event extraction with learnable event slots.
//!
//! A document is a list of tokenized sentences annotated with entity spans
//! and a set of events, each event being an event type plus a table of
//! (argument role, entity) pairs. The model detects entities with a BIO
//! tagger, propagates entity and sentence context into a fixed bank of
//! learnable proxy nodes through a FiLM-modulated heterogeneous graph layer,
//! decodes every proxy node into a candidate event, and trains the candidate
//! set against the gold event set by solving a minimum-cost one-to-one
//! assignment over pairwise cross-entropy distances.
//!
//! Crate layout mirrors the pipeline:
//!
//! - [`diffcore`] — dense f64 tensors on a Wengert tape with reverse-mode
//!   autodiff, Adam, and a binary parameter checkpoint format.
//! - [`encoder`] — token states, BIO tagging, mention/context vectors, and
//!   the entity-level losses.
//! - [`proxygraph`] — the proxy/entity/context graph and the FiLM layer.
//! - [`decoder`] — event schema, per-proxy event type and argument role
//!   classification, multi-head attention aggregation, argmax decoding.
//! - [`matching`] — pairwise event distances, average Hausdorff diagnostic,
//!   Hungarian assignment, and the matched-set training loss.
//! - [`datakit`] — canonical JSONL corpus format, synthetic corpus
//!   generator, and role-level micro P/R/F1 scoring.
//! - [`trainer`] — the full forward pass, the training loop, evaluation,
//!   and ablation variants.
//! - [`cli`] — the `evex` command-line front end.

pub mod cli;
pub mod datakit;
pub mod decoder;
pub mod diffcore;
pub mod encoder;
pub mod matching;
pub mod model;
pub mod proxygraph;
pub mod trainer;

/// Crate-wide error type. Variants map onto distinct process exit codes in
/// the CLI (validation vs IO vs divergence).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("index out of range in {op}: {detail}")]
    Index { op: &'static str, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("training diverged on document {doc_id}: {detail}")]
    Divergence { doc_id: i64, detail: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn index(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Index {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
