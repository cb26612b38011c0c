//! Corpus tooling: the canonical JSONL document format, a deterministic
//! synthetic multi-event corpus generator, and role-level micro P/R/F1
//! scoring with single-/multi-event breakdown.

mod document;
mod generate;
mod score;

pub use document::{
    read_jsonl, validate_document, write_jsonl, Document, EntitySpan, DOC_FORMAT_VERSION,
};
pub use generate::{generate, GenConfig, GeneratedCorpus, TokenInventory};
pub use score::{score, ScoreReport, TypeScore, SCORE_FORMAT_VERSION};
