//! Canonical JSONL corpus format: one JSON document object per line.

use crate::decoder::{EventRecord, Schema};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub const DOC_FORMAT_VERSION: u32 = 1;

/// One entity mention: a token span plus the entity it belongs to. Mentions
/// of the same entity carry the same `entity_id` and an identical surface
/// token sequence.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct EntitySpan {
    pub entity_id: i64,
    pub sentence: usize,
    pub start: usize,
    /// Exclusive token end.
    pub end: usize,
    pub surface: String,
}

/// A tokenized document with gold entity spans and gold events.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Document {
    pub format_version: u32,
    pub id: i64,
    pub sentences: Vec<Vec<String>>,
    pub entities: Vec<EntitySpan>,
    pub events: Vec<EventRecord>,
}

impl Document {
    /// Surface token sequence of a span, space-joined.
    pub fn span_surface(&self, span: &EntitySpan) -> String {
        self.sentences[span.sentence][span.start..span.end].join(" ")
    }

    /// Entity ids in order of first mention.
    pub fn unique_entity_ids(&self) -> Vec<i64> {
        let mut ids = Vec::new();
        for span in &self.entities {
            if !ids.contains(&span.entity_id) {
                ids.push(span.entity_id);
            }
        }
        ids
    }
}

/// Structural checks beyond what serde enforces: spans in bounds, event
/// arguments referencing known entities, types and roles present in the
/// schema, no duplicate roles, and at most one role per entity per event.
pub fn validate_document(doc: &Document, schema: &Schema) -> Result<()> {
    let fail = |msg: String| Err(Error::Validation(format!("document {}: {}", doc.id, msg)));
    if doc.format_version != DOC_FORMAT_VERSION {
        return fail(format!("unsupported format_version {}", doc.format_version));
    }
    for (i, sent) in doc.sentences.iter().enumerate() {
        if sent.is_empty() {
            return fail(format!("sentence {} is empty", i));
        }
    }
    let mut surfaces: BTreeMap<i64, String> = BTreeMap::new();
    for span in &doc.entities {
        if span.sentence >= doc.sentences.len() {
            return fail(format!("entity span sentence {} out of bounds", span.sentence));
        }
        let len = doc.sentences[span.sentence].len();
        if span.start >= span.end || span.end > len {
            return fail(format!(
                "entity span {}..{} out of bounds in sentence {} ({} tokens)",
                span.start, span.end, span.sentence, len
            ));
        }
        let actual = doc.span_surface(span);
        if actual != span.surface {
            return fail(format!(
                "entity {} surface {:?} does not match tokens {:?}",
                span.entity_id, span.surface, actual
            ));
        }
        match surfaces.get(&span.entity_id) {
            Some(known) if known != &span.surface => {
                return fail(format!(
                    "entity {} has inconsistent surfaces {:?} vs {:?}",
                    span.entity_id, known, span.surface
                ));
            }
            _ => {
                surfaces.insert(span.entity_id, span.surface.clone());
            }
        }
    }
    for (surface_a, id_a) in surfaces.iter().map(|(id, s)| (s, id)) {
        for (id_b, surface_b) in surfaces.iter() {
            if id_a != id_b && surface_a == surface_b {
                return fail(format!(
                    "entities {} and {} share the surface {:?}",
                    id_a, id_b, surface_a
                ));
            }
        }
    }
    for (i, ev) in doc.events.iter().enumerate() {
        let type_class = schema
            .type_class(&ev.event_type)
            .map_err(|e| Error::Validation(format!("document {}: event {}: {}", doc.id, i, e)))?;
        let legal = schema.legal_role_classes(type_class);
        let mut roles_seen = Vec::new();
        let mut entities_seen = Vec::new();
        for arg in &ev.args {
            let role_class = schema.role_class(&arg.role).map_err(|e| {
                Error::Validation(format!("document {}: event {}: {}", doc.id, i, e))
            })?;
            if !legal.contains(&role_class) {
                return fail(format!(
                    "event {}: role {} is not legal for type {}",
                    i, arg.role, ev.event_type
                ));
            }
            if roles_seen.contains(&role_class) {
                return fail(format!("event {}: duplicate role {}", i, arg.role));
            }
            roles_seen.push(role_class);
            if !surfaces.contains_key(&arg.entity_id) {
                return fail(format!(
                    "event {}: argument references unknown entity {}",
                    i, arg.entity_id
                ));
            }
            if entities_seen.contains(&arg.entity_id) {
                return fail(format!(
                    "event {}: entity {} fills more than one role",
                    i, arg.entity_id
                ));
            }
            entities_seen.push(arg.entity_id);
        }
    }
    Ok(())
}

pub fn write_jsonl(docs: &[Document], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for doc in docs {
        let line = serde_json::to_string(doc)
            .map_err(|e| Error::Validation(format!("document {}: {}", doc.id, e)))?;
        writeln!(f, "{}", line)?;
    }
    Ok(())
}

/// Reads a JSONL corpus; errors carry the file path and 1-based line number.
pub fn read_jsonl(path: &Path) -> Result<Vec<Document>> {
    let f = std::fs::File::open(path)?;
    let reader = BufReader::new(f);
    let mut docs = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        docs.push(doc);
    }
    Ok(docs)
}
