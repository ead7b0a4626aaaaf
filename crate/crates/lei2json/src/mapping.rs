//! Which CSV column feeds which payload field, and how the cell is coerced.
//!
//! A mapping file looks like
//!
//! ```json
//! {
//!   "eventType": "weightEvent",
//!   "columns": {
//!     "Tag":    {"field": "animalId", "type": "string"},
//!     "Date":   {"field": "eventDateTime", "type": "date-time"},
//!     "Weight": {"field": "weightKg", "type": "number"}
//!   }
//! }
//! ```
//!
//! Dotted field names (`scale.id`) build nested objects.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use leisa_core::schema::{Format, JsonType, Schema};
use leisa_core::{EventType, SchemaRegistry};
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
pub enum FieldType {
    #[serde(rename = "string")]
    String,
    #[serde(rename = "number")]
    Number,
    #[serde(rename = "date-time")]
    DateTime,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSpec {
    pub field: String,
    #[serde(rename = "type")]
    pub kind: FieldType,
}

#[derive(Debug, Error)]
pub enum MappingError {
    #[error("cannot read mapping {path}: {detail}")]
    Unreadable { path: String, detail: String },
    #[error("unknown event type `{0}`")]
    UnknownEventType(String),
    #[error("mapping is for `{found}` but `{expected}` was requested")]
    EventTypeMismatch { expected: String, found: String },
    #[error("bad field path `{0}`")]
    BadFieldPath(String),
    #[error("field `{0}` is mapped more than once or overlaps another field")]
    FieldConflict(String),
    #[error("required fields without a column: {}", .0.join(", "))]
    Incomplete(Vec<String>),
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct MappingFile {
    event_type: String,
    columns: BTreeMap<String, ColumnSpec>,
}

/// Header → payload field for one event type. Always covers every field the
/// event's schema requires.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnMapping {
    event_type: EventType,
    columns: Vec<(String, ColumnSpec)>,
}

impl ColumnMapping {
    /// Column headers named exactly like the schema's top-level scalar
    /// properties. Properties of other kinds get no column.
    pub fn identity(schema: &Schema) -> Result<Self, MappingError> {
        let columns = schema
            .top_level_properties()
            .filter_map(|(name, rule)| {
                let kind = if rule.format() == Some(Format::DateTime) {
                    FieldType::DateTime
                } else if rule.declared_types().iter().any(|t| matches!(t, JsonType::Number | JsonType::Integer)) {
                    FieldType::Number
                } else if rule.declared_types().contains(&JsonType::String) {
                    FieldType::String
                } else {
                    return None;
                };
                Some((name.to_owned(), ColumnSpec { field: name.to_owned(), kind }))
            })
            .collect();
        Self::new(schema, columns)
    }

    pub fn new(schema: &Schema, columns: Vec<(String, ColumnSpec)>) -> Result<Self, MappingError> {
        let mut fields: Vec<&str> = Vec::with_capacity(columns.len());
        for (_, spec) in &columns {
            if spec.field.is_empty() || spec.field.split('.').any(str::is_empty) {
                return Err(MappingError::BadFieldPath(spec.field.clone()));
            }
            fields.push(&spec.field);
        }
        fields.sort_unstable();
        for pair in fields.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if a == b || b.strip_prefix(a).is_some_and(|rest| rest.starts_with('.')) {
                return Err(MappingError::FieldConflict(a.to_owned()));
            }
        }
        let missing: Vec<String> = schema
            .required()
            .iter()
            .filter(|r| !fields.iter().any(|f| f.split('.').next() == Some(r.as_str())))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(MappingError::Incomplete(missing));
        }
        Ok(Self { event_type: schema.event_type.clone(), columns })
    }

    /// Reads a mapping file and checks it against `event_type`'s schema.
    pub fn load(path: &Path, event_type: &str, schemas: &SchemaRegistry) -> Result<Self, MappingError> {
        let unreadable = |detail: String| MappingError::Unreadable { path: path.display().to_string(), detail };
        let text = fs::read_to_string(path).map_err(|e| unreadable(e.to_string()))?;
        let file: MappingFile = serde_json::from_str(&text).map_err(|e| unreadable(e.to_string()))?;
        if file.event_type != event_type {
            return Err(MappingError::EventTypeMismatch { expected: event_type.to_owned(), found: file.event_type });
        }
        let schema = schemas.get(event_type).ok_or_else(|| MappingError::UnknownEventType(event_type.to_owned()))?;
        Self::new(schema, file.columns.into_iter().collect())
    }

    pub fn event_type(&self) -> &EventType {
        &self.event_type
    }

    pub fn columns(&self) -> &[(String, ColumnSpec)] {
        &self.columns
    }
}
