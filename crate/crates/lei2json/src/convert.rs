use std::fs::File;
use std::io::Read;
use std::path::Path;

use chrono::{DateTime, NaiveDate};
use leisa_core::{EventEnvelope, SchemaRegistry};
use serde_json::{Map, Number, Value};
use thiserror::Error;

use crate::mapping::{ColumnMapping, FieldType, MappingError};

#[derive(Debug, Error)]
pub enum ConvertError {
    #[error("cannot read {path}: {detail}")]
    UnreadableFile { path: String, detail: String },
    #[error("unknown event type `{0}`")]
    UnknownEventType(String),
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error("CSV header lacks columns for required fields: {}", .0.join(", "))]
    MissingColumns(Vec<String>),
}

/// A data row that could not become a valid envelope. `row` is the 1-based
/// line the record starts on, so the header is row 1.
#[derive(Debug, Clone, PartialEq)]
pub struct RowError {
    pub row: u64,
    pub column: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvertedRow {
    pub row: u64,
    pub envelope: EventEnvelope,
}

#[derive(Debug, Default)]
pub struct Conversion {
    pub envelopes: Vec<ConvertedRow>,
    pub errors: Vec<RowError>,
}

impl Conversion {
    pub fn data_rows(&self) -> usize {
        self.envelopes.len() + self.errors.len()
    }
}

/// Turns one cell into a JSON value. `None` means the cell was empty and the
/// field is left out.
pub fn coerce(cell: &str, kind: FieldType) -> Result<Option<Value>, String> {
    if cell.trim().is_empty() {
        return Ok(None);
    }
    match kind {
        FieldType::String => Ok(Some(Value::String(cell.to_owned()))),
        FieldType::Number => coerce_number(cell.trim()).map(Some),
        FieldType::DateTime => coerce_date(cell.trim()).map(|s| Some(Value::String(s))),
    }
}

fn coerce_number(cell: &str) -> Result<Value, String> {
    if let Ok(i) = cell.parse::<i64>() {
        return Ok(Value::from(i));
    }
    match cell.parse::<f64>() {
        Ok(f) if f.is_finite() => Ok(Value::Number(Number::from_f64(f).expect("finite"))),
        _ => Err(format!("`{cell}` is not a number")),
    }
}

fn coerce_date(cell: &str) -> Result<String, String> {
    if cell.len() == 10 {
        if let Ok(d) = NaiveDate::parse_from_str(cell, "%Y-%m-%d") {
            return Ok(format!("{}T00:00:00Z", d.format("%Y-%m-%d")));
        }
    }
    match DateTime::parse_from_rfc3339(cell) {
        Ok(_) => Ok(cell.to_owned()),
        Err(_) => Err(format!("`{cell}` is neither YYYY-MM-DD nor an RFC 3339 timestamp")),
    }
}

fn insert_path(payload: &mut Map<String, Value>, path: &str, value: Value) {
    let mut parts = path.split('.').peekable();
    let mut obj = payload;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            obj.insert(part.to_owned(), value);
            return;
        }
        let slot = obj.entry(part.to_owned()).or_insert_with(|| Value::Object(Map::new()));
        obj = slot.as_object_mut().expect("field paths never overlap");
    }
}

fn open(path: &Path) -> Result<File, ConvertError> {
    File::open(path)
        .map_err(|e| ConvertError::UnreadableFile { path: path.display().to_string(), detail: e.to_string() })
}

/// Reads `csv` and coerces each data row, without schema checks. Used where
/// another party validates, as in publishing.
pub fn convert_rows(
    csv: &Path,
    event_type: &str,
    mapping: Option<&ColumnMapping>,
    schemas: &SchemaRegistry,
) -> Result<Conversion, ConvertError> {
    convert_reader(open(csv)?, &csv.display().to_string(), event_type, mapping, schemas, false)
}

/// Reads `csv` and returns one envelope per row that coerces and passes the
/// event's schema. Every other row is reported in `errors`; none aborts the
/// batch. Without `mapping` the identity mapping is used.
pub fn convert(
    csv: &Path,
    event_type: &str,
    mapping: Option<&ColumnMapping>,
    schemas: &SchemaRegistry,
) -> Result<Conversion, ConvertError> {
    convert_reader(open(csv)?, &csv.display().to_string(), event_type, mapping, schemas, true)
}

pub fn convert_reader(
    input: impl Read,
    name: &str,
    event_type: &str,
    mapping: Option<&ColumnMapping>,
    schemas: &SchemaRegistry,
    check_schema: bool,
) -> Result<Conversion, ConvertError> {
    let schema = schemas.get(event_type).ok_or_else(|| ConvertError::UnknownEventType(event_type.to_owned()))?;
    let identity;
    let mapping = match mapping {
        Some(m) if m.event_type().as_str() != event_type => {
            return Err(MappingError::EventTypeMismatch {
                expected: event_type.into(),
                found: m.event_type().to_string(),
            }
            .into())
        }
        Some(m) => m,
        None => {
            identity = ColumnMapping::identity(schema)?;
            &identity
        }
    };

    let unreadable = |detail: String| ConvertError::UnreadableFile { path: name.to_owned(), detail };
    let mut data = Vec::new();
    let mut input = input;
    input.read_to_end(&mut data).map_err(|e| unreadable(e.to_string()))?;
    let mut lines = LineIndex { data: &data, byte: 0, line: 1 };
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(&data[..]);
    let headers = reader.headers().map_err(|e| unreadable(e.to_string()))?.clone();

    // (column index, header, spec) for each mapped column present in the file
    let mut plan = Vec::new();
    let mut missing = Vec::new();
    for (header, spec) in mapping.columns() {
        match headers.iter().position(|h| h.trim() == header) {
            Some(i) => plan.push((i, header.as_str(), spec)),
            None if schema.required().iter().any(|r| spec.field.split('.').next() == Some(r)) => {
                missing.push(header.clone())
            }
            None => {}
        }
    }
    if !missing.is_empty() {
        return Err(ConvertError::MissingColumns(missing));
    }

    let mut out = Conversion::default();
    let mut record = csv::StringRecord::new();
    loop {
        let fallback = reader.position().byte();
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) if e.is_io_error() => return Err(unreadable(e.to_string())),
            Err(e) => {
                let row = lines.line_at(e.position().map_or(fallback, |p| p.byte()));
                out.errors.push(RowError { row, column: None, message: e.to_string() });
                continue;
            }
        }
        let row = lines.line_at(record.position().map_or(fallback, |p| p.byte()));
        if record.len() != headers.len() {
            out.errors.push(RowError {
                row,
                column: None,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
            continue;
        }
        match build_payload(&record, &plan) {
            Err(e) => out.errors.push(RowError { row, ..e }),
            Ok(payload) => {
                let envelope = EventEnvelope::new(mapping.event_type().clone(), payload);
                if check_schema {
                    let result = schema.validate_payload(&envelope.payload);
                    if let Some(v) = result.violations().first() {
                        let message = result
                            .violations()
                            .iter()
                            .map(|v| format!("{}: {}", v.path, v.message))
                            .collect::<Vec<_>>()
                            .join("; ");
                        let column = column_for(&v.path, &plan);
                        out.errors.push(RowError { row, column, message });
                        continue;
                    }
                }
                out.envelopes.push(ConvertedRow { row, envelope });
            }
        }
    }
    Ok(out)
}

/// Record start offset to 1-based line number. Offsets must be asked for in
/// non-decreasing order, so the whole pass stays linear. The csv reader puts
/// a record's start before any blank lines it skipped, hence the skip here.
struct LineIndex<'a> {
    data: &'a [u8],
    byte: usize,
    line: u64,
}

impl LineIndex<'_> {
    fn line_at(&mut self, byte: u64) -> u64 {
        let mut byte = (byte as usize).clamp(self.byte, self.data.len());
        while matches!(self.data.get(byte), Some(b'\n' | b'\r')) {
            byte += 1;
        }
        self.line += self.data[self.byte..byte].iter().filter(|&&b| b == b'\n').count() as u64;
        self.byte = byte;
        self.line
    }
}

fn build_payload(
    record: &csv::StringRecord,
    plan: &[(usize, &str, &crate::mapping::ColumnSpec)],
) -> Result<Map<String, Value>, RowError> {
    let mut payload = Map::new();
    for &(i, header, spec) in plan {
        match coerce(&record[i], spec.kind) {
            Ok(Some(v)) => insert_path(&mut payload, &spec.field, v),
            Ok(None) => {}
            Err(message) => return Err(RowError { row: 0, column: Some(header.to_owned()), message }),
        }
    }
    Ok(payload)
}

/// Best-effort link from a violation path such as `$.scale.id` back to the
/// column that fed it.
fn column_for(path: &str, plan: &[(usize, &str, &crate::mapping::ColumnSpec)]) -> Option<String> {
    let field = path.strip_prefix("$.")?;
    plan.iter().find(|(_, _, spec)| spec.field == field).map(|(_, h, _)| (*h).to_owned())
}
