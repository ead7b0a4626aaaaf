//! LEI payload validation against a small JSON-Schema keyword subset.
//!
//! Supported keywords: `type`, `required`, `properties`, `enum`, `pattern`,
//! `minimum`, `maximum` (both inclusive), `items` and `format: "date-time"`.
//! The annotation keywords `$schema`, `$id`, `title` and `description` are
//! accepted and ignored; anything else makes the schema unreadable.
//!
//! Violations are reported in a fixed order: at each object the missing
//! `required` names (in the order the schema lists them), then the payload's
//! own keys depth-first in document order.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::DateTime;
use regex::Regex;
use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

use crate::domain::{kind_of, EventEnvelope, EventType};

const WEIGHT_EVENT: &str = r#"{
  "type": "object",
  "required": ["animalId", "eventDateTime", "weightKg"],
  "properties": {
    "animalId": {"type": "string"},
    "eventDateTime": {"type": "string", "format": "date-time"},
    "weightKg": {"type": "number", "minimum": 0}
  }
}"#;

const TREATMENT_EVENT: &str = r#"{
  "type": "object",
  "required": ["animalId", "eventDateTime", "treatment"],
  "properties": {
    "animalId": {"type": "string"},
    "eventDateTime": {"type": "string", "format": "date-time"},
    "treatment": {"type": "string"},
    "doseMl": {"type": "number", "minimum": 0}
  }
}"#;

const LOCATION_EVENT: &str = r#"{
  "type": "object",
  "required": ["animalId", "eventDateTime", "latitude", "longitude"],
  "properties": {
    "animalId": {"type": "string"},
    "eventDateTime": {"type": "string", "format": "date-time"},
    "latitude": {"type": "number", "minimum": -90, "maximum": 90},
    "longitude": {"type": "number", "minimum": -180, "maximum": 180}
  }
}"#;

/// Event types that always have a schema, with their rule trees.
pub const BUILTIN_SCHEMAS: [(&str, &str); 3] =
    [("weightEvent", WEIGHT_EVENT), ("treatmentEvent", TREATMENT_EVENT), ("locationEvent", LOCATION_EVENT)];

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("unreadable schema {}: {detail}", file.display())]
    UnreadableSchema { file: PathBuf, detail: String },
    #[error("cannot read schema directory {}: {source}", dir.display())]
    Io { dir: PathBuf, source: std::io::Error },
}

/// A JSON value kind as named by the `type` keyword.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JsonType {
    Null,
    Boolean,
    Integer,
    Number,
    String,
    Array,
    Object,
}

impl JsonType {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "null" => JsonType::Null,
            "boolean" => JsonType::Boolean,
            "integer" => JsonType::Integer,
            "number" => JsonType::Number,
            "string" => JsonType::String,
            "array" => JsonType::Array,
            "object" => JsonType::Object,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            JsonType::Null => "null",
            JsonType::Boolean => "boolean",
            JsonType::Integer => "integer",
            JsonType::Number => "number",
            JsonType::String => "string",
            JsonType::Array => "array",
            JsonType::Object => "object",
        }
    }

    fn matches(self, value: &Value) -> bool {
        match (self, value) {
            (JsonType::Null, Value::Null)
            | (JsonType::Boolean, Value::Bool(_))
            | (JsonType::Number, Value::Number(_))
            | (JsonType::String, Value::String(_))
            | (JsonType::Array, Value::Array(_))
            | (JsonType::Object, Value::Object(_)) => true,
            (JsonType::Integer, Value::Number(n)) => {
                n.is_i64() || n.is_u64() || n.as_f64().is_some_and(|f| f.is_finite() && f.fract() == 0.0)
            }
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    DateTime,
}

/// One node of a schema rule tree.
#[derive(Debug, Clone, Default)]
pub struct Rule {
    types: Option<Vec<JsonType>>,
    required: Vec<String>,
    properties: Vec<(String, Rule)>,
    allowed: Option<Vec<Value>>,
    pattern: Option<Regex>,
    minimum: Option<f64>,
    maximum: Option<f64>,
    items: Option<Box<Rule>>,
    format: Option<Format>,
}

impl Rule {
    /// Builds a rule tree from its JSON form; `at` locates errors inside the document.
    pub fn from_json(value: &Value) -> Result<Self, String> {
        Self::build(value, "#")
    }

    fn build(value: &Value, at: &str) -> Result<Self, String> {
        let Value::Object(map) = value else {
            return Err(format!("{at}: schema node must be an object, found {}", kind_of(value)));
        };
        let mut rule = Rule::default();
        for (key, v) in map {
            match key.as_str() {
                "$schema" | "$id" | "title" | "description" => {}
                "type" => {
                    let names: Vec<&Value> = match v {
                        Value::Array(list) => list.iter().collect(),
                        other => vec![other],
                    };
                    let mut types = Vec::with_capacity(names.len());
                    for n in names {
                        let t = n
                            .as_str()
                            .and_then(JsonType::parse)
                            .ok_or_else(|| format!("{at}/type: unknown type {n}"))?;
                        types.push(t);
                    }
                    if types.is_empty() {
                        return Err(format!("{at}/type: empty type list"));
                    }
                    rule.types = Some(types);
                }
                "required" => {
                    let list = v.as_array().ok_or_else(|| format!("{at}/required: expected an array"))?;
                    for name in list {
                        let name = name.as_str().ok_or_else(|| format!("{at}/required: names must be strings"))?;
                        if !rule.required.iter().any(|r| r == name) {
                            rule.required.push(name.to_owned());
                        }
                    }
                }
                "properties" => {
                    let props = v.as_object().ok_or_else(|| format!("{at}/properties: expected an object"))?;
                    for (name, sub) in props {
                        rule.properties.push((name.clone(), Self::build(sub, &format!("{at}/properties/{name}"))?));
                    }
                }
                "enum" => {
                    let list = v.as_array().ok_or_else(|| format!("{at}/enum: expected an array"))?;
                    rule.allowed = Some(list.clone());
                }
                "pattern" => {
                    let src = v.as_str().ok_or_else(|| format!("{at}/pattern: expected a string"))?;
                    rule.pattern = Some(Regex::new(src).map_err(|e| format!("{at}/pattern: {e}"))?);
                }
                "minimum" => rule.minimum = Some(v.as_f64().ok_or_else(|| format!("{at}/minimum: expected a number"))?),
                "maximum" => rule.maximum = Some(v.as_f64().ok_or_else(|| format!("{at}/maximum: expected a number"))?),
                "items" => rule.items = Some(Box::new(Self::build(v, &format!("{at}/items"))?)),
                "format" => match v.as_str() {
                    Some("date-time") => rule.format = Some(Format::DateTime),
                    _ => return Err(format!("{at}/format: only \"date-time\" is supported")),
                },
                other => return Err(format!("{at}: unsupported keyword `{other}`")),
            }
        }
        for name in &rule.required {
            if !rule.properties.iter().any(|(p, _)| p == name) {
                return Err(format!("{at}/required: `{name}` is not declared under properties"));
            }
        }
        Ok(rule)
    }

    fn property(&self, name: &str) -> Option<&Rule> {
        self.properties.iter().find(|(p, _)| p == name).map(|(_, r)| r)
    }

    fn check(&self, value: &Value, path: &JsonPath, out: &mut Vec<Violation>) {
        if let Some(types) = &self.types {
            if !types.iter().any(|t| t.matches(value)) {
                let expected: Vec<&str> = types.iter().map(|t| t.name()).collect();
                out.push(Violation::new(
                    path,
                    Keyword::Type,
                    format!("expected {}, found {}", expected.join(" or "), kind_of(value)),
                ));
            }
        }
        if let Some(allowed) = &self.allowed {
            if !allowed.iter().any(|a| json_eq(a, value)) {
                out.push(Violation::new(path, Keyword::Enum, format!("{value} is not one of the allowed values")));
            }
        }
        match value {
            Value::Number(n) => {
                let x = n.as_f64().unwrap_or(f64::NAN);
                if let Some(min) = self.minimum {
                    if !matches!(x.partial_cmp(&min), Some(Ordering::Greater | Ordering::Equal)) {
                        out.push(Violation::new(path, Keyword::Minimum, format!("{n} is less than {min}")));
                    }
                }
                if let Some(max) = self.maximum {
                    if !matches!(x.partial_cmp(&max), Some(Ordering::Less | Ordering::Equal)) {
                        out.push(Violation::new(path, Keyword::Maximum, format!("{n} is greater than {max}")));
                    }
                }
            }
            Value::String(s) => {
                if let Some(re) = &self.pattern {
                    if !re.is_match(s) {
                        out.push(Violation::new(
                            path,
                            Keyword::Pattern,
                            format!("{s:?} does not match /{}/", re.as_str()),
                        ));
                    }
                }
                if self.format == Some(Format::DateTime) && DateTime::parse_from_rfc3339(s).is_err() {
                    out.push(Violation::new(path, Keyword::Format, format!("{s:?} is not an RFC 3339 date-time")));
                }
            }
            Value::Array(list) => {
                if let Some(items) = &self.items {
                    for (i, item) in list.iter().enumerate() {
                        items.check(item, &path.index(i), out);
                    }
                }
            }
            Value::Object(map) => {
                for name in &self.required {
                    if !map.contains_key(name) {
                        out.push(Violation::new(
                            &path.key(name),
                            Keyword::Required,
                            "required property is missing".into(),
                        ));
                    }
                }
                for (key, v) in map {
                    if let Some(rule) = self.property(key) {
                        rule.check(v, &path.key(key), out);
                    }
                }
            }
            Value::Null | Value::Bool(_) => {}
        }
    }
}

// Numbers compare by value so that `1` and `1.0` are the same enum member.
fn json_eq(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => x == y || x.as_f64() == y.as_f64(),
        (Value::Array(x), Value::Array(y)) => x.len() == y.len() && x.iter().zip(y).all(|(p, q)| json_eq(p, q)),
        (Value::Object(x), Value::Object(y)) => {
            x.len() == y.len() && x.iter().all(|(k, v)| y.get(k).is_some_and(|w| json_eq(v, w)))
        }
        _ => a == b,
    }
}

/// A location inside a payload, rendered as `$.a.b[0]`.
#[derive(Debug, Clone)]
struct JsonPath(String);

impl JsonPath {
    fn root() -> Self {
        JsonPath("$".into())
    }

    fn key(&self, key: &str) -> Self {
        let plain = key.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
            && key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
        if plain {
            JsonPath(format!("{}.{key}", self.0))
        } else {
            JsonPath(format!("{}[{}]", self.0, Value::String(key.to_owned())))
        }
    }

    fn index(&self, i: usize) -> Self {
        JsonPath(format!("{}[{i}]", self.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "camelCase")]
pub enum Keyword {
    EventType,
    Type,
    Required,
    Enum,
    Pattern,
    Minimum,
    Maximum,
    Format,
}

impl fmt::Display for Keyword {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Keyword::EventType => "eventType",
            Keyword::Type => "type",
            Keyword::Required => "required",
            Keyword::Enum => "enum",
            Keyword::Pattern => "pattern",
            Keyword::Minimum => "minimum",
            Keyword::Maximum => "maximum",
            Keyword::Format => "format",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub path: String,
    pub rule: Keyword,
    pub message: String,
}

impl Violation {
    fn new(path: &JsonPath, rule: Keyword, message: String) -> Self {
        Self { path: path.0.clone(), rule, message }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationResult {
    valid: bool,
    violations: Vec<Violation>,
}

impl ValidationResult {
    pub fn from_violations(violations: Vec<Violation>) -> Self {
        Self { valid: violations.is_empty(), violations }
    }

    pub fn is_valid(&self) -> bool {
        self.valid
    }

    pub fn violations(&self) -> &[Violation] {
        &self.violations
    }
}

#[derive(Debug, Clone)]
pub struct Schema {
    pub event_type: EventType,
    pub root: Rule,
}

impl Schema {
    pub fn parse(event_type: EventType, json: &Value) -> Result<Self, String> {
        Ok(Self { event_type, root: Rule::from_json(json)? })
    }

    pub fn validate_payload(&self, payload: &Map<String, Value>) -> ValidationResult {
        // Payloads are always objects, but the root rule is checked against the
        // value as a whole so `type: object` behaves uniformly.
        let value = Value::Object(payload.clone());
        self.validate_value(&value)
    }

    pub fn validate_value(&self, value: &Value) -> ValidationResult {
        let mut out = Vec::new();
        self.root.check(value, &JsonPath::root(), &mut out);
        ValidationResult::from_violations(out)
    }

    /// Names of the top-level properties with their declared rules, in schema order.
    pub fn top_level_properties(&self) -> impl Iterator<Item = (&str, &Rule)> {
        self.root.properties.iter().map(|(n, r)| (n.as_str(), r))
    }

    pub fn required(&self) -> &[String] {
        &self.root.required
    }
}

impl Rule {
    pub fn declared_types(&self) -> &[JsonType] {
        self.types.as_deref().unwrap_or(&[])
    }

    pub fn format(&self) -> Option<Format> {
        self.format
    }
}

/// Event type → schema, built once at startup and read-only afterwards.
#[derive(Debug, Clone)]
pub struct SchemaRegistry {
    schemas: BTreeMap<EventType, Schema>,
}

impl Default for SchemaRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl SchemaRegistry {
    /// The built-in weight, treatment and location schemas.
    pub fn builtin() -> Self {
        let mut schemas = BTreeMap::new();
        for (name, text) in BUILTIN_SCHEMAS {
            let event_type = EventType::new(name).expect("built-in names are valid");
            let json: Value = serde_json::from_str(text).expect("built-in schema is JSON");
            let schema = Schema::parse(event_type.clone(), &json).expect("built-in schema is well formed");
            schemas.insert(event_type, schema);
        }
        Self { schemas }
    }

    /// Built-ins plus every `<eventType>.json` in `dir`. A file named after a
    /// built-in replaces it.
    pub fn load_dir(dir: &Path) -> Result<Self, SchemaError> {
        let mut registry = Self::builtin();
        let io_err = |source| SchemaError::Io { dir: dir.to_path_buf(), source };
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io_err)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()
            .map_err(io_err)?;
        files.sort();
        for file in files {
            if file.extension().and_then(|e| e.to_str()) != Some("json") || !file.is_file() {
                continue;
            }
            let unreadable = |detail: String| SchemaError::UnreadableSchema { file: file.clone(), detail };
            let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let event_type = EventType::new(stem).map_err(|e| unreadable(e.to_string()))?;
            let text = fs::read(&file).map_err(|e| unreadable(e.to_string()))?;
            let json: Value = serde_json::from_slice(&text).map_err(|e| unreadable(e.to_string()))?;
            let schema = Schema::parse(event_type.clone(), &json).map_err(unreadable)?;
            log::debug!("loaded schema for {event_type} from {}", file.display());
            registry.schemas.insert(event_type, schema);
        }
        Ok(registry)
    }

    pub fn insert(&mut self, schema: Schema) {
        self.schemas.insert(schema.event_type.clone(), schema);
    }

    pub fn get(&self, event_type: &str) -> Option<&Schema> {
        self.schemas.iter().find(|(k, _)| k.as_str() == event_type).map(|(_, s)| s)
    }

    pub fn len(&self) -> usize {
        self.schemas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.schemas.is_empty()
    }

    pub fn event_types(&self) -> impl Iterator<Item = &EventType> {
        self.schemas.keys()
    }

    pub fn validate(&self, env: &EventEnvelope) -> ValidationResult {
        self.validate_payload(env.event_type.as_str(), &env.payload)
    }

    pub fn validate_payload(&self, event_type: &str, payload: &Map<String, Value>) -> ValidationResult {
        let result = match self.get(event_type) {
            Some(schema) => schema.validate_payload(payload),
            None => ValidationResult::from_violations(vec![Violation {
                path: "$".into(),
                rule: Keyword::EventType,
                message: format!("no schema registered for event type `{event_type}`"),
            }]),
        };
        if !result.is_valid() {
            log::debug!("{event_type} payload rejected with {} violation(s)", result.violations().len());
        }
        result
    }
}
