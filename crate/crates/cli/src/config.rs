//! Config files as JSON values, `key=value` overrides and typed decoding.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde_json::Value;

#[derive(Debug)]
pub enum ConfigError {
    /// The file could not be read.
    Read(String),
    /// The file or an override is not valid for the schema.
    Invalid(String),
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::Read(m) | ConfigError::Invalid(m) => f.write_str(m),
        }
    }
}

pub fn read_json(path: &Path) -> Result<Value, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Read(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))
}

/// Apply `a.b.c=value`. The value is parsed as JSON when possible, otherwise
/// taken as a string. Missing intermediate objects are created.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::Invalid(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(ConfigError::Invalid(format!(
            "override {assignment:?} has an empty key"
        )));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string())
                    .or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| ConfigError::Invalid(format!("override {key}: {part:?} is not an array index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| ConfigError::Invalid(format!("override {key}: index {idx} out of range ({len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => {
                return Err(ConfigError::Invalid(format!(
                    "override {key}: {part:?} is inside a non-object value"
                )))
            }
        };
    }
    unreachable!("loop returns on the last key")
}

pub fn decode<T: DeserializeOwned>(value: Value, what: &str) -> Result<T, ConfigError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        ConfigError::Invalid(format!("{what}: field `{path}`: {}", e.into_inner()))
    })
}

/// Read, override and decode a config file.
pub fn load<T: DeserializeOwned>(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<T, ConfigError> {
    let mut value = read_json(path)?;
    if !value.is_object() {
        return Err(ConfigError::Invalid(format!(
            "{}: expected a JSON object",
            path.display()
        )));
    }
    if let Some(seed) = seed {
        value["seed"] = Value::from(seed);
    }
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    decode(value, &path.display().to_string())
}
