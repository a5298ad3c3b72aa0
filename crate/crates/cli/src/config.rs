//! Configuration resolution: defaults, then the `--config` file, then
//! `--override key=value` pairs with dotted keys.

use std::fs;
use std::path::Path;

use selfadapt_core::training::ExperimentConfig;
use selfadapt_core::{Error, Result};
use serde_json::Value;

/// Recursively overlays `patch` onto `base`.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets `a.b.c` in a JSON tree. The value is parsed as JSON when possible
/// and kept as a string otherwise.
pub fn apply_override(tree: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not of the form key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} has an empty component")));
    }
    let mut node = tree;
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {} is not a section", parts[..i].join("."))))?;
        if !obj.contains_key(*part) {
            return Err(Error::Config(format!("override {key:?}: unknown key {part:?}")));
        }
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(*part).expect("checked above");
    }
    unreachable!("split always yields at least one part")
}

pub fn resolve(base: ExperimentConfig, file: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut tree = serde_json::to_value(&base).map_err(|e| Error::json("default config", e))?;
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let patch: Value = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        if !patch.is_object() {
            return Err(Error::Config(format!("{} must hold a JSON object", path.display())));
        }
        merge(&mut tree, patch);
    }
    for spec in overrides {
        apply_override(&mut tree, spec)?;
    }
    let config: ExperimentConfig = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn to_pretty_json(config: &ExperimentConfig) -> Result<String> {
    serde_json::to_string_pretty(config).map_err(|e| Error::json("resolved config", e))
}
