//! Flag/config-file merging. Every subcommand's arguments are a struct of
//! optional fields; a flat JSON object supplies values for the ones not
//! given on the command line.

use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

/// Reads a config file: either a flat object or a manifest from an earlier
/// run, whose `config` field is used.
pub fn read_config(path: &Path) -> Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError(format!("{}: {e}", path.display())))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| CliError(format!("{}: invalid JSON: {e}", path.display())))?;
    let obj = match v {
        Value::Object(mut m) if m.get("tool").and_then(Value::as_str) == Some("mvpacs") && m.contains_key("config") => {
            m.remove("config").unwrap()
        }
        other => other,
    };
    match obj {
        Value::Object(m) => {
            if let Some((k, _)) = m.iter().find(|(_, v)| v.is_object()) {
                return Err(CliError(format!("{}: key '{k}' is nested; config files are flat", path.display())).into());
            }
            Ok(m)
        }
        _ => Err(CliError(format!("{}: config must be a JSON object", path.display())).into()),
    }
}

/// Overlays the explicitly passed flags on the config values.
pub fn merge<T: Serialize + DeserializeOwned>(flags: &T, config: Option<Map<String, Value>>) -> Result<T> {
    let Some(mut base) = config else {
        let v = serde_json::to_value(flags)?;
        return Ok(serde_json::from_value(v)?);
    };
    let known = key_set(flags)?;
    if let Some(unknown) = base.keys().find(|k| !known.contains(*k)) {
        return Err(CliError(format!("unknown config key '{unknown}'")).into());
    }
    if let Value::Object(f) = serde_json::to_value(flags)? {
        for (k, v) in f {
            if !v.is_null() {
                base.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(base)).map_err(|e| CliError(format!("config: {e}")).into())
}

fn key_set<T: Serialize>(t: &T) -> Result<BTreeSet<String>> {
    match serde_json::to_value(t)? {
        Value::Object(m) => Ok(m.keys().cloned().collect()),
        _ => Ok(BTreeSet::new()),
    }
}

/// Parses a kebab-case enum name the way the library serializes it.
pub fn parse_enum<T: DeserializeOwned>(what: &str, s: &str) -> Result<T> {
    serde_json::from_value(Value::String(s.to_string())).with_context(|| CliError(format!("invalid {what} '{s}'")))
}
