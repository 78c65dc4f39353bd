//! `--config file.json` support. The file's keys mirror flag names; its
//! entries are spliced into argv right after the subcommand so that flags
//! given on the command line override them.

use std::fs;

use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("--config needs a file path")]
    MissingPath,
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("config {path} is not valid JSON: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("config {0} must be a JSON object")]
    NotObject(String),
    #[error("config key {0:?} has an unsupported value (nested objects are not allowed)")]
    BadValue(String),
}

/// Removes `--config PATH` (or `--config=PATH`) from `argv` and returns the
/// path, if present.
fn take_config_path(argv: &mut Vec<String>) -> Result<Option<String>, ConfigError> {
    let Some(pos) = argv
        .iter()
        .position(|a| a == "--config" || a.starts_with("--config="))
    else {
        return Ok(None);
    };
    let flag = argv.remove(pos);
    if let Some(path) = flag.strip_prefix("--config=") {
        return Ok(Some(path.to_string()));
    }
    if pos < argv.len() {
        Ok(Some(argv.remove(pos)))
    } else {
        Err(ConfigError::MissingPath)
    }
}

fn scalar(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Turns a JSON object into flag tokens. `true` becomes a bare switch,
/// `false` and `null` are dropped, arrays are comma-joined.
pub fn flags_from_json(obj: &serde_json::Map<String, Value>) -> Result<Vec<String>, ConfigError> {
    let mut out = Vec::new();
    for (key, v) in obj {
        let flag = format!("--{}", key.replace('_', "-"));
        match v {
            Value::Null | Value::Bool(false) => {}
            Value::Bool(true) => out.push(flag),
            Value::Array(items) => {
                let parts: Option<Vec<String>> = items.iter().map(scalar).collect();
                let parts = parts.ok_or_else(|| ConfigError::BadValue(key.clone()))?;
                out.push(flag);
                out.push(parts.join(","));
            }
            Value::Object(_) => return Err(ConfigError::BadValue(key.clone())),
            other => {
                out.push(flag);
                out.push(scalar(other).expect("string or number"));
            }
        }
    }
    Ok(out)
}

/// Expands `--config` into argv. `subcommands` lists the valid subcommand
/// names; file flags land right after the first of them.
pub fn expand(mut argv: Vec<String>, subcommands: &[&str]) -> Result<Vec<String>, ConfigError> {
    let Some(path) = take_config_path(&mut argv)? else {
        return Ok(argv);
    };
    let text = fs::read_to_string(&path).map_err(|source| ConfigError::Read {
        path: path.clone(),
        source,
    })?;
    let value: Value = serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
        path: path.clone(),
        source,
    })?;
    let Value::Object(obj) = value else {
        return Err(ConfigError::NotObject(path));
    };
    let flags = flags_from_json(&obj)?;
    let at = argv
        .iter()
        .position(|a| subcommands.contains(&a.as_str()))
        .map_or(argv.len(), |p| p + 1);
    argv.splice(at..at, flags);
    Ok(argv)
}
