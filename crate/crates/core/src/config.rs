//! Flat `key=value` configuration text.
//!
//! One assignment per line; `#` starts a comment; blank lines are ignored.
//! Keys are the field names of the structs that implement [`KeyValue`].

use std::fmt::Display;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {msg}")]
    Value { key: String, msg: String },
    #[error("invalid {field}: {msg}")]
    Invalid { field: &'static str, msg: String },
}

pub trait KeyValue {
    /// Assigns one field. Returns `Ok(false)` if the key is not one of ours.
    fn set_key(&mut self, key: &str, value: &str) -> Result<bool, ConfigError>;

    /// Every field in a stable order, formatted so `set_key` parses it back.
    fn pairs(&self) -> Vec<(&'static str, String)>;
}

pub fn parse_value<T>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T: FromStr,
    T::Err: Display,
{
    value.trim().parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.to_string(),
        msg: e.to_string(),
    })
}

/// Splits config text into `(key, value)` assignments, in order.
pub fn parse_text(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: n + 1,
            msg: format!("expected key=value, found {line:?}"),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::Syntax { line: n + 1, msg: "empty key".into() });
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Offers each assignment to `targets` in turn; a key nobody accepts is an error.
pub fn apply(assignments: &[(String, String)], targets: &mut [&mut dyn KeyValue]) -> Result<(), ConfigError> {
    'next: for (k, v) in assignments {
        for t in targets.iter_mut() {
            if t.set_key(k, v)? {
                continue 'next;
            }
        }
        return Err(ConfigError::UnknownKey(k.clone()));
    }
    Ok(())
}

pub fn render(source: &dyn KeyValue) -> String {
    source
        .pairs()
        .into_iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect()
}
