//! Flat `key = value` configuration files and flag/config precedence.

use std::collections::HashMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::Failure;

/// Parsed configuration file. Keys use the same kebab-case names as the
/// long command-line flags; flags always win over config values.
pub struct Config {
    values: HashMap<String, String>,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let mut values = HashMap::new();
        if let Some(p) = path {
            let text = fs::read_to_string(p)
                .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", p.display())))?;
            for (i, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let Some((k, v)) = line.split_once('=') else {
                    return Err(Failure::usage(format!(
                        "config line {}: expected `key = value`, got '{line}'",
                        i + 1
                    )));
                };
                values.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(Self { values })
    }

    /// The flag value if given, otherwise the parsed config entry.
    pub fn resolve<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, Failure>
    where
        T::Err: Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|e| Failure::usage(format!("config key '{key}' (value '{raw}'): {e}"))),
        }
    }

    /// Boolean switch: a set flag wins, otherwise the config entry.
    pub fn resolve_switch(&self, flag: bool, key: &str) -> Result<bool, Failure> {
        if flag {
            return Ok(true);
        }
        match self.values.get(key).map(String::as_str) {
            None => Ok(false),
            Some("true") | Some("1") | Some("yes") => Ok(true),
            Some("false") | Some("0") | Some("no") => Ok(false),
            Some(other) => Err(Failure::usage(format!(
                "config key '{key}': expected a boolean, got '{other}'"
            ))),
        }
    }
}

/// Parse a comma-separated list with a uniform error message.
pub fn parse_list<T: FromStr>(raw: &str, what: &str) -> Result<Vec<T>, Failure>
where
    T::Err: Display,
{
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|e| Failure::usage(format!("{what} entry '{s}': {e}")))
        })
        .collect()
}
