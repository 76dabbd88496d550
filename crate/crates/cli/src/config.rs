//! Flat `key = value` configuration with command-line overrides.
//!
//! Resolution order: command defaults, then the config file, then `--set`
//! pairs in the order given. Unknown keys are usage errors.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

/// Error class for bad invocations (exit code 2).
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    values: BTreeMap<String, String>,
}

fn split_pair(text: &str) -> Option<(&str, &str)> {
    let (k, v) = text.split_once('=')?;
    let k = k.trim();
    (!k.is_empty()).then_some((k, v.trim()))
}

/// Parses a config file body. Blank lines and `#` comments are skipped.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = split_pair(line).ok_or_else(|| usage(format!("config line {}: expected key = value", n + 1)))?;
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

impl Params {
    pub fn resolve(defaults: &[(&str, &str)], file: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut values: BTreeMap<String, String> =
            defaults.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        let mut apply = |k: String, v: String, origin: &str| -> Result<()> {
            if !values.contains_key(&k) {
                let known: Vec<&str> = defaults.iter().map(|(k, _)| *k).collect();
                return Err(usage(format!("unknown key `{k}` in {origin}; known keys: {}", known.join(", "))));
            }
            values.insert(k, v);
            Ok(())
        };
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            for (k, v) in parse_config(&text)? {
                apply(k, v, &path.display().to_string())?;
            }
        }
        for s in sets {
            let (k, v) = split_pair(s).ok_or_else(|| usage(format!("--set expects key=value, got `{s}`")))?;
            apply(k.to_string(), v.to_string(), "--set")?;
        }
        Ok(Self { values })
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("`{key}` is not a declared key"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key);
        v.parse()
            .map_err(|_| usage(format!("`{key}`: cannot parse `{v}`")))
    }

    /// Comma-separated list; empty means no items.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let v = self.raw(key);
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| usage(format!("`{key}`: cannot parse item `{s}` of `{v}`")))
            })
            .collect()
    }

    pub fn map(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    /// SHA-256 over the sorted `key=value` lines.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.values {
            h.update(format!("{k}={v}\n").as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEFAULTS: &[(&str, &str)] = &[("n", "10"), ("noise", "0.2"), ("hidden", "64,64")];

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.conf");
        std::fs::write(&path, "# comment\n\nn = 20\nnoise=0.3\n").unwrap();
        let p = Params::resolve(DEFAULTS, Some(&path), &["noise=0.5".into()]).unwrap();
        assert_eq!(p.get::<usize>("n").unwrap(), 20);
        assert_eq!(p.get::<f64>("noise").unwrap(), 0.5);
        assert_eq!(p.list::<usize>("hidden").unwrap(), vec![64, 64]);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_usage_errors() {
        let e = Params::resolve(DEFAULTS, None, &["bogus=1".into()]).unwrap_err();
        assert!(e.downcast_ref::<Usage>().is_some());
        let e = Params::resolve(DEFAULTS, None, &["n".into()]).unwrap_err();
        assert!(e.downcast_ref::<Usage>().is_some());
        let p = Params::resolve(DEFAULTS, None, &["n=ten".into()]).unwrap();
        assert!(p.get::<usize>("n").unwrap_err().downcast_ref::<Usage>().is_some());
        assert!(parse_config("just words").is_err());
    }

    #[test]
    fn hash_depends_on_values_only() {
        let a = Params::resolve(DEFAULTS, None, &["n=3".into()]).unwrap();
        let b = Params::resolve(DEFAULTS, None, &["n = 3".into()]).unwrap();
        let c = Params::resolve(DEFAULTS, None, &[]).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
