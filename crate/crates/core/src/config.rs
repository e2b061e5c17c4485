//! Flat `key = value` text files. `#` starts a comment; blank lines are
//! ignored; keys are case-sensitive and may not repeat.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let key = key.trim().replace('-', "_");
            if key.is_empty() {
                return Err(Error::config(format!("line {}: empty key", lineno + 1)));
            }
            if entries.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::config(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("invalid value `{value}` for `{key}`")))
}

/// Comma-separated numbers.
pub fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|v| parse_value(key, v)).collect()
}

/// Comma-separated `lo:hi` pairs.
pub fn parse_bounds(key: &str, value: &str) -> Result<Vec<(f64, f64)>> {
    value
        .split(',')
        .map(|pair| {
            let (lo, hi) = pair
                .split_once(':')
                .ok_or_else(|| Error::config(format!("`{key}` expects lo:hi pairs, got `{pair}`")))?;
            let (lo, hi) = (parse_value::<f64>(key, lo)?, parse_value::<f64>(key, hi)?);
            if !(lo < hi) {
                return Err(Error::config(format!("`{key}`: lower bound {lo} not below {hi}")));
            }
            Ok((lo, hi))
        })
        .collect()
}

pub fn format_list(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",")
}

pub fn format_bounds(bounds: &[(f64, f64)]) -> String {
    bounds.iter().map(|(lo, hi)| format!("{lo:?}:{hi:?}")).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_lists() {
        let kv = KeyValues::parse("# header\nsystem = linear-chain\nlearning-rate=0.02 # inline\n\ntheta_bounds = 0.1:2,0.1:3\n")
            .unwrap();
        assert_eq!(kv.get("system"), Some("linear-chain"));
        assert_eq!(parse_value::<f64>("lr", kv.get("learning_rate").unwrap()).unwrap(), 0.02);
        assert_eq!(parse_bounds("b", kv.get("theta_bounds").unwrap()).unwrap(), vec![(0.1, 2.0), (0.1, 3.0)]);
        assert_eq!(parse_list("x", "1, 2.5").unwrap(), vec![1.0, 2.5]);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(KeyValues::parse("novalue\n").is_err());
        assert!(KeyValues::parse("a=1\na=2\n").is_err());
        assert!(parse_bounds("b", "2:1").is_err());
        assert!(parse_value::<usize>("n", "-3").is_err());
    }

    #[test]
    fn formatting_round_trips() {
        let b = vec![(1e-3, 1e3), (0.1, 2.0)];
        assert_eq!(parse_bounds("b", &format_bounds(&b)).unwrap(), b);
        let l = vec![0.1, -2.5];
        assert_eq!(parse_list("l", &format_list(&l)).unwrap(), l);
    }
}
