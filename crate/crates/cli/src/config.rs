//! Flat `key = value` config files.

use std::path::Path;

use anyhow::Context;

use crate::usage;

/// Parses `key = value` lines. Blank lines and lines starting with `#` are
/// skipped. Returns pairs in file order.
pub fn parse(text: &str) -> anyhow::Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(usage(format!("config line {}: expected key = value, got {line:?}", n + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(usage(format!("config line {}: empty key", n + 1)));
        }
        if v.is_empty() {
            return Err(usage(format!("config line {}: missing value for key {k:?}", n + 1)));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(usage(format!("config line {}: duplicate key {k:?}", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn load(path: &Path) -> anyhow::Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| crate::Failure::Data(format!("cannot read config {}: {e}", path.display())))?;
    parse(&text).with_context(|| format!("in {}", path.display()))
}
