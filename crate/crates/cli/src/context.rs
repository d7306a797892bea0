//! Run-wide settings: config-file defaults, seed, output directory, and the
//! per-command run manifest.

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Resolved global settings plus the config-file key/value map. Explicit
/// flags beat config entries, which beat built-in defaults.
#[derive(Debug)]
pub struct RunContext {
    pub seed: u64,
    pub out_dir: PathBuf,
    values: BTreeMap<String, String>,
}

impl RunContext {
    pub fn new(
        config_path: Option<&Path>,
        seed_flag: Option<u64>,
        out_dir_flag: Option<PathBuf>,
    ) -> Result<Self> {
        let mut values = BTreeMap::new();
        if let Some(path) = config_path {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read config {}", path.display()))?;
            for (line_no, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line
                    .split_once('=')
                    .with_context(|| format!("config line {}: expected key = value", line_no + 1))?;
                values.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        let seed = match seed_flag {
            Some(s) => s,
            None => match values.get("seed") {
                Some(raw) => raw.parse().context("config key `seed` is not an integer")?,
                None => 0,
            },
        };
        let out_dir = out_dir_flag
            .or_else(|| values.get("out-dir").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"));
        Ok(RunContext { seed, out_dir, values })
    }

    /// Flag value, else config-file value, else the built-in default.
    pub fn resolve<T: FromStr + Clone>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.values.get(key) {
            Some(raw) => raw
                .parse::<T>()
                .ok()
                .with_context(|| format!("config key `{key}` has unparseable value {raw:?}")),
            None => Ok(default),
        }
    }

    /// Like `resolve` but without a default; None when absent everywhere.
    pub fn resolve_opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            Some(raw) => raw
                .parse::<T>()
                .ok()
                .map(Some)
                .with_context(|| format!("config key `{key}` has unparseable value {raw:?}")),
            None => Ok(None),
        }
    }

    pub fn ensure_out_dir(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out_dir)
            .with_context(|| format!("cannot create {}", self.out_dir.display()))
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    /// Write the run manifest: command, resolved-config hash, seed, version,
    /// and a timestamp (the only non-reproducible field).
    pub fn write_manifest(&self, command: &str, resolved: &str) -> Result<()> {
        let mut hasher = Sha256::new();
        hasher.update(resolved.as_bytes());
        let config_hash = format!("{:x}", hasher.finalize());
        let manifest = serde_json::json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": self.seed,
            "config_hash": config_hash,
            "timestamp": chrono::Utc::now().to_rfc3339(),
        });
        let path = self.out_path(&format!("{command}.manifest.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
            .with_context(|| format!("cannot write {}", path.display()))?;
        Ok(())
    }
}

/// Parse a `high,low` cutoff pair.
pub fn parse_cutoffs(raw: &str) -> Result<(f64, f64)> {
    let (hi, lo) = raw
        .split_once(',')
        .with_context(|| format!("expected `high,low`, got {raw:?}"))?;
    Ok((
        hi.trim().parse().with_context(|| format!("bad cutoff {hi:?}"))?,
        lo.trim().parse().with_context(|| format!("bad cutoff {lo:?}"))?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_beats_config_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "seed = 7\ntrain-fraction = 0.7\n# comment\n").unwrap();
        let ctx = RunContext::new(Some(&path), None, None).unwrap();
        assert_eq!(ctx.seed, 7);
        let frac: f64 = ctx.resolve(None, "train-fraction", 0.6).unwrap();
        assert_eq!(frac, 0.7);
        let frac: f64 = ctx.resolve(Some(0.5), "train-fraction", 0.6).unwrap();
        assert_eq!(frac, 0.5);
        let other: u32 = ctx.resolve(None, "periods", 4).unwrap();
        assert_eq!(other, 4);

        let ctx = RunContext::new(Some(&path), Some(9), None).unwrap();
        assert_eq!(ctx.seed, 9);
    }

    #[test]
    fn cutoffs_parse() {
        assert_eq!(parse_cutoffs("0.75,0.25").unwrap(), (0.75, 0.25));
        assert!(parse_cutoffs("0.75").is_err());
    }
}
