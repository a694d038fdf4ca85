use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use squant::model::MicroTransformerConfig;

use crate::{sha256_hex, CmdResult, Failure};

/// A GeMM shape `M x K x N`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

impl FromStr for Shape {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.trim().split('x').collect();
        let dims: Vec<usize> = parts
            .iter()
            .map(|p| p.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| format!("malformed shape {s:?}, expected MxKxN"))?;
        match dims[..] {
            [m, k, n] if m > 0 && k > 0 && n > 0 => Ok(Shape { m, k, n }),
            _ => Err(format!("malformed shape {s:?}, expected MxKxN with positive sizes")),
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.m, self.k, self.n)
    }
}

/// Parses a comma-separated shape list.
pub fn parse_shapes(s: &str) -> Result<Vec<Shape>, String> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(Shape::from_str).collect()
}

/// Everything a command needs besides its flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: MicroTransformerConfig,
    /// Text file to train on; synthetic text when absent.
    pub corpus: Option<PathBuf>,
    /// Checkpoint read by `eval` and `inspect`; defaults to the one `train` writes.
    pub checkpoint: Option<PathBuf>,
    pub verify_cases: u64,
    pub bench_shapes: Vec<Shape>,
    pub bench_reps: usize,
    /// Fraction of 8-bit tokens for the mixed benchmark rows.
    pub bench_rho: f64,
    pub ablation_seeds: Vec<u64>,
    /// Text fed to `inspect`; the first held-out window when absent.
    pub inspect_text: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: MicroTransformerConfig::default(),
            corpus: None,
            checkpoint: None,
            verify_cases: 1000,
            bench_shapes: vec![
                Shape { m: 64, k: 64, n: 64 },
                Shape { m: 128, k: 128, n: 32 },
                Shape { m: 96, k: 32, n: 128 },
                Shape { m: 256, k: 256, n: 64 },
            ],
            bench_reps: 100,
            bench_rho: 0.5,
            ablation_seeds: (0..5).collect(),
            inspect_text: None,
        }
    }
}

impl RunConfig {
    /// Reads a JSON config, or the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> CmdResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(anyhow::anyhow!("reading config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Failure::usage(anyhow::anyhow!("config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> CmdResult<()> {
        self.model.validate().map_err(Failure::usage)?;
        if self.verify_cases == 0 {
            return Err(Failure::usage(anyhow::anyhow!("verify_cases must be at least 1")));
        }
        if self.bench_reps == 0 || self.bench_shapes.is_empty() {
            return Err(Failure::usage(anyhow::anyhow!("bench_reps and bench_shapes must be non-empty")));
        }
        if !(0.0..=1.0).contains(&self.bench_rho) {
            return Err(Failure::usage(anyhow::anyhow!("bench_rho must lie in [0, 1]")));
        }
        if self.ablation_seeds.is_empty() {
            return Err(Failure::usage(anyhow::anyhow!("ablation_seeds must be non-empty")));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, carried by every output.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_parse() {
        assert_eq!("64x32x8".parse::<Shape>().unwrap(), Shape { m: 64, k: 32, n: 8 });
        assert!("64x32".parse::<Shape>().is_err());
        assert!("0x1x1".parse::<Shape>().is_err());
        assert_eq!(parse_shapes("1x2x3, 4x5x6").unwrap().len(), 2);
    }

    #[test]
    fn config_rejects_unknown_keys_and_hashes_stably() {
        assert!(serde_json::from_str::<RunConfig>("{\"modle\": {}}").is_err());
        assert!(serde_json::from_str::<RunConfig>("{\"model\": {\"bogus\": 1}}").is_err());
        let c: RunConfig = serde_json::from_str("{\"model\": {\"steps\": 3}}").unwrap();
        assert_eq!(c.model.steps, 3);
        assert_eq!(c.hash(), c.clone().hash());
        assert_ne!(c.hash(), RunConfig::default().hash());
    }
}
