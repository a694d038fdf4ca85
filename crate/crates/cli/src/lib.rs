//! Command implementations behind the `squant` binary.

pub mod commands;
pub mod config;
pub mod inspect;

use std::fmt;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

pub use config::{RunConfig, Shape};

/// Command failure classified by exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, unreadable or invalid configuration, missing inputs: exit 2.
    Usage(anyhow::Error),
    /// A check or computation failed: exit 1.
    Check(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Check(_) => 1,
        }
    }

    pub fn usage(e: impl Into<anyhow::Error>) -> Self {
        Failure::Usage(e.into())
    }

    pub fn check(e: impl Into<anyhow::Error>) -> Self {
        Failure::Check(e.into())
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(e) | Failure::Check(e) => write!(f, "{e:#}"),
        }
    }
}

pub type CmdResult<T> = Result<T, Failure>;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `value` as pretty JSON.
pub fn write_json(path: &Path, value: &impl Serialize) -> CmdResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(Failure::check)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Failure::usage(anyhow::anyhow!("writing {}: {e}", path.display())))
}

/// Writes serializable rows as CSV with a header taken from the row type.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CmdResult<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Failure::usage(anyhow::anyhow!("writing {}: {e}", path.display())))?;
    for row in rows {
        w.serialize(row).map_err(Failure::check)?;
    }
    w.flush().map_err(Failure::check)
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_hash: &'a str,
    files: Vec<(String, String)>,
}

/// Records the config hash and a content hash of every output of `command`.
pub fn write_manifest(dir: &Path, command: &str, config_hash: &str, files: &[&str]) -> CmdResult<()> {
    let mut hashed = Vec::with_capacity(files.len());
    for f in files {
        let bytes = std::fs::read(dir.join(f)).map_err(Failure::check)?;
        hashed.push((f.to_string(), sha256_hex(&bytes)));
    }
    write_json(
        &dir.join(format!("{command}.manifest.json")),
        &Manifest {
            command,
            config_hash,
            files: hashed,
        },
    )
}
