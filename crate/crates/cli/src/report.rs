use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use kvverify::SystemConfig;

use crate::CliError;

/// Envelope written as `report.json` by every subcommand.
#[derive(Debug, Serialize)]
pub struct RunReport<T: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: &'static str,
    /// `sha256:` of the canonical TOML rendering of the validated config.
    pub config_digest: Option<String>,
    pub seed: u64,
    pub payload: T,
    pub wall_clock_s: f64,
}

pub fn config_digest(cfg: &SystemConfig) -> String {
    let hash = Sha256::digest(cfg.to_toml().as_bytes());
    format!("sha256:{}", hex::encode(hash))
}

pub struct Output {
    dir: PathBuf,
}

impl Output {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::internal(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(CliError::internal)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn csv(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<PathBuf, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header).map_err(CliError::internal)?;
        for r in rows {
            w.write_record(r).map_err(CliError::internal)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::internal(e.to_string()))?;
        self.write(name, &bytes)
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::internal(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}
