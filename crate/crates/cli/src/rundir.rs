//! Run directory layout and the reproducibility record written into it.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const CONFIG_ECHO: &str = "config.echo";
pub const METRICS: &str = "metrics.json";
pub const PREDICTIONS: &str = "predictions.csv";
pub const RUN_RECORD: &str = "run.json";
pub const CHECKPOINTS: &str = "checkpoints";

/// Hash of a file's bytes framed like a git blob (`blob <len>\0<bytes>`).
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

#[derive(Debug, Serialize)]
struct InputRecord {
    path: String,
    hash: String,
}

#[derive(Debug, Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    version: &'a str,
    checkpoint_format: u32,
    seed: u64,
    config_hash: String,
    /// Hash over the sorted `(path, hash)` list of inputs.
    inputs_hash: String,
    inputs: Vec<InputRecord>,
}

pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(root.join(CHECKPOINTS))
            .with_context(|| format!("creating run directory {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Writes `config.echo` and `run.json`. Called before a stage starts.
    pub fn record(&self, command: &str, cfg: &RunConfig, inputs: &[PathBuf]) -> anyhow::Result<()> {
        let echo = cfg.to_toml();
        self.write(CONFIG_ECHO, echo.as_bytes())?;
        let mut recs = Vec::with_capacity(inputs.len());
        for p in inputs {
            let bytes = fs::read(p).with_context(|| format!("hashing input {}", p.display()))?;
            recs.push(InputRecord {
                path: p.display().to_string(),
                hash: blob_hash(&bytes),
            });
        }
        recs.sort_by(|a, b| a.path.cmp(&b.path));
        let mut all = Sha256::new();
        for r in &recs {
            all.update(r.path.as_bytes());
            all.update([0]);
            all.update(r.hash.as_bytes());
            all.update([b'\n']);
        }
        let record = RunRecord {
            command,
            version: env!("CARGO_PKG_VERSION"),
            checkpoint_format: pcqa_core::backbone::checkpoint::FORMAT_VERSION,
            seed: cfg.seed,
            config_hash: blob_hash(echo.as_bytes()),
            inputs_hash: hex::encode(all.finalize()),
            inputs: recs,
        };
        self.write_json(RUN_RECORD, &record)
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> anyhow::Result<()> {
        let path = self.path(name);
        let mut f = fs::File::create(&path).with_context(|| format!("writing {}", path.display()))?;
        f.write_all(bytes)
            .with_context(|| format!("writing {}", path.display()))
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }
}
