// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration and the experiment commands behind the CLI.
//!
//! Every command writes into a fresh output directory: the resolved
//! `config.json`, its artifacts, `points.jsonl` and a `manifest.json` with
//! content hashes.

mod commands;
mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use commands::execute;
pub use config::{ModelShape, PromptRegime, RunConfig, SweepAxes};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "ICL_LOCUS_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Pretrain,
    Eval,
    SweepContext,
    SweepInput,
    SweepLayers,
    SweepPrompts,
    LoraScan,
    GateTrain,
    BenchEvict,
    Report,
}

impl Command {
    pub const ALL: [Command; 10] = [
        Command::Pretrain,
        Command::Eval,
        Command::SweepContext,
        Command::SweepInput,
        Command::SweepLayers,
        Command::SweepPrompts,
        Command::LoraScan,
        Command::GateTrain,
        Command::BenchEvict,
        Command::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Pretrain => "pretrain",
            Command::Eval => "eval",
            Command::SweepContext => "sweep-context",
            Command::SweepInput => "sweep-input",
            Command::SweepLayers => "sweep-layers",
            Command::SweepPrompts => "sweep-prompts",
            Command::LoraScan => "lora-scan",
            Command::GateTrain => "gate-train",
            Command::BenchEvict => "bench-evict",
            Command::Report => "report",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

/// What a finished command leaves behind.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub out_dir: PathBuf,
    /// Human-readable summary lines for stdout.
    pub summary: Vec<String>,
    pub manifest: Manifest,
}

/// Provenance of one output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub corpus_seed: u64,
    pub config_hash: String,
    pub model_hash: String,
    pub checkpoint_hash: Option<String>,
    /// SHA-256 of every file written, by name.
    pub files: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Sizes the global worker pool from [`THREADS_ENV`] when set.
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV}={raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Output directory that records a hash for everything written into it.
pub(crate) struct Artifacts {
    dir: PathBuf,
    files: BTreeMap<String, String>,
}

impl Artifacts {
    /// Refuses directories that already hold files.
    pub(crate) fn create(dir: &Path) -> Result<Self> {
        if dir.exists() {
            let mut entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
            if entries.next().is_some() {
                return Err(Error::Config(format!(
                    "output directory {} is not empty",
                    dir.display()
                )));
            }
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: BTreeMap::new(),
        })
    }

    pub(crate) fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub(crate) fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.files.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub(crate) fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub(crate) fn write_jsonl<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let mut out = Vec::new();
        for row in rows {
            serde_json::to_writer(&mut out, row)?;
            out.push(b'\n');
        }
        self.write(name, &out)
    }

    /// Registers a file some other writer produced.
    pub(crate) fn record(&mut self, name: &str) -> Result<()> {
        let path = self.path(name);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        self.files.insert(name.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub(crate) fn finish(mut self, mut manifest: Manifest) -> Result<(PathBuf, Manifest)> {
        manifest.files = std::mem::take(&mut self.files);
        self.write_json("manifest.json", &manifest)?;
        Ok((self.dir, manifest))
    }
}
