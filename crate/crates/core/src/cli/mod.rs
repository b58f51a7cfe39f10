//! The `riblab` command line: one subcommand per pipeline stage, all driven by
//! a [`RunConfig`] and writing under its output directory.
//!
//! Layout of a run directory:
//!
//! ```text
//! data/dataset.ribd             gen-data
//! pretrain/theta0.ribw          pretrain
//! rib_<pooling>/maps/*.ribm     rib
//! analysis/hgr_*.{csv,json}     analyze-hgr
//! eval/sweep_*.{csv,json}       eval-seed
//! ablate/ablation.{csv,json}    ablate-activations
//! scratch/log.json              scratch-rib
//! render/*.pgm                  render
//! ```
//!
//! Every stage directory also holds `config.json` (the resolved config) and
//! `manifest.json`.

mod config;
mod stages;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec;
use crate::error::{Error, Result};

pub use config::{
    AblateSection, EvalSection, ModelSection, Overrides, PretrainSection, RenderSection, RibSection, RunConfig,
};
pub use stages::{
    ablate_activations, analyze_hgr, eval_seed, gen_data, pipeline, pretrain, render, rib, scratch_rib,
    AblationRow, EvalSummary, DATASET, THETA0,
};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    /// Paths relative to the run directory (absolute for external inputs).
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_time_s: f64,
    pub versions: BTreeMap<String, String>,
}

/// Bookkeeping for one stage: its directory, hashed inputs and outputs.
pub(crate) struct Stage<'a> {
    name: &'static str,
    cfg: &'a RunConfig,
    dir: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    started: Instant,
}

impl<'a> Stage<'a> {
    /// Clears `out/<dir>` so stale outputs of an earlier run cannot linger.
    fn begin(cfg: &'a RunConfig, name: &'static str, dir: &str) -> Result<Self> {
        let dir = cfg.out.join(dir);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        Ok(Stage {
            name,
            cfg,
            dir,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            started: Instant::now(),
        })
    }

    fn run_path(&self, rel: &str) -> PathBuf {
        self.cfg.out.join(rel)
    }

    /// Reads an artifact of an upstream stage, `rel` to the run directory.
    fn read(&mut self, rel: &str) -> Result<Vec<u8>> {
        let bytes = codec::read_file(&self.run_path(rel))?;
        self.inputs.insert(rel.to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    /// Hashes a file outside the run directory.
    fn read_external(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = codec::read_file(path)?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    /// Writes `bytes` to `rel` inside this stage's directory.
    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        codec::write_file(&self.dir.join(rel), bytes)?;
        let key = format!("{}/{rel}", self.dir.file_name().unwrap().to_string_lossy());
        self.outputs.insert(key, sha256_hex(bytes));
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(rel, &bytes)
    }

    fn finish(mut self) -> Result<Manifest> {
        let config = self.cfg.to_json();
        self.write("config.json", &config)?;
        let versions = [
            ("riblab", env!("CARGO_PKG_VERSION").to_string()),
            ("ribd", crate::toydata::DATASET_VERSION.to_string()),
            ("ribw", crate::model::CHECKPOINT_VERSION.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let manifest = Manifest {
            stage: self.name.to_string(),
            config_hash: sha256_hex(&config),
            inputs: self.inputs,
            outputs: self.outputs,
            wall_time_s: self.started.elapsed().as_secs_f64(),
            versions,
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        codec::write_file(&self.dir.join("manifest.json"), &bytes)?;
        Ok(manifest)
    }
}

/// Splits `--section.key=value` overrides from the rest of the arguments.
/// A dotted name before `=` is what tells them apart from regular flags.
pub fn split_overrides(args: impl IntoIterator<Item = String>) -> (Vec<String>, Vec<String>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        match a.strip_prefix("--").and_then(|s| s.split_once('=')) {
            Some((key, _)) if key.contains('.') => overrides.push(a[2..].to_string()),
            _ => rest.push(a),
        }
    }
    (rest, overrides)
}
