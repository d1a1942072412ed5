//! Run manifests and atomic artifact writes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use ctxcompat::diffcore::ParamStore;

use crate::config::RunConfig;
use crate::Failure;

pub const MANIFEST_FILE: &str = "run.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRef {
    pub seed: u64,
    /// Relative to the run directory.
    pub file: String,
    pub params_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub command: String,
    pub config: RunConfig,
    pub dataset_dir: Option<PathBuf>,
    pub dataset_hash: Option<String>,
    /// (visual, text) encoder weight hashes.
    pub encoder_hashes: Option<(String, String)>,
    pub checkpoints: Vec<CheckpointRef>,
    pub metrics: Value,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config: config.clone(),
            dataset_dir: None,
            dataset_hash: None,
            encoder_hashes: None,
            checkpoints: Vec::new(),
            metrics: Value::Null,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), Failure> {
        let text = serde_json::to_vec_pretty(self).expect("serializable");
        write_atomic(&dir.join(MANIFEST_FILE), &text)
    }

    pub fn read(dir: &Path) -> Result<Self, Failure> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read(&path)
            .map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_slice(&text)
            .map_err(|e| Failure::integrity(format!("{}: {e}", path.display())))
    }
}

/// Writes through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_checkpoint(
    dir: &Path,
    seed: u64,
    store: &ParamStore,
) -> Result<CheckpointRef, Failure> {
    let file = format!("checkpoint-s{seed}.bin");
    let mut bytes = Vec::new();
    store.write_checkpoint(&mut bytes)?;
    write_atomic(&dir.join(&file), &bytes)?;
    Ok(CheckpointRef {
        seed,
        file,
        params_hash: store.hash(),
    })
}

/// Loads a checkpoint and checks it against its recorded hash.
pub fn read_checkpoint(dir: &Path, r: &CheckpointRef) -> Result<ParamStore, Failure> {
    let path = dir.join(&r.file);
    let f = fs::File::open(&path)
        .map_err(|e| Failure::integrity(format!("cannot open {}: {e}", path.display())))?;
    let store = ParamStore::read_checkpoint(std::io::BufReader::new(f))
        .map_err(|e| Failure::integrity(format!("{}: {e}", path.display())))?;
    if store.hash() != r.params_hash {
        return Err(Failure::integrity(format!(
            "{} hashes to {}, manifest records {}",
            path.display(),
            store.hash(),
            r.params_hash
        )));
    }
    Ok(store)
}
