//! Checkpoints are a safetensors weight file plus a JSON sidecar that echoes
//! the model config, seed, lineage hash and final losses:
//!
//! ```text
//! <stem>.safetensors
//! <stem>.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;
use crate::{ModelError, Result};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar<C> {
    pub schema_version: u32,
    pub kind: String,
    pub config: C,
    pub seed: u64,
    #[serde(default)]
    pub config_hash: Option<String>,
    pub final_losses: BTreeMap<String, f64>,
    /// Model-specific values needed at inference (e.g. latent scale).
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl<C> Sidecar<C> {
    pub fn new(kind: &str, config: C, seed: u64) -> Self {
        Self {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            kind: kind.to_string(),
            config,
            seed,
            config_hash: None,
            final_losses: BTreeMap::new(),
            extra: serde_json::Value::Null,
        }
    }
}

pub fn weights_path(stem: &Path) -> PathBuf {
    stem.with_extension("safetensors")
}

pub fn sidecar_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

pub fn save<C: Serialize>(store: &ParamStore, stem: &Path, sidecar: &Sidecar<C>) -> Result<()> {
    if let Some(dir) = stem.parent() {
        fs::create_dir_all(dir).map_err(|source| ModelError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    store.save(&weights_path(stem))?;
    let path = sidecar_path(stem);
    let text = serde_json::to_string_pretty(sidecar).expect("sidecar serializes");
    fs::write(&path, text + "\n").map_err(|source| ModelError::Io { path, source })
}

pub fn read_sidecar<C: DeserializeOwned>(stem: &Path, kind: &str) -> Result<Sidecar<C>> {
    let path = sidecar_path(stem);
    let text = fs::read_to_string(&path).map_err(|source| ModelError::Io {
        path: path.clone(),
        source,
    })?;
    let sidecar: Sidecar<C> =
        serde_json::from_str(&text).map_err(|source| ModelError::Json { path: path.clone(), source })?;
    if sidecar.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(ModelError::CheckpointMismatch(format!(
            "{}: schema_version {} (expected {CHECKPOINT_SCHEMA_VERSION})",
            path.display(),
            sidecar.schema_version
        )));
    }
    if sidecar.kind != kind {
        return Err(ModelError::CheckpointMismatch(format!(
            "{}: holds a {} checkpoint, expected {kind}",
            path.display(),
            sidecar.kind
        )));
    }
    Ok(sidecar)
}
