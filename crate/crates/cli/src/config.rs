//! Pipeline configuration: one JSON document drives every stage, and its
//! hash is stamped on every artifact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vtsyn_core::corpus::{CellCounts, CorpusSpec, Split};
use vtsyn_models::classifier::ClassifierConfig;
use vtsyn_models::diffusion::{DenoiserConfig, DiffusionConfig};
use vtsyn_models::tactile_vae::VaeConfig;
use vtsyn_models::train::TrainOptions;

use crate::error::{CliError, Result};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub split: Split,
    /// One generated signal per (pair, seed).
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Band used for the low-frequency energy ratio, Hz.
    pub low_band_hz: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub schema_version: u32,
    /// Master seed; every stage derives its own streams from it.
    pub seed: u64,
    pub corpus: CorpusSpec,
    pub vae: VaeConfig,
    pub vae_training: TrainOptions,
    pub diffusion: DiffusionConfig,
    pub diffusion_training: TrainOptions,
    pub classifier: ClassifierConfig,
    pub classifier_training: TrainOptions,
    pub generation: GenerationConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    /// Desk-scale defaults sized so the whole pipeline runs on one CPU core
    /// in well under half an hour.
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 7,
            corpus: CorpusSpec::default(),
            vae: VaeConfig::default(),
            vae_training: TrainOptions {
                steps: 500,
                batch_size: 8,
                learning_rate: 1e-3,
                warmup_steps: 50,
                final_lr_fraction: 0.05,
                ..TrainOptions::default()
            },
            diffusion: DiffusionConfig {
                denoiser: DenoiserConfig::desk(),
                ..DiffusionConfig::default()
            },
            diffusion_training: TrainOptions {
                steps: 2400,
                batch_size: 32,
                learning_rate: 1e-3,
                warmup_steps: 50,
                ..TrainOptions::default()
            },
            classifier: ClassifierConfig::default(),
            classifier_training: TrainOptions {
                steps: 600,
                batch_size: 32,
                learning_rate: 2e-3,
                warmup_steps: 30,
                weight_decay: 1e-4,
                ..TrainOptions::default()
            },
            generation: GenerationConfig {
                split: Split::Test,
                seeds: vec![0],
            },
            eval: EvalConfig {
                low_band_hz: (0.0, 20.0),
            },
        }
    }
}

impl PipelineConfig {
    /// A few-minute variant: smaller corpus and short training runs.
    pub fn reduced() -> Self {
        let mut cfg = Self::default();
        cfg.corpus.counts = CellCounts::uniform(4);
        cfg.corpus.image_size = 32;
        cfg.vae_training.steps = 20;
        cfg.vae_training.warmup_steps = 5;
        cfg.diffusion_training.steps = 20;
        cfg.diffusion_training.batch_size = 8;
        cfg.diffusion_training.warmup_steps = 5;
        cfg.diffusion.schedule.steps = 50;
        cfg.classifier_training.steps = 20;
        cfg.classifier_training.warmup_steps = 5;
        cfg
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "config schema_version {} unsupported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.corpus.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.vae.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.diffusion.denoiser.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.diffusion.vision.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.classifier.validate().map_err(|e| CliError::Config(e.to_string()))?;
        for (name, o) in [
            ("vae_training", &self.vae_training),
            ("diffusion_training", &self.diffusion_training),
            ("classifier_training", &self.classifier_training),
        ] {
            o.validate().map_err(|e| CliError::Config(format!("{name}: {e}")))?;
        }
        let (d, v) = (&self.diffusion.denoiser, &self.vae);
        if d.latent_channels != v.latent_channels || d.latent_len != v.latent_len {
            return Err(CliError::Config(format!(
                "denoiser latent ({}, {}) differs from VAE latent ({}, {})",
                d.latent_channels, d.latent_len, v.latent_channels, v.latent_len
            )));
        }
        let len = self.corpus.alignment.resample_len;
        let channels = self.corpus.alignment.channel_select.len();
        if v.input_len != len || self.classifier.input_len != len {
            return Err(CliError::Config(format!(
                "VAE input {} and classifier input {} must equal the aligned length {len}",
                v.input_len, self.classifier.input_len
            )));
        }
        if v.input_channels != channels || self.classifier.input_channels != channels {
            return Err(CliError::Config(format!(
                "models expect {} / {} channels but alignment keeps {channels}",
                v.input_channels, self.classifier.input_channels
            )));
        }
        if self.generation.seeds.is_empty() {
            return Err(CliError::Config("generation needs at least one seed".into()));
        }
        let (lo, hi) = self.eval.low_band_hz;
        if !(lo >= 0.0 && lo < hi) {
            return Err(CliError::Config(format!("low band [{lo}, {hi}] Hz")));
        }
        Ok(())
    }

    /// Hex SHA-256 of the compact JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&json))
    }

    /// Training options with the stage seed taken from the master seed.
    pub fn stage_options(&self, opts: &TrainOptions) -> TrainOptions {
        TrainOptions {
            seed: self.seed,
            ..opts.clone()
        }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        PipelineConfig::default().validate().unwrap();
        PipelineConfig::reduced().validate().unwrap();
        assert_eq!(PipelineConfig::default().corpus.counts.total(), 480);
    }

    #[test]
    fn hash_tracks_every_field() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
        let mut c = a.clone();
        c.vae_training.learning_rate *= 2.0;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn json_round_trip() {
        let a = PipelineConfig::reduced();
        let b: PipelineConfig = serde_json::from_str(&a.to_json()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn mismatched_latents_rejected() {
        let mut cfg = PipelineConfig::default();
        cfg.diffusion.denoiser.latent_channels = 4;
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
        let mut cfg = PipelineConfig::default();
        cfg.generation.seeds.clear();
        assert!(cfg.validate().is_err());
    }
}
