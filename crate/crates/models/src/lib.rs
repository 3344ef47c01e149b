//! Learned components of the visual-to-tactile pipeline, built on candle:
//!
//! - [`tactile_vae`]: 1D convolutional VAE with a self-attention stage that
//!   maps 1024-sample signals to an 8×64 latent sequence and back.
//! - [`vision_encoder`]: image backbones producing the 256-d condition vector.
//! - [`diffusion`]: noise schedule, forward/reverse algebra, conditional 1D
//!   U-Net denoiser, sampler and training loop.
//! - [`classifier`]: 1D CNN road classifier, also the embedding network for FID.
//!
//! All parameters are initialized from seeded ChaCha8 streams, so a model is a
//! pure function of its config and seed. Everything runs on the CPU.

pub mod checkpoint;
pub mod classifier;
pub mod diffusion;
pub mod nn;
pub mod tactile_vae;
pub mod train;
pub mod vision_encoder;

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("training diverged at step {step} (loss {loss})")]
    TrainingDiverged { step: usize, loss: f64 },
    #[error("sampling diverged at step {step}")]
    SamplingDiverged { step: usize },
    #[error("diffusion step {t} outside 1..={max}")]
    Step { t: usize, max: usize },
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("backbone unavailable: {0}")]
    BackboneUnavailable(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
