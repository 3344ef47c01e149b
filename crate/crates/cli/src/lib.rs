//! Reproducible orchestration of the visual-to-tactile pipeline: corpus
//! synthesis, session alignment, training, generation, evaluation and plots.
//!
//! Every command runs from one [`config::PipelineConfig`]; its hash is
//! written into the manifest, checkpoint sidecars, generation index and
//! report, and a command refuses inputs carrying a different hash.

pub mod commands;
pub mod config;
pub mod error;
pub mod layout;
pub mod plots;
pub mod report;

pub use commands::{run_pipeline, Context, Stage};
pub use config::PipelineConfig;
pub use error::{CliError, Result};
pub use layout::Layout;
