//! Building blocks for visual-to-tactile road excitation generation.
//!
//! This crate holds everything that does not need a tensor runtime:
//!
//! - [`alignment`]: pairing camera frames with the vibration recorded when the
//!   tire later rolls over the road segment visible in the frame.
//! - [`corpus`]: a procedural multimodal corpus (road profiles, tire response,
//!   textures) and the on-disk dataset layout.
//! - [`signal`] / [`frame`]: tactile signal and image containers plus their file formats.
//! - [`metrics`]: RMSE, Fréchet distance, spectral similarity and band statistics.
//! - [`probe`]: small linear classifiers used to check feature separability.
//! - [`seed`]: stage-keyed seed derivation.

pub mod alignment;
pub mod corpus;
pub mod frame;
pub mod metrics;
pub mod probe;
pub mod seed;
pub mod signal;

pub use alignment::{AlignedPair, AlignmentConfig, RtkSample, RtkTrack, TactileStream};
pub use corpus::{DatasetManifest, LightCondition, RoadClass};
pub use frame::{FrameImage, VisualFrame};
pub use signal::TactileSignal;
