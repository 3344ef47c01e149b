//! Procedural visual-tactile corpus and the on-disk dataset layout.
//!
//! Each pair is produced by a small simulated drive: a class-specific road
//! elevation profile is traversed at a constant speed, turned into a tire
//! acceleration stream by a fixed band-pass response, and aligned against a
//! rendered texture frame with the same look-ahead procedure used for real
//! recordings (see [`crate::alignment`]).
//!
//! Directory layout written by [`build_corpus`]:
//!
//! ```text
//! <out>/manifest.json
//! <out>/images/<pair_id>.png      8-bit RGB
//! <out>/signals/<pair_id>.vts     VTS1, physical units (m/s²)
//! ```
//!
//! Signals are stored in m/s²; [`load_pairs`] applies the manifest's global
//! affine normalization.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{
    align_pair, AlignedPair, AlignmentConfig, AlignmentError, RtkTrack, TactileStream,
};
use crate::frame::{FrameError, FrameImage, VisualFrame};
use crate::metrics::percentile_sorted;
use crate::seed::{derive_seed, rng_from_seed};
use crate::signal::{load_signal, save_signal, write_vts, SignalFormatError, TactileSignal};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const SESSION_SCHEMA_VERSION: u32 = 1;

/// Accelerometer rate of the simulated intelligent tire.
pub const TACTILE_RATE_HZ: f64 = 500.0;
/// Camera frame rate.
pub const VIDEO_FPS: f64 = 30.0;
/// RTK receiver rate.
pub const RTK_RATE_HZ: f64 = 20.0;

/// Reference spatial frequency of the roughness PSD (cycles/m).
pub const PSD_REFERENCE_FREQ: f64 = 0.1;
/// Spatial band (cycles/m) carrying the flat micro-texture component.
pub const MICRO_TEXTURE_BAND: (f64, f64) = (1.0, 10.0);

/// Tire response: RBJ band-pass biquad (unity peak gain) centered at
/// `RESPONSE_CENTER_HZ` with quality `RESPONSE_Q`, applied to the vertical
/// road velocity and scaled by `2π·RESPONSE_CENTER_HZ` to yield m/s².
///
/// With `w0 = 2π f0 / fs` and `alpha = sin(w0) / (2Q)`:
/// `b = [alpha, 0, -alpha] / (1 + alpha)`,
/// `a = [1, -2 cos(w0) / (1 + alpha), (1 - alpha) / (1 + alpha)]`.
pub const RESPONSE_CENTER_HZ: f64 = 12.0;
pub const RESPONSE_Q: f64 = 1.5;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest integrity error for pair {pair_id}: {detail}")]
    ManifestIntegrity { pair_id: String, detail: String },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("signal file {path}: {source}")]
    Signal {
        path: PathBuf,
        #[source]
        source: SignalFormatError,
    },
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoadClass {
    Asphalt,
    Cement,
    Muddy,
    Dirt,
    Gravel,
    Brick,
}

impl RoadClass {
    pub const ALL: [RoadClass; 6] = [
        RoadClass::Asphalt,
        RoadClass::Cement,
        RoadClass::Muddy,
        RoadClass::Dirt,
        RoadClass::Gravel,
        RoadClass::Brick,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            RoadClass::Asphalt => "asphalt",
            RoadClass::Cement => "cement",
            RoadClass::Muddy => "muddy",
            RoadClass::Dirt => "dirt",
            RoadClass::Gravel => "gravel",
            RoadClass::Brick => "brick",
        }
    }
}

impl fmt::Display for RoadClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RoadClass {
    type Err = CorpusError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| CorpusError::InvalidParams(format!("unknown road class {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LightCondition {
    Day,
    Night,
}

impl LightCondition {
    pub const ALL: [LightCondition; 2] = [LightCondition::Day, LightCondition::Night];

    pub fn name(self) -> &'static str {
        match self {
            LightCondition::Day => "day",
            LightCondition::Night => "night",
        }
    }
}

impl fmt::Display for LightCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LightCondition {
    type Err = CorpusError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| CorpusError::InvalidParams(format!("unknown light condition {s:?}")))
    }
}

// ---------------------------------------------------------------------------
// Road profiles

/// Evenly spaced grooves across the lane (brick joints).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointPattern {
    pub spacing_m: f64,
    pub width_m: f64,
    pub depth_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoadProfileParams {
    /// Displacement PSD at the reference spatial frequency, m³/cycle.
    pub psd_magnitude: f64,
    /// PSD ∝ (n / n_ref)^(-psd_exponent).
    pub psd_exponent: f64,
    /// Flat PSD level (m³/cycle) added over [`MICRO_TEXTURE_BAND`].
    pub micro_texture_scale: f64,
    pub joints: Option<JointPattern>,
}

impl RoadProfileParams {
    /// Class roughness, ordered asphalt < cement < brick < dirt < muddy ≤ gravel.
    pub fn for_class(class: RoadClass) -> Self {
        let base = |psd_magnitude, micro_texture_scale| RoadProfileParams {
            psd_magnitude,
            psd_exponent: 2.0,
            micro_texture_scale,
            joints: None,
        };
        match class {
            RoadClass::Asphalt => base(4e-6, 0.0),
            RoadClass::Cement => base(12e-6, 0.0),
            RoadClass::Brick => RoadProfileParams {
                joints: Some(JointPattern {
                    spacing_m: 0.25,
                    width_m: 0.05,
                    depth_m: 0.003,
                }),
                ..base(16e-6, 0.0)
            },
            RoadClass::Dirt => base(48e-6, 2e-8),
            RoadClass::Muddy => base(110e-6, 0.0),
            RoadClass::Gravel => base(110e-6, 2e-7),
        }
    }

    fn psd(&self, n: f64) -> f64 {
        let mut g = self.psd_magnitude * (n / PSD_REFERENCE_FREQ).powf(-self.psd_exponent);
        if n >= MICRO_TEXTURE_BAND.0 && n <= MICRO_TEXTURE_BAND.1 {
            g += self.micro_texture_scale;
        }
        g
    }

    fn validate(&self) -> Result<()> {
        if !(self.psd_magnitude > 0.0) || !(self.psd_exponent >= 0.0) || !(self.micro_texture_scale >= 0.0) {
            return Err(CorpusError::InvalidParams(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Elevation samples on a uniform grid starting at arc length 0.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadProfile {
    pub resolution_m: f64,
    pub elevation: Vec<f64>,
}

impl RoadProfile {
    pub fn length_m(&self) -> f64 {
        (self.elevation.len() - 1) as f64 * self.resolution_m
    }

    pub fn elevation_at(&self, s: f64) -> f64 {
        let x = (s / self.resolution_m).max(0.0);
        let i = x.floor() as usize;
        if i + 1 >= self.elevation.len() {
            return self.elevation[self.elevation.len() - 1];
        }
        let w = x - i as f64;
        self.elevation[i] * (1.0 - w) + self.elevation[i + 1] * w
    }

    pub fn rms(&self) -> f64 {
        (self.elevation.iter().map(|z| z * z).sum::<f64>() / self.elevation.len() as f64).sqrt()
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            resolution_m: self.resolution_m,
            elevation: self.elevation.iter().map(|z| z * k).collect(),
        }
    }
}

pub fn synthesize_road_profile(
    class: RoadClass,
    length_m: f64,
    resolution_m: f64,
    seed: u64,
) -> Result<RoadProfile> {
    synthesize_profile(&RoadProfileParams::for_class(class), length_m, resolution_m, seed)
}

/// Gaussian random profile with one-sided PSD `params.psd(n)`: independent
/// normal cosine/sine coefficients per FFT bin, variance `G(n_k)·Δn`,
/// summed by an inverse FFT. Joint grooves (if any) are superimposed with a
/// seed-dependent phase.
pub fn synthesize_profile(
    params: &RoadProfileParams,
    length_m: f64,
    resolution_m: f64,
    seed: u64,
) -> Result<RoadProfile> {
    if !(length_m > 0.0) || !(resolution_m > 0.0) || resolution_m > length_m {
        return Err(CorpusError::InvalidParams(format!(
            "length {length_m} m at resolution {resolution_m} m"
        )));
    }
    params.validate()?;
    let n_points = (length_m / resolution_m).ceil() as usize + 1;
    let mut rng = rng_from_seed(seed);
    let dn = 1.0 / (n_points as f64 * resolution_m);
    let mut spectrum = vec![Complex64::new(0.0, 0.0); n_points];
    for (k, bin) in spectrum.iter_mut().enumerate().take((n_points - 1) / 2 + 1).skip(1) {
        let sigma = (params.psd(k as f64 * dn) * dn).sqrt();
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        *bin = Complex64::new(re * sigma, im * sigma);
    }
    FftPlanner::new()
        .plan_fft_inverse(n_points)
        .process(&mut spectrum);
    let mut elevation: Vec<f64> = spectrum.iter().map(|c| c.re).collect();
    if let Some(j) = params.joints {
        let phase = rng.random::<f64>() * j.spacing_m;
        for (i, z) in elevation.iter_mut().enumerate() {
            let u = (i as f64 * resolution_m + phase).rem_euclid(j.spacing_m);
            let d = u.min(j.spacing_m - u);
            if d < 0.5 * j.width_m {
                *z -= j.depth_m * 0.5 * (1.0 + (2.0 * std::f64::consts::PI * d / j.width_m).cos());
            }
        }
    }
    Ok(RoadProfile {
        resolution_m,
        elevation,
    })
}

// ---------------------------------------------------------------------------
// Tire response

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorNoise {
    /// Standard deviation of additive white noise, m/s².
    pub std: f64,
    pub seed: u64,
}

impl SensorNoise {
    pub fn none() -> Self {
        Self { std: 0.0, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn band_pass(f0: f64, q: f64, fs: f64) -> Self {
        let w0 = 2.0 * std::f64::consts::PI * f0 / fs;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        Self {
            b: [alpha / a0, 0.0, -alpha / a0],
            a: [-2.0 * w0.cos() / a0, (1.0 - alpha) / a0],
        }
    }

    fn filter(&self, x: &[f64]) -> Vec<f64> {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        x.iter()
            .map(|&x0| {
                let y0 = self.b[0] * x0 + self.b[1] * x1 + self.b[2] * x2 - self.a[0] * y1 - self.a[1] * y2;
                x2 = x1;
                x1 = x0;
                y2 = y1;
                y1 = y0;
                y0
            })
            .collect()
    }
}

/// Drives over `profile` at constant `speed` starting at `t = 0`, returning
/// the single-channel vertical tire acceleration sampled at `fs`.
pub fn simulate_tire_response(
    profile: &RoadProfile,
    speed: f64,
    fs: f64,
    noise: SensorNoise,
) -> Result<TactileStream> {
    if !(speed > 0.0) || !(fs > 0.0) {
        return Err(CorpusError::InvalidParams(format!("speed {speed} m/s, fs {fs} Hz")));
    }
    let duration = profile.length_m() / speed;
    let n = (duration * fs).floor() as usize + 1;
    let z: Vec<f64> = (0..n).map(|i| profile.elevation_at(speed * i as f64 / fs)).collect();
    let mut zdot = vec![0.0; n];
    for i in 0..n {
        let (lo, hi) = (i.saturating_sub(1), (i + 1).min(n - 1));
        if hi > lo {
            zdot[i] = (z[hi] - z[lo]) * fs / (hi - lo) as f64;
        }
    }
    let omega0 = 2.0 * std::f64::consts::PI * RESPONSE_CENTER_HZ;
    let mut accel = Biquad::band_pass(RESPONSE_CENTER_HZ, RESPONSE_Q, fs).filter(&zdot);
    let mut rng = rng_from_seed(noise.seed);
    for a in &mut accel {
        let e: f64 = StandardNormal.sample(&mut rng);
        *a = *a * omega0 + noise.std * e;
    }
    Ok(TactileStream::new(0.0, fs, vec![accel])?)
}

// ---------------------------------------------------------------------------
// Texture images

struct Palette {
    base: [f32; 3],
    /// Side of the value-noise lattice cell, in pixels.
    cell: usize,
    /// Amplitude of the lattice noise.
    blotch: f32,
    /// Per-pixel grain amplitude.
    grain: f32,
    /// Per-channel jitter of lattice values (colored speckle).
    tint_jitter: f32,
}

fn palette(class: RoadClass) -> Palette {
    match class {
        RoadClass::Asphalt => Palette { base: [0.30, 0.30, 0.34], cell: 2, blotch: 0.06, grain: 0.09, tint_jitter: 0.0 },
        RoadClass::Cement => Palette { base: [0.70, 0.69, 0.63], cell: 12, blotch: 0.05, grain: 0.012, tint_jitter: 0.0 },
        RoadClass::Muddy => Palette { base: [0.38, 0.28, 0.17], cell: 10, blotch: 0.12, grain: 0.02, tint_jitter: 0.02 },
        RoadClass::Dirt => Palette { base: [0.66, 0.52, 0.34], cell: 5, blotch: 0.08, grain: 0.04, tint_jitter: 0.02 },
        RoadClass::Gravel => Palette { base: [0.56, 0.54, 0.50], cell: 3, blotch: 0.22, grain: 0.05, tint_jitter: 0.08 },
        RoadClass::Brick => Palette { base: [0.64, 0.29, 0.20], cell: 6, blotch: 0.05, grain: 0.03, tint_jitter: 0.02 },
    }
}

/// Procedural road texture; class sets palette, granularity and (for brick)
/// a staggered mortar grid, light sets global gain and sensor noise.
pub fn render_texture_image(
    class: RoadClass,
    light: LightCondition,
    seed: u64,
    height: usize,
    width: usize,
) -> Result<VisualFrame> {
    if height < 32 || width < 32 {
        return Err(CorpusError::InvalidParams(format!(
            "image size {height}x{width}, need at least 32x32"
        )));
    }
    let p = palette(class);
    let mut rng = rng_from_seed(seed);
    let gh = height / p.cell + 2;
    let gw = width / p.cell + 2;
    let lattice: Vec<[f32; 4]> = (0..gh * gw)
        .map(|_| {
            let v: f32 = rng.random::<f32>() * 2.0 - 1.0;
            let mut t = [v, 0.0, 0.0, 0.0];
            for c in t.iter_mut().skip(1) {
                *c = rng.random::<f32>() * 2.0 - 1.0;
            }
            t
        })
        .collect();
    let (gain, noise_std, tint) = match light {
        LightCondition::Day => (1.0f32, 0.01f32, [1.0f32, 1.0, 1.0]),
        LightCondition::Night => (0.32f32, 0.03f32, [0.92f32, 0.96, 1.12]),
    };
    let brick_offset = rng.random_range(0..16usize);
    let mut data = Vec::with_capacity(height * width * 3);
    for r in 0..height {
        for c in 0..width {
            let y = r as f32 / p.cell as f32;
            let x = c as f32 / p.cell as f32;
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (fy, fx) = (y - y0 as f32, x - x0 as f32);
            let at = |yy: usize, xx: usize| lattice[yy * gw + xx];
            let mut val = [0f32; 4];
            for (k, v) in val.iter_mut().enumerate() {
                let a = at(y0, x0)[k] * (1.0 - fx) + at(y0, x0 + 1)[k] * fx;
                let b = at(y0 + 1, x0)[k] * (1.0 - fx) + at(y0 + 1, x0 + 1)[k] * fx;
                *v = a * (1.0 - fy) + b * fy;
            }
            let mortar = class == RoadClass::Brick && {
                let row = (r + brick_offset) / 8;
                let shift = if row % 2 == 0 { 0 } else { 8 };
                (r + brick_offset) % 8 == 0 || (c + shift + brick_offset) % 16 == 0
            };
            let light_falloff = match light {
                LightCondition::Day => 1.0,
                // Headlight pool: brighter near the bottom center.
                LightCondition::Night => {
                    let dy = 1.0 - r as f32 / height as f32;
                    let dx = (c as f32 / width as f32 - 0.5).abs();
                    (1.3 - 0.6 * dy - 0.6 * dx).clamp(0.4, 1.2)
                }
            };
            for ch in 0..3 {
                let base = if mortar { 0.74 } else { p.base[ch] };
                let grain: f32 = StandardNormal.sample(&mut rng);
                let sensor: f32 = StandardNormal.sample(&mut rng);
                let v = base + p.blotch * val[0] + p.tint_jitter * val[ch + 1] + p.grain * grain;
                let v = gain * light_falloff * tint[ch] * v + noise_std * gain * sensor;
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Ok(VisualFrame {
        t: 0.0,
        frame_id: 0,
        image: FrameImage::new(height, width, data)?,
    })
}

// ---------------------------------------------------------------------------
// Dataset manifest

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = CorpusError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(CorpusError::InvalidParams(format!("unknown split {s:?}"))),
        }
    }
}

/// `normalized = (x - offset) / scale`; `scale` is the m/s² value mapped to 1.0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub scale: f64,
    pub offset: f64,
}

impl Normalization {
    /// The percentile of |x - offset| over the training split mapped to `target`.
    pub const PERCENTILE: f64 = 99.9;
    pub const TARGET: f64 = 0.95;

    pub fn fit(train_samples: &[f64]) -> Result<Self> {
        if train_samples.is_empty() {
            return Err(CorpusError::InvalidParams("no training samples to normalize".into()));
        }
        let offset = train_samples.iter().sum::<f64>() / train_samples.len() as f64;
        let mut mags: Vec<f64> = train_samples.iter().map(|x| (x - offset).abs()).collect();
        mags.sort_by(f64::total_cmp);
        let p = percentile_sorted(&mags, Self::PERCENTILE);
        if !(p > 0.0) {
            return Err(CorpusError::InvalidParams("training signals are all zero".into()));
        }
        Ok(Self {
            scale: p / Self::TARGET,
            offset,
        })
    }

    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.offset) / self.scale
    }

    pub fn denormalize(&self, y: f64) -> f64 {
        y * self.scale + self.offset
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub pair_id: String,
    pub road_class: RoadClass,
    pub light: LightCondition,
    pub image_path: String,
    pub signal_path: String,
    pub mean_speed: f64,
    pub t0: f64,
    pub t1: f64,
    pub t2: f64,
    pub s0: f64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    /// Hash of the configuration that produced the dataset, when built by the pipeline.
    #[serde(default)]
    pub config_hash: Option<String>,
    pub seed: u64,
    pub sample_rate_hz: f64,
    pub signal_len: usize,
    pub normalization: Normalization,
    pub records: Vec<ManifestRecord>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(io_err(path))?;
        let mut m: DatasetManifest = serde_json::from_reader(BufReader::new(file))
            .map_err(|source| CorpusError::Json {
                path: path.to_path_buf(),
                source,
            })?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(CorpusError::InvalidManifest(format!(
                "schema_version {} unsupported (expected {MANIFEST_SCHEMA_VERSION})",
                m.schema_version
            )));
        }
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json() + "\n").map_err(io_err(path))
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn split_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for r in &self.records {
            c[r.split as usize] += 1;
        }
        c
    }

    /// Checks unique ids and that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.pair_id.as_str()) {
                return Err(CorpusError::InvalidManifest(format!(
                    "duplicate pair_id {}",
                    r.pair_id
                )));
            }
            for rel in [&r.image_path, &r.signal_path] {
                let p = self.resolve(rel);
                if !p.is_file() {
                    return Err(CorpusError::ManifestIntegrity {
                        pair_id: r.pair_id.clone(),
                        detail: format!("missing file {}", p.display()),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn load_signal_raw(&self, record: &ManifestRecord) -> Result<TactileSignal> {
        let path = self.resolve(&record.signal_path);
        if !path.is_file() {
            return Err(CorpusError::ManifestIntegrity {
                pair_id: record.pair_id.clone(),
                detail: format!("missing file {}", path.display()),
            });
        }
        load_signal(&path).map_err(|source| CorpusError::Signal { path, source })
    }

    pub fn load_image(&self, record: &ManifestRecord) -> Result<FrameImage> {
        let path = self.resolve(&record.image_path);
        if !path.is_file() {
            return Err(CorpusError::ManifestIntegrity {
                pair_id: record.pair_id.clone(),
                detail: format!("missing file {}", path.display()),
            });
        }
        Ok(FrameImage::load_png(&path)?)
    }
}

/// A loaded dataset entry; the signal inside `pair` is normalized.
#[derive(Debug, Clone)]
pub struct DatasetPair {
    pub pair_id: String,
    pub split: Split,
    pub pair: AlignedPair,
}

impl DatasetPair {
    pub fn road_class(&self) -> RoadClass {
        self.pair.road_class.expect("dataset pairs are labeled")
    }

    pub fn light(&self) -> LightCondition {
        self.pair.light.expect("dataset pairs are labeled")
    }
}

#[derive(Debug, Clone)]
pub struct LoadedSplit {
    pub pairs: Vec<DatasetPair>,
    /// Samples that fell outside [-1, 1] after normalization and were clipped.
    pub clipped_samples: usize,
}

pub fn load_pairs(manifest: &DatasetManifest, split: Split) -> Result<LoadedSplit> {
    let norm = manifest.normalization;
    let mut clipped = 0usize;
    let mut pairs = Vec::new();
    for r in manifest.records_in(split) {
        let raw = manifest.load_signal_raw(r)?;
        let signal = raw.map(|x| {
            let y = norm.normalize(x);
            if y.abs() > 1.0 {
                clipped += 1;
            }
            y.clamp(-1.0, 1.0)
        });
        let image = manifest.load_image(r)?;
        pairs.push(DatasetPair {
            pair_id: r.pair_id.clone(),
            split,
            pair: AlignedPair {
                frame: VisualFrame {
                    t: r.t0,
                    frame_id: 0,
                    image,
                },
                signal,
                t0: r.t0,
                t1: r.t1,
                t2: r.t2,
                s0: r.s0,
                mean_speed: r.mean_speed,
                road_class: Some(r.road_class),
                light: Some(r.light),
            },
        });
    }
    if clipped > 0 {
        log::warn!("{clipped} samples clipped to [-1, 1] in split {}", split.name());
    }
    Ok(LoadedSplit {
        pairs,
        clipped_samples: clipped,
    })
}

// ---------------------------------------------------------------------------
// Corpus builder

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellCount {
    pub road_class: RoadClass,
    pub light: LightCondition,
    pub count: usize,
}

/// Pairs to generate per (class, light) cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellCounts(pub Vec<CellCount>);

impl CellCounts {
    pub fn uniform(count: usize) -> Self {
        Self::from_fn(|_, _| count)
    }

    pub fn from_fn(f: impl Fn(RoadClass, LightCondition) -> usize) -> Self {
        let mut cells = Vec::new();
        for class in RoadClass::ALL {
            for light in LightCondition::ALL {
                cells.push(CellCount {
                    road_class: class,
                    light,
                    count: f(class, light),
                });
            }
        }
        Self(cells)
    }

    /// Day-time pair counts of the reference recording campaign.
    pub fn table1_day() -> Self {
        Self::from_fn(|c, l| match l {
            LightCondition::Night => 0,
            LightCondition::Day => table1(c).0,
        })
    }

    /// Day and night pair counts of the reference recording campaign.
    pub fn table1_full() -> Self {
        Self::from_fn(|c, l| match l {
            LightCondition::Day => table1(c).0,
            LightCondition::Night => table1(c).1,
        })
    }

    pub fn total(&self) -> usize {
        self.0.iter().map(|c| c.count).sum()
    }

    pub fn get(&self, class: RoadClass, light: LightCondition) -> usize {
        self.0
            .iter()
            .filter(|c| c.road_class == class && c.light == light)
            .map(|c| c.count)
            .sum()
    }
}

fn table1(class: RoadClass) -> (usize, usize) {
    match class {
        RoadClass::Muddy => (807, 910),
        RoadClass::Gravel => (730, 1039),
        RoadClass::Asphalt => (628, 761),
        RoadClass::Brick => (662, 1014),
        RoadClass::Dirt => (966, 1730),
        RoadClass::Cement => (939, 1930),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub counts: CellCounts,
    /// Uniform speed range for simulated drives, m/s.
    pub speed_range: (f64, f64),
    pub image_size: usize,
    pub profile_resolution_m: f64,
    pub sensor_noise_std: f64,
    /// Time driven before the frame is captured, s.
    pub lead_time_s: f64,
    /// Fractions for train and val; test takes the remainder.
    pub split_ratios: (f64, f64),
    pub alignment: AlignmentConfig,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            counts: CellCounts::uniform(40),
            speed_range: (5.0, 15.0),
            image_size: 64,
            profile_resolution_m: 0.01,
            sensor_noise_std: 0.02,
            lead_time_s: 1.0,
            split_ratios: (0.8, 0.1),
            alignment: AlignmentConfig::default(),
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.speed_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(CorpusError::InvalidParams(format!("speed range {lo}..{hi}")));
        }
        let (tr, va) = self.split_ratios;
        if !(tr >= 0.0 && va >= 0.0 && tr + va <= 1.0) {
            return Err(CorpusError::InvalidParams(format!("split ratios {tr}/{va}")));
        }
        if !(self.lead_time_s > 0.0) {
            return Err(CorpusError::InvalidParams("lead time must be positive".into()));
        }
        self.alignment.validate()?;
        Ok(())
    }
}

pub fn pair_id(class: RoadClass, light: LightCondition, index: usize) -> String {
    format!("{class}-{light}-{index:04}")
}

/// One simulated drive reduced to its aligned pair.
pub fn generate_pair(
    spec: &CorpusSpec,
    class: RoadClass,
    light: LightCondition,
    index: usize,
    seed: u64,
) -> Result<AlignedPair> {
    let id = pair_id(class, light, index);
    let mut speed_rng = rng_from_seed(derive_seed(seed, &format!("speed/{id}")));
    let (lo, hi) = spec.speed_range;
    let speed = if hi > lo { speed_rng.random_range(lo..hi) } else { lo };
    let length = speed * spec.lead_time_s + spec.alignment.d_far + 2.0;
    let profile = synthesize_road_profile(
        class,
        length,
        spec.profile_resolution_m,
        derive_seed(seed, &format!("profile/{id}")),
    )?;
    let stream = simulate_tire_response(
        &profile,
        speed,
        TACTILE_RATE_HZ,
        SensorNoise {
            std: spec.sensor_noise_std,
            seed: derive_seed(seed, &format!("noise/{id}")),
        },
    )?;
    let track = RtkTrack::sampled(0.0, stream.t_end(), RTK_RATE_HZ, |_| speed)?;
    let mut frame = render_texture_image(
        class,
        light,
        derive_seed(seed, &format!("image/{id}")),
        spec.image_size,
        spec.image_size,
    )?;
    frame.t = spec.lead_time_s;
    frame.frame_id = index as u64;
    Ok(align_pair(&frame, &track, &stream, &spec.alignment)?.with_labels(class, light))
}

/// Splits `n` items of one cell; counts are rounded, test takes the remainder.
pub fn split_sizes(n: usize, ratios: (f64, f64)) -> (usize, usize, usize) {
    let train = ((n as f64) * ratios.0).round() as usize;
    let val = (((n as f64) * ratios.1).round() as usize).min(n - train.min(n));
    let train = train.min(n);
    (train, val, n - train - val)
}

pub fn build_corpus(spec: &CorpusSpec, out_dir: &Path, seed: u64) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut entries = Vec::with_capacity(spec.counts.total());
    for cell in &spec.counts.0 {
        let (class, light) = (cell.road_class, cell.light);
        let (n_train, n_val, _) = split_sizes(cell.count, spec.split_ratios);
        let mut order: Vec<usize> = (0..cell.count).collect();
        order.shuffle(&mut rng_from_seed(derive_seed(seed, &format!("split/{class}/{light}"))));
        let mut split_of = vec![Split::Test; cell.count];
        for (rank, &i) in order.iter().enumerate() {
            split_of[i] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
        for (i, &split) in split_of.iter().enumerate() {
            let pair = generate_pair(spec, class, light, i, seed)?;
            entries.push(DatasetEntry {
                pair_id: pair_id(class, light, i),
                split,
                pair,
            });
        }
    }
    write_dataset(&entries, out_dir, seed, TACTILE_RATE_HZ, spec.alignment.resample_len)
}

/// A labeled pair about to be written to disk.
#[derive(Debug, Clone)]
pub struct DatasetEntry {
    pub pair_id: String,
    pub split: Split,
    pub pair: AlignedPair,
}

/// Writes images, signals and `manifest.json` under `out_dir`.
/// Normalization is fit on the train entries; with none, on all entries.
pub fn write_dataset(
    entries: &[DatasetEntry],
    out_dir: &Path,
    seed: u64,
    sample_rate_hz: f64,
    signal_len: usize,
) -> Result<DatasetManifest> {
    let images = out_dir.join("images");
    let signals = out_dir.join("signals");
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    fs::create_dir_all(&signals).map_err(io_err(&signals))?;

    let has_train = entries.iter().any(|e| e.split == Split::Train);
    let mut records = Vec::with_capacity(entries.len());
    let mut fit_samples = Vec::new();
    for e in entries {
        let (class, light) = match (e.pair.road_class, e.pair.light) {
            (Some(c), Some(l)) => (c, l),
            _ => {
                return Err(CorpusError::InvalidParams(format!(
                    "pair {} has no labels",
                    e.pair_id
                )))
            }
        };
        let image_rel = format!("images/{}.png", e.pair_id);
        let signal_rel = format!("signals/{}.vts", e.pair_id);
        e.pair.frame.image.save_png(&out_dir.join(&image_rel))?;
        let signal_path = out_dir.join(&signal_rel);
        save_signal(&signal_path, &e.pair.signal).map_err(|source| CorpusError::Signal {
            path: signal_path.clone(),
            source,
        })?;
        if e.split == Split::Train || !has_train {
            // Normalization is fit on the values as stored (f32).
            fit_samples.extend(e.pair.signal.channels.iter().flatten().map(|&x| x as f32 as f64));
        }
        records.push(ManifestRecord {
            pair_id: e.pair_id.clone(),
            road_class: class,
            light,
            image_path: image_rel,
            signal_path: signal_rel,
            mean_speed: e.pair.mean_speed,
            t0: e.pair.t0,
            t1: e.pair.t1,
            t2: e.pair.t2,
            s0: e.pair.s0,
            split: e.split,
        });
    }
    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        config_hash: None,
        seed,
        sample_rate_hz,
        signal_len,
        normalization: Normalization::fit(&fit_samples)?,
        records,
        root: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Raw recording sessions

/// Metadata stored as `session.json` next to a raw recording:
///
/// ```text
/// <session>/session.json
/// <session>/frames.csv          frame_id,t,file
/// <session>/frames/<id>.png
/// <session>/rtk.csv             t,s,v
/// <session>/tactile.vts         VTS1, first sample at tactile_t0
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub schema_version: u32,
    pub road_class: RoadClass,
    pub light: LightCondition,
    pub tactile_t0: f64,
    pub video_fps: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FrameRow {
    frame_id: u64,
    t: f64,
    file: String,
}

#[derive(Debug, Clone)]
pub struct Session {
    pub meta: SessionMeta,
    pub frames: Vec<VisualFrame>,
    pub track: RtkTrack,
    pub stream: TactileStream,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub road_class: RoadClass,
    pub light: LightCondition,
    pub speed: f64,
    /// Frames are captured over `[lead_time_s, lead_time_s + frame_span_s)`.
    pub frame_span_s: f64,
    pub lead_time_s: f64,
    /// Recording continues this long after the last frame's look-ahead window.
    pub tail_s: f64,
    /// Drops this many seconds from the end of the tactile stream.
    pub truncate_s: f64,
    pub image_size: usize,
    pub d_far: f64,
}

impl Default for SessionSpec {
    fn default() -> Self {
        Self {
            road_class: RoadClass::Asphalt,
            light: LightCondition::Day,
            speed: 10.0,
            frame_span_s: 4.0,
            lead_time_s: 1.0,
            tail_s: 0.5,
            truncate_s: 0.0,
            image_size: 32,
            d_far: 20.0,
        }
    }
}

pub fn simulate_session(spec: &SessionSpec, seed: u64) -> Result<Session> {
    let n_frames = (spec.frame_span_s * VIDEO_FPS).round() as usize;
    let last_frame_t = spec.lead_time_s + (n_frames.max(1) - 1) as f64 / VIDEO_FPS;
    let duration = last_frame_t + spec.d_far / spec.speed + spec.tail_s;
    let profile = synthesize_road_profile(
        spec.road_class,
        duration * spec.speed + 1.0,
        0.01,
        derive_seed(seed, "session/profile"),
    )?;
    let full = simulate_tire_response(
        &profile,
        spec.speed,
        TACTILE_RATE_HZ,
        SensorNoise {
            std: 0.02,
            seed: derive_seed(seed, "session/noise"),
        },
    )?;
    let keep = ((duration - spec.truncate_s) * TACTILE_RATE_HZ).floor() as usize + 1;
    let stream = full.truncated(keep);
    let track = RtkTrack::sampled(0.0, full.t_end(), RTK_RATE_HZ, |_| spec.speed)?;
    let frames = (0..n_frames)
        .map(|i| {
            let mut f = render_texture_image(
                spec.road_class,
                spec.light,
                derive_seed(seed, &format!("session/frame/{i}")),
                spec.image_size,
                spec.image_size,
            )?;
            f.t = spec.lead_time_s + i as f64 / VIDEO_FPS;
            f.frame_id = i as u64;
            Ok(f)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Session {
        meta: SessionMeta {
            schema_version: SESSION_SCHEMA_VERSION,
            road_class: spec.road_class,
            light: spec.light,
            tactile_t0: stream.t0,
            video_fps: VIDEO_FPS,
        },
        frames,
        track,
        stream,
    })
}

pub fn write_session(session: &Session, dir: &Path) -> Result<()> {
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(io_err(&frames_dir))?;
    let meta_path = dir.join("session.json");
    let meta = serde_json::to_string_pretty(&session.meta).expect("session meta serializes");
    fs::write(&meta_path, meta).map_err(io_err(&meta_path))?;

    let index_path = dir.join("frames.csv");
    let mut wtr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(&index_path)
        .map_err(|e| CorpusError::InvalidParams(format!("{}: {e}", index_path.display())))?;
    for f in &session.frames {
        let file = format!("frames/{:06}.png", f.frame_id);
        f.image.save_png(&dir.join(&file))?;
        wtr.serialize(FrameRow {
            frame_id: f.frame_id,
            t: f.t,
            file,
        })
        .map_err(|e| CorpusError::InvalidParams(format!("{}: {e}", index_path.display())))?;
    }
    wtr.flush().map_err(io_err(&index_path))?;

    let rtk_path = dir.join("rtk.csv");
    let rtk = fs::File::create(&rtk_path).map_err(io_err(&rtk_path))?;
    session.track.write_csv(BufWriter::new(rtk))?;

    let tactile_path = dir.join("tactile.vts");
    let mut w = BufWriter::new(fs::File::create(&tactile_path).map_err(io_err(&tactile_path))?);
    write_vts(&mut w, session.stream.fs, &session.stream.channels).map_err(|source| {
        CorpusError::Signal {
            path: tactile_path.clone(),
            source,
        }
    })?;
    w.flush().map_err(io_err(&tactile_path))?;
    Ok(())
}

pub fn load_session(dir: &Path) -> Result<Session> {
    let meta_path = dir.join("session.json");
    let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: SessionMeta = serde_json::from_str(&text).map_err(|source| CorpusError::Json {
        path: meta_path.clone(),
        source,
    })?;

    let rtk_path = dir.join("rtk.csv");
    let rtk = fs::File::open(&rtk_path).map_err(io_err(&rtk_path))?;
    let track = RtkTrack::read_csv(BufReader::new(rtk))?;

    let tactile_path = dir.join("tactile.vts");
    let signal = load_signal(&tactile_path).map_err(|source| match source {
        SignalFormatError::Io(e) => CorpusError::Io {
            path: tactile_path.clone(),
            source: e,
        },
        other => CorpusError::Signal {
            path: tactile_path.clone(),
            source: other,
        },
    })?;
    let stream = TactileStream::new(meta.tactile_t0, signal.sample_rate_hz, signal.channels)?;

    let index_path = dir.join("frames.csv");
    let mut rdr = csv::Reader::from_path(&index_path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => CorpusError::Io {
            path: index_path.clone(),
            source,
        },
        other => CorpusError::InvalidParams(format!("{}: {other:?}", index_path.display())),
    })?;
    let mut frames = Vec::new();
    for row in rdr.deserialize::<FrameRow>() {
        let row = row.map_err(|e| CorpusError::InvalidParams(format!("{}: {e}", index_path.display())))?;
        frames.push(VisualFrame {
            t: row.t,
            frame_id: row.frame_id,
            image: FrameImage::load_png(&dir.join(&row.file))?,
        });
    }
    Ok(Session {
        meta,
        frames,
        track,
        stream,
    })
}

/// Shared handle type used when many pairs reference the same session data.
pub type SharedSession = Arc<Session>;
