//! Conditional latent diffusion.
//!
//! Forward process `x_t = √ᾱ_t x₀ + √(1−ᾱ_t) z`, reverse step
//! `x_{t−1} = (x_t − β_t/√(1−ᾱ_t) ε̂) / √α_t + √β_t z` with `z = 0` at
//! `t = 1`, and a 1D U-Net denoiser `ε̂ = f(c, x_t, t)`. Steps are 1-based;
//! `ᾱ_0 = 1`.
//!
//! The diffusion algebra works on tensors of any float dtype so it can be
//! checked in f64; the U-Net itself runs in f32.

use std::path::Path;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{GroupNorm, Linear};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vtsyn_core::corpus::Normalization;
use vtsyn_core::frame::FrameImage;
use vtsyn_core::seed::{derive_seed, rng_from_seed};
use vtsyn_core::signal::TactileSignal;

use crate::checkpoint::{self, Sidecar};
use crate::nn::{conv1d, conv1d_scaled, Conv1d, gaussian, group_norm, linear, upsample_nearest1d, ParamStore, Scope};
use crate::tactile_vae::{signals_tensor, TactileVae, VaeConfig};
use crate::train::{step_optimizer, Batches, LossHistory, TrainOptions};
use crate::vision_encoder::{images_to_tensor, load_backbone, VisionConfig, VisionEncoder};
use crate::{ModelError, Result};

pub const CHECKPOINT_KIND: &str = "diffusion";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Linear β schedule, endpoints inclusive (a single step uses `beta_start`).
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 || !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
        return Err(ModelError::Config(format!(
            "schedule needs T ≥ 1 and 0 < beta_start < beta_end < 1, got T={steps}, ({beta_start}, {beta_end})"
        )));
    }
    let beta: Vec<f64> = if steps == 1 {
        vec![beta_start]
    } else {
        let span = (steps - 1) as f64;
        (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
            .collect()
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule {
        beta,
        alpha,
        alpha_bar,
    })
}

impl NoiseSchedule {
    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        make_schedule(cfg.steps, cfg.beta_start, cfg.beta_end)
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(ModelError::Step { t, max: self.steps() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.beta[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.alpha[t - 1])
    }

    /// `ᾱ_t` for `0 ≤ t ≤ T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check_step(t)?;
        Ok(self.alpha_bar[t - 1])
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(ModelError::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Closed-form marginal `q(x_t | x₀)`. `t = 0` returns `x₀`.
pub fn forward_diffuse(x0: &Tensor, t: usize, noise: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    check_same_shape(x0, noise)?;
    let ab = sched.alpha_bar(t)?;
    Ok(((x0 * ab.sqrt())? + (noise * (1.0 - ab).sqrt())?)?)
}

/// One Markov step `q(x_t | x_{t−1})`.
pub fn forward_step(x_prev: &Tensor, t: usize, noise: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    check_same_shape(x_prev, noise)?;
    let a = sched.alpha(t)?;
    Ok(((x_prev * a.sqrt())? + (noise * (1.0 - a).sqrt())?)?)
}

/// Per-example marginal for a batch with step `ts[i]` on row `i`.
pub fn forward_diffuse_batch(x0: &Tensor, ts: &[usize], noise: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    check_same_shape(x0, noise)?;
    if ts.len() != x0.dim(0)? {
        return Err(ModelError::Shape(format!("{} steps for batch {}", ts.len(), x0.dim(0)?)));
    }
    let mut a = Vec::with_capacity(ts.len());
    let mut b = Vec::with_capacity(ts.len());
    for &t in ts {
        let ab = sched.alpha_bar(t)?;
        a.push(ab.sqrt());
        b.push((1.0 - ab).sqrt());
    }
    let mut shape = vec![1; x0.rank()];
    shape[0] = ts.len();
    let a = Tensor::from_vec(a, shape.as_slice(), x0.device())?.to_dtype(x0.dtype())?;
    let b = Tensor::from_vec(b, shape.as_slice(), x0.device())?.to_dtype(x0.dtype())?;
    Ok((x0.broadcast_mul(&a)? + noise.broadcast_mul(&b)?)?)
}

/// Mean of the reverse transition, `(x_t − β_t/√(1−ᾱ_t) ε̂) / √α_t`.
pub fn posterior_mean(x_t: &Tensor, t: usize, noise_pred: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    check_same_shape(x_t, noise_pred)?;
    let beta = sched.beta(t)?;
    let coef = beta / (1.0 - sched.alpha_bar(t)?).sqrt();
    Ok(((x_t - (noise_pred * coef)?)? / sched.alpha(t)?.sqrt())?)
}

/// `x_{t−1}` from `x_t`; `z = None` means zero noise.
pub fn reverse_step(
    x_t: &Tensor,
    t: usize,
    noise_pred: &Tensor,
    sched: &NoiseSchedule,
    z: Option<&Tensor>,
) -> Result<Tensor> {
    let mean = posterior_mean(x_t, t, noise_pred, sched)?;
    match z {
        Some(z) => {
            check_same_shape(x_t, z)?;
            Ok((mean + (z * sched.beta(t)?.sqrt())?)?)
        }
        None => Ok(mean),
    }
}

/// Noise predictor `f(c, x_t, t)`; `x_t` is `(N, C, L)`, `t` holds one step
/// per row and `c` is `(N, cond_dim)`.
pub trait NoisePredictor {
    fn predict_noise(&self, x_t: &Tensor, t: &[usize], c: &Tensor) -> Result<Tensor>;
}

/// Ancestral sampling, one seed per batch row. Row `i` draws `x_T` and every
/// step's `z` from its own seeded stream, so results do not depend on
/// batch composition.
pub fn sample<P: NoisePredictor + ?Sized>(
    denoiser: &P,
    c: &Tensor,
    sched: &NoiseSchedule,
    shape: (usize, usize),
    seeds: &[u64],
) -> Result<Tensor> {
    let n = seeds.len();
    if c.dim(0)? != n {
        return Err(ModelError::Shape(format!("{} conditions for {n} seeds", c.dim(0)?)));
    }
    let (dtype, device) = (c.dtype(), c.device());
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| rng_from_seed(s)).collect();
    let draw = |rngs: &mut [ChaCha8Rng]| -> Result<Tensor> {
        let rows = rngs
            .iter_mut()
            .map(|r| gaussian(r, &[1, shape.0, shape.1], dtype, device))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&rows, 0)?)
    };
    let mut x = draw(&mut rngs)?;
    for t in (1..=sched.steps()).rev() {
        let eps = denoiser.predict_noise(&x, &vec![t; n], c)?;
        let z = if t > 1 { Some(draw(&mut rngs)?) } else { None };
        // Detached so the graph does not grow across steps.
        x = reverse_step(&x, t, &eps.detach(), sched, z.as_ref())?.detach();
        let total = x.abs()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !total.is_finite() {
            return Err(ModelError::SamplingDiverged { step: t });
        }
    }
    Ok(x)
}

/// Mean squared noise-prediction error with `t ~ U{1..T}` per row and
/// `z ~ N(0, I)` drawn from `rng`.
pub fn training_loss_with<P: NoisePredictor + ?Sized>(
    denoiser: &P,
    c: &Tensor,
    x0: &Tensor,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let n = x0.dim(0)?;
    let ts: Vec<usize> = (0..n).map(|_| rng.random_range(1..=sched.steps())).collect();
    let z = gaussian(rng, x0.dims(), x0.dtype(), x0.device())?;
    let x_t = forward_diffuse_batch(x0, &ts, &z, sched)?;
    let pred = denoiser.predict_noise(&x_t, &ts, c)?;
    check_same_shape(&pred, &z)?;
    Ok((pred - z)?.sqr()?.mean_all()?)
}

pub fn training_loss<P: NoisePredictor + ?Sized>(
    denoiser: &P,
    c: &Tensor,
    x0: &Tensor,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Tensor> {
    training_loss_with(denoiser, c, x0, sched, &mut rng_from_seed(seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub latent_len: usize,
    /// Width per U-Net level; the number of entries is the depth.
    pub channels: Vec<usize>,
    pub blocks_per_level: usize,
    pub time_embed_dim: usize,
    pub cond_dim: usize,
    pub groups: usize,
    /// Scale of the output convolution's initial weights.
    pub out_init_gain: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 8,
            latent_len: 64,
            channels: vec![64, 128, 256],
            blocks_per_level: 2,
            time_embed_dim: 256,
            cond_dim: 256,
            groups: 8,
            out_init_gain: 0.1,
        }
    }
}

impl DenoiserConfig {
    /// Two narrow levels for single-core CPU training.
    pub fn desk() -> Self {
        Self {
            channels: vec![32, 64],
            blocks_per_level: 1,
            time_embed_dim: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.channels.len();
        if levels == 0 || self.blocks_per_level == 0 {
            return Err(ModelError::Config("denoiser needs at least one level and block".into()));
        }
        if self.latent_len % (1 << (levels - 1)) != 0 {
            return Err(ModelError::Config(format!(
                "latent length {} not divisible by 2^{}",
                self.latent_len,
                levels - 1
            )));
        }
        if self.groups == 0 || self.channels.iter().any(|c| c % self.groups != 0) {
            return Err(ModelError::Config(format!(
                "channels {:?} not divisible into {} groups",
                self.channels, self.groups
            )));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(ModelError::Config("time_embed_dim must be even".into()));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of integer steps, `(N, dim)`.
pub fn timestep_embedding(ts: &[usize], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let freqs = (0..half).map(|k| (-(10_000f64).ln() * k as f64 / half as f64).exp() * t as f64);
        let args: Vec<f64> = freqs.collect();
        v.extend(args.iter().map(|a| a.sin()));
        v.extend(args.iter().map(|a| a.cos()));
    }
    Ok(Tensor::from_vec(v, (ts.len(), dim), device)?.to_dtype(dtype)?)
}

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv1d,
    film: Linear,
    norm2: GroupNorm,
    conv2: Conv1d,
    skip: Option<Conv1d>,
    c_out: usize,
}

impl ResBlock {
    fn new(s: &Scope, c_in: usize, c_out: usize, emb_dim: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm1: group_norm(&s.pp("norm1"), groups, c_in)?,
            conv1: conv1d(&s.pp("conv1"), c_in, c_out, 3, 1, 1)?,
            film: linear(&s.pp("film"), emb_dim, 2 * c_out)?,
            norm2: group_norm(&s.pp("norm2"), groups, c_out)?,
            conv2: conv1d(&s.pp("conv2"), c_out, c_out, 3, 1, 1)?,
            skip: if c_in != c_out {
                Some(conv1d(&s.pp("skip"), c_in, c_out, 1, 1, 0)?)
            } else {
                None
            },
            c_out,
        })
    }

    fn forward(&self, x: &Tensor, emb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let ss = self.film.forward(&emb.silu()?)?.unsqueeze(2)?;
        let scale = (ss.narrow(1, 0, self.c_out)? + 1.0)?;
        let shift = ss.narrow(1, self.c_out, self.c_out)?;
        let h = self.norm2.forward(&h)?.broadcast_mul(&scale)?.broadcast_add(&shift)?;
        let h = self.conv2.forward(&h.silu()?)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

/// 1D U-Net over the latent sequence. The condition is projected and added
/// to the time embedding, which modulates every residual block.
pub struct UNet {
    cfg: DenoiserConfig,
    time1: Linear,
    time2: Linear,
    cond: Linear,
    input: Conv1d,
    down: Vec<Vec<ResBlock>>,
    downsample: Vec<Conv1d>,
    mid: Vec<ResBlock>,
    up: Vec<Vec<ResBlock>>,
    upsample: Vec<Conv1d>,
    out_norm: GroupNorm,
    out: Conv1d,
}

impl UNet {
    pub fn new(s: &Scope, cfg: &DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.time_embed_dim;
        let g = cfg.groups;
        let ch = &cfg.channels;
        let levels = ch.len();
        let time1 = linear(&s.pp("time.0"), d, d)?;
        let time2 = linear(&s.pp("time.1"), d, d)?;
        let cond = linear(&s.pp("cond"), cfg.cond_dim, d)?;
        let input = conv1d(&s.pp("input"), cfg.latent_channels, ch[0], 3, 1, 1)?;

        let mut down = Vec::with_capacity(levels);
        let mut downsample = Vec::new();
        let mut c_in = ch[0];
        for (i, &c) in ch.iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..cfg.blocks_per_level {
                blocks.push(ResBlock::new(&s.pp(format!("down.{i}.{b}")), c_in, c, d, g)?);
                c_in = c;
            }
            down.push(blocks);
            if i + 1 < levels {
                downsample.push(conv1d(&s.pp(format!("downsample.{i}")), c, ch[i + 1], 3, 2, 1)?);
                c_in = ch[i + 1];
            }
        }
        let last = ch[levels - 1];
        let mid = vec![
            ResBlock::new(&s.pp("mid.0"), last, last, d, g)?,
            ResBlock::new(&s.pp("mid.1"), last, last, d, g)?,
        ];
        let mut up = Vec::with_capacity(levels);
        let mut upsample = Vec::new();
        for i in (0..levels).rev() {
            let mut blocks = Vec::new();
            for b in 0..cfg.blocks_per_level {
                let c_in = if b == 0 { 2 * ch[i] } else { ch[i] };
                blocks.push(ResBlock::new(&s.pp(format!("up.{i}.{b}")), c_in, ch[i], d, g)?);
            }
            up.push(blocks);
            if i > 0 {
                upsample.push(conv1d(&s.pp(format!("upsample.{i}")), ch[i], ch[i - 1], 3, 1, 1)?);
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            time1,
            time2,
            cond,
            input,
            down,
            downsample,
            mid,
            up,
            upsample,
            out_norm: group_norm(&s.pp("out_norm"), g, ch[0])?,
            out: conv1d_scaled(&s.pp("out"), ch[0], cfg.latent_channels, 3, 1, 1, cfg.out_init_gain)?,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }
}

impl NoisePredictor for UNet {
    fn predict_noise(&self, x_t: &Tensor, t: &[usize], c: &Tensor) -> Result<Tensor> {
        let (n, ch, len) = x_t.dims3()?;
        if ch != self.cfg.latent_channels || len != self.cfg.latent_len {
            return Err(ModelError::Shape(format!(
                "denoiser expects ({}, {}), got ({ch}, {len})",
                self.cfg.latent_channels, self.cfg.latent_len
            )));
        }
        if t.len() != n || c.dims() != [n, self.cfg.cond_dim] {
            return Err(ModelError::Shape(format!(
                "batch {n} with {} steps and condition {:?}",
                t.len(),
                c.dims()
            )));
        }
        let temb = timestep_embedding(t, self.cfg.time_embed_dim, x_t.dtype(), x_t.device())?;
        let temb = self.time2.forward(&self.time1.forward(&temb)?.silu()?)?;
        let emb = (temb + self.cond.forward(c)?)?;

        let mut h = self.input.forward(x_t)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for (i, blocks) in self.down.iter().enumerate() {
            for b in blocks {
                h = b.forward(&h, &emb)?;
            }
            skips.push(h.clone());
            if let Some(ds) = self.downsample.get(i) {
                h = ds.forward(&h)?;
            }
        }
        for b in &self.mid {
            h = b.forward(&h, &emb)?;
        }
        for (j, blocks) in self.up.iter().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            h = Tensor::cat(&[&h, &skip], 1)?;
            for b in blocks {
                h = b.forward(&h, &emb)?;
            }
            if let Some(us) = self.upsample.get(j) {
                h = us.forward(&upsample_nearest1d(&h, 2)?)?;
            }
        }
        Ok(self.out.forward(&self.out_norm.forward(&h)?.silu()?)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub denoiser: DenoiserConfig,
    pub vision: VisionConfig,
    pub schedule: ScheduleConfig,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            denoiser: DenoiserConfig::default(),
            vision: VisionConfig::default(),
            schedule: ScheduleConfig::default(),
        }
    }
}

/// Values the diffusion checkpoint needs besides its weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionExtra {
    /// Multiplier applied to VAE latent means before diffusion.
    pub latent_scale: f64,
    /// Config of the VAE whose latents were modelled.
    pub vae_config: VaeConfig,
}

/// Denoiser plus vision backbone, sharing one parameter store.
pub struct DiffusionModel {
    cfg: DiffusionConfig,
    store: ParamStore,
    unet: UNet,
    vision: VisionEncoder,
    schedule: NoiseSchedule,
}

impl DiffusionModel {
    pub fn new(cfg: &DiffusionConfig, seed: u64) -> Result<Self> {
        if cfg.vision.out_dim != cfg.denoiser.cond_dim {
            return Err(ModelError::Config(format!(
                "vision out_dim {} differs from cond_dim {}",
                cfg.vision.out_dim, cfg.denoiser.cond_dim
            )));
        }
        let schedule = NoiseSchedule::from_config(&cfg.schedule)?;
        let store = ParamStore::new(seed);
        let unet = UNet::new(&store.root().pp("unet"), &cfg.denoiser)?;
        let (vision, _) = load_backbone(&cfg.vision, &store.root().pp("vision"))?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            unet,
            vision,
            schedule,
        })
    }

    pub fn config(&self) -> &DiffusionConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn unet(&self) -> &UNet {
        &self.unet
    }

    pub fn vision(&self) -> &VisionEncoder {
        &self.vision
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Eval-mode condition vectors `(N, cond_dim)`.
    pub fn conditions(&self, images: &[&FrameImage]) -> Result<Tensor> {
        self.vision.features(images, self.cfg.vision.input_size(), self.device())
    }

    /// Samples scaled latents for each (image, seed) pair.
    pub fn sample_latents(&self, images: &[&FrameImage], seeds: &[u64]) -> Result<Tensor> {
        if images.len() != seeds.len() {
            return Err(ModelError::Shape(format!("{} images for {} seeds", images.len(), seeds.len())));
        }
        let c = self.conditions(images)?;
        let d = &self.cfg.denoiser;
        sample(&self.unet, &c, &self.schedule, (d.latent_channels, d.latent_len), seeds)
    }

    pub fn save(&self, stem: &Path, sidecar: &Sidecar<DiffusionConfig>) -> Result<()> {
        checkpoint::save(&self.store, stem, sidecar)
    }

    pub fn load(stem: &Path) -> Result<(Self, Sidecar<DiffusionConfig>)> {
        let sidecar: Sidecar<DiffusionConfig> = checkpoint::read_sidecar(stem, CHECKPOINT_KIND)?;
        let mut model = Self::new(&sidecar.config, sidecar.seed)?;
        model.store.load(&checkpoint::weights_path(stem))?;
        Ok((model, sidecar))
    }
}

pub fn extra_from_sidecar(sidecar: &Sidecar<DiffusionConfig>) -> Result<DiffusionExtra> {
    serde_json::from_value(sidecar.extra.clone())
        .map_err(|e| ModelError::CheckpointMismatch(format!("diffusion sidecar lacks latent metadata: {e}")))
}

/// Eval-mode VAE latent means, `(N, C, L)`.
pub fn encode_latents(vae: &TactileVae, signals: &[&TactileSignal]) -> Result<Tensor> {
    let mut outs = Vec::new();
    for chunk in signals.chunks(64) {
        let x = signals_tensor(chunk, vae.device())?;
        outs.push(vae.encode_tensor(&x, false)?.mean.detach());
    }
    Ok(Tensor::cat(&outs, 0)?)
}

/// `1 / std` of all latent entries, so scaled latents have unit variance.
pub fn latent_scale(latents: &Tensor) -> Result<f64> {
    let v = latents.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(ModelError::Data("latents have zero variance".into()));
    }
    Ok(1.0 / var.sqrt())
}

/// Minimizes the noise-prediction loss on scaled latents `(N, C, L)`,
/// training the small-conv backbone jointly.
pub fn train_diffusion(
    latents: &Tensor,
    images: &[&FrameImage],
    cfg: &DiffusionConfig,
    opts: &TrainOptions,
) -> Result<(DiffusionModel, LossHistory)> {
    opts.validate()?;
    let n = latents.dim(0)?;
    if n == 0 || images.len() != n {
        return Err(ModelError::Data(format!("{n} latents for {} images", images.len())));
    }
    let model = DiffusionModel::new(cfg, derive_seed(opts.seed, "diffusion/init"))?;
    let latents = latents.to_dtype(DType::F32)?.detach();
    // Trainable backbones see preprocessed pixels; frozen ones are run once.
    let inputs = if model.vision.is_trainable() {
        images_to_tensor(images, cfg.vision.input_size(), model.device())?
    } else {
        model.conditions(images)?.detach()
    };
    let mut opt = opts.optimizer(model.store.trainable_vars())?;
    let mut batches = Batches::new(n, opts.batch_size, derive_seed(opts.seed, "diffusion/batches"));
    let mut rng = rng_from_seed(derive_seed(opts.seed, "diffusion/noise"));
    let mut history = LossHistory::new(&["loss"]);
    for step in 0..opts.steps {
        let idx: Vec<u32> = batches.next_batch().into_iter().map(|i| i as u32).collect();
        let idx = Tensor::from_vec(idx.clone(), idx.len(), model.device())?;
        let x0 = latents.index_select(&idx, 0)?;
        let selected = inputs.index_select(&idx, 0)?;
        let c = if model.vision.is_trainable() {
            model.vision.forward_t(&selected, true)?
        } else {
            selected
        };
        let loss = training_loss_with(&model.unet, &c, &x0, &model.schedule, &mut rng)?;
        history.push(vec![loss.to_scalar::<f32>()? as f64])?;
        step_optimizer(&mut opt, opts, step, &loss)?;
        if (step + 1) % opts.log_every == 0 {
            log::debug!("diffusion step {} loss {:.5}", step + 1, history.rows[step][0]);
        }
    }
    Ok((model, history))
}

/// Image → condition → latent sample → VAE decode → physical units.
pub fn generate_tactile(
    images: &[&FrameImage],
    seeds: &[u64],
    vae: &TactileVae,
    model: &DiffusionModel,
    extra: &DiffusionExtra,
    norm: &Normalization,
    sample_rate_hz: f64,
) -> Result<Vec<TactileSignal>> {
    check_compatible(vae, model, extra)?;
    let z = (model.sample_latents(images, seeds)? / extra.latent_scale)?;
    let decoded = vae.decode(&z, sample_rate_hz)?;
    Ok(decoded.into_iter().map(|s| s.map(|v| norm.denormalize(v))).collect())
}

pub fn check_compatible(vae: &TactileVae, model: &DiffusionModel, extra: &DiffusionExtra) -> Result<()> {
    if &extra.vae_config != vae.config() {
        return Err(ModelError::CheckpointMismatch(
            "diffusion checkpoint was trained on a different VAE config".into(),
        ));
    }
    let d = &model.cfg.denoiser;
    let v = vae.config();
    if d.latent_channels != v.latent_channels || d.latent_len != v.latent_len {
        return Err(ModelError::CheckpointMismatch(format!(
            "denoiser latent ({}, {}) vs VAE latent ({}, {})",
            d.latent_channels, d.latent_len, v.latent_channels, v.latent_len
        )));
    }
    if !(extra.latent_scale.is_finite() && extra.latent_scale > 0.0) {
        return Err(ModelError::CheckpointMismatch(format!("latent scale {}", extra.latent_scale)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn default_schedule() -> NoiseSchedule {
        make_schedule(1000, 1e-4, 0.02).unwrap()
    }

    fn randn(seed: u64, shape: &[usize]) -> Tensor {
        gaussian(&mut rng_from_seed(seed), shape, DType::F64, &Device::Cpu).unwrap()
    }

    fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn schedule_endpoints_and_product() {
        let s = default_schedule();
        assert_eq!(s.steps(), 1000);
        assert!((s.alpha(1).unwrap() - 0.9999).abs() < 1e-15);
        assert!((s.alpha(1000).unwrap() - 0.98).abs() < 1e-15);
        // Independent oracle: product of (1 − β_i) with β_i = 1e-4 + i·(0.02 − 1e-4)/999.
        let mut prod = 1.0f64;
        for i in 0..1000 {
            prod *= 1.0 - (1e-4 + i as f64 * (0.02 - 1e-4) / 999.0);
        }
        let ab = s.alpha_bar(1000).unwrap();
        assert!((ab - prod).abs() < 1e-12);
        assert!((ab - 4.0e-5).abs() < 1e-6, "{ab}");
        assert!(ab < 1e-4);
        for w in s.betas().windows(2) {
            assert!(w[1] > w[0]);
        }
        for w in s.alpha_bars().windows(2) {
            assert!(w[1] < w[0] && w[1] > 0.0);
        }
        for t in 2..=1000 {
            assert_eq!(s.alpha_bar(t).unwrap(), s.alpha_bar(t - 1).unwrap() * s.alpha(t).unwrap());
        }
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
    }

    #[test]
    fn schedule_edge_cases() {
        assert!(matches!(make_schedule(1, 0.5, 0.5), Err(ModelError::Config(_))));
        let s = make_schedule(1, 0.4999, 0.5).unwrap();
        assert_eq!(s.alpha_bars().len(), 1);
        assert!((s.alpha_bars()[0] - 0.5001).abs() < 1e-15);
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
        assert!(matches!(default_schedule().beta(1001), Err(ModelError::Step { t: 1001, max: 1000 })));
        assert!(matches!(default_schedule().alpha(0), Err(ModelError::Step { .. })));
    }

    #[test]
    fn forward_endpoints() {
        let s = default_schedule();
        let x0 = randn(1, &[2, 8, 64]);
        let z = randn(2, &[2, 8, 64]);
        assert_eq!(max_abs(&forward_diffuse(&x0, 0, &z, &s).unwrap(), &x0), 0.0);
        let zero = x0.zeros_like().unwrap();
        let xt = forward_diffuse(&zero, 500, &z, &s).unwrap();
        let expect = (&z * (1.0 - s.alpha_bar(500).unwrap()).sqrt()).unwrap();
        assert_eq!(max_abs(&xt, &expect), 0.0);
        assert!(matches!(forward_diffuse(&x0, 1001, &z, &s), Err(ModelError::Step { .. })));
        let bad = randn(3, &[2, 8, 32]);
        assert!(matches!(forward_diffuse(&x0, 5, &bad, &s), Err(ModelError::Shape(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn forward_inverts_exactly(seed in 0u64..10_000, t in 1usize..=1000) {
            let s = default_schedule();
            let x0 = randn(seed, &[1, 8, 64]);
            let z = randn(seed + 1, &[1, 8, 64]);
            let ab = s.alpha_bar(t).unwrap();
            let xt = forward_diffuse(&x0, t, &z, &s).unwrap();
            let back = ((xt - (&z * (1.0 - ab).sqrt()).unwrap()).unwrap() / ab.sqrt()).unwrap();
            let err = max_abs(&back, &x0);
            // Division by √ᾱ_t amplifies rounding by at most 1/√ᾱ_T ≈ 158.
            prop_assert!(err <= 64.0 * f64::EPSILON / ab.sqrt(), "err {} at t {}", err, t);
        }

        #[test]
        fn batch_forward_matches_rows(seed in 0u64..1000) {
            let s = default_schedule();
            let x0 = randn(seed, &[3, 2, 5]);
            let z = randn(seed + 7, &[3, 2, 5]);
            let ts = [1usize, 400, 1000];
            let batch = forward_diffuse_batch(&x0, &ts, &z, &s).unwrap();
            for (i, &t) in ts.iter().enumerate() {
                let row = forward_diffuse(&x0.narrow(0, i, 1).unwrap(), t, &z.narrow(0, i, 1).unwrap(), &s).unwrap();
                prop_assert!(max_abs(&row, &batch.narrow(0, i, 1).unwrap()) < 1e-15);
            }
        }
    }

    #[test]
    fn reverse_step_reductions() {
        let s = default_schedule();
        let x = randn(4, &[1, 8, 64]);
        let zero = x.zeros_like().unwrap();
        let out = reverse_step(&x, 300, &zero, &s, None).unwrap();
        let expect = (&x / s.alpha(300).unwrap().sqrt()).unwrap();
        assert!(max_abs(&out, &expect) < 1e-15);

        // Single step from t = 1 with the true noise recovers x₀.
        let x0 = randn(5, &[1, 8, 64]);
        let z1 = randn(6, &[1, 8, 64]);
        let x1 = forward_diffuse(&x0, 1, &z1, &s).unwrap();
        let rec = reverse_step(&x1, 1, &z1, &s, None).unwrap();
        assert!(max_abs(&rec, &x0) < 1e-12);

        // Mean of the noisy step is the posterior mean.
        let eps = randn(7, &[1, 8, 64]);
        let mu = posterior_mean(&x, 42, &eps, &s).unwrap();
        let with_zero = reverse_step(&x, 42, &eps, &s, Some(&zero)).unwrap();
        assert_eq!(max_abs(&mu, &with_zero), 0.0);
        let beta = s.beta(42).unwrap();
        let manual = ((&x - (&eps * (beta / (1.0 - s.alpha_bar(42).unwrap()).sqrt())).unwrap()).unwrap()
            / (1.0 - beta).sqrt())
        .unwrap();
        assert!(max_abs(&mu, &manual) < 1e-15);
    }

    #[test]
    fn marginal_matches_composed_steps() {
        let s = make_schedule(50, 1e-3, 0.05).unwrap();
        let t = 30;
        let n = 10_000;
        let x0 = 1.5;
        let mut x = Tensor::full(x0, (n,), &Device::Cpu).unwrap();
        let mut rng = rng_from_seed(99);
        for step in 1..=t {
            let z = gaussian(&mut rng, &[n], DType::F64, &Device::Cpu).unwrap();
            x = forward_step(&x, step, &z, &s).unwrap();
        }
        let v = x.to_vec1::<f64>().unwrap();
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let ab = s.alpha_bar(t).unwrap();
        let (m_exp, v_exp) = (ab.sqrt() * x0, 1.0 - ab);
        assert!((mean - m_exp).abs() < 3.0 * (v_exp / n as f64).sqrt(), "{mean} vs {m_exp}");
        // Var of the sample variance of a Gaussian is 2σ⁴/(n−1).
        assert!((var - v_exp).abs() < 3.0 * (2.0 * v_exp * v_exp / (n - 1) as f64).sqrt(), "{var} vs {v_exp}");
    }

    /// Exact noise for a known target `x0*`.
    struct Oracle {
        target: Tensor,
        sched: NoiseSchedule,
    }

    impl NoisePredictor for Oracle {
        fn predict_noise(&self, x_t: &Tensor, t: &[usize], _c: &Tensor) -> Result<Tensor> {
            let ab = self.sched.alpha_bar(t[0])?;
            let target = self.target.broadcast_as(x_t.dims())?;
            Ok(((x_t - (target * ab.sqrt())?)? / (1.0 - ab).sqrt())?)
        }
    }

    struct Zero;

    impl NoisePredictor for Zero {
        fn predict_noise(&self, x_t: &Tensor, _t: &[usize], _c: &Tensor) -> Result<Tensor> {
            Ok(x_t.zeros_like()?)
        }
    }

    #[test]
    fn oracle_sampling_recovers_target() {
        let s = default_schedule();
        let target = randn(11, &[1, 8, 64]);
        let oracle = Oracle {
            target: target.clone(),
            sched: s.clone(),
        };
        let c = Tensor::zeros((2, 4), DType::F64, &Device::Cpu).unwrap();
        let out = sample(&oracle, &c, &s, (8, 64), &[1, 2]).unwrap();
        assert_eq!(out.dims(), &[2, 8, 64]);
        for i in 0..2 {
            assert!(max_abs(&out.narrow(0, i, 1).unwrap(), &target) < 1e-4);
        }
    }

    #[test]
    fn sampling_is_seeded_per_row() {
        let s = make_schedule(20, 1e-3, 0.05).unwrap();
        let c = Tensor::zeros((2, 1), DType::F64, &Device::Cpu).unwrap();
        let a = sample(&Zero, &c, &s, (2, 4), &[5, 6]).unwrap();
        let b = sample(&Zero, &c, &s, (2, 4), &[5, 6]).unwrap();
        assert_eq!(max_abs(&a, &b), 0.0);
        let c1 = Tensor::zeros((1, 1), DType::F64, &Device::Cpu).unwrap();
        let single = sample(&Zero, &c1, &s, (2, 4), &[6]).unwrap();
        assert_eq!(max_abs(&single, &a.narrow(0, 1, 1).unwrap()), 0.0);
        assert!(max_abs(&a.narrow(0, 0, 1).unwrap(), &a.narrow(0, 1, 1).unwrap()) > 0.0);
    }

    struct Exploding;

    impl NoisePredictor for Exploding {
        fn predict_noise(&self, x_t: &Tensor, t: &[usize], _c: &Tensor) -> Result<Tensor> {
            let v = if t[0] == 7 { f64::NAN } else { 0.0 };
            Ok((x_t.zeros_like()? + v)?)
        }
    }

    #[test]
    fn non_finite_sampling_reports_step() {
        let s = make_schedule(10, 1e-3, 0.05).unwrap();
        let c = Tensor::zeros((1, 1), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(
            sample(&Exploding, &c, &s, (1, 4), &[0]),
            Err(ModelError::SamplingDiverged { step: 7 })
        ));
    }

    /// Returns the exact noise by recomputing it from the shared seed.
    struct NoiseEcho {
        x0: Tensor,
        sched: NoiseSchedule,
    }

    impl NoisePredictor for NoiseEcho {
        fn predict_noise(&self, x_t: &Tensor, t: &[usize], _c: &Tensor) -> Result<Tensor> {
            let mut rows = Vec::new();
            for (i, &ti) in t.iter().enumerate() {
                let ab = self.sched.alpha_bar(ti)?;
                let xi = x_t.narrow(0, i, 1)?;
                let x0 = self.x0.narrow(0, i, 1)?;
                rows.push(((xi - (x0 * ab.sqrt())?)? / (1.0 - ab).sqrt())?);
            }
            Ok(Tensor::cat(&rows, 0)?)
        }
    }

    #[test]
    fn training_loss_oracles() {
        let s = default_schedule();
        let x0 = randn(1, &[4, 8, 64]);
        let c = Tensor::zeros((4, 1), DType::F64, &Device::Cpu).unwrap();
        let echo = NoiseEcho {
            x0: x0.clone(),
            sched: s.clone(),
        };
        let l = training_loss(&echo, &c, &x0, &s, 3).unwrap().to_scalar::<f64>().unwrap();
        assert!(l < 1e-18, "{l}");

        // Zero predictor: loss is the mean square of unit Gaussians.
        let big = randn(2, &[20, 8, 64]);
        let cz = Tensor::zeros((20, 1), DType::F64, &Device::Cpu).unwrap();
        let n = (20 * 8 * 64) as f64;
        let l = training_loss(&Zero, &cz, &big, &s, 4).unwrap().to_scalar::<f64>().unwrap();
        assert!((l - 1.0).abs() < 4.0 * (2.0 / n).sqrt(), "{l}");
        let again = training_loss(&Zero, &cz, &big, &s, 4).unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(l, again);
    }

    #[test]
    fn timestep_embedding_layout() {
        let e = timestep_embedding(&[0, 5], 4, DType::F64, &Device::Cpu).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(e[0], vec![0.0, 0.0, 1.0, 1.0]);
        let f1 = (-(10_000f64).ln() / 2.0).exp();
        assert!((e[1][0] - 5f64.sin()).abs() < 1e-12);
        assert!((e[1][1] - (5.0 * f1).sin()).abs() < 1e-12);
        assert!((e[1][2] - 5f64.cos()).abs() < 1e-12);
    }

    #[test]
    fn denoiser_config_validation() {
        DenoiserConfig::default().validate().unwrap();
        DenoiserConfig::desk().validate().unwrap();
        let bad = DenoiserConfig {
            channels: vec![30, 64],
            ..DenoiserConfig::desk()
        };
        assert!(bad.validate().is_err());
        let bad = DenoiserConfig {
            latent_len: 65,
            ..DenoiserConfig::desk()
        };
        assert!(bad.validate().is_err());
    }

    fn unet(cfg: &DenoiserConfig, seed: u64) -> (ParamStore, UNet) {
        let store = ParamStore::new(seed);
        let net = UNet::new(&store.root(), cfg).unwrap();
        (store, net)
    }

    fn randn32(seed: u64, shape: &[usize]) -> Tensor {
        gaussian(&mut rng_from_seed(seed), shape, DType::F32, &Device::Cpu).unwrap()
    }

    #[test]
    fn unet_shape_and_sensitivity() {
        let cfg = DenoiserConfig::desk();
        let (_store, net) = unet(&cfg, 1);
        let x = randn32(1, &[1, 8, 64]);
        let c = randn32(2, &[1, 256]);
        let out = net.predict_noise(&x, &[10], &c).unwrap();
        assert_eq!(out.dims(), &[1, 8, 64]);
        let out_t = net.predict_noise(&x, &[700], &c).unwrap();
        assert!(max_abs(&out, &out_t) > 0.0);
        let c2 = randn32(3, &[1, 256]);
        let out_c = net.predict_noise(&x, &[10], &c2).unwrap();
        assert!(max_abs(&out, &out_c) > 0.0);
        let bad = randn32(4, &[1, 8, 60]);
        assert!(matches!(net.predict_noise(&bad, &[1], &c), Err(ModelError::Shape(_))));
        assert!(net.predict_noise(&x, &[1, 2], &c).is_err());
    }

    #[test]
    fn default_unet_builds() {
        let (store, net) = unet(&DenoiserConfig::default(), 2);
        let x = randn32(1, &[2, 8, 64]);
        let c = randn32(2, &[2, 256]);
        assert_eq!(net.predict_noise(&x, &[1, 1000], &c).unwrap().dims(), &[2, 8, 64]);
        assert!(store.num_parameters() > 1_000_000);
    }

    #[test]
    fn initial_loss_is_near_one() {
        let (_store, net) = unet(&DenoiserConfig::desk(), 3);
        let x0 = randn32(5, &[32, 8, 64]);
        let c = randn32(6, &[32, 256]);
        let l = training_loss(&net, &c, &x0, &default_schedule(), 1).unwrap().to_scalar::<f32>().unwrap();
        assert!((l - 1.0).abs() < 0.15, "{l}");
    }

    #[test]
    fn latent_scale_normalizes_variance() {
        let x = (randn(8, &[50, 8, 64]) * 0.3).unwrap();
        let k = latent_scale(&x).unwrap();
        assert!((k - 1.0 / 0.3).abs() < 0.1);
        assert!(latent_scale(&x.zeros_like().unwrap()).is_err());
    }
}
