//! 1D convolutional VAE for tactile signals.
//!
//! Encoder: four stride-2 conv layers (conv → batch norm, plus a strided 1×1
//! projection on the skip path, then ReLU), a self-attention block after the
//! second layer, and a conv head emitting latent mean and log-variance.
//! Decoder: the mirror image with transposed convs, ending in tanh.

use std::path::Path;

use candle_core::{DType, Device, Module, Tensor};
use serde::{Deserialize, Serialize};
use vtsyn_core::seed::{derive_seed, rng_from_seed};
use vtsyn_core::signal::TactileSignal;

use crate::checkpoint::{self, Sidecar};
use crate::nn::{
    conv1d, Conv1d, gaussian, upsample_nearest1d, BatchNorm, ConvTranspose1d, ParamStore, Scope,
    SelfAttentionBlock,
};
use crate::train::{step_optimizer, Batches, LossHistory, TrainOptions};
use crate::{ModelError, Result};

pub const CHECKPOINT_KIND: &str = "tactile_vae";
pub const LOGVAR_RANGE: (f64, f64) = (-30.0, 20.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub input_len: usize,
    pub input_channels: usize,
    pub conv_channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub latent_channels: usize,
    pub latent_len: usize,
    pub kl_weight: f64,
    /// The attention block follows this many encoder layers.
    pub attention_after: usize,
    pub attention_heads: usize,
    /// Feed-forward hidden width as a multiple of the attention width.
    pub ffn_mult: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            input_len: 1024,
            input_channels: 1,
            conv_channels: vec![32, 64, 128, 128],
            strides: vec![2, 2, 2, 2],
            latent_channels: 8,
            latent_len: 64,
            kl_weight: 1e-4,
            attention_after: 2,
            attention_heads: 4,
            ffn_mult: 2,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.conv_channels.len();
        if n == 0 || self.strides.len() != n {
            return Err(ModelError::Config(format!(
                "{} conv widths vs {} strides",
                n,
                self.strides.len()
            )));
        }
        let total: usize = self.strides.iter().product();
        if total == 0 || self.input_len % total != 0 || self.latent_len != self.input_len / total {
            return Err(ModelError::Config(format!(
                "input_len {} with stride product {total} cannot give latent_len {}",
                self.input_len, self.latent_len
            )));
        }
        if self.attention_after == 0 || self.attention_after > n {
            return Err(ModelError::Config(format!(
                "attention_after {} outside 1..={n}",
                self.attention_after
            )));
        }
        let width = self.conv_channels[self.attention_after - 1];
        if self.attention_heads == 0 || width % self.attention_heads != 0 {
            return Err(ModelError::Config(format!(
                "{} heads do not divide width {width}",
                self.attention_heads
            )));
        }
        if self.strides.iter().any(|&s| s != 1 && s != 2) {
            return Err(ModelError::Config("strides must be 1 or 2".into()));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(ModelError::Config("kl_weight must be non-negative".into()));
        }
        Ok(())
    }

    /// Channel width after decoder layer `j` (mirror of the encoder).
    fn decoder_width(&self, j: usize) -> usize {
        let n = self.conv_channels.len();
        if j + 1 < n {
            self.conv_channels[n - 2 - j]
        } else {
            self.conv_channels[0]
        }
    }
}

/// Batched latent distribution, each tensor `(N, latent_channels, latent_len)`.
#[derive(Debug, Clone)]
pub struct LatentSequence {
    pub mean: Tensor,
    pub logvar: Tensor,
}

struct DownLayer {
    conv: Conv1d,
    bn: BatchNorm,
    skip: Conv1d,
}

impl DownLayer {
    fn new(s: &Scope, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            conv: conv1d(&s.pp("conv"), c_in, c_out, 3, stride, 1)?,
            bn: BatchNorm::new(&s.pp("bn"), c_out)?,
            skip: conv1d(&s.pp("skip"), c_in, c_out, 1, stride, 0)?,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.bn.forward_t(&self.conv.forward(x)?, train)?;
        Ok((h + self.skip.forward(x)?)?.relu()?)
    }
}

struct UpLayer {
    deconv: ConvTranspose1d,
    bn: BatchNorm,
    skip: Conv1d,
    stride: usize,
}

impl UpLayer {
    fn new(s: &Scope, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            deconv: ConvTranspose1d::new(&s.pp("deconv"), c_in, c_out, 3, stride, 1, stride - 1)?,
            bn: BatchNorm::new(&s.pp("bn"), c_out)?,
            skip: conv1d(&s.pp("skip"), c_in, c_out, 1, 1, 0)?,
            stride,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.bn.forward_t(&self.deconv.forward(x)?, train)?;
        let skip = self.skip.forward(&upsample_nearest1d(x, self.stride)?)?;
        Ok((h + skip)?.relu()?)
    }
}

pub struct TactileVae {
    cfg: VaeConfig,
    store: ParamStore,
    down: Vec<DownLayer>,
    enc_attn: SelfAttentionBlock,
    head: Conv1d,
    dec_in: Conv1d,
    up: Vec<UpLayer>,
    dec_attn: SelfAttentionBlock,
    out: Conv1d,
}

impl TactileVae {
    pub fn new(cfg: &VaeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(seed);
        let root = store.root();
        let n = cfg.conv_channels.len();
        let mut down = Vec::with_capacity(n);
        let mut c_in = cfg.input_channels;
        for (i, (&c, &s)) in cfg.conv_channels.iter().zip(&cfg.strides).enumerate() {
            down.push(DownLayer::new(&root.pp(format!("enc.{i}")), c_in, c, s)?);
            c_in = c;
        }
        let attn_width = cfg.conv_channels[cfg.attention_after - 1];
        let enc_attn = SelfAttentionBlock::new(&root.pp("enc.attn"), attn_width, cfg.attention_heads, cfg.ffn_mult)?;
        let head = conv1d(&root.pp("enc.head"), c_in, 2 * cfg.latent_channels, 3, 1, 1)?;

        let dec_in = conv1d(&root.pp("dec.in"), cfg.latent_channels, cfg.conv_channels[n - 1], 3, 1, 1)?;
        let mut up = Vec::with_capacity(n);
        let mut c_in = cfg.conv_channels[n - 1];
        for j in 0..n {
            let c = cfg.decoder_width(j);
            up.push(UpLayer::new(&root.pp(format!("dec.{j}")), c_in, c, cfg.strides[n - 1 - j])?);
            c_in = c;
        }
        let dec_attn = SelfAttentionBlock::new(&root.pp("dec.attn"), attn_width, cfg.attention_heads, cfg.ffn_mult)?;
        let out = conv1d(&root.pp("dec.out"), c_in, cfg.input_channels, 3, 1, 1)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            down,
            enc_attn,
            head,
            dec_in,
            up,
            dec_attn,
            out,
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// `x`: `(N, input_channels, input_len)`.
    pub fn encode_tensor(&self, x: &Tensor, train: bool) -> Result<LatentSequence> {
        let (_, c, l) = x.dims3()?;
        if c != self.cfg.input_channels || l != self.cfg.input_len {
            return Err(ModelError::Shape(format!(
                "encoder expects ({}, {}), got ({c}, {l})",
                self.cfg.input_channels, self.cfg.input_len
            )));
        }
        let mut h = x.clone();
        for (i, layer) in self.down.iter().enumerate() {
            h = layer.forward_t(&h, train)?;
            if i + 1 == self.cfg.attention_after {
                h = self.enc_attn.forward(&h)?;
            }
        }
        let stats = self.head.forward(&h)?;
        let k = self.cfg.latent_channels;
        Ok(LatentSequence {
            mean: stats.narrow(1, 0, k)?,
            logvar: stats.narrow(1, k, k)?.clamp(LOGVAR_RANGE.0, LOGVAR_RANGE.1)?,
        })
    }

    /// `z`: `(N, latent_channels, latent_len)`; output values lie in (-1, 1).
    pub fn decode_tensor(&self, z: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, l) = z.dims3()?;
        if c != self.cfg.latent_channels || l != self.cfg.latent_len {
            return Err(ModelError::Shape(format!(
                "decoder expects ({}, {}), got ({c}, {l})",
                self.cfg.latent_channels, self.cfg.latent_len
            )));
        }
        let n = self.up.len();
        let mut h = self.dec_in.forward(z)?;
        for (j, layer) in self.up.iter().enumerate() {
            h = layer.forward_t(&h, train)?;
            // Same resolution and width as the encoder attention stage.
            if n - 1 - j == self.cfg.attention_after {
                h = self.dec_attn.forward(&h)?;
            }
        }
        Ok(self.out.forward(&h)?.tanh()?)
    }

    pub fn encode(&self, signal: &TactileSignal) -> Result<LatentSequence> {
        self.encode_tensor(&signals_tensor(&[signal], self.device())?, false)
    }

    /// Decodes a batch of latents to signals at `sample_rate_hz`.
    pub fn decode(&self, z: &Tensor, sample_rate_hz: f64) -> Result<Vec<TactileSignal>> {
        let y = self.decode_tensor(z, false)?.to_dtype(DType::F64)?.to_vec3::<f64>()?;
        Ok(y.into_iter()
            .map(|channels| TactileSignal {
                sample_rate_hz,
                channels,
            })
            .collect())
    }

    /// `decode(encode(x).mean)` in eval mode, batched.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let mut outs = Vec::new();
        let n = x.dim(0)?;
        let chunk = 64;
        for start in (0..n).step_by(chunk) {
            let xb = x.narrow(0, start, chunk.min(n - start))?;
            let lat = self.encode_tensor(&xb, false)?;
            outs.push(self.decode_tensor(&lat.mean, false)?.detach());
        }
        Ok(Tensor::cat(&outs, 0)?)
    }

    pub fn save(&self, stem: &Path, sidecar: &Sidecar<VaeConfig>) -> Result<()> {
        checkpoint::save(&self.store, stem, sidecar)
    }

    pub fn load(stem: &Path) -> Result<(Self, Sidecar<VaeConfig>)> {
        let sidecar: Sidecar<VaeConfig> = checkpoint::read_sidecar(stem, CHECKPOINT_KIND)?;
        let mut vae = Self::new(&sidecar.config, sidecar.seed)?;
        vae.store.load(&checkpoint::weights_path(stem))?;
        Ok((vae, sidecar))
    }
}

/// Stacks signals (all channels) into `(N, C, L)` f32.
pub fn signals_tensor(signals: &[&TactileSignal], device: &Device) -> Result<Tensor> {
    let first = signals.first().ok_or_else(|| ModelError::Data("no signals".into()))?;
    let (c, l) = (first.num_channels(), first.len());
    let mut data = Vec::with_capacity(signals.len() * c * l);
    for s in signals {
        if s.num_channels() != c || s.len() != l {
            return Err(ModelError::Shape(format!(
                "signal ({}, {}) differs from ({c}, {l})",
                s.num_channels(),
                s.len()
            )));
        }
        for ch in &s.channels {
            data.extend(ch.iter().map(|&v| v as f32));
        }
    }
    Ok(Tensor::from_vec(data, (signals.len(), c, l), device)?)
}

/// `mean + exp(logvar / 2) ⊙ ε` with ε drawn from the seeded stream.
pub fn reparameterize(latent: &LatentSequence, seed: u64) -> Result<Tensor> {
    let mut rng = rng_from_seed(seed);
    let eps = gaussian(&mut rng, latent.mean.dims(), latent.mean.dtype(), latent.mean.device())?;
    sample_with(latent, &eps)
}

fn sample_with(latent: &LatentSequence, eps: &Tensor) -> Result<Tensor> {
    let std = (&latent.logvar * 0.5)?.exp()?;
    Ok((&latent.mean + std.mul(eps)?)?)
}

/// KL(q ‖ N(0, I)) averaged over latent elements and batch.
pub fn kl_divergence(latent: &LatentSequence) -> Result<Tensor> {
    let lv = &latent.logvar;
    let terms = ((latent.mean.sqr()? + lv.exp()?)? - lv)?;
    Ok(((terms - 1.0)? * 0.5)?.mean_all()?)
}

/// Minimizes reconstruction MSE + `kl_weight` · KL on normalized signals.
pub fn train_vae(
    signals: &[&TactileSignal],
    cfg: &VaeConfig,
    opts: &TrainOptions,
) -> Result<(TactileVae, LossHistory)> {
    opts.validate()?;
    if signals.is_empty() {
        return Err(ModelError::Data("empty training split".into()));
    }
    let vae = TactileVae::new(cfg, derive_seed(opts.seed, "vae/init"))?;
    let data = signals_tensor(signals, vae.device())?;
    let mut opt = opts.optimizer(vae.store.trainable_vars())?;
    let mut batches = Batches::new(signals.len(), opts.batch_size, derive_seed(opts.seed, "vae/batches"));
    let mut noise = rng_from_seed(derive_seed(opts.seed, "vae/noise"));
    let mut history = LossHistory::new(&["loss", "reconstruction", "kl"]);
    for step in 0..opts.steps {
        let idx: Vec<u32> = batches.next_batch().into_iter().map(|i| i as u32).collect();
        let idx = Tensor::from_vec(idx.clone(), idx.len(), vae.device())?;
        let x = data.index_select(&idx, 0)?;
        let latent = vae.encode_tensor(&x, true)?;
        let eps = gaussian(&mut noise, latent.mean.dims(), DType::F32, vae.device())?;
        let z = sample_with(&latent, &eps)?;
        let x_hat = vae.decode_tensor(&z, true)?;
        let rec = candle_nn::loss::mse(&x_hat, &x)?;
        let kl = kl_divergence(&latent)?;
        let loss = (&rec + (&kl * cfg.kl_weight)?)?;
        history.push(vec![
            loss.to_scalar::<f32>()? as f64,
            rec.to_scalar::<f32>()? as f64,
            kl.to_scalar::<f32>()? as f64,
        ])?;
        step_optimizer(&mut opt, opts, step, &loss)?;
        if (step + 1) % opts.log_every == 0 {
            log::debug!("vae step {} loss {:.5}", step + 1, history.rows[step][0]);
        }
    }
    Ok((vae, history))
}

/// Eval-mode reconstruction RMSE over all samples.
pub fn reconstruction_rmse(vae: &TactileVae, signals: &[&TactileSignal]) -> Result<f64> {
    let x = signals_tensor(signals, vae.device())?;
    let y = vae.reconstruct(&x)?;
    let mse = (y - x)?.sqr()?.mean_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    Ok(mse.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_signal(rng: &mut ChaCha8Rng, len: usize) -> TactileSignal {
        TactileSignal::mono(500.0, (0..len).map(|_| rng.random::<f64>() * 1.6 - 0.8).collect())
    }

    #[test]
    fn config_validation() {
        VaeConfig::default().validate().unwrap();
        let bad = VaeConfig {
            latent_len: 32,
            ..VaeConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = VaeConfig {
            attention_heads: 3,
            ..VaeConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn shapes_and_ranges() {
        let vae = TactileVae::new(&VaeConfig::default(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = random_signal(&mut rng, 1024);
        let lat = vae.encode(&s).unwrap();
        assert_eq!(lat.mean.dims(), &[1, 8, 64]);
        assert_eq!(lat.logvar.dims(), &[1, 8, 64]);
        let z = gaussian(&mut rng, &[3, 8, 64], DType::F32, &Device::Cpu).unwrap();
        let z = (z * 5.0).unwrap();
        let out = vae.decode(&z, 500.0).unwrap();
        assert_eq!(out.len(), 3);
        for sig in &out {
            assert_eq!((sig.num_channels(), sig.len()), (1, 1024));
            assert!(sig.channel(0).iter().all(|v| v.abs() < 1.0));
        }
        let short = random_signal(&mut rng, 1000);
        assert!(matches!(vae.encode(&short), Err(ModelError::Shape(_))));
        let bad_z = Tensor::zeros((1, 8, 32), DType::F32, &Device::Cpu).unwrap();
        assert!(vae.decode(&bad_z, 500.0).is_err());
    }

    #[test]
    fn zero_input_gives_finite_latent() {
        let vae = TactileVae::new(&VaeConfig::default(), 2).unwrap();
        let x = Tensor::zeros((2, 1, 1024), DType::F32, &Device::Cpu).unwrap();
        for train in [false, true] {
            let lat = vae.encode_tensor(&x, train).unwrap();
            for t in [&lat.mean, &lat.logvar] {
                let v = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
                assert!(v.iter().all(|x| x.is_finite()));
            }
        }
    }

    #[test]
    fn distinct_inputs_give_distinct_means() {
        let vae = TactileVae::new(&VaeConfig::default(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sigs: Vec<TactileSignal> = (0..100).map(|_| random_signal(&mut rng, 1024)).collect();
        let refs: Vec<&TactileSignal> = sigs.iter().collect();
        let x = signals_tensor(&refs, &Device::Cpu).unwrap();
        let means = vae.encode_tensor(&x, false).unwrap().mean.flatten_from(1).unwrap();
        let rows = means.to_vec2::<f32>().unwrap();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                let d: f32 = rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b).abs()).sum();
                assert!(d > 0.0, "collision {i} {j}");
            }
        }
    }

    fn latent(mean: Vec<f64>, logvar: f64) -> LatentSequence {
        let n = mean.len();
        let mean = Tensor::from_vec(mean, (1, 1, n), &Device::Cpu).unwrap();
        let logvar = (mean.ones_like().unwrap() * logvar).unwrap();
        LatentSequence { mean, logvar }
    }

    #[test]
    fn reparameterize_limits_and_determinism() {
        let lat = latent(vec![0.25, -1.5, 3.0], LOGVAR_RANGE.0);
        let z = reparameterize(&lat, 7).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (a, b) in z.iter().zip([0.25, -1.5, 3.0]) {
            assert!((a - b).abs() < 1e-6);
        }
        let lat = latent(vec![0.0; 4], 0.0);
        let a = reparameterize(&lat, 1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = reparameterize(&lat, 1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reparameterize_monte_carlo_mean() {
        // 10^5 draws of one element with mean 0.7, std e^{0.5·ln 0.36} = 0.6.
        let n = 100_000;
        let lat = latent(vec![0.7; n], (0.36f64).ln());
        let z = reparameterize(&lat, 11).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let mean = z.iter().sum::<f64>() / n as f64;
        assert!((mean - 0.7).abs() < 3.0 * 0.6 / (n as f64).sqrt(), "{mean}");
    }

    #[test]
    fn kl_is_nonnegative_and_zero_at_prior() {
        let lat = latent(vec![0.0; 8], 0.0);
        let kl = kl_divergence(&lat).unwrap().to_scalar::<f64>().unwrap();
        assert!(kl.abs() < 1e-12);
        let lat = latent(vec![1.0, -2.0], -1.0);
        assert!(kl_divergence(&lat).unwrap().to_scalar::<f64>().unwrap() > 0.0);
    }

    fn tiny_config() -> VaeConfig {
        VaeConfig {
            input_len: 64,
            conv_channels: vec![8, 16, 16, 16],
            latent_channels: 4,
            latent_len: 4,
            ..VaeConfig::default()
        }
    }

    fn tone_signals(n: usize) -> Vec<TactileSignal> {
        (0..n)
            .map(|i| {
                let f = 1.0 + (i % 5) as f64;
                TactileSignal::mono(
                    500.0,
                    (0..64).map(|k| 0.5 * (2.0 * std::f64::consts::PI * f * k as f64 / 64.0).sin()).collect(),
                )
            })
            .collect()
    }

    #[test]
    fn training_bookkeeping_and_descent() {
        let sigs = tone_signals(10);
        let refs: Vec<&TactileSignal> = sigs.iter().collect();
        let cfg = VaeConfig {
            kl_weight: 0.0,
            ..tiny_config()
        };
        let opts = TrainOptions {
            steps: 200,
            batch_size: 10,
            learning_rate: 3e-3,
            warmup_steps: 10,
            seed: 4,
            ..Default::default()
        };
        let (_, hist) = train_vae(&refs, &cfg, &opts).unwrap();
        assert_eq!(hist.len(), 200);
        assert!(hist.rows.iter().all(|r| r[2] >= 0.0));
        let rec: Vec<f64> = hist.rows.iter().map(|r| r[1]).collect();
        assert!(rec[199] < rec[0], "{} vs {}", rec[199], rec[0]);

        let (_, again) = train_vae(&refs, &cfg, &opts).unwrap();
        assert_eq!(hist.rows.last(), again.rows.last());
    }

    #[test]
    fn checkpoint_round_trip() {
        let sigs = tone_signals(4);
        let refs: Vec<&TactileSignal> = sigs.iter().collect();
        let opts = TrainOptions {
            steps: 3,
            batch_size: 4,
            ..Default::default()
        };
        let (vae, hist) = train_vae(&refs, &tiny_config(), &opts).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("vae");
        let mut sc = Sidecar::new(CHECKPOINT_KIND, vae.config().clone(), derive_seed(opts.seed, "vae/init"));
        sc.final_losses.insert("loss".into(), hist.tail_mean(1)[0]);
        vae.save(&stem, &sc).unwrap();
        let (back, sc2) = TactileVae::load(&stem).unwrap();
        assert_eq!(sc, sc2);
        let x = signals_tensor(&refs, &Device::Cpu).unwrap();
        let a = vae.reconstruct(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = back.reconstruct(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            checkpoint::read_sidecar::<VaeConfig>(&stem, "classifier"),
            Err(ModelError::CheckpointMismatch(_))
        ));
    }
}
