//! Parameter storage and layers.
//!
//! Parameters live in a candle [`VarMap`] so they serialize to safetensors,
//! but are initialized from a seeded ChaCha8 stream rather than candle's
//! global RNG. Layers whose stock candle versions lack a backward pass,
//! compute wrong gradients on the CPU backend (convolutions) or keep state
//! outside the map (batch norm, layer norm, fused softmax) are implemented
//! here from differentiable primitives.

use std::sync::Mutex;

use candle_core::{CpuStorage, CustomOp1, CustomOp2, DType, Device, Layout, Module, Shape, Tensor, Var, D};
use candle_nn::{GroupNorm, Linear, VarMap};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use vtsyn_core::seed::rng_from_seed;

use crate::{ModelError, Result};

pub struct ParamStore {
    varmap: VarMap,
    rng: Mutex<ChaCha8Rng>,
    trainable: Mutex<Vec<(String, Var)>>,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            varmap: VarMap::new(),
            rng: Mutex::new(rng_from_seed(seed)),
            trainable: Mutex::new(Vec::new()),
            device: Device::Cpu,
        }
    }

    pub fn root(&self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Trainable variables in creation order.
    pub fn trainable_vars(&self) -> Vec<Var> {
        self.trainable.lock().unwrap().iter().map(|(_, v)| v.clone()).collect()
    }

    /// Trainable variables whose name starts with `prefix`.
    pub fn trainable_vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.trainable
            .lock()
            .unwrap()
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.trainable.lock().unwrap().iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        Ok(self.varmap.save(path)?)
    }

    /// Overwrites every registered variable from a safetensors file; all
    /// names must be present with matching shapes.
    pub fn load(&mut self, path: &std::path::Path) -> Result<()> {
        if !path.is_file() {
            return Err(ModelError::Io {
                path: path.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint weights not found"),
            });
        }
        self.varmap
            .load(path)
            .map_err(|e| ModelError::CheckpointMismatch(format!("{}: {e}", path.display())))
    }

    fn insert(&self, name: String, tensor: Tensor, trainable: bool) -> Result<Var> {
        let mut data = self.varmap.data().lock().unwrap();
        if data.contains_key(&name) {
            return Err(ModelError::Config(format!("parameter {name} registered twice")));
        }
        let var = Var::from_tensor(&tensor)?;
        data.insert(name.clone(), var.clone());
        if trainable {
            self.trainable.lock().unwrap().push((name, var.clone()));
        }
        Ok(var)
    }

    fn uniform_values(&self, n: usize, bound: f64) -> Vec<f32> {
        let mut rng = self.rng.lock().unwrap();
        (0..n)
            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) as f32 * bound as f32)
            .collect()
    }
}

/// Name prefix into a [`ParamStore`].
#[derive(Clone)]
pub struct Scope<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn pp(&self, name: impl AsRef<str>) -> Scope<'a> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    /// Trainable tensor with entries drawn from U(-bound, bound).
    pub fn uniform(&self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let t = Tensor::from_vec(self.store.uniform_values(n, bound), shape, &self.store.device)?;
        Ok(self.store.insert(self.path(name), t, true)?.as_tensor().clone())
    }

    pub fn constant(&self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let t = (Tensor::ones(shape, DType::F32, &self.store.device)? * value)?;
        Ok(self.store.insert(self.path(name), t, true)?.as_tensor().clone())
    }

    /// Saved but not optimized (running statistics).
    pub fn buffer(&self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let t = (Tensor::ones(shape, DType::F32, &self.store.device)? * value)?;
        self.store.insert(self.path(name), t, false)
    }
}

/// `count` elements along `dim`, starting at `start`, `stride` apart.
fn strided_narrow(x: &Tensor, dim: usize, start: usize, count: usize, stride: usize) -> candle_core::Result<Tensor> {
    let span = (count - 1) * stride + 1;
    let t = x.narrow(dim, start, span)?;
    if stride == 1 {
        return Ok(t);
    }
    let t = t.pad_with_zeros(dim, 0, count * stride - span)?;
    let mut dims = t.dims().to_vec();
    dims[dim] = count;
    dims.insert(dim + 1, stride);
    t.reshape(dims)?.narrow(dim + 1, 0, 1)?.squeeze(dim + 1)
}

fn out_len(len: usize, k: usize, stride: usize, padding: usize) -> candle_core::Result<usize> {
    if stride == 0 || len + 2 * padding < k {
        candle_core::bail!("conv of length {len} with kernel {k}, stride {stride}, padding {padding}");
    }
    Ok((len + 2 * padding - k) / stride + 1)
}

/// Cross-correlation of `x: (N, C, L)` with `w: (O, C, K)` as im2col and
/// a matmul, so the backward pass is built from narrow, cat and matmul.
pub fn conv1d_im2col(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> candle_core::Result<Tensor> {
    let (n, c, l) = x.dims3()?;
    let (o, c_w, k) = w.dims3()?;
    if c != c_w {
        candle_core::bail!("conv1d input has {c} channels, kernel expects {c_w}");
    }
    let l_out = out_len(l, k, stride, padding)?;
    let xp = x.pad_with_zeros(2, padding, padding)?;
    let taps = (0..k)
        .map(|j| strided_narrow(&xp, 2, j, l_out, stride))
        .collect::<candle_core::Result<Vec<_>>>()?;
    let cols = Tensor::stack(&taps, 2)?.reshape((n, c * k, l_out))?;
    w.reshape((o, c * k))?.broadcast_matmul(&cols)
}

/// 2D counterpart of [`conv1d_im2col`]: `x: (N, C, H, W)`, `w: (O, C, KH, KW)`.
pub fn conv2d_im2col(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> candle_core::Result<Tensor> {
    let (n, c, h, wd) = x.dims4()?;
    let (o, c_w, kh, kw) = w.dims4()?;
    if c != c_w {
        candle_core::bail!("conv2d input has {c} channels, kernel expects {c_w}");
    }
    let h_out = out_len(h, kh, stride, padding)?;
    let w_out = out_len(wd, kw, stride, padding)?;
    let xp = x.pad_with_zeros(2, padding, padding)?.pad_with_zeros(3, padding, padding)?;
    let mut taps = Vec::with_capacity(kh * kw);
    for i in 0..kh {
        let rows = strided_narrow(&xp, 2, i, h_out, stride)?;
        for j in 0..kw {
            taps.push(strided_narrow(&rows, 3, j, w_out, stride)?);
        }
    }
    let cols = Tensor::stack(&taps, 2)?.reshape((n, c * kh * kw, h_out * w_out))?;
    w.reshape((o, c * kh * kw))?
        .broadcast_matmul(&cols)?
        .reshape((n, o, h_out, w_out))
}

/// 1D convolution; weight layout `(c_out, c_in, k)`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv1d {
    pub fn new(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Self {
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }
}

impl Module for Conv1d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = conv1d_im2col(x, &self.weight, self.stride, self.padding)?;
        match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, (), 1))?),
            None => Ok(y),
        }
    }
}

/// 2D convolution; weight layout `(c_out, c_in, k, k)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = conv2d_im2col(x, &self.weight, self.stride, self.padding)?;
        match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, (), 1, 1))?),
            None => Ok(y),
        }
    }
}

pub fn conv1d(
    s: &Scope,
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<Conv1d> {
    conv1d_scaled(s, c_in, c_out, k, stride, padding, 1.0)
}

/// Conv with its default uniform init bound multiplied by `gain`.
pub fn conv1d_scaled(
    s: &Scope,
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    gain: f64,
) -> Result<Conv1d> {
    let bound = gain / ((c_in * k) as f64).sqrt();
    let w = s.uniform("weight", &[c_out, c_in, k], bound)?;
    let b = s.uniform("bias", &[c_out], bound)?;
    Ok(Conv1d::new(w, Some(b), stride, padding))
}

pub fn conv2d(
    s: &Scope,
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    bias: bool,
) -> Result<Conv2d> {
    let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
    let weight = s.uniform("weight", &[c_out, c_in, k, k], bound)?;
    let bias = if bias {
        Some(s.uniform("bias", &[c_out], bound)?)
    } else {
        None
    };
    Ok(Conv2d {
        weight,
        bias,
        stride,
        padding,
    })
}

pub fn linear(s: &Scope, d_in: usize, d_out: usize) -> Result<Linear> {
    let bound = 1.0 / (d_in as f64).sqrt();
    let w = s.uniform("weight", &[d_out, d_in], bound)?;
    let b = s.uniform("bias", &[d_out], bound)?;
    Ok(Linear::new(w, Some(b)))
}

pub fn group_norm(s: &Scope, groups: usize, channels: usize) -> Result<GroupNorm> {
    let w = s.constant("weight", &[channels], 1.0)?;
    let b = s.constant("bias", &[channels], 0.0)?;
    Ok(GroupNorm::new(w, b, channels, groups, 1e-5)?)
}

/// Layer norm over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(s: &Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: s.constant("weight", &[dim], 1.0)?,
            bias: s.constant("bias", &[dim], 0.0)?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        xc.broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)
    }
}

/// Batch norm over dim 1 of a rank ≥ 3 tensor, with running statistics
/// stored as non-trainable variables so they are checkpointed.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
    channels: usize,
    momentum: f64,
    eps: f64,
}

impl BatchNorm {
    pub fn new(s: &Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: s.constant("weight", &[channels], 1.0)?,
            bias: s.constant("bias", &[channels], 0.0)?,
            running_mean: s.buffer("running_mean", &[channels], 0.0)?,
            running_var: s.buffer("running_var", &[channels], 1.0)?,
            channels,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    fn bshape(&self, rank: usize) -> Vec<usize> {
        let mut shape = vec![1; rank];
        shape[1] = self.channels;
        shape
    }

    /// Training mode normalizes with batch statistics (biased variance) and
    /// updates the running estimates (unbiased variance).
    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        if dims.len() < 3 || dims[1] != self.channels {
            return Err(ModelError::Shape(format!(
                "batch norm over {} channels got {dims:?}",
                self.channels
            )));
        }
        let bshape = self.bshape(dims.len());
        let (mean, var) = if train {
            let n = dims[0];
            let per = dims[2..].iter().product::<usize>();
            let flat = x.transpose(0, 1)?.reshape((self.channels, n * per))?;
            let mean = flat.mean_keepdim(1)?;
            let var = flat.broadcast_sub(&mean)?.sqr()?.mean_keepdim(1)?;
            let count = (n * per) as f64;
            let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let m = self.momentum;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.flatten_all()?.detach() * m)?)?;
            let new_var =
                ((self.running_var.as_tensor() * (1.0 - m))? + (var.flatten_all()?.detach() * (m * unbiased))?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean.reshape(bshape.as_slice())?, var.reshape(bshape.as_slice())?)
        } else {
            (
                self.running_mean.as_tensor().reshape(bshape.as_slice())?,
                self.running_var.as_tensor().reshape(bshape.as_slice())?,
            )
        };
        let y = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.weight.reshape(bshape.as_slice())?)?
            .broadcast_add(&self.bias.reshape(bshape.as_slice())?)?;
        Ok(y)
    }
}

/// Transposed 1D convolution; weight layout `(c_in, c_out, k)`.
///
/// Computed as zero insertion between input samples, zero padding of
/// `k - 1 - padding` (plus `output_padding` on the right) and an ordinary
/// convolution with the flipped, channel-swapped kernel. Output length is
/// `(L - 1)·stride - 2·padding + k + output_padding`.
#[derive(Debug, Clone)]
pub struct ConvTranspose1d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
    output_padding: usize,
}

impl ConvTranspose1d {
    pub fn new(
        s: &Scope,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Self> {
        if padding + 1 > k || output_padding >= stride.max(1) {
            return Err(ModelError::Config(format!(
                "transposed conv k={k} padding={padding} output_padding={output_padding} stride={stride}"
            )));
        }
        let bound = 1.0 / ((c_out * k) as f64).sqrt();
        Ok(Self {
            weight: s.uniform("weight", &[c_in, c_out, k], bound)?,
            bias: s.uniform("bias", &[c_out], bound)?,
            stride,
            padding,
            output_padding,
        })
    }

    pub fn from_tensors(weight: Tensor, bias: Tensor, stride: usize, padding: usize, output_padding: usize) -> Self {
        Self {
            weight,
            bias,
            stride,
            padding,
            output_padding,
        }
    }
}

impl Module for ConvTranspose1d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (n, c, l) = x.dims3()?;
        let k = self.weight.dim(2)?;
        let s = self.stride;
        let dilated = if s > 1 {
            let zeros = Tensor::zeros((n, c, l, s - 1), x.dtype(), x.device())?;
            Tensor::cat(&[&x.unsqueeze(3)?, &zeros], 3)?
                .reshape((n, c, l * s))?
                .narrow(2, 0, (l - 1) * s + 1)?
        } else {
            x.clone()
        };
        let pad = k - 1 - self.padding;
        let padded = dilated.pad_with_zeros(2, pad, pad + self.output_padding)?;
        let rev: Vec<u32> = (0..k as u32).rev().collect();
        let rev = Tensor::from_vec(rev, k, x.device())?;
        let kernel = self.weight.transpose(0, 1)?.contiguous()?.index_select(&rev, 2)?;
        conv1d_im2col(&padded, &kernel, 1, 0)?.broadcast_add(&self.bias.reshape((1, (), 1))?)
    }
}

/// Nearest-neighbor upsampling along the last axis of `(N, C, L)`.
pub fn upsample_nearest1d(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (n, c, l) = x.dims3()?;
    Ok(x.unsqueeze(3)?
        .broadcast_as((n, c, l, factor))?
        .reshape((n, c, l * factor))?)
}

#[derive(Debug, Clone)]
pub struct MultiHeadSelfAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadSelfAttention {
    pub fn new(s: &Scope, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(ModelError::Config(format!("{heads} heads do not divide width {dim}")));
        }
        Ok(Self {
            q: linear(&s.pp("q"), dim, dim)?,
            k: linear(&s.pp("k"), dim, dim)?,
            v: linear(&s.pp("v"), dim, dim)?,
            out: linear(&s.pp("out"), dim, dim)?,
            heads,
        })
    }

    /// `x`: `(N, L, dim)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, l, dim) = x.dims3()?;
        let hd = dim / self.heads;
        let split = |t: Tensor| -> candle_core::Result<Tensor> {
            t.reshape((n, l, self.heads, hd))?.transpose(1, 2)?.contiguous()
        };
        let q = split((self.q.forward(x)? / (hd as f64).sqrt())?)?;
        let k = split(self.k.forward(x)?)?;
        let v = split(self.v.forward(x)?)?;
        let scores = q.matmul(&k.transpose(2, 3)?.contiguous()?)?;
        let attn = softmax_last_dim(&scores)?;
        let y = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((n, l, dim))?;
        Ok(self.out.forward(&y)?)
    }
}

/// Softmax over the last dimension with a fused backward pass
/// (`dx = y ⊙ (g − Σ g ⊙ y)`).
pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(SoftmaxLastDim)?)
}

struct SoftmaxLastDim;

struct SoftmaxGrad;

fn last_dim(layout: &Layout) -> usize {
    layout.dims().last().copied().unwrap_or(1).max(1)
}

fn contiguous<'a, T>(v: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    let (start, end) = layout
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("softmax needs contiguous input".into()))?;
    Ok(&v[start..end])
}

macro_rules! softmax_kernels {
    ($fwd:ident, $bwd:ident, $t:ty) => {
        fn $fwd(x: &[$t], dim: usize) -> Vec<$t> {
            let mut out = x.to_vec();
            for row in out.chunks_exact_mut(dim) {
                let m = row.iter().copied().fold(<$t>::NEG_INFINITY, <$t>::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    sum += *v;
                }
                let inv = 1.0 / sum;
                row.iter_mut().for_each(|v| *v *= inv);
            }
            out
        }

        fn $bwd(g: &[$t], y: &[$t], dim: usize) -> Vec<$t> {
            let mut out = Vec::with_capacity(g.len());
            for (gr, yr) in g.chunks_exact(dim).zip(y.chunks_exact(dim)) {
                let dot: $t = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                out.extend(gr.iter().zip(yr).map(|(a, b)| b * (a - dot)));
            }
            out
        }
    };
}

softmax_kernels!(softmax_rows_f32, softmax_grad_rows_f32, f32);
softmax_kernels!(softmax_rows_f64, softmax_grad_rows_f64, f64);

impl CustomOp1 for SoftmaxLastDim {
    fn name(&self) -> &'static str {
        "softmax-last-dim"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dim = last_dim(layout);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(softmax_rows_f32(contiguous(v, layout)?, dim)),
            CpuStorage::F64(v) => CpuStorage::F64(softmax_rows_f64(contiguous(v, layout)?, dim)),
            _ => candle_core::bail!("softmax supports f32 and f64"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = grad_res.contiguous()?;
        let y = res.contiguous()?;
        Ok(Some(g.apply_op2_no_bwd(&y, &SoftmaxGrad)?))
    }
}

impl CustomOp2 for SoftmaxGrad {
    fn name(&self) -> &'static str {
        "softmax-last-dim-grad"
    }

    fn cpu_fwd(
        &self,
        g: &CpuStorage,
        lg: &Layout,
        y: &CpuStorage,
        ly: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dim = last_dim(lg);
        let out = match (g, y) {
            (CpuStorage::F32(g), CpuStorage::F32(y)) => {
                CpuStorage::F32(softmax_grad_rows_f32(contiguous(g, lg)?, contiguous(y, ly)?, dim))
            }
            (CpuStorage::F64(g), CpuStorage::F64(y)) => {
                CpuStorage::F64(softmax_grad_rows_f64(contiguous(g, lg)?, contiguous(y, ly)?, dim))
            }
            _ => candle_core::bail!("softmax gradient supports matching f32 or f64"),
        };
        Ok((out, lg.shape().clone()))
    }
}

/// Sequence self-attention on channel-major input `(N, C, L)`:
/// transpose to length-major, layer norm, multi-head attention plus
/// residual, layer norm and feed-forward plus residual, transpose back.
#[derive(Debug, Clone)]
pub struct SelfAttentionBlock {
    norm1: LayerNorm,
    attn: MultiHeadSelfAttention,
    norm2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    channels: usize,
}

impl SelfAttentionBlock {
    pub fn new(s: &Scope, channels: usize, heads: usize, ffn_mult: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&s.pp("norm1"), channels)?,
            attn: MultiHeadSelfAttention::new(&s.pp("attn"), channels, heads)?,
            norm2: LayerNorm::new(&s.pp("norm2"), channels)?,
            ff1: linear(&s.pp("ff1"), channels, channels * ffn_mult)?,
            ff2: linear(&s.pp("ff2"), channels * ffn_mult, channels)?,
            channels,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _) = x.dims3()?;
        if c != self.channels {
            return Err(ModelError::Shape(format!(
                "attention block expects {} channels, got {c}",
                self.channels
            )));
        }
        let seq = x.transpose(1, 2)?.contiguous()?;
        let h = (self.attn.forward(&self.norm1.forward(&seq)?)? + &seq)?;
        let ff = self.ff2.forward(&self.ff1.forward(&self.norm2.forward(&h)?)?.gelu_erf()?)?;
        let out = (ff + h)?;
        Ok(out.transpose(1, 2)?.contiguous()?)
    }
}

/// Converts rows of equal length to an `(N, 1, L)` f32 tensor.
pub fn signals_to_tensor(rows: &[&[f64]], device: &Device) -> Result<Tensor> {
    let n = rows.len();
    let l = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != l) {
        return Err(ModelError::Shape("signals of unequal length".into()));
    }
    let data: Vec<f32> = rows.iter().flat_map(|r| r.iter().map(|&v| v as f32)).collect();
    Ok(Tensor::from_vec(data, (n, 1, l), device)?)
}

/// Standard normal f64 draws as a tensor of `dtype`.
pub fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    use rand_distr::{Distribution, StandardNormal};
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f32>().unwrap()
    }

    /// Central differences of `sum(f(x, w) * r)` against autograd, in f64.
    fn grad_error(f: &dyn Fn(&Tensor, &Tensor) -> Tensor, x_shape: &[usize], w_shape: &[usize]) -> f64 {
        let mut rng = rng_from_seed(17);
        let mut rand = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
        };
        let x = Var::from_tensor(&rand(x_shape)).unwrap();
        let w = Var::from_tensor(&rand(w_shape)).unwrap();
        let probe = f(x.as_tensor(), w.as_tensor());
        let r = rand(probe.dims());
        let objective = |a: &Tensor, b: &Tensor| (f(a, b) * &r).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        let grads = (probe * &r).unwrap().sum_all().unwrap().backward().unwrap();
        let mut worst: f64 = 0.0;
        for (is_x, var) in [(true, &x), (false, &w)] {
            let analytic = grads.get(var).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for i in 0..base.len() {
                let shifted = |d: f64| {
                    let mut v = base.clone();
                    v[i] += d;
                    Tensor::from_vec(v, var.dims(), &Device::Cpu).unwrap()
                };
                let (p, m) = (shifted(1e-6), shifted(-1e-6));
                let numeric = if is_x {
                    (objective(&p, w.as_tensor()) - objective(&m, w.as_tensor())) / 2e-6
                } else {
                    (objective(x.as_tensor(), &p) - objective(x.as_tensor(), &m)) / 2e-6
                };
                worst = worst.max((numeric - analytic[i]).abs());
            }
        }
        worst
    }

    #[test]
    fn conv1d_matches_candle_forward_and_finite_differences() {
        for (stride, padding, k) in [(1, 1, 3), (2, 1, 3), (2, 0, 1), (1, 0, 5)] {
            let f = |x: &Tensor, w: &Tensor| conv1d_im2col(x, w, stride, padding).unwrap();
            assert!(grad_error(&f, &[2, 5, 12], &[6, 5, k]) < 1e-6, "stride {stride} padding {padding}");
            let store = ParamStore::new(4);
            let x = store.root().uniform("x", &[2, 5, 12], 1.0).unwrap();
            let w = store.root().uniform("w", &[6, 5, k], 1.0).unwrap();
            let reference = x.conv1d(&w, padding, stride, 1, 1).unwrap();
            assert!(max_abs_diff(&conv1d_im2col(&x, &w, stride, padding).unwrap(), &reference) < 1e-5);
        }
    }

    #[test]
    fn conv2d_matches_candle_forward_and_finite_differences() {
        for (stride, padding) in [(1, 1), (2, 1)] {
            let f = |x: &Tensor, w: &Tensor| conv2d_im2col(x, w, stride, padding).unwrap();
            assert!(grad_error(&f, &[2, 3, 7, 6], &[4, 3, 3, 3]) < 1e-6);
            let store = ParamStore::new(5);
            let x = store.root().uniform("x", &[2, 3, 7, 6], 1.0).unwrap();
            let w = store.root().uniform("w", &[4, 3, 3, 3], 1.0).unwrap();
            let reference = x.conv2d(&w, padding, stride, 1, 1).unwrap();
            assert!(max_abs_diff(&conv2d_im2col(&x, &w, stride, padding).unwrap(), &reference) < 1e-5);
        }
    }

    #[test]
    fn transposed_conv_finite_differences() {
        let f = |x: &Tensor, w: &Tensor| {
            let bias = Tensor::zeros(w.dim(1).unwrap(), DType::F64, &Device::Cpu).unwrap();
            ConvTranspose1d::from_tensors(w.clone(), bias, 2, 1, 1).forward(x).unwrap()
        };
        assert!(grad_error(&f, &[2, 4, 6], &[4, 3, 3]) < 1e-6);
    }

    #[test]
    fn init_is_seeded() {
        let a = ParamStore::new(3);
        let b = ParamStore::new(3);
        let c = ParamStore::new(4);
        let ta = a.root().uniform("w", &[4, 5], 0.5).unwrap();
        let tb = b.root().uniform("w", &[4, 5], 0.5).unwrap();
        let tc = c.root().uniform("w", &[4, 5], 0.5).unwrap();
        assert_eq!(max_abs_diff(&ta, &tb), 0.0);
        assert!(max_abs_diff(&ta, &tc) > 0.0);
        let max = ta.abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f32>().unwrap();
        assert!(max <= 0.5);
        assert!(a.root().uniform("w", &[1], 1.0).is_err());
    }

    #[test]
    fn transposed_conv_matches_candle_forward() {
        let store = ParamStore::new(1);
        for (k, stride, pad, opad) in [(3, 2, 1, 1), (4, 2, 1, 0), (3, 1, 1, 0), (5, 3, 2, 2)] {
            let s = store.root().pp(format!("t{k}{stride}{pad}{opad}"));
            let layer = ConvTranspose1d::new(&s, 3, 5, k, stride, pad, opad).unwrap();
            let x = s.uniform("x", &[2, 3, 7], 1.0).unwrap();
            let ours = layer.forward(&x).unwrap();
            let reference = x
                .conv_transpose1d(&layer.weight, pad, opad, stride, 1, 1)
                .unwrap()
                .broadcast_add(&layer.bias.reshape((1, 5, 1)).unwrap())
                .unwrap();
            assert_eq!(ours.dims(), reference.dims());
            assert_eq!(ours.dim(2).unwrap(), (7 - 1) * stride + k + opad - 2 * pad);
            assert!(max_abs_diff(&ours, &reference) < 1e-5);
        }
    }

    #[test]
    fn transposed_conv_has_gradients() {
        let store = ParamStore::new(2);
        let layer = ConvTranspose1d::new(&store.root(), 2, 3, 3, 2, 1, 1).unwrap();
        let x = Tensor::ones((1, 2, 4), DType::F32, &Device::Cpu).unwrap();
        let loss = layer.forward(&x).unwrap().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        for v in store.trainable_vars() {
            assert!(grads.get(&v).is_some());
        }
    }

    #[test]
    fn batch_norm_train_and_eval() {
        let store = ParamStore::new(5);
        let bn = BatchNorm::new(&store.root(), 2).unwrap();
        let x = store.root().uniform("x", &[4, 2, 8], 3.0).unwrap();
        let y = bn.forward_t(&x, true).unwrap();
        let per_channel = y.transpose(0, 1).unwrap().reshape((2, 32)).unwrap();
        let mean = per_channel.mean(1).unwrap().to_vec1::<f32>().unwrap();
        assert!(mean.iter().all(|m| m.abs() < 1e-5));
        // Running stats moved toward the batch stats and are checkpointed.
        let rm = bn.running_mean.as_tensor().to_vec1::<f32>().unwrap();
        assert!(rm.iter().any(|v| v.abs() > 0.0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bn.safetensors");
        store.save(&path).unwrap();
        let mut other = ParamStore::new(99);
        let bn2 = BatchNorm::new(&other.root(), 2).unwrap();
        other.root().uniform("x", &[4, 2, 8], 3.0).unwrap();
        other.load(&path).unwrap();
        let a = bn.forward_t(&x, false).unwrap();
        let b = bn2.forward_t(&x, false).unwrap();
        assert_eq!(max_abs_diff(&a, &b), 0.0);
        // Constant input: zero variance is guarded by eps.
        let z = Tensor::zeros((3, 2, 5), DType::F32, &Device::Cpu).unwrap();
        let out = bn.forward_t(&z, true).unwrap().to_vec3::<f32>().unwrap();
        assert!(out.iter().flatten().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn upsample_repeats_samples() {
        let x = Tensor::from_vec(vec![1f32, 2., 3.], (1, 1, 3), &Device::Cpu).unwrap();
        let y = upsample_nearest1d(&x, 2).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(y, vec![1., 1., 2., 2., 3., 3.]);
    }

    fn zero_out(store: &ParamStore, prefixes: &[&str]) {
        for (name, var) in store.varmap.data().lock().unwrap().iter() {
            if prefixes.iter().any(|p| name.starts_with(p)) {
                var.set(&var.as_tensor().zeros_like().unwrap()).unwrap();
            }
        }
    }

    #[test]
    fn attention_block_shape_and_residual_identity() {
        let store = ParamStore::new(8);
        let block = SelfAttentionBlock::new(&store.root().pp("blk"), 64, 4, 2).unwrap();
        let x = store.root().uniform("x", &[2, 64, 256], 1.0).unwrap();
        let y = block.forward(&x).unwrap();
        assert_eq!(y.dims(), &[2, 64, 256]);
        assert!(max_abs_diff(&x, &y) > 1e-3);
        let bad = Tensor::zeros((1, 32, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(block.forward(&bad), Err(ModelError::Shape(_))));
        zero_out(&store, &["blk.attn", "blk.ff"]);
        let y = block.forward(&x).unwrap();
        assert_eq!(max_abs_diff(&x, &y), 0.0);
    }

    #[test]
    fn fused_softmax_matches_reference() {
        let x = Var::from_tensor(&Tensor::randn(0f64, 3.0, (3, 2, 7), &Device::Cpu).unwrap()).unwrap();
        let w = Tensor::randn(0f64, 1.0, (3, 2, 7), &Device::Cpu).unwrap();
        let ours = softmax_last_dim(x.as_tensor()).unwrap();
        let reference = candle_nn::ops::softmax(x.as_tensor(), D::Minus1).unwrap();
        let diff = (&ours - &reference).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-14);
        let g1 = ours.mul(&w).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = reference.mul(&w).unwrap().sum_all().unwrap().backward().unwrap();
        let (a, b) = (g1.get(x.as_tensor()).unwrap(), g2.get(x.as_tensor()).unwrap());
        let diff = (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-14);
        // Non-contiguous input goes through a copy.
        let t = x.as_tensor().transpose(1, 2).unwrap();
        let sums = softmax_last_dim(&t).unwrap().sum(D::Minus1).unwrap().flatten_all().unwrap();
        assert!(sums.to_vec1::<f64>().unwrap().iter().all(|s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn attention_block_is_per_example() {
        let store = ParamStore::new(9);
        let block = SelfAttentionBlock::new(&store.root().pp("blk"), 16, 4, 2).unwrap();
        let x = store.root().uniform("x", &[3, 16, 10], 1.0).unwrap();
        let y = block.forward(&x).unwrap();
        let perm = Tensor::from_vec(vec![2u32, 0, 1], 3, &Device::Cpu).unwrap();
        let yp = block.forward(&x.index_select(&perm, 0).unwrap()).unwrap();
        assert!(max_abs_diff(&yp, &y.index_select(&perm, 0).unwrap()) < 1e-6);
    }
}
