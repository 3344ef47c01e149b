//! Image backbones producing the 256-d condition vector.
//!
//! Two backbones share one interface:
//!
//! - `small-conv`: four stride-2 conv blocks, global average pooling and a
//!   linear projection. Trained from scratch jointly with the denoiser, so
//!   it lives in the denoiser's parameter store.
//! - `residual-18-pretrained`: ResNet-18 with its final layer replaced by a
//!   512 → `out_dim` projection, loaded from a safetensors file that uses
//!   torchvision parameter names. It is used frozen.
//!
//! Images are resized (nearest neighbour) to the backbone's input size and
//! standardized per channel with the ImageNet constants
//! [`IMAGENET_MEAN`] / [`IMAGENET_STD`].

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device, Module, ModuleT, Tensor};
use candle_nn::{Conv2d, Linear, VarBuilder};
use serde::{Deserialize, Serialize};
use vtsyn_core::frame::FrameImage;

use crate::nn::{conv2d, linear, BatchNorm, Scope};
use crate::{ModelError, Result};

pub const FEATURE_DIM: usize = 256;
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];
pub const RESNET_INPUT_SIZE: usize = 224;
pub const SMALL_CONV_INPUT_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneKind {
    #[serde(rename = "small-conv")]
    SmallConv,
    #[serde(rename = "residual-18-pretrained")]
    Residual18Pretrained,
}

impl BackboneKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::SmallConv => "small-conv",
            Self::Residual18Pretrained => "residual-18-pretrained",
        }
    }

    pub fn default_input_size(self) -> usize {
        match self {
            Self::SmallConv => SMALL_CONV_INPUT_SIZE,
            Self::Residual18Pretrained => RESNET_INPUT_SIZE,
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackboneKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small-conv" => Ok(Self::SmallConv),
            "residual-18-pretrained" | "resnet18" => Ok(Self::Residual18Pretrained),
            other => Err(ModelError::Config(format!(
                "unknown backbone '{other}' (expected small-conv or residual-18-pretrained)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionConfig {
    pub backbone: BackboneKind,
    pub out_dim: usize,
    /// Square input side; `None` uses the backbone default.
    #[serde(default)]
    pub input_size: Option<usize>,
    pub small_conv_channels: Vec<usize>,
    /// Safetensors file for the residual backbone.
    #[serde(default)]
    pub weights_path: Option<PathBuf>,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::SmallConv,
            out_dim: FEATURE_DIM,
            input_size: None,
            small_conv_channels: vec![16, 32, 64, 128],
            weights_path: None,
        }
    }
}

impl VisionConfig {
    pub fn input_size(&self) -> usize {
        self.input_size.unwrap_or(self.backbone.default_input_size())
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_dim == 0 || self.input_size() < 8 {
            return Err(ModelError::Config(format!(
                "out_dim {} and input size {} must be positive (size ≥ 8)",
                self.out_dim,
                self.input_size()
            )));
        }
        if self.backbone == BackboneKind::SmallConv && self.small_conv_channels.is_empty() {
            return Err(ModelError::Config("small-conv needs at least one block".into()));
        }
        Ok(())
    }
}

/// Condition vector; always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    values: Vec<f32>,
}

impl FeatureVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Data("non-finite feature value".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn l2_distance(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

pub struct SmallConv {
    blocks: Vec<(crate::nn::Conv2d, BatchNorm)>,
    proj: Linear,
}

impl SmallConv {
    pub fn new(s: &Scope, channels: &[usize], out_dim: usize) -> Result<Self> {
        let mut blocks = Vec::with_capacity(channels.len());
        let mut c_in = 3;
        for (i, &c) in channels.iter().enumerate() {
            let b = s.pp(format!("block{i}"));
            blocks.push((conv2d(&b.pp("conv"), c_in, c, 3, 2, 1, false)?, BatchNorm::new(&b.pp("bn"), c)?));
            c_in = c;
        }
        Ok(Self {
            blocks,
            proj: linear(&s.pp("proj"), c_in, out_dim)?,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut h = x.clone();
        for (conv, bn) in &self.blocks {
            h = bn.forward_t(&conv.forward(&h)?, train)?.relu()?;
        }
        let pooled = h.mean(3)?.mean(2)?;
        Ok(self.proj.forward(&pooled)?)
    }
}

struct BasicBlock {
    conv1: Conv2d,
    bn1: candle_nn::BatchNorm,
    conv2: Conv2d,
    bn2: candle_nn::BatchNorm,
    downsample: Option<(Conv2d, candle_nn::BatchNorm)>,
}

fn frozen_conv(vb: VarBuilder, c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize) -> Result<Conv2d> {
    let cfg = candle_nn::Conv2dConfig {
        padding,
        stride,
        ..Default::default()
    };
    Ok(candle_nn::conv2d_no_bias(c_in, c_out, k, cfg, vb)?)
}

fn frozen_bn(vb: VarBuilder, c: usize) -> Result<candle_nn::BatchNorm> {
    Ok(candle_nn::batch_norm(c, 1e-5, vb)?)
}

impl BasicBlock {
    fn new(vb: VarBuilder, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        let downsample = if stride != 1 || c_in != c_out {
            Some((
                frozen_conv(vb.pp("downsample.0"), c_in, c_out, 1, stride, 0)?,
                frozen_bn(vb.pp("downsample.1"), c_out)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: frozen_conv(vb.pp("conv1"), c_in, c_out, 3, stride, 1)?,
            bn1: frozen_bn(vb.pp("bn1"), c_out)?,
            conv2: frozen_conv(vb.pp("conv2"), c_out, c_out, 3, 1, 1)?,
            bn2: frozen_bn(vb.pp("bn2"), c_out)?,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.bn1.forward_t(&self.conv1.forward(x)?, false)?.relu()?;
        let h = self.bn2.forward_t(&self.conv2.forward(&h)?, false)?;
        let skip = match &self.downsample {
            Some((conv, bn)) => bn.forward_t(&conv.forward(x)?, false)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

/// ResNet-18 in inference mode with a replaced final projection.
pub struct Resnet18 {
    conv1: Conv2d,
    bn1: candle_nn::BatchNorm,
    layers: Vec<BasicBlock>,
    fc: Linear,
}

impl Resnet18 {
    pub fn new(vb: VarBuilder, out_dim: usize) -> Result<Self> {
        let mut layers = Vec::with_capacity(8);
        let mut c_in = 64;
        for (i, &c) in [64, 128, 256, 512].iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            let lvb = vb.pp(format!("layer{}", i + 1));
            layers.push(BasicBlock::new(lvb.pp("0"), c_in, c, stride)?);
            layers.push(BasicBlock::new(lvb.pp("1"), c, c, 1)?);
            c_in = c;
        }
        Ok(Self {
            conv1: frozen_conv(vb.pp("conv1"), 3, 64, 7, 2, 3)?,
            bn1: frozen_bn(vb.pp("bn1"), 64)?,
            layers,
            fc: candle_nn::linear(512, out_dim, vb.pp("fc"))?,
        })
    }

    /// Loads torchvision-named weights whose `fc` maps 512 → `out_dim`.
    pub fn load(path: &Path, out_dim: usize, device: &Device) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            ModelError::BackboneUnavailable(format!(
                "cannot read pretrained weights {}: {e}; run offline with the small-conv backbone",
                path.display()
            ))
        })?;
        let vb = VarBuilder::from_buffered_safetensors(bytes, DType::F32, device)
            .map_err(|e| ModelError::CheckpointMismatch(format!("{}: {e}", path.display())))?;
        Self::new(vb, out_dim).map_err(|e| ModelError::CheckpointMismatch(format!("{}: {e}", path.display())))
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.bn1.forward_t(&self.conv1.forward(x)?, false)?.relu()?;
        // Max pool k3 s2 p1; zero padding is exact after the ReLU.
        let h = h.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        let mut h = h.max_pool2d_with_stride(3, 2)?;
        for block in &self.layers {
            h = block.forward(&h)?;
        }
        let pooled = h.mean(3)?.mean(2)?;
        Ok(self.fc.forward(&pooled)?)
    }
}

pub enum VisionEncoder {
    SmallConv(SmallConv),
    Residual18(Resnet18),
}

/// Builds the backbone. Small-conv parameters are created under `s`;
/// the residual backbone needs `cfg.weights_path`.
pub fn load_backbone(cfg: &VisionConfig, s: &Scope) -> Result<(VisionEncoder, usize)> {
    cfg.validate()?;
    let enc = match cfg.backbone {
        BackboneKind::SmallConv => VisionEncoder::SmallConv(SmallConv::new(s, &cfg.small_conv_channels, cfg.out_dim)?),
        BackboneKind::Residual18Pretrained => {
            let path = cfg.weights_path.as_ref().ok_or_else(|| {
                ModelError::BackboneUnavailable(
                    "no pretrained residual-18 weights configured; run offline with the small-conv backbone".into(),
                )
            })?;
            VisionEncoder::Residual18(Resnet18::load(path, cfg.out_dim, s.device())?)
        }
    };
    Ok((enc, cfg.out_dim))
}

impl VisionEncoder {
    pub fn kind(&self) -> BackboneKind {
        match self {
            Self::SmallConv(_) => BackboneKind::SmallConv,
            Self::Residual18(_) => BackboneKind::Residual18Pretrained,
        }
    }

    /// Whether gradients flow into the backbone during denoiser training.
    pub fn is_trainable(&self) -> bool {
        matches!(self, Self::SmallConv(_))
    }

    /// `x`: preprocessed `(N, 3, H, W)`; returns `(N, out_dim)`.
    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            Self::SmallConv(m) => m.forward_t(x, train),
            Self::Residual18(m) => Ok(m.forward(x)?.detach()),
        }
    }

    /// Eval-mode features for a batch of images, `(N, out_dim)`.
    pub fn features(&self, images: &[&FrameImage], input_size: usize, device: &Device) -> Result<Tensor> {
        let mut outs = Vec::new();
        for chunk in images.chunks(32) {
            let x = images_to_tensor(chunk, input_size, device)?;
            outs.push(self.forward_t(&x, false)?);
        }
        Ok(Tensor::cat(&outs, 0)?)
    }
}

/// Resizes and standardizes images into `(N, 3, size, size)` f32.
pub fn images_to_tensor(images: &[&FrameImage], size: usize, device: &Device) -> Result<Tensor> {
    if images.is_empty() {
        return Err(ModelError::Data("no images".into()));
    }
    let mean = Tensor::new(&IMAGENET_MEAN, device)?.reshape((1, 3, 1, 1))?;
    let std = Tensor::new(&IMAGENET_STD, device)?.reshape((1, 3, 1, 1))?;
    let mut batch = Vec::with_capacity(images.len());
    for img in images {
        let t = Tensor::from_vec(img.to_chw(), (1, 3, img.height(), img.width()), device)?;
        let t = if img.height() != size || img.width() != size {
            t.interpolate2d(size, size)?
        } else {
            t
        };
        batch.push(t);
    }
    let x = Tensor::cat(&batch, 0)?;
    Ok(x.broadcast_sub(&mean)?.broadcast_div(&std)?)
}

pub fn extract_features(
    image: &FrameImage,
    encoder: &VisionEncoder,
    input_size: usize,
    device: &Device,
) -> Result<FeatureVector> {
    let f = encoder.features(&[image], input_size, device)?;
    FeatureVector::new(f.flatten_all()?.to_vec1::<f32>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_nn::VarMap;
    use vtsyn_core::corpus::{render_texture_image, LightCondition, RoadClass};

    fn texture(class: RoadClass, light: LightCondition, seed: u64, size: usize) -> FrameImage {
        render_texture_image(class, light, seed, size, size).unwrap().image
    }

    #[test]
    fn backbone_names_parse() {
        assert_eq!("small-conv".parse::<BackboneKind>().unwrap(), BackboneKind::SmallConv);
        assert_eq!(
            "residual-18-pretrained".parse::<BackboneKind>().unwrap(),
            BackboneKind::Residual18Pretrained
        );
        assert!(matches!("vgg".parse::<BackboneKind>(), Err(ModelError::Config(_))));
        let json = serde_json::to_string(&BackboneKind::SmallConv).unwrap();
        assert_eq!(json, "\"small-conv\"");
    }

    #[test]
    fn small_conv_dimension_and_determinism() {
        let store = ParamStore::new(1);
        let cfg = VisionConfig::default();
        let (enc, dim) = load_backbone(&cfg, &store.root().pp("vision")).unwrap();
        assert_eq!(dim, 256);
        let img = texture(RoadClass::Gravel, LightCondition::Day, 3, 64);
        let a = extract_features(&img, &enc, cfg.input_size(), store.device()).unwrap();
        let b = extract_features(&img, &enc, cfg.input_size(), store.device()).unwrap();
        assert_eq!(a.len(), 256);
        assert_eq!(a, b);
        // Global pooling keeps the dimension at other resolutions.
        let big = texture(RoadClass::Gravel, LightCondition::Day, 3, 96);
        assert_eq!(extract_features(&big, &enc, 96, store.device()).unwrap().len(), 256);
    }

    #[test]
    fn day_and_night_differ() {
        let store = ParamStore::new(2);
        let cfg = VisionConfig::default();
        let (enc, _) = load_backbone(&cfg, &store.root()).unwrap();
        for class in RoadClass::ALL {
            let day = texture(class, LightCondition::Day, 9, 64);
            let night = texture(class, LightCondition::Night, 9, 64);
            let fd = extract_features(&day, &enc, 64, store.device()).unwrap();
            let fnight = extract_features(&night, &enc, 64, store.device()).unwrap();
            assert!(fd.l2_distance(&fnight) > 0.0, "{class}");
        }
    }

    #[test]
    fn missing_residual_weights_point_to_small_conv() {
        let store = ParamStore::new(0);
        let cfg = VisionConfig {
            backbone: BackboneKind::Residual18Pretrained,
            ..Default::default()
        };
        match load_backbone(&cfg, &store.root()) {
            Err(ModelError::BackboneUnavailable(msg)) => assert!(msg.contains("small-conv")),
            _ => panic!("expected BackboneUnavailable"),
        }
        let cfg = VisionConfig {
            weights_path: Some("/nonexistent/resnet18.safetensors".into()),
            ..cfg
        };
        assert!(matches!(load_backbone(&cfg, &store.root()), Err(ModelError::BackboneUnavailable(_))));
    }

    #[test]
    fn residual_backbone_loads_torchvision_names() {
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, &Device::Cpu);
        Resnet18::new(vb, 256).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r18.safetensors");
        varmap.save(&path).unwrap();
        {
            let data = varmap.data().lock().unwrap();
            assert!(data.contains_key("layer3.0.downsample.1.running_var"));
            assert_eq!(data["fc.weight"].dims(), &[256, 512]);
        }
        let store = ParamStore::new(0);
        let cfg = VisionConfig {
            backbone: BackboneKind::Residual18Pretrained,
            weights_path: Some(path.clone()),
            ..Default::default()
        };
        let (enc, dim) = load_backbone(&cfg, &store.root()).unwrap();
        assert_eq!((dim, cfg.input_size()), (256, 224));
        assert!(!enc.is_trainable());
        let img = texture(RoadClass::Brick, LightCondition::Day, 1, 64);
        let f = extract_features(&img, &enc, cfg.input_size(), store.device()).unwrap();
        assert_eq!(f.len(), 256);

        // A projection of the wrong width is a checkpoint mismatch.
        assert!(matches!(
            Resnet18::load(&path, 128, &Device::Cpu),
            Err(ModelError::CheckpointMismatch(_))
        ));
    }

    #[test]
    fn preprocessing_standardizes_channels() {
        let img = FrameImage::new(2, 2, [0.485f32, 0.456, 0.406].repeat(4)).unwrap();
        let x = images_to_tensor(&[&img], 4, &Device::Cpu).unwrap();
        assert_eq!(x.dims(), &[1, 3, 4, 4]);
        let v = x.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|v| v.abs() < 1e-6));
    }
}
