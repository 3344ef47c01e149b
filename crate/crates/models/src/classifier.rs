//! 1D CNN road classifier. Its 128-d penultimate activations double as the
//! embedding space for FID.

use std::path::Path;

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::Linear;
use serde::{Deserialize, Serialize};
use vtsyn_core::corpus::RoadClass;
use vtsyn_core::seed::derive_seed;
use vtsyn_core::signal::TactileSignal;

use crate::checkpoint::{self, Sidecar};
use crate::nn::{conv1d, linear, BatchNorm, Conv1d, ParamStore};
use crate::tactile_vae::signals_tensor;
use crate::train::{step_optimizer, Batches, LossHistory, TrainOptions};
use crate::{ModelError, Result};

pub const CHECKPOINT_KIND: &str = "classifier";
pub const NUM_CLASSES: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub input_len: usize,
    pub input_channels: usize,
    pub conv_channels: Vec<usize>,
    pub kernels: Vec<usize>,
    pub strides: Vec<usize>,
    pub embed_dim: usize,
    pub num_classes: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            input_len: 1024,
            input_channels: 1,
            conv_channels: vec![16, 32, 64],
            kernels: vec![7, 5, 5],
            strides: vec![4, 2, 2],
            embed_dim: 128,
            num_classes: NUM_CLASSES,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.conv_channels.len();
        if n == 0 || self.kernels.len() != n || self.strides.len() != n {
            return Err(ModelError::Config("conv widths, kernels and strides differ in length".into()));
        }
        if self.kernels.iter().any(|k| k % 2 == 0) || self.strides.contains(&0) {
            return Err(ModelError::Config("kernels must be odd and strides positive".into()));
        }
        if self.num_classes < 2 || self.embed_dim == 0 {
            return Err(ModelError::Config("need ≥ 2 classes and a positive embedding width".into()));
        }
        Ok(())
    }
}

pub struct RoadClassifier {
    cfg: ClassifierConfig,
    store: ParamStore,
    blocks: Vec<(Conv1d, BatchNorm)>,
    embed: Linear,
    head: Linear,
}

impl RoadClassifier {
    pub fn new(cfg: &ClassifierConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(seed);
        let root = store.root();
        let mut blocks = Vec::new();
        let mut c_in = cfg.input_channels;
        for (i, &c) in cfg.conv_channels.iter().enumerate() {
            let s = root.pp(format!("block{i}"));
            let k = cfg.kernels[i];
            blocks.push((
                conv1d(&s.pp("conv"), c_in, c, k, cfg.strides[i], k / 2)?,
                BatchNorm::new(&s.pp("bn"), c)?,
            ));
            c_in = c;
        }
        let embed = linear(&root.pp("embed"), c_in, cfg.embed_dim)?;
        let head = linear(&root.pp("head"), cfg.embed_dim, cfg.num_classes)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            blocks,
            embed,
            head,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, l) = x.dims3()?;
        if c != self.cfg.input_channels || l != self.cfg.input_len {
            return Err(ModelError::Shape(format!(
                "classifier expects ({}, {}), got ({c}, {l})",
                self.cfg.input_channels, self.cfg.input_len
            )));
        }
        Ok(())
    }

    /// Penultimate activations `(N, embed_dim)`.
    pub fn embed_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (conv, bn) in &self.blocks {
            h = bn.forward_t(&conv.forward(&h)?, train)?.relu()?;
        }
        Ok(self.embed.forward(&h.mean(D::Minus1)?)?.relu()?)
    }

    pub fn logits_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.head.forward(&self.embed_t(x, train)?)?)
    }

    fn batched(&self, signals: &[&TactileSignal], f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Vec<Vec<f64>>> {
        let mut rows = Vec::with_capacity(signals.len());
        for chunk in signals.chunks(128) {
            let x = signals_tensor(chunk, self.device())?;
            rows.extend(f(&x)?.to_dtype(DType::F64)?.to_vec2::<f64>()?);
        }
        Ok(rows)
    }

    /// Eval-mode embeddings, one row per signal.
    pub fn embed(&self, signals: &[&TactileSignal]) -> Result<Vec<Vec<f64>>> {
        self.batched(signals, |x| self.embed_t(x, false))
    }

    /// Eval-mode class probabilities, one row per signal.
    pub fn probabilities(&self, signals: &[&TactileSignal]) -> Result<Vec<Vec<f64>>> {
        let logits = self.batched(signals, |x| self.logits_t(x, false))?;
        Ok(logits.iter().map(|l| softmax(l)).collect())
    }

    pub fn classify(&self, signal: &TactileSignal) -> Result<Prediction> {
        let probs = self.probabilities(&[signal])?.remove(0);
        let idx = argmax(&probs);
        let class = RoadClass::from_index(idx)
            .ok_or_else(|| ModelError::Data(format!("class index {idx} outside the road classes")))?;
        Ok(Prediction {
            class,
            probabilities: probs,
        })
    }

    pub fn predict(&self, signals: &[&TactileSignal]) -> Result<Vec<usize>> {
        Ok(self.probabilities(signals)?.iter().map(|p| argmax(p)).collect())
    }

    pub fn save(&self, stem: &Path, sidecar: &Sidecar<ClassifierConfig>) -> Result<()> {
        checkpoint::save(&self.store, stem, sidecar)
    }

    pub fn load(stem: &Path) -> Result<(Self, Sidecar<ClassifierConfig>)> {
        let sidecar: Sidecar<ClassifierConfig> = checkpoint::read_sidecar(stem, CHECKPOINT_KIND)?;
        let mut model = Self::new(&sidecar.config, sidecar.seed)?;
        model.store.load(&checkpoint::weights_path(stem))?;
        Ok((model, sidecar))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: RoadClass,
    pub probabilities: Vec<f64>,
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy training on labelled signals.
pub fn train_classifier(
    signals: &[&TactileSignal],
    labels: &[usize],
    cfg: &ClassifierConfig,
    opts: &TrainOptions,
) -> Result<(RoadClassifier, LossHistory)> {
    opts.validate()?;
    if signals.len() != labels.len() || signals.is_empty() {
        return Err(ModelError::Data(format!("{} signals for {} labels", signals.len(), labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= cfg.num_classes) {
        return Err(ModelError::Data(format!("label {bad} outside {} classes", cfg.num_classes)));
    }
    let mut present: Vec<usize> = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(ModelError::Data("training labels cover fewer than two classes".into()));
    }
    let model = RoadClassifier::new(cfg, derive_seed(opts.seed, "classifier/init"))?;
    let data = signals_tensor(signals, model.device())?;
    let targets = Tensor::from_vec(
        labels.iter().map(|&l| l as u32).collect::<Vec<_>>(),
        labels.len(),
        model.device(),
    )?;
    let mut opt = opts.optimizer(model.store.trainable_vars())?;
    let mut batches = Batches::new(signals.len(), opts.batch_size, derive_seed(opts.seed, "classifier/batches"));
    let mut history = LossHistory::new(&["loss", "accuracy"]);
    for step in 0..opts.steps {
        let idx: Vec<u32> = batches.next_batch().into_iter().map(|i| i as u32).collect();
        let idx = Tensor::from_vec(idx.clone(), idx.len(), model.device())?;
        let x = data.index_select(&idx, 0)?;
        let y = targets.index_select(&idx, 0)?;
        let logits = model.logits_t(&x, true)?;
        let loss = candle_nn::loss::cross_entropy(&logits, &y)?;
        let correct = logits.argmax(D::Minus1)?.eq(&y)?.to_dtype(DType::F64)?.mean_all()?;
        history.push(vec![loss.to_scalar::<f32>()? as f64, correct.to_scalar::<f64>()?])?;
        step_optimizer(&mut opt, opts, step, &loss)?;
        if (step + 1) % opts.log_every == 0 {
            log::debug!("classifier step {} loss {:.4}", step + 1, history.rows[step][0]);
        }
    }
    Ok((model, history))
}

/// Accuracy plus macro-averaged precision, recall and F1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

impl ClassificationMetrics {
    pub fn from_predictions(truth: &[usize], predicted: &[usize], num_classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() || truth.is_empty() {
            return Err(ModelError::Data(format!(
                "{} labels for {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut confusion = vec![vec![0u64; num_classes]; num_classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= num_classes || p >= num_classes {
                return Err(ModelError::Data(format!("label pair ({t}, {p}) outside {num_classes} classes")));
            }
            confusion[t][p] += 1;
        }
        let total = truth.len() as f64;
        let correct: u64 = (0..num_classes).map(|k| confusion[k][k]).sum();
        // Macro average over classes present in the ground truth; an empty
        // prediction column gives precision 0 for that class.
        let mut p_sum = 0.0;
        let mut r_sum = 0.0;
        let mut f_sum = 0.0;
        let mut classes = 0;
        for k in 0..num_classes {
            let support: u64 = confusion[k].iter().sum();
            if support == 0 {
                continue;
            }
            let predicted_k: u64 = (0..num_classes).map(|j| confusion[j][k]).sum();
            let tp = confusion[k][k] as f64;
            let precision = if predicted_k > 0 { tp / predicted_k as f64 } else { 0.0 };
            let recall = tp / support as f64;
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            p_sum += precision;
            r_sum += recall;
            f_sum += f1;
            classes += 1;
        }
        let c = classes as f64;
        Ok(Self {
            accuracy: correct as f64 / total,
            precision: p_sum / c,
            recall: r_sum / c,
            f1: f_sum / c,
            confusion,
        })
    }
}

/// Classifies generated signals with a classifier trained on real data.
pub fn evaluate_generated(
    model: &RoadClassifier,
    generated: &[&TactileSignal],
    true_labels: &[usize],
) -> Result<ClassificationMetrics> {
    let predicted = model.predict(generated)?;
    ClassificationMetrics::from_predictions(true_labels, &predicted, model.cfg.num_classes)
}
