//! Shared training plumbing: options, minibatch order, learning-rate
//! schedule and loss bookkeeping.

use std::io::Write;

use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use candle_core::Var;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vtsyn_core::seed::rng_from_seed;

use crate::{ModelError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Linear warmup length; the rate then follows a cosine down to
    /// `final_lr_fraction · learning_rate`.
    pub warmup_steps: usize,
    pub final_lr_fraction: f64,
    pub seed: u64,
    /// Loss rows are written every `log_every` steps.
    pub log_every: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            warmup_steps: 50,
            final_lr_fraction: 0.1,
            seed: 0,
            log_every: 10,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(ModelError::Config(format!(
                "steps {}, batch size {}, log interval {} must be positive",
                self.steps, self.batch_size, self.log_every
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(ModelError::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.steps - self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.learning_rate * (self.final_lr_fraction + (1.0 - self.final_lr_fraction) * cos)
    }

    pub fn optimizer(&self, vars: Vec<Var>) -> Result<AdamW> {
        Ok(AdamW::new(
            vars,
            ParamsAdamW {
                lr: self.lr_at(0),
                weight_decay: self.weight_decay,
                ..Default::default()
            },
        )?)
    }
}

/// Reshuffled passes over `0..n`, drawn in fixed-size batches.
pub struct Batches {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl Batches {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self {
            order,
            pos: 0,
            batch: batch.min(n).max(1),
            rng,
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let b = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        b
    }
}

/// Per-step loss components; the first column is the optimized total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl LossHistory {
    pub fn new(names: &[&str]) -> Self {
        Self {
            names: names.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    /// Records one step, failing on a non-finite total.
    pub fn push(&mut self, values: Vec<f64>) -> Result<()> {
        let step = self.rows.len();
        if !values[0].is_finite() {
            return Err(ModelError::TrainingDiverged { step, loss: values[0] });
        }
        self.rows.push(values);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn totals(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r[0]).collect()
    }

    /// Mean of each component over the last `n` steps.
    pub fn tail_mean(&self, n: usize) -> Vec<f64> {
        let start = self.rows.len().saturating_sub(n);
        let tail = &self.rows[start..];
        (0..self.names.len())
            .map(|j| tail.iter().map(|r| r[j]).sum::<f64>() / tail.len().max(1) as f64)
            .collect()
    }

    /// CSV with one row per `every` steps (steps `every-1, 2·every-1, …`).
    pub fn write_csv<W: Write>(&self, mut w: W, every: usize) -> std::io::Result<()> {
        writeln!(w, "step,{}", self.names.join(","))?;
        for (i, row) in self.rows.iter().enumerate() {
            if (i + 1) % every == 0 {
                let vals: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
                writeln!(w, "{},{}", i + 1, vals.join(","))?;
            }
        }
        Ok(())
    }
}

pub fn step_optimizer(opt: &mut AdamW, opts: &TrainOptions, step: usize, loss: &candle_core::Tensor) -> Result<()> {
    opt.set_learning_rate(opts.lr_at(step));
    opt.backward_step(loss)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_epoch() {
        let mut b = Batches::new(10, 5, 1);
        let mut seen: Vec<usize> = b.next_batch();
        seen.extend(b.next_batch());
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        let mut again = Batches::new(10, 5, 1);
        assert_eq!(Batches::new(10, 5, 1).next_batch(), again.next_batch());
        assert_eq!(Batches::new(3, 8, 0).next_batch().len(), 3);
    }

    #[test]
    fn lr_schedule_shape() {
        let o = TrainOptions {
            steps: 100,
            warmup_steps: 10,
            learning_rate: 1.0,
            final_lr_fraction: 0.1,
            ..Default::default()
        };
        assert!((o.lr_at(0) - 0.1).abs() < 1e-12);
        assert!((o.lr_at(9) - 1.0).abs() < 1e-12);
        assert!((o.lr_at(10) - 1.0).abs() < 1e-12);
        assert!((o.lr_at(100) - 0.1).abs() < 1e-12);
        assert!(o.lr_at(50) < o.lr_at(20));
    }

    #[test]
    fn history_csv_rows_follow_interval() {
        let mut h = LossHistory::new(&["loss", "mse"]);
        for i in 0..25 {
            h.push(vec![i as f64, 0.5]).unwrap();
        }
        let mut buf = Vec::new();
        h.write_csv(&mut buf, 10).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 2);
        assert!(matches!(
            h.push(vec![f64::NAN, 0.0]),
            Err(ModelError::TrainingDiverged { step: 25, .. })
        ));
    }
}
