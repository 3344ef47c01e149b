//! Small classifiers over fixed feature vectors, used to check that
//! embeddings carry class information.

use nalgebra::DMatrix;

/// Per-feature standardization fit on a training set.
#[derive(Debug, Clone)]
pub struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &[Vec<f64>]) -> Self {
        let dim = x[0].len();
        let n = x.len() as f64;
        let mut mean = vec![0.0; dim];
        for row in x {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; dim];
        for row in x {
            for ((s, v), m) in std.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let std = std.into_iter().map(|v| v.sqrt().max(1e-12)).collect();
        Self { mean, std }
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

/// Multinomial logistic regression over standardized features, fit by
/// full-batch gradient descent from zero weights (deterministic).
#[derive(Debug, Clone)]
pub struct LinearProbe {
    scaler: Standardizer,
    /// (dim + 1) × classes; last row is the bias.
    weights: DMatrix<f64>,
}

impl LinearProbe {
    pub const ITERATIONS: usize = 500;
    pub const LEARNING_RATE: f64 = 0.5;

    pub fn fit(x: &[Vec<f64>], labels: &[usize], num_classes: usize, l2: f64) -> Self {
        assert_eq!(x.len(), labels.len());
        assert!(!x.is_empty());
        let scaler = Standardizer::fit(x);
        let (n, dim) = (x.len(), x[0].len());
        let design = DMatrix::from_fn(n, dim + 1, |i, j| {
            if j == dim {
                1.0
            } else {
                (x[i][j] - scaler.mean[j]) / scaler.std[j]
            }
        });
        let onehot = DMatrix::from_fn(n, num_classes, |i, c| f64::from(u8::from(labels[i] == c)));
        let mut weights = DMatrix::zeros(dim + 1, num_classes);
        let mut velocity = DMatrix::zeros(dim + 1, num_classes);
        for _ in 0..Self::ITERATIONS {
            let mut probs = &design * &weights;
            for mut row in probs.row_iter_mut() {
                let m = row.max();
                row.apply(|v| *v = (*v - m).exp());
                let z = row.sum();
                row /= z;
            }
            let mut grad = design.transpose() * (probs - &onehot) / n as f64;
            for j in 0..dim {
                for c in 0..num_classes {
                    grad[(j, c)] += l2 * weights[(j, c)];
                }
            }
            velocity = velocity * 0.9 - grad * Self::LEARNING_RATE;
            weights += &velocity;
        }
        Self { scaler, weights }
    }

    pub fn predict(&self, row: &[f64]) -> usize {
        let z = self.scaler.apply(row);
        let dim = z.len();
        (0..self.weights.ncols())
            .map(|c| {
                let s: f64 = z.iter().enumerate().map(|(j, v)| v * self.weights[(j, c)]).sum();
                s + self.weights[(dim, c)]
            })
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(c, _)| c)
            .unwrap_or(0)
    }

    pub fn accuracy(&self, x: &[Vec<f64>], labels: &[usize]) -> f64 {
        let hits = x.iter().zip(labels).filter(|(r, &l)| self.predict(r) == l).count();
        hits as f64 / x.len().max(1) as f64
    }
}

/// Nearest class mean in the training set's standardized feature space.
pub fn nearest_centroid_accuracy(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
) -> f64 {
    let scaler = Standardizer::fit(train_x);
    let classes = train_y.iter().copied().max().map_or(0, |m| m + 1);
    let dim = train_x[0].len();
    let mut centroids = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0usize; classes];
    for (row, &y) in train_x.iter().zip(train_y) {
        for (c, v) in centroids[y].iter_mut().zip(scaler.apply(row)) {
            *c += v;
        }
        counts[y] += 1;
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        for v in c.iter_mut() {
            *v /= (*n).max(1) as f64;
        }
    }
    let hits = test_x
        .iter()
        .zip(test_y)
        .filter(|(row, &y)| {
            let z = scaler.apply(row);
            let best = centroids
                .iter()
                .enumerate()
                .filter(|(c, _)| counts[*c] > 0)
                .map(|(c, m)| (c, m.iter().zip(&z).map(|(a, b)| (a - b).powi(2)).sum::<f64>()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(c, _)| c);
            best == Some(y)
        })
        .count();
    hits as f64 / test_x.len().max(1) as f64
}
