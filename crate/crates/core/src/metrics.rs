//! Scores for generated tactile signals: point-wise error, spectral
//! similarity, Fréchet distance between embedding sets, band energy and
//! amplitude-range statistics.
//!
//! Everything here is pure f64 math; signal-level functions take slices so
//! they can be used on normalized or physical data alike.

use nalgebra::{DMatrix, DVector};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Diagonal loading applied to both covariances before the matrix square root.
pub const FID_SHRINKAGE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: {left} vs {right}")]
    Shape { left: usize, right: usize },
    #[error("similarity undefined for an all-zero spectrum")]
    UndefinedSimilarity,
    #[error("empty input")]
    Empty,
    #[error("invalid band [{lo}, {hi}] Hz for fs {fs} Hz")]
    InvalidBand { lo: f64, hi: f64, fs: f64 },
}

pub type Result<T, E = MetricError> = std::result::Result<T, E>;

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(MetricError::Shape {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

pub fn rmse(real: &[f64], gen: &[f64]) -> Result<f64> {
    same_len(real, gen)?;
    let sse: f64 = real.iter().zip(gen).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sse / real.len() as f64).sqrt())
}

/// Positive-frequency half of the DFT: `K = ⌊N/2⌋ + 1` bins, unnormalized magnitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumResult {
    pub freqs: Vec<f64>,
    pub magnitudes: Vec<f64>,
    pub fs: f64,
    /// Length of the transformed signal.
    pub n: usize,
}

impl SpectrumResult {
    /// Signal energy recovered from the half spectrum (Parseval):
    /// `Σx² = (|X₀|² + 2Σ|X_k|² + |X_{N/2}|²) / N`, the last term only for even N.
    pub fn energy(&self) -> f64 {
        let k = self.magnitudes.len();
        let mut e = 0.0;
        for (i, m) in self.magnitudes.iter().enumerate() {
            let unique = i == 0 || (self.n % 2 == 0 && i == k - 1);
            e += if unique { m * m } else { 2.0 * m * m };
        }
        e / self.n as f64
    }
}

pub fn fft_spectrum(signal: &[f64], fs: f64) -> Result<SpectrumResult> {
    let n = signal.len();
    if n < 2 {
        return Err(MetricError::Empty);
    }
    let mut buf: Vec<Complex64> = signal.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let k = n / 2 + 1;
    Ok(SpectrumResult {
        freqs: (0..k).map(|i| i as f64 * fs / n as f64).collect(),
        magnitudes: buf[..k].iter().map(|c| c.norm()).collect(),
        fs,
        n,
    })
}

/// Cosine similarity of the magnitude spectra, in [0, 1]; 1 for identical
/// spectra. Sample rate does not matter for this quantity.
pub fn spectral_similarity(real: &[f64], gen: &[f64]) -> Result<f64> {
    same_len(real, gen)?;
    let a = fft_spectrum(real, 1.0)?.magnitudes;
    let b = fft_spectrum(gen, 1.0)?.magnitudes;
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(MetricError::UndefinedSimilarity);
    }
    Ok((dot / (na * nb)).clamp(0.0, 1.0))
}

/// The printed form of the frequency similarity score, `1 − cosine`; 0 for identical spectra.
pub fn spectral_distance_literal(real: &[f64], gen: &[f64]) -> Result<f64> {
    Ok(1.0 - spectral_similarity(real, gen)?)
}

/// Fraction of squared magnitude in `[f_lo, f_hi)`; a band ending at
/// Nyquist includes the Nyquist bin, so complementary bands sum to 1.
pub fn band_energy_ratio(spectrum: &SpectrumResult, f_lo: f64, f_hi: f64) -> Result<f64> {
    let nyquist = spectrum.fs / 2.0;
    if !(0.0 <= f_lo && f_lo < f_hi && f_hi <= nyquist) {
        return Err(MetricError::InvalidBand {
            lo: f_lo,
            hi: f_hi,
            fs: spectrum.fs,
        });
    }
    let mut inside = 0.0;
    let mut total = 0.0;
    for (f, m) in spectrum.freqs.iter().zip(&spectrum.magnitudes) {
        let e = m * m;
        total += e;
        if *f >= f_lo && (*f < f_hi || (f_hi == nyquist && *f <= f_hi)) {
            inside += e;
        }
    }
    if total == 0.0 {
        return Err(MetricError::UndefinedSimilarity);
    }
    Ok(inside / total)
}

/// Linear-interpolated percentile of an ascending slice, `p` in [0, 100].
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty slice");
    let pos = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeStats {
    pub min: f64,
    pub max: f64,
    pub p5: f64,
    pub p25: f64,
    pub p75: f64,
    pub p95: f64,
    pub iqr: f64,
}

impl RangeStats {
    pub fn p5_p95_width(&self) -> f64 {
        self.p95 - self.p5
    }
}

/// Order statistics over all samples of all signals pooled together.
pub fn amplitude_range_stats<S: AsRef<[f64]>>(signals: &[S]) -> Result<RangeStats> {
    let mut all: Vec<f64> = signals.iter().flat_map(|s| s.as_ref().iter().copied()).collect();
    if all.is_empty() {
        return Err(MetricError::Empty);
    }
    all.sort_by(f64::total_cmp);
    let p25 = percentile_sorted(&all, 25.0);
    let p75 = percentile_sorted(&all, 75.0);
    Ok(RangeStats {
        min: all[0],
        max: all[all.len() - 1],
        p5: percentile_sorted(&all, 5.0),
        p25,
        p75,
        p95: percentile_sorted(&all, 95.0),
        iqr: p75 - p25,
    })
}

fn mean_and_cov(set: &[Vec<f64>], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = set.len();
    let mut mu = DVector::zeros(dim);
    for x in set {
        mu += DVector::from_column_slice(x);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for x in set {
        let d = DVector::from_column_slice(x) - &mu;
        cov += &d * d.transpose();
    }
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    cov /= denom;
    for i in 0..dim {
        cov[(i, i)] += FID_SHRINKAGE;
    }
    (mu, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two embedding sets.
///
/// `tr((Σr Σg)^{1/2})` is evaluated as `tr((√Σr Σg √Σr)^{1/2})`, which is
/// symmetric and has the same eigenvalues. Both covariances carry
/// [`FID_SHRINKAGE`] on the diagonal.
pub fn fid(real: &[Vec<f64>], gen: &[Vec<f64>]) -> Result<f64> {
    if real.is_empty() || gen.is_empty() {
        return Err(MetricError::Empty);
    }
    let dim = real[0].len();
    for x in real.iter().chain(gen) {
        if x.len() != dim {
            return Err(MetricError::Shape {
                left: dim,
                right: x.len(),
            });
        }
    }
    let (mr, cr) = mean_and_cov(real, dim);
    let (mg, cg) = mean_and_cov(gen, dim);
    let root_r = sym_sqrt(&cr);
    let inner = &root_r * &cg * &root_r;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_cross: f64 = inner
        .symmetric_eigenvalues()
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let diff = (&mr - &mg).norm_squared();
    Ok((diff + cr.trace() + cg.trace() - 2.0 * tr_cross).max(0.0))
}
