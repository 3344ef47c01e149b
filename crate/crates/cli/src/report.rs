//! Generation report: point-wise, spectral and distributional scores per road
//! class and pooled, plus classifier scores on real and generated signals.

use serde::{Deserialize, Serialize};
use vtsyn_core::corpus::{Normalization, RoadClass};
use vtsyn_core::metrics::{
    amplitude_range_stats, band_energy_ratio, fft_spectrum, fid, rmse, spectral_similarity, RangeStats,
};
use vtsyn_core::signal::TactileSignal;
use vtsyn_models::classifier::{evaluate_generated, ClassificationMetrics, RoadClassifier};

use crate::error::{CliError, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Name of the pooled column.
pub const ALL_ROADS: &str = "all";

/// One test pair: its real signal and one generation per seed, all in m/s².
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub pair_id: String,
    pub road_class: RoadClass,
    pub real: TactileSignal,
    pub generated: Vec<TactileSignal>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub split: String,
    pub seeds: Vec<u64>,
    pub pairs: usize,
    pub sample_rate_hz: f64,
    pub rmse_units: String,
    pub amplitude_units: String,
    pub spectral_similarity: String,
    pub fid_embedder: String,
    pub fid_embedding_dim: usize,
    pub low_band_hz: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealGenerated<T> {
    pub real: T,
    pub generated: T,
}

/// Scores for one road class, or for all pairs pooled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnReport {
    pub road: String,
    pub pairs: usize,
    pub rmse: f64,
    pub fid: f64,
    pub spectral_similarity: f64,
    /// `1 - spectral_similarity`, the distance form of the same score.
    pub spectral_distance_literal: f64,
    pub low_band_energy: RealGenerated<f64>,
    pub amplitude_range: RealGenerated<RangeStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    /// Classifier on the real test signals.
    pub real: ClassificationMetrics,
    /// Same classifier on the generated signals, scored against the
    /// label of the image each was generated from.
    pub generated: ClassificationMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub metadata: ReportMetadata,
    /// Six road classes in canonical order, then the pooled column.
    pub columns: Vec<ColumnReport>,
    pub classification: ClassificationReport,
}

impl GenerationReport {
    pub fn column(&self, road: &str) -> Option<&ColumnReport> {
        self.columns.iter().find(|c| c.road == road)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

pub struct ReportInputs<'a> {
    pub config_hash: &'a str,
    pub split: &'a str,
    pub seeds: &'a [u64],
    pub normalization: Normalization,
    pub low_band_hz: (f64, f64),
    pub classifier: &'a RoadClassifier,
}

fn normalized(s: &TactileSignal, norm: &Normalization) -> TactileSignal {
    s.map(|x| norm.normalize(x))
}

fn flat(s: &TactileSignal) -> Vec<f64> {
    s.channels.concat()
}

/// Channel-averaged spectral similarity.
fn signal_similarity(real: &TactileSignal, gen: &TactileSignal) -> Result<f64> {
    let mut sum = 0.0;
    for c in 0..real.num_channels() {
        sum += spectral_similarity(real.channel(c), gen.channel(c))?;
    }
    Ok(sum / real.num_channels() as f64)
}

/// Channel-averaged band energy ratio.
fn signal_band_ratio(s: &TactileSignal, band: (f64, f64)) -> Result<f64> {
    let mut sum = 0.0;
    for c in 0..s.num_channels() {
        sum += band_energy_ratio(&fft_spectrum(s.channel(c), s.sample_rate_hz)?, band.0, band.1)?;
    }
    Ok(sum / s.num_channels() as f64)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn column(
    road: &str,
    pairs: &[&EvalPair],
    real_emb: &[Vec<f64>],
    gen_emb: &[Vec<f64>],
    inputs: &ReportInputs,
) -> Result<ColumnReport> {
    let norm = &inputs.normalization;
    let mut rmses = Vec::new();
    let mut sims = Vec::new();
    let mut real_bands = Vec::new();
    let mut gen_bands = Vec::new();
    let mut real_flat = Vec::new();
    let mut gen_flat = Vec::new();
    for p in pairs {
        let real_n = flat(&normalized(&p.real, norm));
        real_bands.push(signal_band_ratio(&p.real, inputs.low_band_hz)?);
        real_flat.push(flat(&p.real));
        for g in &p.generated {
            if g.num_channels() != p.real.num_channels() || g.len() != p.real.len() {
                return Err(CliError::Data(format!(
                    "generated signal for {} has shape ({}, {}), real ({}, {})",
                    p.pair_id,
                    g.num_channels(),
                    g.len(),
                    p.real.num_channels(),
                    p.real.len()
                )));
            }
            rmses.push(rmse(&real_n, &flat(&normalized(g, norm)))?);
            sims.push(signal_similarity(&p.real, g)?);
            gen_bands.push(signal_band_ratio(g, inputs.low_band_hz)?);
            gen_flat.push(flat(g));
        }
    }
    let similarity = mean(&sims);
    Ok(ColumnReport {
        road: road.to_string(),
        pairs: pairs.len(),
        rmse: mean(&rmses),
        fid: fid(real_emb, gen_emb)?,
        spectral_similarity: similarity,
        spectral_distance_literal: 1.0 - similarity,
        low_band_energy: RealGenerated {
            real: mean(&real_bands),
            generated: mean(&gen_bands),
        },
        amplitude_range: RealGenerated {
            real: amplitude_range_stats(&real_flat)?,
            generated: amplitude_range_stats(&gen_flat)?,
        },
    })
}

/// Scores every pair; each class must have at least one pair.
pub fn build_report(pairs: &[EvalPair], inputs: &ReportInputs) -> Result<GenerationReport> {
    if pairs.is_empty() {
        return Err(CliError::Data("no pairs to evaluate".into()));
    }
    let norm = &inputs.normalization;
    let real_n: Vec<TactileSignal> = pairs.iter().map(|p| normalized(&p.real, norm)).collect();
    let gen_n: Vec<TactileSignal> = pairs
        .iter()
        .flat_map(|p| p.generated.iter().map(|g| normalized(g, norm)))
        .collect();
    let real_refs: Vec<&TactileSignal> = real_n.iter().collect();
    let gen_refs: Vec<&TactileSignal> = gen_n.iter().collect();
    let real_emb = inputs.classifier.embed(&real_refs)?;
    let gen_emb = inputs.classifier.embed(&gen_refs)?;

    // Row ranges of each pair inside the generated embedding list.
    let mut gen_start = Vec::with_capacity(pairs.len());
    let mut acc = 0;
    for p in pairs {
        gen_start.push(acc);
        acc += p.generated.len();
    }

    let mut columns = Vec::with_capacity(RoadClass::ALL.len() + 1);
    for class in RoadClass::ALL {
        let idx: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].road_class == class).collect();
        if idx.is_empty() {
            return Err(CliError::Data(format!("no evaluation pairs for road class {class}")));
        }
        let members: Vec<&EvalPair> = idx.iter().map(|&i| &pairs[i]).collect();
        let r: Vec<Vec<f64>> = idx.iter().map(|&i| real_emb[i].clone()).collect();
        let g: Vec<Vec<f64>> = idx
            .iter()
            .flat_map(|&i| gen_emb[gen_start[i]..gen_start[i] + pairs[i].generated.len()].to_vec())
            .collect();
        columns.push(column(class.name(), &members, &r, &g, inputs)?);
    }
    let all: Vec<&EvalPair> = pairs.iter().collect();
    columns.push(column(ALL_ROADS, &all, &real_emb, &gen_emb, inputs)?);

    let real_labels: Vec<usize> = pairs.iter().map(|p| p.road_class.index()).collect();
    let gen_labels: Vec<usize> = pairs
        .iter()
        .flat_map(|p| std::iter::repeat_n(p.road_class.index(), p.generated.len()))
        .collect();
    let classification = ClassificationReport {
        real: evaluate_generated(inputs.classifier, &real_refs, &real_labels)?,
        generated: evaluate_generated(inputs.classifier, &gen_refs, &gen_labels)?,
    };

    Ok(GenerationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config_hash: inputs.config_hash.to_string(),
        metadata: ReportMetadata {
            split: inputs.split.to_string(),
            seeds: inputs.seeds.to_vec(),
            pairs: pairs.len(),
            sample_rate_hz: pairs[0].real.sample_rate_hz,
            rmse_units: "normalized".into(),
            amplitude_units: "m/s^2".into(),
            spectral_similarity: "cosine of positive-frequency FFT magnitudes, m/s^2 signals".into(),
            fid_embedder: "road classifier penultimate layer".into(),
            fid_embedding_dim: inputs.classifier.config().embed_dim,
            low_band_hz: inputs.low_band_hz,
        },
        columns,
        classification,
    })
}
