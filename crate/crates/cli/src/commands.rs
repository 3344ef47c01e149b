//! Pipeline stages. Each command reads and writes under one [`Layout`] and
//! refuses inputs stamped with a different config hash.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::DType;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use vtsyn_core::alignment::align_batch;
use vtsyn_core::corpus::{
    build_corpus, load_pairs, load_session, pair_id, split_sizes, write_dataset, DatasetEntry, DatasetManifest,
    DatasetPair, LoadedSplit, Split,
};
use vtsyn_core::seed::{derive_seed, stage_rng};
use vtsyn_core::signal::{load_signal, save_signal, SignalFormatError, TactileSignal};
use vtsyn_core::FrameImage;
use vtsyn_models::checkpoint::{self, Sidecar};
use vtsyn_models::classifier::{self, train_classifier, RoadClassifier};
use vtsyn_models::diffusion::{
    self, encode_latents, extra_from_sidecar, generate_tactile, latent_scale, train_diffusion, training_loss,
    DiffusionExtra, DiffusionModel,
};
use vtsyn_models::tactile_vae::{self, reconstruction_rmse, train_vae, TactileVae};
use vtsyn_models::train::LossHistory;

use crate::config::PipelineConfig;
use crate::error::{CliError, Result};
use crate::layout::{generated_file_name, Layout};
use crate::plots::render_plots;
use crate::report::{build_report, EvalPair, GenerationReport, ReportInputs};

/// Rows sampled per reverse-diffusion batch.
const GENERATION_BATCH: usize = 64;

pub const GENERATED_INDEX_SCHEMA_VERSION: u32 = 1;

/// Config plus its hash and the output layout.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: PipelineConfig,
    pub hash: String,
    pub layout: Layout,
}

impl Context {
    pub fn new(config: PipelineConfig, out: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        let hash = config.hash();
        Ok(Self {
            config,
            hash,
            layout: Layout::new(out),
        })
    }

    fn check_hash(&self, what: &str, found: Option<&str>) -> Result<()> {
        match found {
            Some(h) if h == self.hash => Ok(()),
            Some(h) => Err(CliError::Config(format!(
                "{what} was produced by config {h}, current config is {}; rerun the earlier stages",
                self.hash
            ))),
            None => Err(CliError::Config(format!("{what} carries no config hash"))),
        }
    }

    fn write_config(&self) -> Result<()> {
        let path = self.layout.config();
        create_parent(&path)?;
        fs::write(&path, self.config.to_json() + "\n").map_err(CliError::io(&path))
    }

    /// Loads the dataset manifest and checks its lineage.
    pub fn manifest(&self, path: Option<&Path>) -> Result<DatasetManifest> {
        let path = path.map(Path::to_path_buf).unwrap_or_else(|| self.layout.manifest());
        if !path.is_file() {
            return Err(CliError::Io {
                path,
                source: std::io::Error::from(std::io::ErrorKind::NotFound),
            });
        }
        let m = DatasetManifest::load(&path)?;
        self.check_hash(&format!("manifest {}", path.display()), m.config_hash.as_deref())?;
        Ok(m)
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// synth

#[derive(Debug, Clone)]
pub struct SynthOutcome {
    pub manifest: PathBuf,
    pub records: usize,
    /// True when an identical manifest was already in place.
    pub unchanged: bool,
}

pub fn cmd_synth(ctx: &Context, out: &mut dyn Write) -> Result<SynthOutcome> {
    let dir = ctx.layout.corpus_dir();
    let path = ctx.layout.manifest();
    let previous = fs::read_to_string(&path).ok();
    let mut manifest = build_corpus(&ctx.config.corpus, &dir, ctx.config.seed)?;
    manifest.config_hash = Some(ctx.hash.clone());
    manifest.save(&path)?;
    ctx.write_config()?;
    let unchanged = previous == Some(manifest.to_json() + "\n");

    let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
    for r in &manifest.records {
        *counts.entry((r.road_class.to_string(), r.light.to_string())).or_default() += 1;
    }
    let io = CliError::io("stdout");
    (|| -> std::io::Result<()> {
        for ((class, light), n) in &counts {
            writeln!(out, "{class:<8} {light:<6} {n}")?;
        }
        let [tr, va, te] = manifest.split_counts();
        writeln!(out, "total {} (train {tr}, val {va}, test {te})", manifest.records.len())?;
        if unchanged {
            writeln!(out, "manifest unchanged")?;
        }
        writeln!(out, "{}", path.display())
    })()
    .map_err(io)?;
    Ok(SynthOutcome {
        manifest: path,
        records: manifest.records.len(),
        unchanged,
    })
}

// ---------------------------------------------------------------------------
// align

#[derive(Debug, Clone)]
pub struct AlignOutcome {
    pub manifest: PathBuf,
    pub frames: usize,
    pub pairs: usize,
    pub skipped: usize,
    pub skip_log: PathBuf,
}

/// Aligns one raw session into a labeled dataset under `aligned/`.
pub fn cmd_align(ctx: &Context, session_dir: &Path, out: &mut dyn Write) -> Result<AlignOutcome> {
    let session = load_session(session_dir)?;
    let batch = align_batch(&session.frames, &session.track, &session.stream, &ctx.config.corpus.alignment)?;
    let dir = ctx.layout.aligned_dir();
    fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
    let skip_log = dir.join("skipped.csv");
    let to_err = |e: csv::Error| CliError::Io {
        path: skip_log.clone(),
        source: std::io::Error::other(e.to_string()),
    };
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(&skip_log)
        .map_err(to_err)?;
    for s in &batch.skipped {
        w.serialize(s).map_err(to_err)?;
    }
    w.flush().map_err(CliError::io(&skip_log))?;

    let frames = session.frames.len();
    let skipped = batch.skipped.len();
    writeln!(out, "{frames} frames, {} aligned, {skipped} skipped", batch.pairs.len()).map_err(CliError::io("stdout"))?;
    if frames == 0 || 2 * skipped > frames {
        return Err(CliError::Data(format!(
            "{skipped} of {frames} frames skipped (see {}); check the session clocks and track coverage",
            skip_log.display()
        )));
    }

    let (class, light) = (session.meta.road_class, session.meta.light);
    let n = batch.pairs.len();
    let (n_train, n_val, _) = split_sizes(n, ctx.config.corpus.split_ratios);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stage_rng(ctx.config.seed, "align/split"));
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    let entries: Vec<DatasetEntry> = batch
        .pairs
        .into_iter()
        .zip(splits)
        .map(|(pair, split)| DatasetEntry {
            pair_id: pair_id(class, light, pair.frame.frame_id as usize),
            split,
            pair: pair.with_labels(class, light),
        })
        .collect();
    let mut manifest = write_dataset(
        &entries,
        &dir,
        ctx.config.seed,
        session.stream.fs,
        ctx.config.corpus.alignment.resample_len,
    )?;
    manifest.config_hash = Some(ctx.hash.clone());
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    writeln!(out, "{}", path.display()).map_err(CliError::io("stdout"))?;
    Ok(AlignOutcome {
        manifest: path,
        frames,
        pairs: n,
        skipped,
        skip_log,
    })
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Stage {
    Vae,
    Diffusion,
    Classifier,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Self::Vae => "vae",
            Self::Diffusion => "diffusion",
            Self::Classifier => "classifier",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vae" => Ok(Self::Vae),
            "diffusion" => Ok(Self::Diffusion),
            "classifier" => Ok(Self::Classifier),
            other => Err(CliError::Config(format!("unknown stage {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub final_losses: BTreeMap<String, f64>,
}

fn signals_of(split: &LoadedSplit) -> Vec<&TactileSignal> {
    split.pairs.iter().map(|p| &p.pair.signal).collect()
}

fn images_of(split: &LoadedSplit) -> Vec<&FrameImage> {
    split.pairs.iter().map(|p| &p.pair.frame.image).collect()
}

fn labels_of(pairs: &[DatasetPair]) -> Vec<usize> {
    pairs.iter().map(|p| p.road_class().index()).collect()
}

fn nonempty(split: LoadedSplit, name: &str) -> Result<LoadedSplit> {
    if split.pairs.is_empty() {
        return Err(CliError::Data(format!("{name} split is empty")));
    }
    Ok(split)
}

/// Training-loss tail means plus any validation scores.
fn final_losses(history: &LossHistory, validation: &[(&str, f64)]) -> BTreeMap<String, f64> {
    let tail = history.tail_mean(10.min(history.len()));
    let mut m: BTreeMap<String, f64> = history.names.iter().cloned().zip(tail).collect();
    for (k, v) in validation {
        m.insert((*k).to_string(), *v);
    }
    m
}

fn write_loss_log(ctx: &Context, stage: Stage, history: &LossHistory, every: usize) -> Result<PathBuf> {
    let path = ctx.layout.loss_log(stage.name());
    create_parent(&path)?;
    let file = fs::File::create(&path).map_err(CliError::io(&path))?;
    history
        .write_csv(std::io::BufWriter::new(file), every)
        .map_err(CliError::io(&path))?;
    Ok(path)
}

fn require_checkpoint(ctx: &Context, stage: &str, needed_by: Stage) -> Result<PathBuf> {
    let stem = ctx.layout.checkpoint(stage);
    if !checkpoint::sidecar_path(&stem).is_file() || !checkpoint::weights_path(&stem).is_file() {
        return Err(CliError::Config(format!(
            "{needed_by} needs a trained {stage} checkpoint at {}; run `train --stage {stage}` first",
            stem.display()
        )));
    }
    Ok(stem)
}

pub fn load_vae(ctx: &Context) -> Result<TactileVae> {
    let stem = require_checkpoint(ctx, "vae", Stage::Diffusion)?;
    let (vae, sidecar) = TactileVae::load(&stem)?;
    ctx.check_hash("VAE checkpoint", sidecar.config_hash.as_deref())?;
    Ok(vae)
}

pub fn load_diffusion(ctx: &Context) -> Result<(DiffusionModel, DiffusionExtra)> {
    let stem = ctx.layout.checkpoint("diffusion");
    let (model, sidecar) = DiffusionModel::load(&stem)?;
    ctx.check_hash("diffusion checkpoint", sidecar.config_hash.as_deref())?;
    let extra = extra_from_sidecar(&sidecar)?;
    Ok((model, extra))
}

pub fn load_classifier(ctx: &Context) -> Result<RoadClassifier> {
    let stem = ctx.layout.checkpoint("classifier");
    let (model, sidecar) = RoadClassifier::load(&stem)?;
    ctx.check_hash("classifier checkpoint", sidecar.config_hash.as_deref())?;
    Ok(model)
}

pub fn cmd_train(ctx: &Context, stage: Stage, manifest: Option<&Path>, out: &mut dyn Write) -> Result<TrainOutcome> {
    let cfg = &ctx.config;
    // Check the dependency before touching the data.
    let vae = match stage {
        Stage::Diffusion => Some(load_vae(ctx)?),
        _ => None,
    };
    let m = ctx.manifest(manifest)?;
    let train = nonempty(load_pairs(&m, Split::Train)?, "train")?;
    let val = load_pairs(&m, Split::Val)?;
    let stem = ctx.layout.checkpoint(stage.name());
    let (history, every, losses) = match stage {
        Stage::Vae => {
            let opts = cfg.stage_options(&cfg.vae_training);
            let (vae, history) = train_vae(&signals_of(&train), &cfg.vae, &opts)?;
            let mut validation = Vec::new();
            if !val.pairs.is_empty() {
                validation.push(("val_rmse", reconstruction_rmse(&vae, &signals_of(&val))?));
            }
            let losses = final_losses(&history, &validation);
            let mut sidecar = Sidecar::new(tactile_vae::CHECKPOINT_KIND, cfg.vae.clone(), opts.seed);
            sidecar.config_hash = Some(ctx.hash.clone());
            sidecar.final_losses = losses.clone();
            vae.save(&stem, &sidecar)?;
            (history, opts.log_every, losses)
        }
        Stage::Diffusion => {
            let vae = vae.expect("loaded above");
            let opts = cfg.stage_options(&cfg.diffusion_training);
            let raw = encode_latents(&vae, &signals_of(&train))?;
            let scale = latent_scale(&raw)?;
            let latents = (raw * scale)?;
            let (model, history) = train_diffusion(&latents, &images_of(&train), &cfg.diffusion, &opts)?;
            let mut validation = Vec::new();
            if !val.pairs.is_empty() {
                let x0 = (encode_latents(&vae, &signals_of(&val))? * scale)?;
                let c = model.conditions(&images_of(&val))?;
                let seed = derive_seed(cfg.seed, "diffusion/validation");
                let loss = training_loss(model.unet(), &c, &x0, model.schedule(), seed)?;
                validation.push(("val_loss", loss.to_dtype(DType::F64)?.to_scalar::<f64>()?));
            }
            let losses = final_losses(&history, &validation);
            let mut sidecar = Sidecar::new(diffusion::CHECKPOINT_KIND, cfg.diffusion.clone(), opts.seed);
            sidecar.config_hash = Some(ctx.hash.clone());
            sidecar.final_losses = losses.clone();
            sidecar.extra = serde_json::to_value(DiffusionExtra {
                latent_scale: scale,
                vae_config: vae.config().clone(),
            })
            .expect("extra serializes");
            model.save(&stem, &sidecar)?;
            (history, opts.log_every, losses)
        }
        Stage::Classifier => {
            let opts = cfg.stage_options(&cfg.classifier_training);
            let (model, history) =
                train_classifier(&signals_of(&train), &labels_of(&train.pairs), &cfg.classifier, &opts)?;
            let mut validation = Vec::new();
            if !val.pairs.is_empty() {
                let m = classifier::evaluate_generated(&model, &signals_of(&val), &labels_of(&val.pairs))?;
                validation.push(("val_accuracy", m.accuracy));
            }
            let losses = final_losses(&history, &validation);
            let mut sidecar = Sidecar::new(classifier::CHECKPOINT_KIND, cfg.classifier.clone(), opts.seed);
            sidecar.config_hash = Some(ctx.hash.clone());
            sidecar.final_losses = losses.clone();
            model.save(&stem, &sidecar)?;
            (history, opts.log_every, losses)
        }
    };
    let loss_log = write_loss_log(ctx, stage, &history, every)?;
    (|| -> std::io::Result<()> {
        for (k, v) in &losses {
            writeln!(out, "{stage} {k} {v:.6}")?;
        }
        writeln!(out, "{}", checkpoint::weights_path(&stem).display())
    })()
    .map_err(CliError::io("stdout"))?;
    Ok(TrainOutcome {
        checkpoint: stem,
        loss_log,
        final_losses: losses,
    })
}

// ---------------------------------------------------------------------------
// generate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedEntry {
    pub pair_id: String,
    pub seed: u64,
    pub file: String,
}

/// `generated/index.json`: what was generated, from which lineage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedIndex {
    pub schema_version: u32,
    pub config_hash: String,
    pub split: Split,
    pub seeds: Vec<u64>,
    pub entries: Vec<GeneratedEntry>,
}

impl GeneratedIndex {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

/// Per-row sampler seed for one (pair, generation seed).
pub fn generation_seed(master: u64, pair_id: &str, seed: u64) -> u64 {
    derive_seed(master, &format!("generate/{seed}/{pair_id}"))
}

#[derive(Debug, Clone)]
pub struct GenerateOutcome {
    pub index: PathBuf,
    pub files: Vec<PathBuf>,
}

pub fn cmd_generate(
    ctx: &Context,
    manifest: Option<&Path>,
    split: Split,
    seeds: &[u64],
    out: &mut dyn Write,
) -> Result<GenerateOutcome> {
    if seeds.is_empty() {
        return Err(CliError::Config("no generation seeds".into()));
    }
    let m = ctx.manifest(manifest)?;
    let vae = load_vae(ctx)?;
    let (model, extra) = load_diffusion(ctx)?;
    diffusion::check_compatible(&vae, &model, &extra)?;
    let pairs = nonempty(load_pairs(&m, split)?, split.name())?;
    let dir = ctx.layout.generated_dir();
    fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;

    let jobs: Vec<(usize, u64)> = seeds
        .iter()
        .flat_map(|&s| (0..pairs.pairs.len()).map(move |i| (i, s)))
        .collect();
    let mut entries = Vec::with_capacity(jobs.len());
    let mut files = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(GENERATION_BATCH) {
        let images: Vec<&FrameImage> = chunk.iter().map(|&(i, _)| &pairs.pairs[i].pair.frame.image).collect();
        let row_seeds: Vec<u64> = chunk
            .iter()
            .map(|&(i, s)| generation_seed(ctx.config.seed, &pairs.pairs[i].pair_id, s))
            .collect();
        let signals = generate_tactile(
            &images,
            &row_seeds,
            &vae,
            &model,
            &extra,
            &m.normalization,
            m.sample_rate_hz,
        )?;
        for (&(i, s), signal) in chunk.iter().zip(&signals) {
            let id = &pairs.pairs[i].pair_id;
            let path = ctx.layout.generated_signal(id, s);
            save_signal(&path, signal).map_err(|e| signal_err(&path, e))?;
            entries.push(GeneratedEntry {
                pair_id: id.clone(),
                seed: s,
                file: generated_file_name(id, s),
            });
            files.push(path);
        }
        log::info!("generated {} of {}", files.len(), jobs.len());
    }
    let index = GeneratedIndex {
        schema_version: GENERATED_INDEX_SCHEMA_VERSION,
        config_hash: ctx.hash.clone(),
        split,
        seeds: seeds.to_vec(),
        entries,
    };
    let path = ctx.layout.generated_index();
    let text = serde_json::to_string_pretty(&index).expect("index serializes") + "\n";
    fs::write(&path, text).map_err(CliError::io(&path))?;
    writeln!(out, "{} signals in {}", files.len(), dir.display()).map_err(CliError::io("stdout"))?;
    Ok(GenerateOutcome { index: path, files })
}

fn signal_err(path: &Path, e: SignalFormatError) -> CliError {
    match e {
        SignalFormatError::Io(source) => CliError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => CliError::Data(format!("{}: {other}", path.display())),
    }
}

// ---------------------------------------------------------------------------
// eval / plot

/// Loads real test signals and their generations; every expected file must exist.
pub fn load_eval_pairs(ctx: &Context, manifest: Option<&Path>) -> Result<(DatasetManifest, GeneratedIndex, Vec<EvalPair>)> {
    let m = ctx.manifest(manifest)?;
    let index_path = ctx.layout.generated_index();
    if !index_path.is_file() {
        let ids: Vec<String> = m
            .records_in(ctx.config.generation.split)
            .map(|r| r.pair_id.clone())
            .collect();
        return Err(CliError::Data(format!("no generations found; missing pairs: {}", ids.join(", "))));
    }
    let index = GeneratedIndex::load(&index_path)?;
    ctx.check_hash("generated signals", Some(&index.config_hash))?;
    let dir = ctx.layout.generated_dir();
    let mut missing = Vec::new();
    let mut pairs = Vec::new();
    for r in m.records_in(index.split) {
        let mut generated = Vec::with_capacity(index.seeds.len());
        for &s in &index.seeds {
            let path = dir.join(generated_file_name(&r.pair_id, s));
            if !path.is_file() {
                missing.push(r.pair_id.clone());
                break;
            }
            generated.push(load_signal(&path).map_err(|e| signal_err(&path, e))?);
        }
        if generated.len() == index.seeds.len() {
            pairs.push(EvalPair {
                pair_id: r.pair_id.clone(),
                road_class: r.road_class,
                real: m.load_signal_raw(r)?,
                generated,
            });
        }
    }
    if !missing.is_empty() {
        return Err(CliError::Data(format!("missing generations for pairs: {}", missing.join(", "))));
    }
    Ok((m, index, pairs))
}

pub fn cmd_eval(ctx: &Context, manifest: Option<&Path>, out: &mut dyn Write) -> Result<GenerationReport> {
    let (m, index, pairs) = load_eval_pairs(ctx, manifest)?;
    let classifier = load_classifier(ctx)?;
    let report = build_report(
        &pairs,
        &ReportInputs {
            config_hash: &ctx.hash,
            split: index.split.name(),
            seeds: &index.seeds,
            normalization: m.normalization,
            low_band_hz: ctx.config.eval.low_band_hz,
            classifier: &classifier,
        },
    )?;
    let path = ctx.layout.report();
    create_parent(&path)?;
    fs::write(&path, report.to_json()).map_err(CliError::io(&path))?;
    render_plots(&pairs, &ctx.layout.plots_dir())?;
    print_report(&report, out).map_err(CliError::io("stdout"))?;
    writeln!(out, "{}", path.display()).map_err(CliError::io("stdout"))?;
    Ok(report)
}

pub fn cmd_plot(ctx: &Context, manifest: Option<&Path>, out: &mut dyn Write) -> Result<Vec<PathBuf>> {
    let (_, _, pairs) = load_eval_pairs(ctx, manifest)?;
    let files = render_plots(&pairs, &ctx.layout.plots_dir())?;
    writeln!(out, "{} figures in {}", files.len(), ctx.layout.plots_dir().display())
        .map_err(CliError::io("stdout"))?;
    Ok(files)
}

fn print_report(r: &GenerationReport, out: &mut dyn Write) -> std::io::Result<()> {
    write!(out, "{:<22}", "")?;
    for c in &r.columns {
        write!(out, "{:>10}", c.road)?;
    }
    writeln!(out)?;
    let rows: [(&str, fn(&crate::report::ColumnReport) -> f64); 5] = [
        ("rmse", |c| c.rmse),
        ("fid", |c| c.fid),
        ("spectral_similarity", |c| c.spectral_similarity),
        ("low_band_real", |c| c.low_band_energy.real),
        ("low_band_generated", |c| c.low_band_energy.generated),
    ];
    for (name, f) in rows {
        write!(out, "{name:<22}")?;
        for c in &r.columns {
            write!(out, "{:>10.4}", f(c))?;
        }
        writeln!(out)?;
    }
    let (g, real) = (&r.classification.generated, &r.classification.real);
    writeln!(
        out,
        "classifier real: acc {:.4} p {:.4} r {:.4} f1 {:.4}",
        real.accuracy, real.precision, real.recall, real.f1
    )?;
    writeln!(
        out,
        "classifier generated: acc {:.4} p {:.4} r {:.4} f1 {:.4}",
        g.accuracy, g.precision, g.recall, g.f1
    )
}

// ---------------------------------------------------------------------------
// pipeline

/// synth → train (vae, diffusion, classifier) → generate → eval.
pub fn run_pipeline(ctx: &Context, out: &mut dyn Write) -> Result<GenerationReport> {
    cmd_synth(ctx, out)?;
    for stage in [Stage::Vae, Stage::Diffusion, Stage::Classifier] {
        cmd_train(ctx, stage, None, out)?;
    }
    let g = &ctx.config.generation;
    cmd_generate(ctx, None, g.split, &g.seeds, out)?;
    cmd_eval(ctx, None, out)
}
