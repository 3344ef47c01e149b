use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use vtsyn_cli::commands::{cmd_align, cmd_eval, cmd_generate, cmd_plot, cmd_synth, cmd_train};
use vtsyn_cli::{run_pipeline, Context, PipelineConfig, Result, Stage};
use vtsyn_core::corpus::{CellCounts, Split};

#[derive(Debug, Parser)]
#[command(name = "vtsyn", version, about = "Visual-to-tactile road excitation generation pipeline")]
struct Cli {
    /// Pipeline config (JSON). Defaults to `<out>/config.json` when present,
    /// otherwise built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CountsPreset {
    Uniform,
    Table1Day,
    Table1Full,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the synthetic corpus.
    Synth {
        #[arg(long)]
        counts: Option<CountsPreset>,
    },
    /// Align a raw recording session into a dataset.
    Align {
        #[arg(long)]
        session: PathBuf,
    },
    /// Train one stage.
    Train {
        #[arg(long)]
        stage: Stage,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Generate tactile signals for a split.
    Generate {
        #[arg(long)]
        split: Option<String>,
        /// Comma-separated generation seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Score generations and render plots.
    Eval {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Render plots only.
    Plot {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Run synth, all training stages, generate and eval.
    Pipeline,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let saved = cli.out.join("config.json");
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None if saved.is_file() => PipelineConfig::load(&saved)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Command::Synth { counts: Some(preset) } = &cli.command {
        cfg.corpus.counts = match preset {
            CountsPreset::Uniform => CellCounts::uniform(40),
            CountsPreset::Table1Day => CellCounts::table1_day(),
            CountsPreset::Table1Full => CellCounts::table1_full(),
        };
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let ctx = Context::new(load_config(cli)?, &cli.out)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match &cli.command {
        Command::Synth { .. } => {
            cmd_synth(&ctx, &mut out)?;
        }
        Command::Align { session } => {
            cmd_align(&ctx, session, &mut out)?;
        }
        Command::Train { stage, manifest } => {
            cmd_train(&ctx, *stage, manifest.as_deref(), &mut out)?;
        }
        Command::Generate { split, seeds, manifest } => {
            let split: Split = match split {
                Some(s) => s.parse().map_err(|e| vtsyn_cli::CliError::Config(format!("{e}")))?,
                None => ctx.config.generation.split,
            };
            let seeds = seeds.clone().unwrap_or_else(|| ctx.config.generation.seeds.clone());
            cmd_generate(&ctx, manifest.as_deref(), split, &seeds, &mut out)?;
        }
        Command::Eval { manifest } => {
            cmd_eval(&ctx, manifest.as_deref(), &mut out)?;
        }
        Command::Plot { manifest } => {
            cmd_plot(&ctx, manifest.as_deref(), &mut out)?;
        }
        Command::Pipeline => {
            run_pipeline(&ctx, &mut out)?;
        }
    }
    out.flush().ok();
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
