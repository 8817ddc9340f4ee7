use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mmca_cli::commands::{execute, rerun, EvalSplit, Job};
use mmca_cli::config::RunConfig;
use mmca_cli::pipeline::DEFAULT_VARIANTS;

#[derive(Parser)]
#[command(name = "mmca", version, about = "Traffic speed forecasting from connected-vehicle trajectories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; omitted tables take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the scenario, weight-init and training seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Parent directory for the run directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corridor: points, segments and the frame grid.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Parse, clean and aggregate CV points into a dataset file.
    Extract {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        segments: PathBuf,
    },
    /// Train on a dataset; writes a checkpoint and the run record.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Score a checkpoint on a dataset split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: EvalSplit,
    },
    /// Train and score each model variant.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// Repeatable; defaults to full, no_temporal, no_spatial, no_cross, no_micro.
        #[arg(long = "variant")]
        variants: Vec<String>,
    },
    /// Train every point of a hyperparameter grid and rank by validation loss.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        grid: PathBuf,
    },
    /// Re-run extract, train and evaluate on journey subsamples.
    Penetration {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        segments: PathBuf,
        /// Repeatable; defaults to the config's penetration.keep_fractions.
        #[arg(long = "keep-fraction")]
        keep_fractions: Vec<f64>,
    },
    /// Repeat a recorded run from its manifest.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
}

fn load(common: &Common) -> mmca::Result<RunConfig> {
    let cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(cfg.with_seed(common.seed))
}

fn run(cli: Cli) -> mmca::Result<PathBuf> {
    let (job, common) = match cli.command {
        Command::Rerun { manifest, out } => return rerun(&manifest, &out),
        Command::Synth { common } => (Job::Synth, common),
        Command::Extract { common, points, segments } => (Job::Extract { points, segments }, common),
        Command::Train { common, dataset } => (Job::Train { dataset }, common),
        Command::Evaluate { common, checkpoint, dataset, split } => (Job::Evaluate { checkpoint, dataset, split }, common),
        Command::Ablate { common, dataset, mut variants } => {
            if variants.is_empty() {
                variants = DEFAULT_VARIANTS.iter().map(|s| s.to_string()).collect();
            }
            (Job::Ablate { dataset, variants }, common)
        }
        Command::Sweep { common, dataset, grid } => (Job::Sweep { dataset, grid }, common),
        Command::Penetration { common, points, segments, keep_fractions } => {
            let cfg = load(&common)?;
            let keep_fractions = if keep_fractions.is_empty() { cfg.penetration.keep_fractions.clone() } else { keep_fractions };
            return execute(&Job::Penetration { points, segments, keep_fractions }, cfg, &common.out);
        }
    };
    let cfg = load(&common)?;
    execute(&job, cfg, &common.out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", mmca_cli::error_line(&e));
            ExitCode::FAILURE
        }
    }
}
