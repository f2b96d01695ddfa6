//! Command-line entry points: dataset generation, training, evaluation,
//! the loss/factor ablation table, and the sampling timing study.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical abort.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vqtext::harness::{
    run_ablate, run_eval, run_gen_data, run_time_sampling, run_train, RunConfig,
};
use vqtext::Error;

#[derive(Parser)]
#[command(name = "vqtext", about = "Hierarchical VQ with text-aligned codebooks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file: JSON object or key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Override the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic image/caption dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train, writing metrics.jsonl and checkpoints into the run directory.
    Train {
        #[command(flatten)]
        common: Common,

        /// Resume from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: reconstruction error, codebook-text
    /// similarity, per-level codebook usage.
    Eval {
        #[command(flatten)]
        common: Common,

        /// Checkpoint directory to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the loss-weight ablation table (and optionally the factor
    /// presets), one training run per row, into ablate.csv.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Compare mean step time with q-sample alignment vs full-set
    /// alignment on pooled captions.
    TimeSampling {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("cannot read {}: {io}", path.display())),
            other => other,
        })?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code_for(err: &Error) -> u8 {
    if err.is_numerical() {
        return 3;
    }
    match err {
        Error::Config(_)
        | Error::Parse { .. }
        | Error::CheckpointShape { .. }
        | Error::CheckpointMissing(_)
        | Error::Json(_) => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = load_config(&common)?;
            // --out points gen-data at the dataset directory itself.
            let cfg = match &common.out {
                Some(out) => RunConfig {
                    dataset_dir: out.display().to_string(),
                    ..cfg
                },
                None => cfg,
            };
            let dir = run_gen_data(&cfg)?;
            println!("wrote {} samples to {}", cfg.dataset_count, dir.display());
        }
        Command::Train { common, resume } => {
            let cfg = load_config(&common)?;
            let summary = run_train(&cfg, resume.as_deref())?;
            let last = summary.records.last().expect("at least one step");
            println!(
                "trained {} steps; final recon_mse {:.6}; run dir {}",
                last.step,
                last.recon_mse,
                summary.run_dir.display()
            );
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let report = run_eval(&cfg, &checkpoint)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Ablate { common } => {
            let cfg = load_config(&common)?;
            let path = run_ablate(&cfg)?;
            print!("{}", std::fs::read_to_string(&path)?);
            eprintln!("wrote {}", path.display());
        }
        Command::TimeSampling { common } => {
            let cfg = load_config(&common)?;
            let report = run_time_sampling(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
