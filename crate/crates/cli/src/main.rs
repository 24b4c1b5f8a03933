//! `clel` — train spherical latent-variable energy models with a contrastive
//! encoder, then sample, score OOD inputs, and run conditional/compositional
//! generation and ablation sweeps.

mod commands;
mod plot;

use clap::{Parser, Subcommand};
use clel_core::error::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "clel", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model (writes config snapshot, metrics CSV, checkpoints).
    Train {
        /// Config file (flat `key = value`); defaults to gauss8 settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one config key, repeatable: --set sgld.step_count=60
        #[arg(long = "set")]
        sets: Vec<String>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the run seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate unconditional samples from a trained checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set")]
        sets: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Use the live (non-EMA) weights.
        #[arg(long)]
        live: bool,
    },
    /// Score held-out vs OOD data (joint score and marginal baseline).
    OodEval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set")]
        sets: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        live: bool,
    },
    /// Class-conditional sampling via an aggregated mode latent.
    CondSample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// gauss8 mode index (0..8).
        #[arg(long)]
        mode: usize,
        /// Reference samples aggregated into the conditioning latent.
        #[arg(long, default_value_t = 64)]
        n_ref: usize,
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set")]
        sets: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        live: bool,
    },
    /// Compositional sampling over several mode concepts.
    Compose {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Concept mode index, repeatable.
        #[arg(long)]
        mode: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        n_ref: usize,
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set")]
        sets: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        live: bool,
    },
    /// Run the full ablation grid (projector × negatives × β × variant).
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        sets: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render an SVG from CSV artifacts.
    Plot {
        /// scatter | heatmap | hist
        #[arg(long)]
        kind: String,
        #[arg(long)]
        input: PathBuf,
        /// Optional second scatter series (drawn underneath).
        #[arg(long)]
        overlay: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify the norm-based energy reconstruction on random grid energies.
    FlexCheck {
        #[arg(long, default_value_t = 1000)]
        grid: usize,
        #[arg(long, default_value_t = 5)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> clel_core::Result<()> {
    match cli.command {
        Command::Train {
            config,
            sets,
            out,
            seed,
            resume,
        } => {
            let cfg = commands::resolve_config(config.as_deref(), &sets, seed)?;
            commands::cmd_train(&cfg, &out, resume.as_deref())
        }
        Command::Sample {
            checkpoint,
            n,
            out,
            sets,
            seed,
            live,
        } => {
            let cfg = commands::checkpoint_config(&checkpoint, &sets, seed)?;
            commands::cmd_sample(&checkpoint, &cfg, n, &out, live)
        }
        Command::OodEval {
            checkpoint,
            n,
            out,
            sets,
            seed,
            live,
        } => {
            let cfg = commands::checkpoint_config(&checkpoint, &sets, seed)?;
            commands::cmd_ood_eval(&checkpoint, &cfg, n, &out, live)
        }
        Command::CondSample {
            checkpoint,
            mode,
            n_ref,
            n,
            out,
            sets,
            seed,
            live,
        } => {
            let cfg = commands::checkpoint_config(&checkpoint, &sets, seed)?;
            commands::cmd_cond_sample(&checkpoint, &cfg, mode, n_ref, n, &out, live)
        }
        Command::Compose {
            checkpoint,
            mode,
            n_ref,
            n,
            out,
            sets,
            seed,
            live,
        } => {
            let cfg = commands::checkpoint_config(&checkpoint, &sets, seed)?;
            commands::cmd_compose(&checkpoint, &cfg, &mode, n_ref, n, &out, live)
        }
        Command::Ablate {
            config,
            sets,
            out,
            seed,
        } => {
            let cfg = commands::resolve_config(config.as_deref(), &sets, seed)?;
            commands::cmd_ablate(&cfg, &out)
        }
        Command::Plot {
            kind,
            input,
            overlay,
            out,
        } => match kind.as_str() {
            "scatter" => plot::scatter(&input, overlay.as_deref(), &out),
            "heatmap" => plot::heatmap(&input, &out),
            "hist" => plot::histogram(&input, &out),
            other => Err(Error::Config(format!(
                "unknown plot kind `{other}` (scatter|heatmap|hist)"
            ))),
        },
        Command::FlexCheck { grid, dim, seed } => commands::cmd_flex_check(grid, dim, seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::ChainDiverged { .. } | Error::TrainingDiverged { .. } => 2,
                Error::MissingArtifact(_) => 3,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
