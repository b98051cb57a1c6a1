//! Thin command-line wrapper over the library's command layer.
//! Exit codes: 0 success, 1 runtime failure, 2 config error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pcss_robust::cli::{
    cmd_adapt, cmd_attack, cmd_evaluate, cmd_generate, cmd_report, cmd_train_source, CliError,
};
use pcss_robust::config::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "pcss-robust",
    about = "Robustness benchmark for point-cloud segmentation under domain shift",
    version
)]
struct Cli {
    /// Experiment config file (TOML).
    #[arg(short, long, global = true, default_value = "experiment.toml")]
    config: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate source and target scene datasets.
    Generate,
    /// Train the source segmentation model.
    TrainSource,
    /// Adapt the source model to the target domain.
    Adapt {
        /// Also train the ablation variants (baseline, alignment-only).
        #[arg(long)]
        ablation: bool,
    },
    /// Write adversarial datasets for every alpha in the sweep.
    Attack {
        /// Checkpoint to attack (defaults to adapted, then source).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Score stored adversarial datasets and emit robustness reports.
    Evaluate {
        /// Checkpoint to evaluate (defaults to adapted, then source).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Accept artifacts produced under a different config hash.
        #[arg(long)]
        force: bool,
    },
    /// Render the markdown + SVG report bundle.
    Report,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let (cfg, hash) = ExperimentConfig::load(&cli.config)?;
    match &cli.cmd {
        Cmd::Generate => {
            let m = cmd_generate(&cfg, &hash)?;
            println!(
                "generated {} source and {} target scenes in {}",
                m.source_files.len(),
                m.target_files.len(),
                cfg.output_dir.join("data").display()
            );
        }
        Cmd::TrainSource => {
            let path = cmd_train_source(&cfg, &hash)?;
            println!("source model written to {}", path.display());
        }
        Cmd::Adapt { ablation } => {
            let variants = cmd_adapt(&cfg, &hash, *ablation)?;
            println!("adapted checkpoints: {}", variants.join(", "));
        }
        Cmd::Attack { model } => {
            let out = cmd_attack(&cfg, &hash, model.as_deref())?;
            for dir in out {
                println!("adversarial dataset: {}", dir.display());
            }
        }
        Cmd::Evaluate { model, force } => {
            let reports = cmd_evaluate(&cfg, &hash, model.as_deref(), *force)?;
            for r in &reports {
                println!(
                    "{} alpha={:.2}: mIoU clean {:.2} adv {:.2} drop {:.2}%",
                    r.attack,
                    r.alpha,
                    100.0 * r.miou_clean,
                    100.0 * r.miou_adv,
                    100.0 * r.robustness_drop
                );
            }
        }
        Cmd::Report => {
            let dir = cmd_report(&cfg, &hash)?;
            println!("report bundle in {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
