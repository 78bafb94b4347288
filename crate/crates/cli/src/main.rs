//! Command-line entry point binding the toolkit into reproducible runs.
//!
//! Every subcommand takes a flat key=value config file plus `--set`
//! overrides, and writes a resolved-config snapshot next to its artifacts.
//! Errors exit with a category-specific code and a one-line machine-parsable
//! message on stderr.

mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ccadepth_core::config::ToolConfig;

#[derive(Parser)]
#[command(
    name = "ccadepth",
    about = "Color-coded-aperture depth toolkit: simulate CCA captures, recover depth analytically, train and run the deaberration network",
    version
)]
pub struct Cli {
    /// Flat key=value config file (defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice in the run.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Output directory for artifacts and the resolved-config snapshot.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Override one config key, repeatable: --set key=value
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Worker threads for parallel-safe stages.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a patch dataset, or render a scene image (render_mode=scene).
    Render,
    /// Train the deaberration network on a rendered dataset.
    Train {
        /// Directory holding train.ccad / test.ccad and manifests.
        #[arg(long)]
        data: PathBuf,
    },
    /// Analytical depth map of an image.
    Dfad {
        /// Input PPM image.
        #[arg(long)]
        image: PathBuf,
    },
    /// Network depth map of an image.
    Infer {
        /// Trained checkpoint (.ccaw).
        #[arg(long)]
        model: PathBuf,
        /// Input PPM image.
        #[arg(long)]
        image: PathBuf,
    },
    /// Metrics report of an estimator over a dataset's test split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// `ddn` (needs --model) or `dfad`.
        #[arg(long)]
        estimator: String,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Train and score the five ablation variants on one dataset.
    Ablate {
        #[arg(long)]
        data: PathBuf,
    },
    /// Verify every operator and the full network graph against finite
    /// differences; exit 0 only if all tolerances hold.
    Gradcheck,
    /// Compare absolute-deviation vs variance heteroscedastic losses on a
    /// label-perturbed stress dataset (raw σ parameterization).
    Losscmp {
        #[arg(long)]
        data: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => return e.report(),
    };
    let ctx = run::Ctx {
        cfg,
        seed: cli.seed,
        out: cli.out.clone(),
        workers: cli.workers.max(1),
    };
    let result = match &cli.command {
        Command::Render => run::render(&ctx),
        Command::Train { data } => run::train(&ctx, data),
        Command::Dfad { image } => run::dfad(&ctx, image),
        Command::Infer { model, image } => run::infer(&ctx, model, image),
        Command::Eval {
            data,
            estimator,
            model,
        } => run::eval(&ctx, data, estimator, model.as_deref()),
        Command::Ablate { data } => run::ablate(&ctx, data),
        Command::Gradcheck => run::gradcheck(&ctx),
        Command::Losscmp { data } => run::losscmp(&ctx, data),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => e.report(),
    }
}

fn load_config(cli: &Cli) -> Result<ToolConfig, run::CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            if !path.exists() {
                return Err(run::CliError::MissingFile(path.display().to_string()));
            }
            ToolConfig::from_file(path).map_err(run::CliError::from)?
        }
        None => ToolConfig::default(),
    };
    cfg.apply_overrides(&cli.sets).map_err(run::CliError::from)?;
    Ok(cfg)
}
