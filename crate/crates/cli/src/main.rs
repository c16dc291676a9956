use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hbiuq::doe::parse_bounds;
use hbiuq::Result;
use hbiuq_cli::commands::{self, Context};
use hbiuq_cli::{exit, exit_code, report, RunConfig, OUT_DIR_ENV};

/// Hierarchical Bayesian inverse UQ pipeline.
#[derive(Debug, Parser)]
#[command(name = "hbiuq", version, about)]
struct Cli {
    /// JSON run configuration (defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root for all artifacts.
    #[arg(long, global = true, env = OUT_DIR_ENV)]
    out: Option<PathBuf>,
    /// Root seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Latin hypercube design.
    Doe {
        #[arg(long)]
        n: Option<usize>,
        /// `lo:hi,lo:hi,...`
        #[arg(long)]
        bounds: Option<String>,
        /// Design CSV path (default `<out>/design.csv`).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Synthetic cases, observations and simulator runs over the design.
    Simulate,
    /// One surrogate per case.
    TrainSurrogate,
    /// Held-out surrogate accuracy.
    ValidateSurrogate,
    /// Observation covariance from a boundary-condition ensemble.
    EstimateCov,
    /// Posterior sampling.
    Calibrate,
    /// Convergence diagnostics of the chains.
    Diagnose {
        /// Exit with status 2 when R-hat fails.
        #[arg(long)]
        strict: bool,
    },
    /// Prediction errors of the calibrated model on train and test cases.
    ValidatePosterior,
    /// SVG figures and CSV tables from existing artifacts.
    Report,
    /// Every stage in order.
    Run,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let root = cli.out.clone().or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("hbiuq-out"));
    let ctx = Context::new(cfg, root)?;
    let manifest = match &cli.command {
        Command::Doe { n, bounds, output } => {
            let bounds = bounds.as_deref().map(parse_bounds).transpose()?;
            commands::doe(&ctx, *n, bounds, cli.seed, output.as_deref())?
        }
        Command::Simulate => commands::simulate(&ctx)?,
        Command::TrainSurrogate => commands::train_surrogate(&ctx)?,
        Command::ValidateSurrogate => commands::validate_surrogate(&ctx)?,
        Command::EstimateCov => commands::estimate_covariance(&ctx)?,
        Command::Calibrate => commands::calibrate(&ctx)?,
        Command::Diagnose { strict } => commands::diagnose_chains(&ctx, *strict)?,
        Command::ValidatePosterior => commands::validate_posterior_cmd(&ctx)?,
        Command::Report => report::report(&ctx)?,
        Command::Run => {
            for m in commands::run_all(&ctx)? {
                println!("{}: {} outputs", m.command, m.outputs.len());
            }
            return Ok(());
        }
    };
    println!("{}: {} outputs", manifest.command, manifest.outputs.len());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
