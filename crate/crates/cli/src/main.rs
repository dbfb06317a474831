use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use depca_cli::config::{load_config, ExperimentConfig, Mode};
use depca_cli::matrix_io::Format;
use depca_cli::{run::run, CliError, Result};

/// Linear non-Gaussian components with learned dependency structure.
#[derive(Debug, Parser)]
#[command(name = "depca", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw synthetic sources and mixtures (X, A, S).
    Generate(Flags),
    /// Whiten `--input` and estimate W and M.
    Estimate(Flags),
    /// Score an estimate directory (`--input`) against a true mixing matrix (`--mixing`).
    Evaluate(Flags),
    /// Compare the approximate two-source density against Gaussian and Laplace fits.
    ApproxCheck(Flags),
    /// Embed the components of a dependency matrix (`--input`) in two dimensions.
    Mds(Flags),
    /// Generate, preprocess, estimate, evaluate and embed in one run.
    Pipeline(Flags),
}

impl Command {
    fn split(self) -> (Mode, Flags) {
        match self {
            Command::Generate(f) => (Mode::Generate, f),
            Command::Estimate(f) => (Mode::Estimate, f),
            Command::Evaluate(f) => (Mode::Evaluate, f),
            Command::ApproxCheck(f) => (Mode::ApproxCheck, f),
            Command::Mds(f) => (Mode::Mds, f),
            Command::Pipeline(f) => (Mode::Pipeline, f),
        }
    }
}

/// Flags override the corresponding config entries.
#[derive(Debug, Args)]
struct Flags {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for parallel restarts.
    #[arg(long)]
    threads: Option<usize>,
    /// Source dimension for generate, pipeline and evaluate; whitened dimensions kept otherwise.
    #[arg(long)]
    dims: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    /// Sparsity weight on the dependency matrix.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    #[arg(long)]
    allow_nan: bool,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    mixing: Option<PathBuf>,
    /// Couplings for approx-check, comma separated.
    #[arg(long, value_delimiter = ',')]
    m12: Option<Vec<f64>>,
    /// Sample count for generate, pipeline and approx-check.
    #[arg(long = "T")]
    samples: Option<usize>,
}

fn resolve(mode: Mode, flags: Flags) -> Result<ExperimentConfig> {
    let mut cfg = match &flags.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.mode = Some(mode);
    if let Some(v) = flags.seed {
        cfg.seed = v;
    }
    if let Some(v) = flags.threads {
        cfg.threads = Some(v);
    }
    if let Some(v) = flags.dims {
        match mode {
            Mode::Generate | Mode::Pipeline | Mode::Evaluate => cfg.generate.dim = v,
            _ => cfg.preprocess.dims = Some(v),
        }
    }
    if let Some(v) = flags.restarts {
        cfg.estimator.restarts = v;
    }
    if let Some(v) = flags.lambda {
        cfg.estimator.lambda = v;
    }
    if let Some(v) = flags.bins {
        cfg.eval.bins = v;
    }
    if let Some(v) = flags.output_dir {
        cfg.output_dir = v;
    }
    if let Some(v) = flags.format {
        cfg.format = v;
    }
    cfg.allow_nan |= flags.allow_nan;
    if let Some(v) = flags.input {
        cfg.input.data = Some(v);
    }
    if let Some(v) = flags.mixing {
        cfg.input.mixing = Some(v);
    }
    if let Some(v) = flags.m12 {
        cfg.eval.m12 = v;
    }
    if let Some(v) = flags.samples {
        match mode {
            Mode::ApproxCheck => cfg.eval.approx_samples = v,
            _ => cfg.generate.samples = v,
        }
    }
    Ok(cfg)
}

fn main_inner() -> Result<PathBuf> {
    let (mode, flags) = Cli::parse().command.split();
    let cfg = resolve(mode, flags)?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::config(format!("cannot start {n} worker threads: {e}")))?;
    }
    run(&cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match main_inner() {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
