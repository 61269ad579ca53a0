//! Configuration-driven command line for the simulation, MCMC reference,
//! CVAE training/inference, evaluation, and sensitivity-sweep pipeline.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tacinfer::cvae::Variant;

use commands::{SimulateKind, SweepArgs, SweepKind};
use config::ExperimentConfig;

#[derive(Debug)]
pub enum AppError {
    /// Bad flags, bad config, missing inputs: exit code 2.
    Usage(String),
    /// Failures while computing or writing results: exit code 1.
    Runtime(String),
}

impl AppError {
    pub fn usage(msg: impl Into<String>) -> Self {
        AppError::Usage(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        AppError::Runtime(msg.into())
    }
}

impl From<tacinfer::io::IoError> for AppError {
    fn from(e: tacinfer::io::IoError) -> Self {
        match e {
            tacinfer::io::IoError::Format { .. } => AppError::Usage(e.to_string()),
            other => AppError::Runtime(other.to_string()),
        }
    }
}

impl std::fmt::Display for AppError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AppError::Usage(m) | AppError::Runtime(m) => f.write_str(m),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "tacinfer",
    about = "Posterior estimation for PET kinetic parameters: SRTM simulation, MH-MCMC reference, and CVAE variants",
    version
)]
struct Cli {
    /// Experiment configuration file (TOML); flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (results are independent of this).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum KindArg {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    Vanilla,
    DualEncoder,
    DualDecoder,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Vanilla => Variant::Vanilla,
            VariantArg::DualEncoder => Variant::DualEncoder,
            VariantArg::DualDecoder => Variant::DualDecoder,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SweepKindArg {
    Beta,
    Lambda,
    TrainSize,
    DvrShift,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a dataset of (parameters, noisy measurement) pairs.
    Simulate {
        /// train: plain prior draws; test: alpha-filtered draws.
        #[arg(long, value_enum, default_value = "train")]
        kind: KindArg,
        /// Number of samples to generate.
        #[arg(long)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one MH-MCMC reference chain per measurement.
    Mcmc {
        /// Measurements file (dataset CSV).
        #[arg(long)]
        measurements: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the configured iteration count.
        #[arg(long)]
        iterations: Option<usize>,
        /// Override the configured burn-in.
        #[arg(long)]
        burn_in: Option<usize>,
    },
    /// Train one CVAE variant on a dataset.
    Train {
        #[arg(long, value_enum)]
        variant: VariantArg,
        /// Training dataset CSV.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// KL weight (beta_A, beta_B, or beta_C of the chosen variant).
        #[arg(long)]
        beta: Option<f64>,
        /// Measurement-reconstruction weight (dual-decoder only).
        #[arg(long)]
        lambda: Option<f64>,
        /// Train on the first N rows only.
        #[arg(long)]
        train_size: Option<usize>,
    },
    /// Sample amortized posteriors from a trained model.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        measurements: PathBuf,
        /// Posterior draws per measurement.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare method posteriors against the MCMC reference.
    Evaluate {
        #[arg(long)]
        mcmc_dir: PathBuf,
        /// One directory per method (repeatable).
        #[arg(long, required = true)]
        dl_dir: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sensitivity sweeps: beta, lambda, train-size, dvr-shift.
    Sweep {
        #[arg(long, value_enum)]
        kind: SweepKindArg,
        /// Hyperparameter grid as start:end:step (beta and lambda kinds).
        #[arg(long)]
        grid: Option<String>,
        /// Ascending training-set sizes (train-size kind).
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
        /// DVR* values (dvr-shift kind).
        #[arg(long, value_delimiter = ',')]
        dvr_values: Vec<f64>,
        /// Variant the swept hyperparameter belongs to (beta kind).
        #[arg(long, value_enum, default_value = "dual-decoder")]
        variant: VariantArg,
        /// Master training dataset CSV.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Test measurements CSV.
        #[arg(long)]
        measurements: Option<PathBuf>,
        /// Directory of MCMC reference posteriors for the measurements.
        #[arg(long)]
        mcmc_dir: Option<PathBuf>,
        /// Trained model checkpoint (dvr-shift kind).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Training runs per grid point (beta and lambda kinds).
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_grid_spec(spec: &str) -> Result<(f64, f64, f64), AppError> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(AppError::usage(format!("--grid expects start:end:step, got {spec:?}")));
    }
    let mut nums = [0.0f64; 3];
    for (slot, part) in nums.iter_mut().zip(&parts) {
        *slot = part
            .parse()
            .map_err(|_| AppError::usage(format!("--grid component {part:?} is not a number")))?;
    }
    Ok((nums[0], nums[1], nums[2]))
}

fn run(cli: Cli) -> Result<(), AppError> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(AppError::usage("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| AppError::runtime(format!("thread pool: {e}")))?;
    }
    config.train.seed = config.seed;

    match cli.command {
        Command::Simulate { kind, size, out } => {
            let kind = match kind {
                KindArg::Train => SimulateKind::Train,
                KindArg::Test => SimulateKind::Test,
            };
            commands::simulate(&config, kind, size, &out)
        }
        Command::Mcmc { measurements, out, iterations, burn_in } => {
            if let Some(n) = iterations {
                config.mcmc.n_iterations = n;
            }
            if let Some(b) = burn_in {
                config.mcmc.burn_in = b;
            }
            commands::mcmc(&config, &measurements, &out)
        }
        Command::Train { variant, data, out, epochs, beta, lambda, train_size } => {
            if let Some(e) = epochs {
                config.train.epochs = e;
            }
            if let Some(b) = beta {
                config.train.beta = b;
            }
            if let Some(l) = lambda {
                config.train.lambda = l;
            }
            if let Some(n) = train_size {
                if n == 0 {
                    return Err(AppError::usage("--train-size must be at least 1"));
                }
            }
            commands::train_sized(&config, variant.into(), &data, train_size, &out)
        }
        Command::Infer { model, measurements, samples, out } => {
            let n = samples.unwrap_or(config.eval.n_posterior_samples);
            commands::infer(&config, &model, &measurements, n, &out)
        }
        Command::Evaluate { mcmc_dir, dl_dir, out } => {
            commands::evaluate(&config, &mcmc_dir, &dl_dir, &out)
        }
        Command::Sweep {
            kind,
            grid,
            sizes,
            dvr_values,
            variant,
            data,
            measurements,
            mcmc_dir,
            model,
            repeats,
            out,
        } => {
            let kind = match kind {
                SweepKindArg::Beta => SweepKind::Beta,
                SweepKindArg::Lambda => SweepKind::Lambda,
                SweepKindArg::TrainSize => SweepKind::TrainSize,
                SweepKindArg::DvrShift => SweepKind::DvrShift,
            };
            let grid = grid.as_deref().map(parse_grid_spec).transpose()?;
            let args = SweepArgs {
                kind,
                grid,
                sizes,
                dvr_values,
                variant: variant.into(),
                data,
                measurements,
                mcmc_dir,
                model,
                repeats,
            };
            commands::sweep(&config, &args, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(AppError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
