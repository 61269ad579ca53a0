//! Implementations of the six subcommands. Every command resolves its
//! configuration, computes, writes its artifacts plus a deterministic
//! `log.txt` and the resolved `config.toml` into the output directory, and
//! finishes the directory with a checksummed `manifest.json`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use tacinfer::cvae::{sample_posterior, train, Variant};
use tacinfer::evaluation::{
    evaluate_methods, sweep_dvr_shift, sweep_hyperparameters, sweep_training_size, HyperParam,
    SweepContext,
};
use tacinfer::io;
use tacinfer::kinetics::Measurement;
use tacinfer::mcmc::{run_chain, PosteriorSamples, SourceTag};
use tacinfer::priors::{generate_dataset, select_test_params, Dataset, SimulatedSample};
use tacinfer::seed::{derive_seed, rng_for};

use crate::config::ExperimentConfig;
use crate::AppError;

/// Prepares the output directory and the deterministic run log.
struct RunDir {
    dir: PathBuf,
    log: String,
}

impl RunDir {
    fn create(dir: &Path, config: &ExperimentConfig, command: &str) -> Result<Self, AppError> {
        fs::create_dir_all(dir)
            .map_err(|e| AppError::usage(format!("cannot create {}: {e}", dir.display())))?;
        fs::write(dir.join("config.toml"), config.to_toml())
            .map_err(|e| AppError::runtime(format!("writing config echo: {e}")))?;
        let mut log = String::new();
        let _ = writeln!(log, "command: {command}");
        let _ = writeln!(log, "seed: {}", config.seed);
        Ok(Self { dir: dir.to_path_buf(), log })
    }

    fn note(&mut self, line: impl AsRef<str>) {
        self.log.push_str(line.as_ref());
        self.log.push('\n');
    }

    /// Writes the path-free summary into the log (so identical runs produce
    /// identical bytes regardless of where they land), prints it with the
    /// directory appended, and seals the manifest.
    fn finish(mut self, summary: &str) -> Result<(), AppError> {
        self.note(summary);
        fs::write(self.dir.join("log.txt"), &self.log)
            .map_err(|e| AppError::runtime(format!("writing log: {e}")))?;
        io::write_manifest(&self.dir).map_err(AppError::from)?;
        println!("{summary} -> {}", self.dir.display());
        Ok(())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

/// What a `simulate` invocation draws from the prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimulateKind {
    /// Plain prior draws (training data).
    Train,
    /// Prior draws passed through the relative-deviation test filter.
    Test,
}

pub fn simulate(
    config: &ExperimentConfig,
    kind: SimulateKind,
    size: usize,
    out: &Path,
) -> Result<(), AppError> {
    if size == 0 {
        return Err(AppError::usage("--size must be at least 1"));
    }
    let prior = config.prior_config()?;
    let forward = config.forward_model()?;
    let mut run = RunDir::create(out, config, "simulate")?;

    let dataset = match kind {
        SimulateKind::Train => generate_dataset(&prior, size, &forward, config.seed)
            .map_err(|e| AppError::runtime(format!("dataset generation: {e}")))?,
        SimulateKind::Test => {
            let mut rng = rng_for(config.seed, "test-filter", 0);
            let params = select_test_params(&prior, size, config.eval.alpha, &mut rng)
                .map_err(|e| AppError::runtime(format!("test selection: {e}")))?;
            let results: Vec<Result<SimulatedSample<f64>, AppError>> = params
                .par_iter()
                .enumerate()
                .map(|(i, p)| {
                    let mut rng = rng_for(config.seed, "test-sample", i as u64);
                    let (m, sigma) = forward
                        .simulate(p, &mut rng)
                        .map_err(|e| AppError::runtime(format!("simulation: {e}")))?;
                    Ok(SimulatedSample { params: *p, noise_sigma: sigma, y: m.y })
                })
                .collect();
            let samples = results.into_iter().collect::<Result<Vec<_>, _>>()?;
            Dataset { samples, seed: config.seed, prior, truncation_acceptance: f64::NAN }
        }
    };

    let csv_path = run.path("dataset.csv");
    io::write_dataset_csv(&csv_path, &dataset)?;
    let sidecar = io::DatasetSidecar {
        prior,
        seed: config.seed,
        size: dataset.len(),
        truncation_acceptance: dataset.truncation_acceptance,
        noise: config.noise,
    };
    io::write_json(&run.path("dataset.json"), &sidecar)?;
    run.note(format!("wrote dataset.csv ({} rows)", dataset.len()));

    let kind_name = match kind {
        SimulateKind::Train => "train",
        SimulateKind::Test => "test",
    };
    run.finish(&format!(
        "simulate: {size} {kind_name} samples (setting {})",
        config.prior.setting
    ))
}

/// Reads a dataset/measurements CSV and attaches the configured schedule.
fn load_measurements(
    config: &ExperimentConfig,
    path: &Path,
) -> Result<(Vec<SimulatedSample<f64>>, Vec<Measurement<f64>>), AppError> {
    if !path.exists() {
        return Err(AppError::usage(format!("measurements file {} not found", path.display())));
    }
    let samples = io::read_dataset_csv::<f64>(path)?;
    if samples.is_empty() {
        return Err(AppError::usage(format!("{} contains no measurements", path.display())));
    }
    let schedule = config.frames.schedule()?;
    if samples[0].y.len() != schedule.n_frames() {
        return Err(AppError::usage(format!(
            "{} has {}-frame measurements but the configured schedule has {}",
            path.display(),
            samples[0].y.len(),
            schedule.n_frames()
        )));
    }
    let measurements = samples
        .iter()
        .map(|s| Measurement { y: s.y.clone(), schedule: schedule.clone() })
        .collect();
    Ok((samples, measurements))
}

pub fn mcmc(config: &ExperimentConfig, measurements_path: &Path, out: &Path) -> Result<(), AppError> {
    let prior = config.prior_config()?;
    let forward = config.forward_model()?;
    let (samples, measurements) = load_measurements(config, measurements_path)?;
    if config.mcmc.burn_in >= config.mcmc.n_iterations {
        return Err(AppError::usage("mcmc burn-in must be smaller than the iteration count"));
    }
    let mut run = RunDir::create(out, config, "mcmc")?;

    let chains: Vec<Result<_, AppError>> = measurements
        .par_iter()
        .enumerate()
        .map(|(i, y)| {
            let fixed = (!config.mcmc.sample_noise_sigma).then(|| samples[i].noise_sigma);
            let mut rng = rng_for(config.seed, "mcmc-chain", i as u64);
            run_chain(y, &config.mcmc, &prior, &forward, fixed, i, &mut rng)
                .map_err(|e| AppError::runtime(format!("chain {i}: {e}")))
        })
        .collect();

    let mut converged = 0usize;
    let threshold = 1e-3;
    for (i, result) in chains.into_iter().enumerate() {
        let chain = result?;
        io::write_posterior_csv(&run.path(&format!("posterior_m{i:04}.csv")), &chain.samples)?;
        io::write_trace_csv(&run.path(&format!("trace_m{i:04}.csv")), &chain.trace)?;
        let diagnostics = io::ChainDiagnostics {
            measurement_id: i,
            acceptance_rate: chain.acceptance_rate,
            final_proposal_scales: chain.final_scales.clone(),
            geweke: chain.geweke.clone(),
        };
        io::write_json(&run.path(&format!("diagnostics_m{i:04}.json")), &diagnostics)?;
        if chain.geweke.passes(threshold) {
            converged += 1;
        }
        run.note(format!(
            "chain {i}: acceptance {:.3}, geweke pass {}",
            chain.acceptance_rate,
            chain.geweke.passes(threshold)
        ));
    }

    run.finish(&format!(
        "mcmc: {} chains x {} iterations ({} retained each), {}/{} geweke-converged",
        measurements.len(),
        config.mcmc.n_iterations,
        config.mcmc.retained(),
        converged,
        measurements.len()
    ))
}

pub fn train_sized(
    config: &ExperimentConfig,
    variant: Variant,
    data_path: &Path,
    train_size: Option<usize>,
    out: &Path,
) -> Result<(), AppError> {
    if !data_path.exists() {
        return Err(AppError::usage(format!("training data {} not found", data_path.display())));
    }
    let mut samples = io::read_dataset_csv::<f64>(data_path)?;
    if let Some(n) = train_size {
        if n > samples.len() {
            return Err(AppError::usage(format!(
                "--train-size {n} exceeds the {} rows of {}",
                samples.len(),
                data_path.display()
            )));
        }
        samples.truncate(n);
    }
    let prior = config.prior_config()?;
    let dataset = Dataset {
        samples,
        seed: config.seed,
        prior,
        truncation_acceptance: f64::NAN,
    };
    let mut run = RunDir::create(out, config, "train")?;

    let model = train(variant, &dataset, &config.train)
        .map_err(|e| AppError::runtime(format!("training: {e}")))?;
    io::write_model_json(&run.path("model.json"), &model)?;

    let mut losses = csv::Writer::from_path(run.path("training_log.csv"))
        .map_err(|e| AppError::runtime(format!("training log: {e}")))?;
    losses
        .write_record(["epoch", "mean_loss"])
        .and_then(|_| {
            for (e, l) in model.epoch_losses.iter().enumerate() {
                losses.write_record([(e + 1).to_string(), l.to_string()])?;
            }
            losses.flush().map_err(csv::Error::from)
        })
        .map_err(|e| AppError::runtime(format!("training log: {e}")))?;

    run.note(format!("log-variance clamp hits: {}", model.log_var_clamp_hits));
    run.finish(&format!(
        "train: {variant} on {} samples, {} epochs, final loss {:.6}",
        dataset.len(),
        config.train.epochs,
        model.epoch_losses.last().copied().unwrap_or(f64::NAN)
    ))
}

pub fn infer(
    config: &ExperimentConfig,
    model_path: &Path,
    measurements_path: &Path,
    n_samples: usize,
    out: &Path,
) -> Result<(), AppError> {
    if n_samples == 0 {
        return Err(AppError::usage("--samples must be at least 1"));
    }
    if !model_path.exists() {
        return Err(AppError::usage(format!("model {} not found", model_path.display())));
    }
    let model = io::read_model_json::<f64>(model_path)?;
    let (_, measurements) = load_measurements(config, measurements_path)?;
    if model.y_dim() != measurements[0].y.len() {
        return Err(AppError::usage(format!(
            "model expects {}-frame measurements but {} has {}",
            model.y_dim(),
            measurements_path.display(),
            measurements[0].y.len()
        )));
    }
    let run = RunDir::create(out, config, "infer")?;

    let sets: Vec<Result<PosteriorSamples<f64>, AppError>> = measurements
        .par_iter()
        .enumerate()
        .map(|(i, y)| {
            let mut rng = rng_for(config.seed, "infer-measurement", i as u64);
            sample_posterior(&model, y, n_samples, i, &mut rng)
                .map_err(|e| AppError::runtime(format!("inference on measurement {i}: {e}")))
        })
        .collect();
    for (i, set) in sets.into_iter().enumerate() {
        let set = set?;
        io::write_posterior_csv(&run.path(&format!("posterior_m{i:04}.csv")), &set)?;
    }

    run.finish(&format!(
        "infer: {} x {} samples from {}",
        measurements.len(),
        n_samples,
        model.variant
    ))
}

/// Loads every `posterior_m*.csv` in a directory, sorted by measurement id.
fn load_posterior_dir(dir: &Path) -> Result<Vec<PosteriorSamples<f64>>, AppError> {
    if !dir.is_dir() {
        return Err(AppError::usage(format!("{} is not a directory", dir.display())));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| AppError::usage(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("posterior_m") && n.ends_with(".csv"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(AppError::usage(format!(
            "{} contains no posterior_m*.csv files",
            dir.display()
        )));
    }
    let sets: Vec<Result<PosteriorSamples<f64>, AppError>> = paths
        .par_iter()
        .map(|p| io::read_posterior_csv::<f64>(p).map_err(AppError::from))
        .collect();
    let mut out = sets.into_iter().collect::<Result<Vec<_>, _>>()?;
    out.sort_by_key(|s| s.measurement_id);
    Ok(out)
}

pub fn evaluate(
    config: &ExperimentConfig,
    mcmc_dir: &Path,
    dl_dirs: &[PathBuf],
    out: &Path,
) -> Result<(), AppError> {
    let mcmc_sets = load_posterior_dir(mcmc_dir)?;
    if mcmc_sets.iter().any(|s| s.source != SourceTag::Mcmc) {
        return Err(AppError::usage(format!(
            "{} holds non-MCMC posterior files",
            mcmc_dir.display()
        )));
    }
    let mut method_sets = Vec::new();
    for dir in dl_dirs {
        let sets = load_posterior_dir(dir)?;
        let source = sets[0].source;
        if sets.iter().any(|s| s.source != source) {
            return Err(AppError::usage(format!("{} mixes source tags", dir.display())));
        }
        method_sets.push(sets);
    }
    let mut run = RunDir::create(out, config, "evaluate")?;

    let report = evaluate_methods(
        &mcmc_sets,
        &method_sets,
        config.eval.kl_estimator,
        config.prior.setting,
    )
    .map_err(|e| AppError::runtime(format!("evaluation: {e}")))?;
    io::write_json(&run.path("report.json"), &report)?;
    io::write_eval_csv(&run.path("tables.csv"), &report)?;

    for method in &report.methods {
        run.note(format!(
            "{}: delta_mu(dvr) {:.4}, d_kl(dvr) {:.4}",
            method.source, method.params[0].delta_mu, method.params[0].d_kl
        ));
    }
    run.finish(&format!(
        "evaluate: {} methods x {} tests (setting {})",
        report.methods.len(),
        report.n_tests,
        report.setting
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    Beta,
    Lambda,
    TrainSize,
    DvrShift,
}

pub struct SweepArgs {
    pub kind: SweepKind,
    pub grid: Option<(f64, f64, f64)>,
    pub sizes: Vec<usize>,
    pub dvr_values: Vec<f64>,
    pub variant: Variant,
    pub data: Option<PathBuf>,
    pub measurements: Option<PathBuf>,
    pub mcmc_dir: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub repeats: Option<usize>,
}

pub fn grid_points(start: f64, end: f64, step: f64) -> Result<Vec<f64>, AppError> {
    if step <= 0.0 || end < start {
        return Err(AppError::usage("grid must satisfy start <= end with a positive step"));
    }
    let n = ((end - start) / step).round() as usize;
    Ok((0..=n).map(|i| start + i as f64 * step).collect())
}

pub fn sweep(config: &ExperimentConfig, args: &SweepArgs, out: &Path) -> Result<(), AppError> {
    let prior = config.prior_config()?;
    let forward = config.forward_model()?;

    let need = |opt: &Option<PathBuf>, flag: &str| -> Result<PathBuf, AppError> {
        opt.clone().ok_or_else(|| {
            AppError::usage(format!("sweep kind requires {flag}"))
        })
    };

    match args.kind {
        SweepKind::Beta | SweepKind::Lambda | SweepKind::TrainSize => {
            let data_path = need(&args.data, "--data")?;
            let measurements_path = need(&args.measurements, "--measurements")?;
            let mcmc_dir = need(&args.mcmc_dir, "--mcmc-dir")?;
            let samples = io::read_dataset_csv::<f64>(&data_path)?;
            let dataset = Dataset {
                samples,
                seed: config.seed,
                prior,
                truncation_acceptance: f64::NAN,
            };
            let (_, measurements) = load_measurements(config, &measurements_path)?;
            let mcmc_sets = load_posterior_dir(&mcmc_dir)?;
            if mcmc_sets.len() != measurements.len() {
                return Err(AppError::usage(format!(
                    "{} chains but {} measurements",
                    mcmc_sets.len(),
                    measurements.len()
                )));
            }
            let ctx = SweepContext {
                dataset: &dataset,
                forward: &forward,
                test_measurements: &measurements,
                mcmc_reference: &mcmc_sets,
                train_config: &config.train,
                n_posterior_samples: config.eval.n_posterior_samples,
                estimator: config.eval.kl_estimator,
                seed: config.seed,
            };
            let run = RunDir::create(out, config, "sweep")?;
            match args.kind {
                SweepKind::Beta | SweepKind::Lambda => {
                    let (start, end, step) = args
                        .grid
                        .ok_or_else(|| AppError::usage("--grid start:end:step is required"))?;
                    let grid = grid_points(start, end, step)?;
                    let hyper = match (args.kind, args.variant) {
                        (SweepKind::Beta, Variant::DualEncoder) => HyperParam::BetaA,
                        (SweepKind::Beta, _) => HyperParam::BetaB,
                        (SweepKind::Lambda, _) => HyperParam::Lambda,
                        _ => unreachable!(),
                    };
                    let repeats = args.repeats.unwrap_or(config.sweep.repeats);
                    let points = sweep_hyperparameters(&ctx, hyper, &grid, repeats)
                        .map_err(|e| AppError::runtime(format!("sweep: {e}")))?;
                    io::write_hyper_sweep_csv(&run.path("sweep_hyper.csv"), &points)?;
                    io::write_json(&run.path("sweep_hyper.json"), &points)?;
                    run.finish(&format!(
                        "sweep {hyper}: {} grid points x {repeats} repeats",
                        grid.len()
                    ))
                }
                SweepKind::TrainSize => {
                    if args.sizes.is_empty() {
                        return Err(AppError::usage("--sizes is required (ascending list)"));
                    }
                    let points = sweep_training_size(&ctx, &args.sizes)
                        .map_err(|e| AppError::runtime(format!("sweep: {e}")))?;
                    io::write_size_sweep_csv(&run.path("sweep_train_size.csv"), &points)?;
                    io::write_json(&run.path("sweep_train_size.json"), &points)?;
                    run.finish(&format!("sweep train-size: {} sizes", points.len()))
                }
                _ => unreachable!(),
            }
        }
        SweepKind::DvrShift => {
            let model_path = need(&args.model, "--model")?;
            if !model_path.exists() {
                return Err(AppError::usage(format!("model {} not found", model_path.display())));
            }
            let model = io::read_model_json::<f64>(&model_path)?;
            let run = RunDir::create(out, config, "sweep")?;
            let points = sweep_dvr_shift(
                &args.dvr_values,
                &model,
                &prior,
                &forward,
                &config.mcmc,
                config.sweep.dvr_shift_measurements,
                config.eval.n_posterior_samples,
                config.eval.kl_estimator,
                derive_seed(config.seed, "sweep-dvr-shift", 0),
            )
            .map_err(|e| AppError::runtime(format!("sweep: {e}")))?;
            io::write_dvr_sweep_csv(&run.path("sweep_dvr_shift.csv"), &points)?;
            io::write_json(&run.path("sweep_dvr_shift.json"), &points)?;
            run.finish(&format!(
                "sweep dvr-shift: {} grid points x {} measurements",
                points.len(),
                config.sweep.dvr_shift_measurements
            ))
        }
    }
}
