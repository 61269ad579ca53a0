//! The experiment configuration: one human-editable TOML file capturing
//! every knob of the pipeline. CLI flags override file values; every command
//! echoes the fully resolved config into its output directory.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tacinfer::cvae::TrainConfig;
use tacinfer::evaluation::KlEstimator;
use tacinfer::kinetics::{
    default_reference_tac, reference_tac_from_coefficients, ForwardModel, FrameSchedule,
    NoiseModel, ReferenceTacCoefficients, UniformGrid,
};
use tacinfer::mcmc::McmcConfig;
use tacinfer::priors::{PriorConfig, SpreadKind};

use crate::AppError;

/// Frame schedule as (count, seconds) blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameBlocks {
    pub blocks: Vec<(usize, f64)>,
}

impl Default for FrameBlocks {
    fn default() -> Self {
        Self {
            blocks: vec![(6, 10.0), (8, 15.0), (6, 30.0), (8, 60.0), (8, 120.0), (18, 300.0)],
        }
    }
}

impl FrameBlocks {
    pub fn schedule(&self) -> Result<FrameSchedule<f64>, AppError> {
        let mut durations = Vec::new();
        for &(count, len) in &self.blocks {
            durations.extend(std::iter::repeat(len).take(count));
        }
        FrameSchedule::new(durations)
            .map_err(|e| AppError::usage(format!("invalid frame schedule: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSection {
    pub step_s: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { step_s: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceTacSection {
    pub amplitude: f64,
    pub rise_tau_s: f64,
    pub decay_tau_s: f64,
    /// Optional override: two-column CSV (time_s, value) with a header row.
    pub file: Option<String>,
}

impl Default for ReferenceTacSection {
    fn default() -> Self {
        let c = ReferenceTacCoefficients::default();
        Self { amplitude: c.amplitude, rise_tau_s: c.rise_tau_s, decay_tau_s: c.decay_tau_s, file: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorSection {
    pub setting: u8,
    pub spread_kind: SpreadKind,
}

impl Default for PriorSection {
    fn default() -> Self {
        Self { setting: 1, spread_kind: SpreadKind::Variance }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Number of test measurements M.
    pub n_tests: usize,
    /// Relative-deviation bound of the test filter.
    pub alpha: f64,
    pub kl_estimator: KlEstimator,
    /// Posterior sample count S per measurement at inference time.
    pub n_posterior_samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { n_tests: 200, alpha: 0.26, kl_estimator: KlEstimator::GaussianFit, n_posterior_samples: 45_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    /// Training runs per hyperparameter grid point.
    pub repeats: usize,
    /// Fresh measurements per DVR* grid point.
    pub dvr_shift_measurements: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { repeats: 3, dvr_shift_measurements: 8 }
    }
}

/// The resolved configuration every command runs from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub grid: GridSection,
    pub reference_tac: ReferenceTacSection,
    pub frames: FrameBlocks,
    pub noise: NoiseModel<f64>,
    pub prior: PriorSection,
    pub mcmc: McmcConfig<f64>,
    pub train: TrainConfig<f64>,
    pub eval: EvalSection,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 20_260_810,
            grid: GridSection::default(),
            reference_tac: ReferenceTacSection::default(),
            frames: FrameBlocks::default(),
            noise: NoiseModel::default(),
            prior: PriorSection::default(),
            mcmc: McmcConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, AppError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AppError::usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| AppError::usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn prior_config(&self) -> Result<PriorConfig<f64>, AppError> {
        let base = PriorConfig::setting_one(self.prior.spread_kind);
        PriorConfig::make_setting(&base, self.prior.setting)
            .map_err(|e| AppError::usage(e.to_string()))
    }

    pub fn forward_model(&self) -> Result<ForwardModel<f64>, AppError> {
        let schedule = self.frames.schedule()?;
        let grid = UniformGrid::covering(schedule.total(), self.grid.step_s)
            .map_err(|e| AppError::usage(format!("invalid grid: {e}")))?;
        let reference = match &self.reference_tac.file {
            Some(file) => tacinfer::io::read_reference_tac_csv(Path::new(file), grid)
                .map_err(|e| AppError::usage(format!("reference curve file: {e}")))?,
            None => {
                let coeffs = ReferenceTacCoefficients {
                    amplitude: self.reference_tac.amplitude,
                    rise_tau_s: self.reference_tac.rise_tau_s,
                    decay_tau_s: self.reference_tac.decay_tau_s,
                };
                if coeffs == ReferenceTacCoefficients::default() {
                    default_reference_tac(grid)
                } else {
                    reference_tac_from_coefficients(grid, &coeffs)
                }
                .map_err(|e| AppError::usage(format!("reference curve: {e}")))?
            }
        };
        ForwardModel::new(reference, schedule, self.noise)
            .map_err(|e| AppError::usage(format!("forward model: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let config = ExperimentConfig::default();
        let text = config.to_toml();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let text = "seed = 7\n[mcmc]\nn_iterations = 100\nburn_in = 10\n";
        let config: ExperimentConfig = toml::from_str(text).unwrap();
        assert_eq!(config.seed, 7);
        assert_eq!(config.mcmc.n_iterations, 100);
        assert_eq!(config.eval.alpha, 0.26);
        assert_eq!(config.train.epochs, 200);
    }
}
