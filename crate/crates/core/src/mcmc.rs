//! Random-walk Metropolis-Hastings reference sampler for the SRTM posterior,
//! with burn-in-only proposal-scale adaptation and Geweke convergence
//! diagnostics.
//!
//! The chain state is (DVR, k2, R1, ln sigma): the nuisance noise level is
//! sampled as a fourth dimension under its Gamma prior, proposed in log
//! space (the Jacobian term is part of the chain-space target), and only
//! kinetic-parameter marginals are reported. A config switch fixes sigma
//! instead, for ablation.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinetics::{
    ForwardModel, ForwardScratch, KineticParams, KineticsError, Measurement, NoiseModel,
    ReferenceTac,
};
use crate::priors::PriorConfig;
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum McmcError {
    #[error("invalid chain configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite log-posterior at the initial state")]
    Initialization,
    #[error("trace must have at least {min} draws, got {got}")]
    TraceTooShort { min: usize, got: usize },
    #[error(transparent)]
    Kinetics(#[from] KineticsError),
}

/// Chain length, burn-in, proposal scales, and adaptation policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, bound(deserialize = "T: Real"))]
pub struct McmcConfig<T> {
    pub n_iterations: usize,
    pub burn_in: usize,
    /// Per-dimension std of the diagonal proposal; `None` derives
    /// 5% of the prior std per kinetic dimension and 0.1 for ln sigma.
    pub proposal_scales: Option<Vec<T>>,
    pub adapt_during_burnin: bool,
    pub target_acceptance: T,
    /// When false, sigma is fixed to a supplied value instead of sampled.
    pub sample_noise_sigma: bool,
}

impl<T: Real> Default for McmcConfig<T> {
    fn default() -> Self {
        Self {
            n_iterations: 60_000,
            burn_in: 15_000,
            proposal_scales: None,
            adapt_during_burnin: true,
            target_acceptance: T::cst(0.3),
            sample_noise_sigma: true,
        }
    }
}

impl<T: Real> McmcConfig<T> {
    pub fn retained(&self) -> usize {
        self.n_iterations - self.burn_in
    }
}

/// Which method produced a set of posterior draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceTag {
    Mcmc,
    CvaeVanilla,
    CvaeDualEncoder,
    CvaeDualDecoder,
}

impl fmt::Display for SourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SourceTag::Mcmc => "mcmc",
            SourceTag::CvaeVanilla => "cvae-vanilla",
            SourceTag::CvaeDualEncoder => "cvae-dual-encoder",
            SourceTag::CvaeDualDecoder => "cvae-dual-decoder",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for SourceTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mcmc" => Ok(SourceTag::Mcmc),
            "cvae-vanilla" => Ok(SourceTag::CvaeVanilla),
            "cvae-dual-encoder" => Ok(SourceTag::CvaeDualEncoder),
            "cvae-dual-decoder" => Ok(SourceTag::CvaeDualDecoder),
            other => Err(format!("unknown source tag {other:?}")),
        }
    }
}

/// A set of posterior draws over (DVR, k2, R1), optionally with the sampled
/// nuisance sigma per draw, tagged by producing method and measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSamples<T> {
    pub draws: Vec<[T; 3]>,
    pub noise_sigmas: Option<Vec<T>>,
    pub source: SourceTag,
    pub measurement_id: usize,
}

impl<T: Real> PosteriorSamples<T> {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    /// One kinetic-parameter marginal (0 = DVR, 1 = k2, 2 = R1).
    pub fn column(&self, p: usize) -> Vec<T> {
        self.draws.iter().map(|d| d[p]).collect()
    }
}

/// Geweke statistic for one parameter: means of the first 10% and last 50%
/// of the post-burn-in trace, their absolute difference, and the same
/// difference divided by the trace std (a scale-free companion diagnostic).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GewekeParamStat<T> {
    pub mean_first_10pct: T,
    pub mean_last_50pct: T,
    pub abs_difference: T,
    pub normalized_difference: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GewekeReport<T> {
    pub parameters: Vec<String>,
    pub stats: Vec<GewekeParamStat<T>>,
}

impl<T: Real> GewekeReport<T> {
    /// Convergence pass: absolute difference below `threshold` for every
    /// kinetic parameter (the nuisance sigma column is excluded).
    pub fn passes(&self, threshold: T) -> bool {
        self.parameters
            .iter()
            .zip(&self.stats)
            .filter(|(name, _)| name.as_str() != "noise_sigma")
            .all(|(_, s)| s.abs_difference < threshold)
    }
}

fn mean_of<T: Real>(values: &[T]) -> T {
    values.iter().copied().sum::<T>() / T::from_usize(values.len()).unwrap()
}

/// Geweke statistic for a single trace column (length >= 10).
pub fn geweke_column<T: Real>(values: &[T]) -> Result<GewekeParamStat<T>, McmcError> {
    if values.len() < 10 {
        return Err(McmcError::TraceTooShort { min: 10, got: values.len() });
    }
    let n = values.len();
    let first = &values[..n / 10];
    let last = &values[n - n / 2..];
    let mean_first = mean_of(first);
    let mean_last = mean_of(last);
    let abs_difference = (mean_first - mean_last).abs();

    let mean_all = mean_of(values);
    let var = values
        .iter()
        .map(|&v| (v - mean_all) * (v - mean_all))
        .sum::<T>()
        / T::from_usize(n - 1).unwrap();
    let std = var.sqrt();
    let normalized_difference = if std > T::zero() { abs_difference / std } else { T::zero() };

    Ok(GewekeParamStat { mean_first_10pct: mean_first, mean_last_50pct: mean_last, abs_difference, normalized_difference })
}

/// Geweke report over the kinetic marginals of a post-burn-in sample set
/// (plus the sigma column when it was sampled).
pub fn geweke<T: Real>(samples: &PosteriorSamples<T>) -> Result<GewekeReport<T>, McmcError> {
    let mut parameters = vec!["dvr".to_string(), "k2_per_min".to_string(), "r1".to_string()];
    let mut stats = Vec::with_capacity(4);
    for p in 0..3 {
        stats.push(geweke_column(&samples.column(p))?);
    }
    if let Some(sigmas) = &samples.noise_sigmas {
        parameters.push("noise_sigma".to_string());
        stats.push(geweke_column(sigmas)?);
    }
    Ok(GewekeReport { parameters, stats })
}

/// Low-level chain controls for the generic random-walk engine.
#[derive(Debug, Clone)]
pub struct ChainControls<T> {
    pub n_iterations: usize,
    pub burn_in: usize,
    pub initial_scales: Vec<T>,
    pub adapt_during_burnin: bool,
    pub target_acceptance: T,
}

/// Everything a finished chain produced, including burn-in.
#[derive(Debug, Clone)]
pub struct ChainOutput<T> {
    pub states: Vec<Vec<T>>,
    pub log_posts: Vec<T>,
    pub accepted: Vec<bool>,
    pub final_scales: Vec<T>,
    pub post_burnin_acceptance: f64,
    /// Instrumentation: true would mean adaptation leaked past burn-in.
    pub scales_updated_after_burnin: bool,
}

/// Random-walk Metropolis-Hastings over an arbitrary log-target.
///
/// Symmetric Gaussian proposal with diagonal scales; acceptance
/// min(1, exp(delta log-target)). With adaptation enabled (burn-in only, so
/// the retained segment keeps detailed balance), a Robbins-Monro update
/// steers a global factor toward the target acceptance, and from a fifth of
/// the way into burn-in the per-dimension scales additionally track the
/// running coordinate standard deviations; parameters whose posterior scales
/// differ by orders of magnitude would otherwise strangle the slowest one.
pub fn run_random_walk<T, F, R>(
    mut log_target: F,
    init: &[T],
    controls: &ChainControls<T>,
    rng: &mut R,
) -> Result<ChainOutput<T>, McmcError>
where
    T: Real,
    F: FnMut(&[T]) -> T,
    R: Rng + ?Sized,
{
    if controls.burn_in >= controls.n_iterations {
        return Err(McmcError::InvalidConfig(format!(
            "burn-in {} must be smaller than the iteration count {}",
            controls.burn_in, controls.n_iterations
        )));
    }
    if controls.initial_scales.len() != init.len() {
        return Err(McmcError::InvalidConfig(format!(
            "{} proposal scales for a {}-dimensional state",
            controls.initial_scales.len(),
            init.len()
        )));
    }
    if controls.initial_scales.iter().any(|s| !(*s > T::zero())) {
        return Err(McmcError::InvalidConfig("proposal scales must be positive".into()));
    }

    let dim = init.len();
    let mut state = init.to_vec();
    let mut lp = log_target(&state);
    if !lp.is_finite() {
        return Err(McmcError::Initialization);
    }

    let mut scales = controls.initial_scales.clone();
    // global step factor applied on top of the per-dimension shape
    let mut log_factor = T::zero();
    let mut shape = controls.initial_scales.clone();
    let rebalance_from = controls.burn_in / 5;

    // Welford accumulators over the burn-in history
    let mut count = 0usize;
    let mut run_mean = vec![T::zero(); dim];
    let mut run_m2 = vec![T::zero(); dim];

    let mut states = Vec::with_capacity(controls.n_iterations);
    let mut log_posts = Vec::with_capacity(controls.n_iterations);
    let mut accepted_flags = Vec::with_capacity(controls.n_iterations);
    let mut proposal = vec![T::zero(); dim];
    let mut post_burnin_accepts = 0usize;
    let mut scales_at_freeze: Option<Vec<T>> = None;

    for iter in 0..controls.n_iterations {
        for (p, (&s, &x)) in proposal.iter_mut().zip(scales.iter().zip(state.iter())) {
            *p = x + s * T::standard_normal(rng);
        }
        let lp_new = log_target(&proposal);
        let delta = lp_new - lp;
        let accept_prob = if delta >= T::zero() { T::one() } else { delta.exp() };
        let accept = if lp_new.is_finite() {
            delta >= T::zero() || T::uniform_01(rng) < accept_prob
        } else {
            false
        };
        if accept {
            state.copy_from_slice(&proposal);
            lp = lp_new;
        }

        let in_burnin = iter < controls.burn_in;
        if controls.adapt_during_burnin && in_burnin {
            if iter == rebalance_from {
                // drop the pre-rebalance history; the initial tuning phase
                // biases the coordinate variances toward the starting point
                count = 0;
                run_mean.iter_mut().for_each(|m| *m = T::zero());
                run_m2.iter_mut().for_each(|m| *m = T::zero());
            }
            count += 1;
            let n = T::from_usize(count).unwrap();
            for i in 0..dim {
                let d = state[i] - run_mean[i];
                run_mean[i] += d / n;
                run_m2[i] += d * (state[i] - run_mean[i]);
            }

            let gamma = T::cst(((iter + 1) as f64).powf(-0.6));
            log_factor += gamma * (accept_prob - controls.target_acceptance);

            if iter >= rebalance_from && count > 10 {
                for i in 0..dim {
                    let var = run_m2[i] / T::from_usize(count - 1).unwrap();
                    if var > T::zero() {
                        shape[i] = var.sqrt();
                    }
                }
            }
            let factor = log_factor.exp();
            for (s, &sh) in scales.iter_mut().zip(&shape) {
                *s = sh * factor;
            }
        }
        if iter + 1 == controls.burn_in {
            scales_at_freeze = Some(scales.clone());
        }
        if !in_burnin && accept {
            post_burnin_accepts += 1;
        }

        states.push(state.clone());
        log_posts.push(lp);
        accepted_flags.push(accept);
    }

    let retained = controls.n_iterations - controls.burn_in;
    let scales_updated_after_burnin =
        scales_at_freeze.map_or(false, |frozen| frozen != scales);
    Ok(ChainOutput {
        states,
        log_posts,
        accepted: accepted_flags,
        final_scales: scales,
        post_burnin_acceptance: post_burnin_accepts as f64 / retained as f64,
        scales_updated_after_burnin,
    })
}

/// Log-likelihood of a measurement for given kinetic parameters and noise
/// level: independent per-frame Gaussians with std sigma * sqrt(dt_n / T)
/// around the noiseless frame integrals. Constants independent of the
/// arguments are dropped.
pub fn log_likelihood<T: Real>(
    params: &KineticParams<T>,
    noise_sigma: T,
    y: &Measurement<T>,
    forward: &ForwardModel<T>,
) -> Result<T, McmcError> {
    let f = forward.noiseless_frames(params)?;
    Ok(log_likelihood_against(&f, noise_sigma, y))
}

fn log_likelihood_against<T: Real>(f: &[T], noise_sigma: T, y: &Measurement<T>) -> T {
    let total = y.schedule.total();
    let half = T::cst(0.5);
    let n = T::from_usize(y.y.len()).unwrap();
    let inv_var = T::one() / (noise_sigma * noise_sigma);
    let mut quad = T::zero();
    let mut ln_dt = T::zero();
    for ((&yn, &fn_), &dt) in y.y.iter().zip(f).zip(y.schedule.durations()) {
        let r = yn - fn_;
        quad = quad + r * r * (total / dt);
        ln_dt = ln_dt + half * (dt / total).ln();
    }
    -n * noise_sigma.ln() - ln_dt - half * inv_var * quad
}

/// Log-density of sigma under its scale * Gamma(shape, rate) prior, with
/// constants dropped; -inf for non-positive sigma.
pub fn log_sigma_prior<T: Real>(noise_sigma: T, noise: &NoiseModel<T>) -> T {
    if !(noise_sigma > T::zero()) || !noise_sigma.is_finite() {
        return T::neg_infinity();
    }
    let g = noise_sigma / noise.scale;
    (noise.shape - T::one()) * g.ln() - noise.rate * g
}

/// Unnormalized log-posterior log p(y | x, sigma) + log p(x) + log p(sigma).
/// Non-positive kinetic parameters map to -inf (the rejected region of the
/// truncated prior).
pub fn log_posterior<T: Real>(
    params: &KineticParams<T>,
    noise_sigma: T,
    y: &Measurement<T>,
    prior: &PriorConfig<T>,
    reference: &ReferenceTac<T>,
    noise: &NoiseModel<T>,
) -> Result<T, McmcError> {
    if !params.is_positive() {
        return Ok(T::neg_infinity());
    }
    let lp_x = prior.log_density_truncated(params);
    let lp_s = log_sigma_prior(noise_sigma, noise);
    if !lp_x.is_finite() || !lp_s.is_finite() {
        return Ok(T::neg_infinity());
    }
    let forward = ForwardModel::new(reference.clone(), y.schedule.clone(), *noise)?;
    Ok(log_likelihood(params, noise_sigma, y, &forward)? + lp_x + lp_s)
}

/// One row of the persisted chain trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow<T> {
    pub iteration: usize,
    pub dvr: T,
    pub k2_per_min: T,
    pub r1: T,
    pub noise_sigma: T,
    pub log_post: T,
    pub accepted: bool,
}

/// Everything [`run_chain`] returns for one measurement.
#[derive(Debug, Clone)]
pub struct McmcRun<T> {
    pub samples: PosteriorSamples<T>,
    pub trace: Vec<TraceRow<T>>,
    pub geweke: GewekeReport<T>,
    /// Post-burn-in acceptance rate.
    pub acceptance_rate: f64,
    pub final_scales: Vec<T>,
}

/// Runs one random-walk MH chain on the SRTM posterior for `y`.
///
/// The chain starts at the prior locations with sigma at its prior mean.
/// With `config.sample_noise_sigma` unset, `fixed_sigma` must supply the
/// value to condition on.
pub fn run_chain<T: Real, R: Rng + ?Sized>(
    y: &Measurement<T>,
    config: &McmcConfig<T>,
    prior: &PriorConfig<T>,
    forward: &ForwardModel<T>,
    fixed_sigma: Option<T>,
    measurement_id: usize,
    rng: &mut R,
) -> Result<McmcRun<T>, McmcError> {
    if y.n_frames() != forward.n_frames() {
        return Err(McmcError::InvalidConfig(format!(
            "measurement has {} frames, forward model {}",
            y.n_frames(),
            forward.n_frames()
        )));
    }
    if config.burn_in >= config.n_iterations {
        return Err(McmcError::InvalidConfig(
            "burn-in must be smaller than the iteration count".into(),
        ));
    }

    let noise = forward.noise;
    let locs = prior.locations();
    let sigma_mean = noise.scale * noise.shape / noise.rate;
    let sample_sigma = config.sample_noise_sigma;
    let fixed = match (sample_sigma, fixed_sigma) {
        (true, _) => T::zero(),
        (false, Some(s)) if s > T::zero() => s,
        (false, _) => {
            return Err(McmcError::InvalidConfig(
                "fixing the noise level requires a positive fixed_sigma".into(),
            ))
        }
    };

    let dim = if sample_sigma { 4 } else { 3 };
    let mut init = vec![locs[0], locs[1], locs[2]];
    if sample_sigma {
        init.push(sigma_mean.ln());
    }

    let initial_scales = match &config.proposal_scales {
        Some(s) => {
            if s.len() != dim {
                return Err(McmcError::InvalidConfig(format!(
                    "{} proposal scales for a {dim}-dimensional chain",
                    s.len()
                )));
            }
            s.clone()
        }
        None => {
            let stds = prior.std_devs();
            let five_pct = T::cst(0.05);
            let mut s = vec![five_pct * stds[0], five_pct * stds[1], five_pct * stds[2]];
            if sample_sigma {
                s.push(T::cst(0.1));
            }
            s
        }
    };

    let mut scratch = ForwardScratch::default();
    let mut frames = Vec::new();
    let mut log_target = |state: &[T]| -> T {
        let params =
            KineticParams { dvr: state[0], k2_per_min: state[1], r1: state[2] };
        if !params.is_positive() {
            return T::neg_infinity();
        }
        let (sigma, jacobian) = if sample_sigma {
            let ln_sigma = state[3];
            (ln_sigma.exp(), ln_sigma)
        } else {
            (fixed, T::zero())
        };
        let lp_x = prior.log_density_truncated(&params);
        let lp_s = log_sigma_prior(sigma, &noise);
        if !lp_x.is_finite() || !lp_s.is_finite() {
            return T::neg_infinity();
        }
        if forward
            .noiseless_frames_into(&params, &mut scratch, &mut frames)
            .is_err()
        {
            return T::neg_infinity();
        }
        log_likelihood_against(&frames, sigma, y) + lp_x + lp_s + jacobian
    };

    let controls = ChainControls {
        n_iterations: config.n_iterations,
        burn_in: config.burn_in,
        initial_scales,
        adapt_during_burnin: config.adapt_during_burnin,
        target_acceptance: config.target_acceptance,
    };
    let output = run_random_walk(&mut log_target, &init, &controls, rng)?;

    let sigma_of = |state: &[T]| if sample_sigma { state[3].exp() } else { fixed };
    let trace: Vec<TraceRow<T>> = output
        .states
        .iter()
        .enumerate()
        .map(|(i, s)| TraceRow {
            iteration: i,
            dvr: s[0],
            k2_per_min: s[1],
            r1: s[2],
            noise_sigma: sigma_of(s),
            log_post: output.log_posts[i],
            accepted: output.accepted[i],
        })
        .collect();

    let retained = &output.states[config.burn_in..];
    let draws: Vec<[T; 3]> = retained.iter().map(|s| [s[0], s[1], s[2]]).collect();
    let noise_sigmas = sample_sigma.then(|| retained.iter().map(|s| s[3].exp()).collect());
    let samples = PosteriorSamples { draws, noise_sigmas, source: SourceTag::Mcmc, measurement_id };
    let geweke_report = geweke(&samples)?;

    Ok(McmcRun {
        samples,
        trace,
        geweke: geweke_report,
        acceptance_rate: output.post_burnin_acceptance,
        final_scales: output.final_scales,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinetics::{default_reference_tac, FrameSchedule, UniformGrid};
    use crate::priors::SpreadKind;
    use crate::seed::rng_for;

    fn controls(dim: usize, n: usize, burn: usize, scale: f64) -> ChainControls<f64> {
        ChainControls {
            n_iterations: n,
            burn_in: burn,
            initial_scales: vec![scale; dim],
            adapt_during_burnin: true,
            target_acceptance: 0.3,
        }
    }

    #[test]
    fn flat_target_accepts_everything() {
        let mut rng = rng_for(0, "mcmc-flat", 0);
        let out = run_random_walk(|_: &[f64]| 0.0, &[0.0], &controls(1, 2000, 500, 1.0), &mut rng)
            .unwrap();
        assert_eq!(out.post_burnin_acceptance, 1.0);
        assert!(out.accepted.iter().all(|&a| a));
    }

    #[test]
    fn gaussian_target_recovers_moments() {
        let mu = [1.0, 2.0, 3.0];
        let sd = [0.5, 1.0, 1.5];
        let target = |x: &[f64]| {
            -0.5 * (0..3).map(|i| ((x[i] - mu[i]) / sd[i]).powi(2)).sum::<f64>()
        };
        let mut rng = rng_for(1, "mcmc-gauss", 0);
        let c = ChainControls {
            n_iterations: 24_000,
            burn_in: 4_000,
            initial_scales: sd.iter().map(|s| 1.4 * s).collect(),
            adapt_during_burnin: true,
            target_acceptance: 0.3,
        };
        let out = run_random_walk(target, &mu, &c, &mut rng).unwrap();
        let retained = &out.states[c.burn_in..];
        for i in 0..3 {
            let col: Vec<f64> = retained.iter().map(|s| s[i]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (col.len() - 1) as f64;
            assert!((mean / mu[i] - 1.0).abs() < 0.04, "dim {i} mean {mean}");
            assert!((var.sqrt() / sd[i] - 1.0).abs() < 0.04, "dim {i} std {}", var.sqrt());
        }
    }

    #[test]
    fn rejected_proposals_repeat_previous_state_verbatim() {
        // narrow target, wide proposals: plenty of rejections
        let target = |x: &[f64]| -0.5 * (x[0] / 0.01).powi(2);
        let mut rng = rng_for(2, "mcmc-reject", 0);
        let mut c = controls(1, 500, 100, 5.0);
        c.adapt_during_burnin = false;
        let out = run_random_walk(target, &[0.0], &c, &mut rng).unwrap();
        let mut seen_rejection = false;
        for i in 1..out.states.len() {
            if !out.accepted[i] {
                seen_rejection = true;
                assert_eq!(out.states[i], out.states[i - 1]);
                assert_eq!(out.log_posts[i], out.log_posts[i - 1]);
            }
        }
        assert!(seen_rejection);
    }

    #[test]
    fn identical_seeds_give_identical_chains() {
        let target = |x: &[f64]| -0.5 * x.iter().map(|v| v * v).sum::<f64>();
        let c = controls(2, 2000, 200, 0.8);
        let a = run_random_walk(target, &[0.1, -0.2], &c, &mut rng_for(3, "mcmc-seed", 0)).unwrap();
        let b = run_random_walk(target, &[0.1, -0.2], &c, &mut rng_for(3, "mcmc-seed", 0)).unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(a.accepted, b.accepted);
    }

    #[test]
    fn non_finite_initial_state_is_an_error() {
        let target = |x: &[f64]| if x[0] > 0.0 { 0.0 } else { f64::NEG_INFINITY };
        let mut rng = rng_for(4, "mcmc-init", 0);
        assert!(matches!(
            run_random_walk(target, &[-1.0], &controls(1, 100, 10, 1.0), &mut rng),
            Err(McmcError::Initialization)
        ));
    }

    #[test]
    fn adaptation_freezes_after_burnin() {
        let target = |x: &[f64]| -0.5 * (x[0] * x[0]);
        let mut rng = rng_for(5, "mcmc-adapt", 0);
        let c = controls(1, 4000, 2000, 13.0);
        let out = run_random_walk(target, &[0.0], &c, &mut rng).unwrap();
        assert!(!out.scales_updated_after_burnin);
        // adaptation pulled the deliberately absurd initial scale down
        assert!(out.final_scales[0] < 13.0);
        let rate = out.post_burnin_acceptance;
        assert!((0.15..0.5).contains(&rate), "acceptance {rate} not near target");
    }

    #[test]
    fn double_well_histogram_matches_density() {
        // 1-D double well: log p = -(x^2 - 1)^2 / (2 * 0.25)
        let logp = |x: &[f64]| -(x[0] * x[0] - 1.0).powi(2) / 0.5;
        let mut rng = rng_for(6, "mcmc-dwell", 0);
        let c = controls(1, 1_100_000, 100_000, 1.0);
        let out = run_random_walk(logp, &[1.0], &c, &mut rng).unwrap();

        // true density by quadrature on [-3.5, 3.5]
        let (lo, hi, nbins) = (-3.5f64, 3.5f64, 140usize);
        let width = (hi - lo) / nbins as f64;
        let fine = 50usize;
        let mut truth = vec![0.0f64; nbins];
        for (b, t) in truth.iter_mut().enumerate() {
            for j in 0..fine {
                let x = lo + (b as f64 + (j as f64 + 0.5) / fine as f64) * width;
                *t += (-(x * x - 1.0).powi(2) / 0.5).exp();
            }
        }
        let z: f64 = truth.iter().sum();
        truth.iter_mut().for_each(|t| *t /= z);

        let mut hist = vec![0.0f64; nbins];
        let retained = &out.states[c.burn_in..];
        for s in retained {
            let b = ((s[0] - lo) / width).floor();
            if (0.0..nbins as f64).contains(&b) {
                hist[b as usize] += 1.0;
            }
        }
        let n: f64 = hist.iter().sum();
        hist.iter_mut().for_each(|h| *h /= n);

        let tv: f64 = 0.5 * hist.iter().zip(&truth).map(|(a, b)| (a - b).abs()).sum::<f64>();
        assert!(tv < 0.05, "total variation distance {tv}");
    }

    #[test]
    fn geweke_hand_cases() {
        let constant = vec![2.5f64; 100];
        let st = geweke_column(&constant).unwrap();
        assert_eq!(st.abs_difference, 0.0);
        assert_eq!(st.normalized_difference, 0.0);

        let mut synthetic = vec![1.0f64; 50];
        synthetic.extend(vec![2.0f64; 50]);
        let st = geweke_column(&synthetic).unwrap();
        assert_eq!(st.mean_first_10pct, 1.0);
        assert_eq!(st.mean_last_50pct, 2.0);
        assert_eq!(st.abs_difference, 1.0);

        assert!(matches!(
            geweke_column(&[1.0f64; 5]),
            Err(McmcError::TraceTooShort { .. })
        ));
        assert!(matches!(geweke_column::<f64>(&[]), Err(McmcError::TraceTooShort { .. })));
    }

    fn srtm_setup() -> (ForwardModel<f64>, PriorConfig<f64>) {
        let grid = UniformGrid::covering(7200.0, 1.0).unwrap();
        let forward = ForwardModel::new(
            default_reference_tac(grid).unwrap(),
            FrameSchedule::default_54_frame(),
            NoiseModel::default(),
        )
        .unwrap();
        (forward, PriorConfig::setting_one(SpreadKind::Variance))
    }

    #[test]
    fn likelihood_peaks_at_noiseless_measurement() {
        let (forward, _) = srtm_setup();
        let x0 = KineticParams { dvr: 1.0, k2_per_min: 0.0006, r1: 0.74 };
        let clean = forward.noiseless_frames(&x0).unwrap();
        let y = Measurement::new(clean, forward.schedule.clone()).unwrap();
        let sigma = 1e-4;
        let base = log_likelihood(&x0, sigma, &y, &forward).unwrap();
        let mut rng = rng_for(7, "mcmc-peak", 0);
        for _ in 0..10 {
            let perturbed = KineticParams {
                dvr: x0.dvr * (1.0 + 0.05 * f64::standard_normal(&mut rng)),
                k2_per_min: x0.k2_per_min * (1.0 + 0.05 * f64::standard_normal(&mut rng)),
                r1: x0.r1 * (1.0 + 0.05 * f64::standard_normal(&mut rng)),
            };
            let lp = log_likelihood(&perturbed, sigma, &y, &forward).unwrap();
            assert!(lp <= base, "perturbed {perturbed:?} beat the generating parameters");
        }
    }

    #[test]
    fn doubling_sigma_with_zero_residual_costs_n_log_two() {
        let (forward, _) = srtm_setup();
        let x0 = KineticParams { dvr: 1.0, k2_per_min: 0.0006, r1: 0.74 };
        let clean = forward.noiseless_frames(&x0).unwrap();
        let y = Measurement::new(clean, forward.schedule.clone()).unwrap();
        let a = log_likelihood(&x0, 1e-4, &y, &forward).unwrap();
        let b = log_likelihood(&x0, 2e-4, &y, &forward).unwrap();
        let n = y.n_frames() as f64;
        assert!((b - a + n * 2.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn posterior_ratios_match_fully_normalized_oracle() {
        // oracle: same density with every normalizing constant kept
        let (forward, prior) = srtm_setup();
        let x0 = KineticParams { dvr: 1.0, k2_per_min: 0.0006, r1: 0.74 };
        let mut rng = rng_for(8, "mcmc-ratio", 0);
        let (y, _) = forward.simulate(&x0, &mut rng).unwrap();
        let noise = forward.noise;

        let oracle = |p: &KineticParams<f64>, sigma: f64| -> f64 {
            let f = forward.noiseless_frames(p).unwrap();
            let total: f64 = y.schedule.total();
            let mut lp = 0.0;
            for ((&yn, &fnl), &dt) in y.y.iter().zip(&f).zip(y.schedule.durations()) {
                let s = sigma * (dt / total).sqrt();
                lp += -0.5 * ((yn - fnl) / s).powi(2)
                    - s.ln()
                    - 0.5 * (2.0 * std::f64::consts::PI).ln();
            }
            let locs = prior.locations();
            let stds = prior.std_devs();
            for (v, (l, s)) in p.as_array().iter().zip(locs.iter().zip(stds.iter())) {
                lp += -0.5 * ((v - l) / s).powi(2) - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
            }
            // scale * Gamma(1, 1) prior on sigma, fully normalized
            let g = sigma / noise.scale;
            lp += (noise.shape - 1.0) * g.ln() - noise.rate * g - (noise.scale).ln();
            lp
        };

        for trial in 0..20 {
            let jitter = |rng: &mut _| 1.0 + 0.2 * f64::standard_normal(rng);
            let p1 = KineticParams {
                dvr: x0.dvr * jitter(&mut rng),
                k2_per_min: x0.k2_per_min * jitter(&mut rng),
                r1: x0.r1 * jitter(&mut rng),
            };
            let p2 = KineticParams {
                dvr: x0.dvr * jitter(&mut rng),
                k2_per_min: x0.k2_per_min * jitter(&mut rng),
                r1: x0.r1 * jitter(&mut rng),
            };
            let (s1, s2) = (0.8e-4, 1.7e-4);
            let ours = log_posterior(&p1, s1, &y, &prior, &forward.reference, &noise).unwrap()
                - log_posterior(&p2, s2, &y, &prior, &forward.reference, &noise).unwrap();
            let reference = oracle(&p1, s1) - oracle(&p2, s2);
            assert!(
                (ours - reference).abs() < 1e-10,
                "trial {trial}: ratio mismatch {ours} vs {reference}"
            );
        }
    }

    #[test]
    fn non_positive_params_get_neg_infinity() {
        let (forward, prior) = srtm_setup();
        let x0 = KineticParams { dvr: 1.0, k2_per_min: 0.0006, r1: 0.74 };
        let mut rng = rng_for(9, "mcmc-neg", 0);
        let (y, _) = forward.simulate(&x0, &mut rng).unwrap();
        let bad = KineticParams { dvr: -1.0, k2_per_min: 0.0006, r1: 0.74 };
        let lp = log_posterior(&bad, 1e-4, &y, &prior, &forward.reference, &forward.noise).unwrap();
        assert!(lp == f64::NEG_INFINITY);
    }

    #[test]
    fn srtm_chain_retains_positive_draws_and_counts() {
        let (forward, prior) = srtm_setup();
        let x0 = KineticParams { dvr: 1.0, k2_per_min: 0.0006, r1: 0.74 };
        let mut rng = rng_for(10, "mcmc-chain", 0);
        let (y, _) = forward.simulate(&x0, &mut rng).unwrap();
        let config = McmcConfig { n_iterations: 3000, burn_in: 1000, ..McmcConfig::default() };
        let run = run_chain(&y, &config, &prior, &forward, None, 7, &mut rng).unwrap();
        assert_eq!(run.samples.len(), 2000);
        assert_eq!(run.trace.len(), 3000);
        assert_eq!(run.samples.measurement_id, 7);
        assert_eq!(run.samples.source, SourceTag::Mcmc);
        for d in &run.samples.draws {
            assert!(d.iter().all(|&v| v > 0.0));
        }
        let sigmas = run.samples.noise_sigmas.as_ref().unwrap();
        assert!(sigmas.iter().all(|&s| s > 0.0));

        // same seed, same chain
        let mut rng2 = rng_for(10, "mcmc-chain", 0);
        let (y2, _) = forward.simulate(&x0, &mut rng2).unwrap();
        let run2 = run_chain(&y2, &config, &prior, &forward, None, 7, &mut rng2).unwrap();
        assert_eq!(run.trace, run2.trace);
    }

    #[test]
    fn fixed_sigma_chain_requires_value() {
        let (forward, prior) = srtm_setup();
        let x0 = KineticParams { dvr: 1.0, k2_per_min: 0.0006, r1: 0.74 };
        let mut rng = rng_for(11, "mcmc-fixed", 0);
        let (y, sigma) = forward.simulate(&x0, &mut rng).unwrap();
        let config = McmcConfig {
            n_iterations: 500,
            burn_in: 100,
            sample_noise_sigma: false,
            ..McmcConfig::default()
        };
        assert!(matches!(
            run_chain(&y, &config, &prior, &forward, None, 0, &mut rng),
            Err(McmcError::InvalidConfig(_))
        ));
        let run = run_chain(&y, &config, &prior, &forward, Some(sigma), 0, &mut rng).unwrap();
        assert!(run.samples.noise_sigmas.is_none());
        assert!(run.trace.iter().all(|r| r.noise_sigma == sigma));
    }
}
