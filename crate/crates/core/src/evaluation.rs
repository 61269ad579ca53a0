//! Quantitative comparison of amortized posteriors against the MCMC
//! reference: Gaussian marginal fits, averaged relative mean/std errors,
//! averaged KL divergence, and the three sensitivity sweeps
//! (hyperparameters, training-set size, DVR shift).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cvae::{sample_posterior, train, CvaeError, CvaeModel, TrainConfig, Variant};
use crate::kinetics::{ForwardModel, KineticParams, KineticsError, Measurement};
use crate::mcmc::{run_chain, McmcConfig, McmcError, PosteriorSamples, SourceTag};
use crate::priors::{Dataset, PriorConfig, PriorError};
use crate::scalar::Real;
use crate::seed::{derive_seed, rng_for};

pub const PARAM_NAMES: [&str; 3] = ["dvr", "k2_per_min", "r1"];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least {min} samples, got {got}")]
    TooFewSamples { min: usize, got: usize },
    #[error("degenerate samples: zero variance")]
    DegenerateSamples,
    #[error("MCMC mean of parameter {param} is zero at test index {index}; relative error undefined")]
    ZeroReferenceMean { param: usize, index: usize },
    #[error("matched lists have different lengths: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("sample sets are not aligned: measurement {expected} vs {got} at position {index}")]
    MisalignedSets { expected: usize, got: usize, index: usize },
    #[error(transparent)]
    Cvae(#[from] CvaeError),
    #[error(transparent)]
    Mcmc(#[from] McmcError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Kinetics(#[from] KineticsError),
}

/// Gaussian fit of one posterior marginal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginalFit<T> {
    pub mu: T,
    pub sigma: T,
    /// True when the curve fit failed to converge and the sample moments
    /// were used instead.
    pub moment_fallback: bool,
}

fn moments<T: Real>(samples: &[T]) -> (T, T) {
    let n = T::from_usize(samples.len()).unwrap();
    let mean = samples.iter().copied().sum::<T>() / n;
    let var = samples.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>()
        / T::from_usize(samples.len() - 1).unwrap();
    (mean, var.sqrt())
}

fn quantile_sorted<T: Real>(sorted: &[T], q: f64) -> T {
    let idx = q * (sorted.len() - 1) as f64;
    let lo = idx.floor() as usize;
    let hi = idx.ceil() as usize;
    let frac = T::cst(idx - lo as f64);
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Histogram with Freedman-Diaconis bin width, as (centers, densities).
fn histogram_density<T: Real>(samples: &[T]) -> (Vec<T>, Vec<T>) {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len();
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = sorted[n - 1] - sorted[0];
    let fd = T::cst(2.0) * iqr / T::cst((n as f64).cbrt());
    let width = if fd > T::zero() { fd } else { spread / T::cst(32.0) };
    let n_bins = ((spread / width).to_f64().unwrap().ceil() as usize).clamp(8, 512);
    let width = spread / T::from_usize(n_bins).unwrap();

    let mut counts = vec![0usize; n_bins];
    for &v in samples {
        let b = ((v - sorted[0]) / width).to_f64().unwrap().floor() as usize;
        counts[b.min(n_bins - 1)] += 1;
    }
    let half = T::cst(0.5);
    let centers = (0..n_bins)
        .map(|i| sorted[0] + width * (T::from_usize(i).unwrap() + half))
        .collect();
    let norm = T::from_usize(n).unwrap() * width;
    let densities = counts.iter().map(|&c| T::from_usize(c).unwrap() / norm).collect();
    (centers, densities)
}

/// Solves a 3x3 linear system in place; `None` when singular.
fn solve3<T: Real>(mut a: [[T; 3]; 3], mut b: [T; 3]) -> Option<[T; 3]> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| {
            a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap()
        })?;
        if a[pivot][col].abs() < T::cst(1e-300) {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] = a[row][k] - f * a[col][k];
            }
            b[row] = b[row] - f * b[col];
        }
    }
    let mut x = [T::zero(); 3];
    for row in (0..3).rev() {
        let mut acc = b[row];
        for k in row + 1..3 {
            acc = acc - a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Some(x)
}

/// Fits a Gaussian density to the Freedman-Diaconis histogram of the samples
/// by damped Gauss-Newton least squares (amplitude, mean, std), starting from
/// the sample moments. Falls back to the moments, with a recorded flag, when
/// the fit fails to converge.
pub fn fit_gaussian<T: Real>(samples: &[T]) -> Result<MarginalFit<T>, EvalError> {
    if samples.len() < 2 {
        return Err(EvalError::TooFewSamples { min: 2, got: samples.len() });
    }
    let (mean, std) = moments(samples);
    if !(std > T::zero()) {
        return Err(EvalError::DegenerateSamples);
    }

    let (centers, densities) = histogram_density(samples);
    let two_pi_sqrt = T::cst((2.0 * std::f64::consts::PI).sqrt());
    let mut a = T::one() / (std * two_pi_sqrt);
    let mut m = mean;
    let mut s = std;
    let half = T::cst(0.5);

    let mut converged = false;
    let mut damping = T::cst(1e-3);
    let sse = |a: T, m: T, s: T| -> T {
        centers
            .iter()
            .zip(&densities)
            .map(|(&c, &h)| {
                let e = (-half * ((c - m) / s) * ((c - m) / s)).exp();
                let r = a * e - h;
                r * r
            })
            .sum()
    };
    let mut current_sse = sse(a, m, s);
    for _ in 0..100 {
        // normal equations J^T J dx = -J^T r with Levenberg damping
        let mut jtj = [[T::zero(); 3]; 3];
        let mut jtr = [T::zero(); 3];
        for (&c, &h) in centers.iter().zip(&densities) {
            let u = (c - m) / s;
            let e = (-half * u * u).exp();
            let r = a * e - h;
            let j = [e, a * e * u / s, a * e * u * u / s];
            for p in 0..3 {
                jtr[p] = jtr[p] + j[p] * r;
                for q in 0..3 {
                    jtj[p][q] = jtj[p][q] + j[p] * j[q];
                }
            }
        }
        let mut damped = jtj;
        for p in 0..3 {
            damped[p][p] = damped[p][p] * (T::one() + damping);
        }
        let Some(dx) = solve3(damped, jtr) else { break };
        let (na, nm, ns) = (a - dx[0], m - dx[1], s - dx[2]);
        if !na.is_finite() || !nm.is_finite() || !ns.is_finite() {
            break;
        }
        let new_sse = sse(na, nm, ns);
        if new_sse <= current_sse {
            let step = dx.iter().map(|d| d.abs()).fold(T::zero(), T::max);
            a = na;
            m = nm;
            s = ns;
            damping = damping * half;
            let tiny_step = step < T::cst(1e-10) * (T::one() + s.abs());
            let tiny_gain = (current_sse - new_sse) < T::cst(1e-16) * current_sse;
            current_sse = new_sse;
            if tiny_step || tiny_gain {
                converged = true;
                break;
            }
        } else {
            damping = damping * T::cst(10.0);
            if damping > T::cst(1e12) {
                break;
            }
        }
    }

    let s = s.abs();
    if converged && s > T::zero() && m.is_finite() && s.is_finite() {
        Ok(MarginalFit { mu: m, sigma: s, moment_fallback: false })
    } else {
        Ok(MarginalFit { mu: mean, sigma: std, moment_fallback: true })
    }
}

/// Averaged relative errors of the fitted means and stds for one parameter
/// across matched test measurements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamStatErrors<T> {
    pub delta_mu: T,
    pub delta_sigma: T,
}

/// delta_mu = mean_m |mu_m_mcmc - mu_m_dl| / mu_m_mcmc, and the same for the
/// fitted stds.
pub fn relative_stat_errors<T: Real>(
    mcmc_fits: &[MarginalFit<T>],
    dl_fits: &[MarginalFit<T>],
) -> Result<ParamStatErrors<T>, EvalError> {
    if mcmc_fits.len() != dl_fits.len() || mcmc_fits.is_empty() {
        return Err(EvalError::LengthMismatch { a: mcmc_fits.len(), b: dl_fits.len() });
    }
    let m = T::from_usize(mcmc_fits.len()).unwrap();
    let mut acc_mu = T::zero();
    let mut acc_sigma = T::zero();
    for (index, (r, d)) in mcmc_fits.iter().zip(dl_fits).enumerate() {
        if r.mu == T::zero() {
            return Err(EvalError::ZeroReferenceMean { param: usize::MAX, index });
        }
        acc_mu = acc_mu + ((r.mu - d.mu) / r.mu).abs();
        acc_sigma = acc_sigma + ((r.sigma - d.sigma) / r.sigma).abs();
    }
    Ok(ParamStatErrors { delta_mu: acc_mu / m, delta_sigma: acc_sigma / m })
}

/// Closed-form KL( N(mu1, s1^2) || N(mu2, s2^2) ).
pub fn kl_gaussians<T: Real>(mu1: T, s1: T, mu2: T, s2: T) -> T {
    let half = T::cst(0.5);
    (s2 / s1).ln() + (s1 * s1 + (mu1 - mu2) * (mu1 - mu2)) / (T::cst(2.0) * s2 * s2) - half
}

/// How the per-marginal KL between two sample sets is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlEstimator {
    /// Closed form between the Gaussian fits of the two sets (default).
    GaussianFit,
    /// Discrete KL between shared-bin histograms (cross-check option).
    Histogram,
}

/// KL(reference || candidate) for one marginal, reference distribution first.
pub fn marginal_kl<T: Real>(
    reference: &[T],
    candidate: &[T],
    estimator: KlEstimator,
) -> Result<T, EvalError> {
    match estimator {
        KlEstimator::GaussianFit => {
            let r = fit_gaussian(reference)?;
            let c = fit_gaussian(candidate)?;
            Ok(kl_gaussians(r.mu, r.sigma, c.mu, c.sigma))
        }
        KlEstimator::Histogram => {
            if reference.len() < 2 || candidate.len() < 2 {
                return Err(EvalError::TooFewSamples {
                    min: 2,
                    got: reference.len().min(candidate.len()),
                });
            }
            let lo = reference
                .iter()
                .chain(candidate)
                .copied()
                .fold(T::infinity(), T::min);
            let hi = reference
                .iter()
                .chain(candidate)
                .copied()
                .fold(T::neg_infinity(), T::max);
            if !(hi > lo) {
                return Err(EvalError::DegenerateSamples);
            }
            let n_bins = 128usize;
            let width = (hi - lo) / T::from_usize(n_bins).unwrap();
            let bin_of = |v: T| -> usize {
                (((v - lo) / width).to_f64().unwrap().floor() as usize).min(n_bins - 1)
            };
            let mut p = vec![T::zero(); n_bins];
            let mut q = vec![T::zero(); n_bins];
            for &v in reference {
                p[bin_of(v)] += T::one();
            }
            for &v in candidate {
                q[bin_of(v)] += T::one();
            }
            let np = T::from_usize(reference.len()).unwrap();
            let nq = T::from_usize(candidate.len()).unwrap();
            // half a count keeps empty candidate bins from blowing up the sum
            let q_floor = T::cst(0.5) / nq;
            let mut acc = T::zero();
            for (pi, qi) in p.iter().zip(&q) {
                if *pi > T::zero() {
                    let pp = *pi / np;
                    let qq = (*qi / nq).max(q_floor);
                    acc = acc + pp * (pp / qq).ln();
                }
            }
            Ok(acc)
        }
    }
}

/// Mean and dispersion of the per-test KL for one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AverageKl<T> {
    pub mean: T,
    pub std_across_tests: T,
    pub per_test: Vec<T>,
}

/// Average KL over matched test measurements, reference (MCMC) first, for one
/// kinetic-parameter marginal.
pub fn average_kl<T: Real>(
    mcmc_sets: &[&PosteriorSamples<T>],
    dl_sets: &[&PosteriorSamples<T>],
    param: usize,
    estimator: KlEstimator,
) -> Result<AverageKl<T>, EvalError> {
    if mcmc_sets.len() != dl_sets.len() || mcmc_sets.is_empty() {
        return Err(EvalError::LengthMismatch { a: mcmc_sets.len(), b: dl_sets.len() });
    }
    let mut per_test = Vec::with_capacity(mcmc_sets.len());
    for (index, (r, d)) in mcmc_sets.iter().zip(dl_sets).enumerate() {
        if r.measurement_id != d.measurement_id {
            return Err(EvalError::MisalignedSets {
                expected: r.measurement_id,
                got: d.measurement_id,
                index,
            });
        }
        per_test.push(marginal_kl(&r.column(param), &d.column(param), estimator)?);
    }
    let (mean, std) = if per_test.len() > 1 {
        moments(&per_test)
    } else {
        (per_test[0], T::zero())
    };
    Ok(AverageKl { mean, std_across_tests: std, per_test })
}

/// Per-parameter agreement metrics of one method against MCMC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEval<T> {
    pub parameter: String,
    pub delta_mu: T,
    pub delta_sigma: T,
    pub d_kl: T,
    pub d_kl_std_across_tests: T,
    pub moment_fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport<T> {
    pub source: SourceTag,
    pub params: Vec<ParamEval<T>>,
}

/// The table analog: one row block per method, columns per parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport<T> {
    pub setting: u8,
    pub n_tests: usize,
    pub estimator: KlEstimator,
    pub methods: Vec<MethodReport<T>>,
}

/// Compares each method's posterior sample sets against the matched MCMC
/// reference sets.
pub fn evaluate_methods<T: Real>(
    mcmc_sets: &[PosteriorSamples<T>],
    method_sets: &[Vec<PosteriorSamples<T>>],
    estimator: KlEstimator,
    setting: u8,
) -> Result<EvalReport<T>, EvalError> {
    let mcmc_refs: Vec<&PosteriorSamples<T>> = mcmc_sets.iter().collect();
    let mut methods = Vec::with_capacity(method_sets.len());
    for dl in method_sets {
        if dl.len() != mcmc_sets.len() {
            return Err(EvalError::LengthMismatch { a: mcmc_sets.len(), b: dl.len() });
        }
        let dl_refs: Vec<&PosteriorSamples<T>> = dl.iter().collect();
        let source = dl.first().map(|s| s.source).unwrap_or(SourceTag::Mcmc);
        let mut params = Vec::with_capacity(3);
        for p in 0..3 {
            let mut fallbacks = 0usize;
            let mut mcmc_fits = Vec::with_capacity(mcmc_sets.len());
            let mut dl_fits = Vec::with_capacity(dl.len());
            for (index, (r, d)) in mcmc_refs.iter().zip(&dl_refs).enumerate() {
                if r.measurement_id != d.measurement_id {
                    return Err(EvalError::MisalignedSets {
                        expected: r.measurement_id,
                        got: d.measurement_id,
                        index,
                    });
                }
                let rf = fit_gaussian(&r.column(p))?;
                let df = fit_gaussian(&d.column(p))?;
                fallbacks += usize::from(rf.moment_fallback) + usize::from(df.moment_fallback);
                mcmc_fits.push(rf);
                dl_fits.push(df);
            }
            let stat = relative_stat_errors(&mcmc_fits, &dl_fits).map_err(|e| match e {
                EvalError::ZeroReferenceMean { index, .. } => {
                    EvalError::ZeroReferenceMean { param: p, index }
                }
                other => other,
            })?;
            let kl = average_kl(&mcmc_refs, &dl_refs, p, estimator)?;
            params.push(ParamEval {
                parameter: PARAM_NAMES[p].to_string(),
                delta_mu: stat.delta_mu,
                delta_sigma: stat.delta_sigma,
                d_kl: kl.mean,
                d_kl_std_across_tests: kl.std_across_tests,
                moment_fallbacks: fallbacks,
            });
        }
        methods.push(MethodReport { source, params });
    }
    Ok(EvalReport { setting, n_tests: mcmc_sets.len(), estimator, methods })
}

impl<T: Real> EvalReport<T> {
    pub fn method(&self, source: SourceTag) -> Option<&MethodReport<T>> {
        self.methods.iter().find(|m| m.source == source)
    }
}

impl<T: Real> MethodReport<T> {
    /// Average of the per-parameter KL means; the sweep curves plot this.
    pub fn d_kl_avg(&self) -> T {
        self.params.iter().map(|p| p.d_kl).sum::<T>() / T::from_usize(self.params.len()).unwrap()
    }
}

/// Hyperparameter swept by [`sweep_hyperparameters`]; each belongs to one
/// variant (beta_A: dual-encoder; beta_B and lambda: dual-decoder).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HyperParam {
    BetaA,
    BetaB,
    Lambda,
}

impl HyperParam {
    pub fn variant(self) -> Variant {
        match self {
            HyperParam::BetaA => Variant::DualEncoder,
            HyperParam::BetaB | HyperParam::Lambda => Variant::DualDecoder,
        }
    }
}

impl std::fmt::Display for HyperParam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HyperParam::BetaA => "beta-a",
            HyperParam::BetaB => "beta-b",
            HyperParam::Lambda => "lambda",
        })
    }
}

/// Everything the sweeps need around one fixed test panel: the master
/// training set, the forward model, the test measurements, and their MCMC
/// reference posteriors (computed once, shared across grid points).
pub struct SweepContext<'a, T: Real> {
    pub dataset: &'a Dataset<T>,
    pub forward: &'a ForwardModel<T>,
    pub test_measurements: &'a [Measurement<T>],
    pub mcmc_reference: &'a [PosteriorSamples<T>],
    pub train_config: &'a TrainConfig<T>,
    pub n_posterior_samples: usize,
    pub estimator: KlEstimator,
    pub seed: u64,
}

impl<'a, T: Real> SweepContext<'a, T> {
    fn check(&self) -> Result<(), EvalError> {
        if self.test_measurements.len() != self.mcmc_reference.len() {
            return Err(EvalError::LengthMismatch {
                a: self.test_measurements.len(),
                b: self.mcmc_reference.len(),
            });
        }
        Ok(())
    }

    /// Trains a model and evaluates its KL against the reference panel:
    /// returns (average over the three parameters, per-parameter means,
    /// per-test KL averaged over parameters).
    fn train_and_evaluate(
        &self,
        variant: Variant,
        config: &TrainConfig<T>,
        dataset: &Dataset<T>,
        infer_seed: u64,
    ) -> Result<(T, [T; 3], Vec<T>), EvalError> {
        let model = train(variant, dataset, config)?;
        let sets = infer_posteriors(
            &model,
            self.test_measurements,
            self.n_posterior_samples,
            infer_seed,
        )?;
        let refs: Vec<&PosteriorSamples<T>> = self.mcmc_reference.iter().collect();
        let dls: Vec<&PosteriorSamples<T>> = sets.iter().collect();
        let third = T::one() / T::cst(3.0);
        let mut per_param = [T::zero(); 3];
        let mut per_test = vec![T::zero(); self.test_measurements.len()];
        for (p, slot) in per_param.iter_mut().enumerate() {
            let kl = average_kl(&refs, &dls, p, self.estimator)?;
            *slot = kl.mean;
            for (a, &v) in per_test.iter_mut().zip(&kl.per_test) {
                *a += v * third;
            }
        }
        let avg = (per_param[0] + per_param[1] + per_param[2]) * third;
        Ok((avg, per_param, per_test))
    }
}

/// Posterior sample sets for every measurement in a panel, on per-measurement
/// derived RNG streams (order-independent of scheduling).
pub fn infer_posteriors<T: Real>(
    model: &CvaeModel<T>,
    measurements: &[Measurement<T>],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<PosteriorSamples<T>>, EvalError> {
    let results: Vec<Result<PosteriorSamples<T>, CvaeError>> = measurements
        .par_iter()
        .enumerate()
        .map(|(i, y)| {
            let mut rng = rng_for(seed, "infer-measurement", i as u64);
            sample_posterior(model, y, n_samples, i, &mut rng)
        })
        .collect();
    results.into_iter().collect::<Result<Vec<_>, _>>().map_err(EvalError::from)
}

/// One grid point of a hyperparameter sweep: mean and std of the
/// average-over-parameters KL across `repeats` training runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint<T> {
    pub grid_value: T,
    pub d_kl_mean: T,
    pub d_kl_std: T,
    pub per_param_mean: [T; 3],
}

/// Trains the relevant variant at every grid value of beta_A, beta_B, or
/// lambda, `repeats` times with independent seeds, and reports the KL curve.
pub fn sweep_hyperparameters<T: Real>(
    ctx: &SweepContext<'_, T>,
    param: HyperParam,
    grid: &[T],
    repeats: usize,
) -> Result<Vec<SweepPoint<T>>, EvalError> {
    ctx.check()?;
    let variant = param.variant();
    let runs: Vec<Result<(usize, T, [T; 3]), EvalError>> = grid
        .par_iter()
        .enumerate()
        .flat_map(|(gi, &value)| {
            (0..repeats).into_par_iter().map(move |r| (gi, value, r))
        })
        .map(|(gi, value, r)| {
            let mut config = ctx.train_config.clone();
            match param {
                HyperParam::BetaA | HyperParam::BetaB => config.beta = value,
                HyperParam::Lambda => config.lambda = value,
            }
            config.seed = derive_seed(ctx.seed, "sweep-hyper-train", (gi * repeats + r) as u64);
            let infer_seed = derive_seed(ctx.seed, "sweep-hyper-infer", (gi * repeats + r) as u64);
            let (avg, per_param, _) =
                ctx.train_and_evaluate(variant, &config, ctx.dataset, infer_seed)?;
            Ok((gi, avg, per_param))
        })
        .collect();

    let mut by_point: Vec<(Vec<T>, [Vec<T>; 3])> =
        (0..grid.len()).map(|_| (Vec::new(), [Vec::new(), Vec::new(), Vec::new()])).collect();
    for r in runs {
        let (gi, avg, per_param) = r?;
        by_point[gi].0.push(avg);
        for p in 0..3 {
            by_point[gi].1[p].push(per_param[p]);
        }
    }
    Ok(grid
        .iter()
        .zip(by_point)
        .map(|(&grid_value, (avgs, per_param))| {
            let (mean, std) =
                if avgs.len() > 1 { moments(&avgs) } else { (avgs[0], T::zero()) };
            let ppm = [
                per_param[0].iter().copied().sum::<T>() / T::from_usize(avgs.len()).unwrap(),
                per_param[1].iter().copied().sum::<T>() / T::from_usize(avgs.len()).unwrap(),
                per_param[2].iter().copied().sum::<T>() / T::from_usize(avgs.len()).unwrap(),
            ];
            SweepPoint { grid_value, d_kl_mean: mean, d_kl_std: std, per_param_mean: ppm }
        })
        .collect())
}

/// One point of the training-size sweep; the uncertainty is the std of the
/// per-test KL across the test panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSizePoint<T> {
    pub size: usize,
    pub d_kl_mean: T,
    pub d_kl_std_across_tests: T,
    pub per_param_mean: [T; 3],
}

/// Trains the dual-decoder on nested subsets of the master dataset and
/// reports the KL curve against training-set size.
pub fn sweep_training_size<T: Real>(
    ctx: &SweepContext<'_, T>,
    sizes: &[usize],
) -> Result<Vec<TrainSizePoint<T>>, EvalError> {
    ctx.check()?;
    if sizes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(EvalError::LengthMismatch { a: sizes.len(), b: sizes.len() });
    }
    let points: Vec<Result<TrainSizePoint<T>, EvalError>> = sizes
        .par_iter()
        .enumerate()
        .map(|(si, &size)| {
            if size == 0 || size > ctx.dataset.len() {
                return Err(EvalError::TooFewSamples { min: 1, got: size });
            }
            let subset = Dataset {
                samples: ctx.dataset.samples[..size].to_vec(),
                seed: ctx.dataset.seed,
                prior: ctx.dataset.prior,
                truncation_acceptance: ctx.dataset.truncation_acceptance,
            };
            let mut config = ctx.train_config.clone();
            config.seed = derive_seed(ctx.seed, "sweep-size-train", si as u64);
            let infer_seed = derive_seed(ctx.seed, "sweep-size-infer", si as u64);
            let (avg, per_param, per_test) =
                ctx.train_and_evaluate(Variant::DualDecoder, &config, &subset, infer_seed)?;
            let (_, std) = if per_test.len() > 1 {
                moments(&per_test)
            } else {
                (per_test[0], T::zero())
            };
            Ok(TrainSizePoint {
                size,
                d_kl_mean: avg,
                d_kl_std_across_tests: std,
                per_param_mean: per_param,
            })
        })
        .collect();
    points.into_iter().collect()
}

/// One point of the DVR-shift robustness curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DvrShiftPoint<T> {
    pub dvr_star: T,
    pub d_kl_mean: T,
    pub per_param_mean: [T; 3],
}

/// For every DVR* in the list, generates fresh test measurements at
/// (DVR*, k2, r1 at the prior locations), runs MCMC on each, samples the
/// trained model, and reports the averaged KL. An empty list yields an empty
/// curve.
#[allow(clippy::too_many_arguments)]
pub fn sweep_dvr_shift<T: Real>(
    dvr_values: &[T],
    model: &CvaeModel<T>,
    prior: &PriorConfig<T>,
    forward: &ForwardModel<T>,
    mcmc_config: &McmcConfig<T>,
    n_measurements: usize,
    n_posterior_samples: usize,
    estimator: KlEstimator,
    seed: u64,
) -> Result<Vec<DvrShiftPoint<T>>, EvalError> {
    let locs = prior.locations();
    let points: Vec<Result<DvrShiftPoint<T>, EvalError>> = dvr_values
        .par_iter()
        .enumerate()
        .map(|(vi, &dvr_star)| {
            let params = KineticParams { dvr: dvr_star, k2_per_min: locs[1], r1: locs[2] };
            let per_measurement: Vec<Result<(PosteriorSamples<T>, PosteriorSamples<T>), EvalError>> =
                (0..n_measurements)
                    .into_par_iter()
                    .map(|mi| {
                        let idx = (vi * n_measurements + mi) as u64;
                        let mut sim_rng = rng_for(seed, "dvr-shift-sim", idx);
                        let (y, _) = forward.simulate(&params, &mut sim_rng)?;
                        let mut chain_rng = rng_for(seed, "dvr-shift-chain", idx);
                        let run = run_chain(&y, mcmc_config, prior, forward, None, mi, &mut chain_rng)?;
                        let mut infer_rng = rng_for(seed, "dvr-shift-infer", idx);
                        let dl = sample_posterior(model, &y, n_posterior_samples, mi, &mut infer_rng)?;
                        Ok((run.samples, dl))
                    })
                    .collect();
            let mut mcmc_sets = Vec::with_capacity(n_measurements);
            let mut dl_sets = Vec::with_capacity(n_measurements);
            for r in per_measurement {
                let (m, d) = r?;
                mcmc_sets.push(m);
                dl_sets.push(d);
            }
            let refs: Vec<&PosteriorSamples<T>> = mcmc_sets.iter().collect();
            let dls: Vec<&PosteriorSamples<T>> = dl_sets.iter().collect();
            let mut per_param = [T::zero(); 3];
            for (p, slot) in per_param.iter_mut().enumerate() {
                *slot = average_kl(&refs, &dls, p, estimator)?.mean;
            }
            let mean = (per_param[0] + per_param[1] + per_param[2]) / T::cst(3.0);
            Ok(DvrShiftPoint { dvr_star, d_kl_mean: mean, per_param_mean: per_param })
        })
        .collect();
    points.into_iter().collect()
}
