//! SRTM forward model for dynamic PET time-activity curves.
//!
//! Maps kinetic parameters (DVR, k2, R1) to a reference-region-driven target
//! curve, integrates it over the acquisition frame schedule, and applies the
//! scaled Gaussian noise model. The analytic solution uses an exact
//! exponential-kernel recurrence on the fine grid; a fixed-step RK4
//! integrator of the underlying ODE is provided as an independent
//! cross-check.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

/// k2 is stored in min^-1 (the reporting unit) and converted to s^-1 exactly
/// once, here at the kinetics boundary.
pub const SECONDS_PER_MINUTE: f64 = 60.0;

#[derive(Debug, Error)]
pub enum KineticsError {
    #[error("kinetic parameters must be strictly positive and finite, got dvr={dvr}, k2={k2_per_min} min^-1, r1={r1}")]
    InvalidParams { dvr: f64, k2_per_min: f64, r1: f64 },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid frame schedule: {0}")]
    InvalidSchedule(String),
    #[error("frame boundary at {boundary_s} s does not lie on the fine grid (step {step_s} s)")]
    BoundaryOffGrid { boundary_s: f64, step_s: f64 },
    #[error("curve has {got} samples but the grid has {expected} points")]
    CurveLengthMismatch { got: usize, expected: usize },
    #[error("measurement has {got} frames but the schedule has {expected}")]
    FrameCountMismatch { got: usize, expected: usize },
    #[error("invalid reference curve: {0}")]
    InvalidCurve(String),
    #[error("grid must cover [0, {total_s} s] but ends at {end_s} s")]
    GridTooShort { end_s: f64, total_s: f64 },
}

/// The parameter triple x = (DVR, k2, R1) being inferred.
///
/// All three must be strictly positive for the forward model to be
/// physically meaningful and non-divergent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KineticParams<T> {
    /// Distribution volume ratio between target and reference region.
    pub dvr: T,
    /// Rate constant from the free compartment to plasma, in min^-1.
    pub k2_per_min: T,
    /// Ratio of plasma-to-free transport rate constants.
    pub r1: T,
}

impl<T: Real> KineticParams<T> {
    pub fn new(dvr: T, k2_per_min: T, r1: T) -> Result<Self, KineticsError> {
        let p = Self { dvr, k2_per_min, r1 };
        if p.is_positive() {
            Ok(p)
        } else {
            Err(KineticsError::InvalidParams {
                dvr: dvr.to_f64().unwrap_or(f64::NAN),
                k2_per_min: k2_per_min.to_f64().unwrap_or(f64::NAN),
                r1: r1.to_f64().unwrap_or(f64::NAN),
            })
        }
    }

    pub fn is_positive(&self) -> bool {
        let pos = |v: T| v.is_finite() && v > T::zero();
        pos(self.dvr) && pos(self.k2_per_min) && pos(self.r1)
    }

    pub fn as_array(&self) -> [T; 3] {
        [self.dvr, self.k2_per_min, self.r1]
    }

    pub fn from_array(a: [T; 3]) -> Self {
        Self { dvr: a[0], k2_per_min: a[1], r1: a[2] }
    }
}

/// Acquisition frame schedule: N frame durations and cumulative boundaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSchedule<T> {
    durations: Vec<T>,
    boundaries: Vec<T>,
    total: T,
}

impl<T: Real> FrameSchedule<T> {
    pub fn new(durations: Vec<T>) -> Result<Self, KineticsError> {
        if durations.is_empty() {
            return Err(KineticsError::InvalidSchedule("no frames".into()));
        }
        if durations.iter().any(|d| !d.is_finite() || *d <= T::zero()) {
            return Err(KineticsError::InvalidSchedule(
                "all frame durations must be positive".into(),
            ));
        }
        let mut boundaries = Vec::with_capacity(durations.len() + 1);
        let mut t = T::zero();
        boundaries.push(t);
        for &d in &durations {
            t = t + d;
            boundaries.push(t);
        }
        Ok(Self { durations, boundaries, total: t })
    }

    /// The 54-frame, 7200 s schedule used throughout:
    /// 6x10s, 8x15s, 6x30s, 8x60s, 8x120s, 18x300s.
    pub fn default_54_frame() -> Self {
        let blocks: [(usize, f64); 6] =
            [(6, 10.0), (8, 15.0), (6, 30.0), (8, 60.0), (8, 120.0), (18, 300.0)];
        let mut durations = Vec::with_capacity(54);
        for (count, len) in blocks {
            durations.extend(std::iter::repeat(T::cst(len)).take(count));
        }
        Self::new(durations).expect("default schedule is valid")
    }

    pub fn n_frames(&self) -> usize {
        self.durations.len()
    }

    pub fn durations(&self) -> &[T] {
        &self.durations
    }

    /// Cumulative frame boundaries t_0 = 0 .. t_N = T (length N + 1).
    pub fn boundaries(&self) -> &[T] {
        &self.boundaries
    }

    pub fn total(&self) -> T {
        self.total
    }
}

/// Uniform fine time grid t_i = i * step, i = 0..len.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformGrid<T> {
    step: T,
    len: usize,
}

impl<T: Real> UniformGrid<T> {
    pub fn new(step: T, len: usize) -> Result<Self, KineticsError> {
        if !step.is_finite() || step <= T::zero() {
            return Err(KineticsError::InvalidGrid("step must be positive".into()));
        }
        if len < 2 {
            return Err(KineticsError::InvalidGrid("grid needs at least two points".into()));
        }
        Ok(Self { step, len })
    }

    /// Grid covering [0, total] with the given step; `total` must be an
    /// integer multiple of `step`.
    pub fn covering(total: T, step: T) -> Result<Self, KineticsError> {
        if !step.is_finite() || step <= T::zero() || !total.is_finite() || total <= T::zero() {
            return Err(KineticsError::InvalidGrid("step and total must be positive".into()));
        }
        let ratio = (total / step).to_f64().unwrap();
        let n = ratio.round();
        if (ratio - n).abs() > 1e-9 * n.max(1.0) {
            return Err(KineticsError::InvalidGrid(format!(
                "total {total} is not a multiple of step {step}"
            )));
        }
        Self::new(step, n as usize + 1)
    }

    pub fn step(&self) -> T {
        self.step
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn time(&self, index: usize) -> T {
        self.step * T::from_usize(index).unwrap()
    }

    pub fn end(&self) -> T {
        self.time(self.len - 1)
    }

    /// Grid index of a time point, or an error if it falls between points.
    pub fn index_of(&self, t: T) -> Result<usize, KineticsError> {
        let step = self.step.to_f64().unwrap();
        let tf = t.to_f64().unwrap();
        let idx = (tf / step).round();
        if (tf - idx * step).abs() > 1e-9 * tf.abs().max(1.0) || idx < 0.0 || idx as usize >= self.len
        {
            return Err(KineticsError::BoundaryOffGrid { boundary_s: tf, step_s: step });
        }
        Ok(idx as usize)
    }
}

/// Reference-region activity curve C_R(t) sampled on a uniform fine grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTac<T> {
    pub grid: UniformGrid<T>,
    pub values: Vec<T>,
}

impl<T: Real> ReferenceTac<T> {
    pub fn from_samples(grid: UniformGrid<T>, values: Vec<T>) -> Result<Self, KineticsError> {
        if values.len() != grid.len() {
            return Err(KineticsError::CurveLengthMismatch { got: values.len(), expected: grid.len() });
        }
        if values.iter().any(|v| !v.is_finite() || *v < T::zero()) {
            return Err(KineticsError::InvalidCurve(
                "reference activity values must be finite and non-negative".into(),
            ));
        }
        Ok(Self { grid, values })
    }
}

/// Coefficients of the shipped reference-curve family
/// C_R(t) = amplitude * (exp(-t / decay_tau_s) - exp(-t / rise_tau_s)):
/// zero at injection, an early peak, then a slow washout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTacCoefficients {
    pub amplitude: f64,
    pub rise_tau_s: f64,
    pub decay_tau_s: f64,
}

impl Default for ReferenceTacCoefficients {
    fn default() -> Self {
        Self { amplitude: 2.2e-5, rise_tau_s: 60.0, decay_tau_s: 3600.0 }
    }
}

/// The default reference curve on the given grid.
pub fn default_reference_tac<T: Real>(grid: UniformGrid<T>) -> Result<ReferenceTac<T>, KineticsError> {
    reference_tac_from_coefficients(grid, &ReferenceTacCoefficients::default())
}

pub fn reference_tac_from_coefficients<T: Real>(
    grid: UniformGrid<T>,
    coeffs: &ReferenceTacCoefficients,
) -> Result<ReferenceTac<T>, KineticsError> {
    if coeffs.amplitude <= 0.0 || coeffs.rise_tau_s <= 0.0 || coeffs.decay_tau_s <= coeffs.rise_tau_s {
        return Err(KineticsError::InvalidCurve(
            "coefficients must satisfy amplitude > 0 and decay_tau > rise_tau > 0".into(),
        ));
    }
    let amp = T::cst(coeffs.amplitude);
    let rise = T::cst(coeffs.rise_tau_s);
    let decay = T::cst(coeffs.decay_tau_s);
    let values = (0..grid.len())
        .map(|i| {
            let t = grid.time(i);
            let v = amp * ((-t / decay).exp() - (-t / rise).exp());
            v.max(T::zero())
        })
        .collect();
    ReferenceTac::from_samples(grid, values)
}

/// Builds a reference curve from tabulated (time, value) samples by linear
/// interpolation onto the target grid. The table must be strictly increasing
/// in time and cover the whole grid.
pub fn reference_tac_from_table<T: Real>(
    times_s: &[T],
    values: &[T],
    grid: UniformGrid<T>,
) -> Result<ReferenceTac<T>, KineticsError> {
    if times_s.len() != values.len() || times_s.len() < 2 {
        return Err(KineticsError::InvalidCurve(
            "need at least two (time, value) samples of equal length".into(),
        ));
    }
    if times_s.windows(2).any(|w| w[1] <= w[0]) {
        return Err(KineticsError::InvalidCurve("times must be strictly increasing".into()));
    }
    if times_s[0] > T::zero() || *times_s.last().unwrap() < grid.end() {
        return Err(KineticsError::InvalidCurve(format!(
            "samples must cover [0, {}] s",
            grid.end()
        )));
    }
    let mut out = Vec::with_capacity(grid.len());
    let mut seg = 0usize;
    for i in 0..grid.len() {
        let t = grid.time(i);
        while seg + 2 < times_s.len() && times_s[seg + 1] < t {
            seg += 1;
        }
        let (t0, t1) = (times_s[seg], times_s[seg + 1]);
        let (v0, v1) = (values[seg], values[seg + 1]);
        let w = (t - t0) / (t1 - t0);
        out.push(v0 + w * (v1 - v0));
    }
    ReferenceTac::from_samples(grid, out)
}

/// Per-measurement noise: one sigma drawn as scale * Gamma(shape, rate), then
/// independent per-frame Gaussian noise with std sigma * sqrt(dt_n / T).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, bound(deserialize = "T: Real"))]
pub struct NoiseModel<T> {
    pub scale: T,
    pub shape: T,
    pub rate: T,
}

impl<T: Real> Default for NoiseModel<T> {
    fn default() -> Self {
        Self { scale: T::cst(1e-4), shape: T::one(), rate: T::one() }
    }
}

impl<T: Real> NoiseModel<T> {
    pub fn draw_sigma<R: Rng + ?Sized>(&self, rng: &mut R) -> T {
        self.scale * T::sample_gamma(rng, self.shape, self.rate)
    }
}

/// A measurement y: one frame-integrated TAC, paired with its schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement<T> {
    pub y: Vec<T>,
    pub schedule: FrameSchedule<T>,
}

impl<T: Real> Measurement<T> {
    pub fn new(y: Vec<T>, schedule: FrameSchedule<T>) -> Result<Self, KineticsError> {
        if y.len() != schedule.n_frames() {
            return Err(KineticsError::FrameCountMismatch {
                got: y.len(),
                expected: schedule.n_frames(),
            });
        }
        Ok(Self { y, schedule })
    }

    pub fn n_frames(&self) -> usize {
        self.y.len()
    }
}

/// Adds frame noise at a fixed sigma; with sigma = 0 the output equals the input.
pub fn apply_noise<T: Real, R: Rng + ?Sized>(
    clean: &Measurement<T>,
    noise_sigma: T,
    rng: &mut R,
) -> Measurement<T> {
    let total = clean.schedule.total();
    let y = clean
        .y
        .iter()
        .zip(clean.schedule.durations())
        .map(|(&v, &dt)| v + noise_sigma * (dt / total).sqrt() * T::standard_normal(rng))
        .collect();
    Measurement { y, schedule: clean.schedule.clone() }
}

/// Draws one sigma from the noise model, applies frame noise, and returns the
/// noisy measurement together with the drawn sigma.
pub fn add_noise<T: Real, R: Rng + ?Sized>(
    clean: &Measurement<T>,
    noise: &NoiseModel<T>,
    rng: &mut R,
) -> (Measurement<T>, T) {
    let sigma = noise.draw_sigma(rng);
    (apply_noise(clean, sigma, rng), sigma)
}

/// Segment weights for the exponential-kernel recurrence on a uniform grid.
///
/// With x = lambda * step, each segment of a piecewise-linear input f
/// contributes exactly f_i * w0 + (f_{i+1} - f_i) * w1 to
/// (f convolved with exp(-lambda t)) at the right end, and the previous value
/// decays by `decay = exp(-x)`. A series branch keeps w0, w1 accurate for
/// small x (down to x = 0, where they reduce to the plain trapezoid weights).
fn exp_kernel_weights<T: Real>(lambda: T, step: T) -> (T, T, T) {
    let x = lambda * step;
    let decay = (-x).exp();
    let half = T::cst(0.5);
    if x < T::cst(1e-4) {
        // series in x, exact at x = 0 (plain trapezoid weights)
        let x2 = x * x;
        let x3 = x2 * x;
        let w0 = step * (T::one() - half * x + x2 / T::cst(6.0) - x3 / T::cst(24.0));
        let w1 = step * (half - x / T::cst(6.0) + x2 / T::cst(24.0) - x3 / T::cst(120.0));
        (decay, w0, w1)
    } else {
        let w0 = (T::one() - decay) / lambda;
        let w1 = (step - w0) / (lambda * step);
        (decay, w0, w1)
    }
}

/// Convolution (values ⊗ exp(-lambda t)) evaluated on the uniform grid by the
/// exact recurrence for piecewise-linear `values`.
fn exp_convolution_into<T: Real>(values: &[T], step: T, lambda: T, out: &mut Vec<T>) {
    out.clear();
    out.reserve(values.len());
    out.push(T::zero());
    let (decay, w0, w1) = exp_kernel_weights(lambda, step);
    let mut acc = T::zero();
    for w in values.windows(2) {
        acc = decay * acc + w[0] * w0 + (w[1] - w[0]) * w1;
        out.push(acc);
    }
}

fn check_forward_inputs<T: Real>(
    params: &KineticParams<T>,
    reference: &ReferenceTac<T>,
) -> Result<(), KineticsError> {
    // The math needs dvr > 0 (it divides k2); k2 and r1 only need to be
    // finite and non-negative so that limiting cases remain expressible.
    let ok = params.dvr.is_finite()
        && params.dvr > T::zero()
        && params.k2_per_min.is_finite()
        && params.k2_per_min >= T::zero()
        && params.r1.is_finite()
        && params.r1 >= T::zero();
    if !ok {
        return Err(KineticsError::InvalidParams {
            dvr: params.dvr.to_f64().unwrap_or(f64::NAN),
            k2_per_min: params.k2_per_min.to_f64().unwrap_or(f64::NAN),
            r1: params.r1.to_f64().unwrap_or(f64::NAN),
        });
    }
    if reference.values.len() != reference.grid.len() {
        return Err(KineticsError::CurveLengthMismatch {
            got: reference.values.len(),
            expected: reference.grid.len(),
        });
    }
    Ok(())
}

/// Analytic SRTM target curve on the reference grid:
/// C_T = R1 * C_R + k2 * (1 - R1 / DVR) * (C_R ⊗ exp(-(k2 / DVR) t)).
pub fn srtm_target_tac<T: Real>(
    params: &KineticParams<T>,
    reference: &ReferenceTac<T>,
) -> Result<Vec<T>, KineticsError> {
    let mut conv = Vec::new();
    let mut out = Vec::new();
    srtm_target_tac_into(params, reference, &mut conv, &mut out)?;
    Ok(out)
}

/// Buffer-reusing form of [`srtm_target_tac`] for hot loops (MCMC).
pub fn srtm_target_tac_into<T: Real>(
    params: &KineticParams<T>,
    reference: &ReferenceTac<T>,
    conv_scratch: &mut Vec<T>,
    out: &mut Vec<T>,
) -> Result<(), KineticsError> {
    check_forward_inputs(params, reference)?;
    let k2_s = params.k2_per_min / T::cst(SECONDS_PER_MINUTE);
    let lambda = k2_s / params.dvr;
    let coeff = k2_s * (T::one() - params.r1 / params.dvr);

    out.clear();
    out.extend(reference.values.iter().map(|&v| params.r1 * v));
    if coeff != T::zero() {
        exp_convolution_into(&reference.values, reference.grid.step(), lambda, conv_scratch);
        for (o, &c) in out.iter_mut().zip(conv_scratch.iter()) {
            *o = *o + coeff * c;
        }
    }
    Ok(())
}

/// Fixed-step 4th-order (RK4) integration of the SRTM differential equation
///
/// dC_T/dt = R1 dC_R/dt + k2 C_R - (k2 / DVR) C_T,  C_T(0) = R1 C_R(0),
///
/// with C_R treated as piecewise-linear between grid samples. Used as an
/// independent cross-check of [`srtm_target_tac`]. When the decay rate is
/// stiff relative to the grid step, the step is subdivided uniformly so the
/// scheme stays in its accuracy regime.
pub fn srtm_ode_oracle<T: Real>(
    params: &KineticParams<T>,
    reference: &ReferenceTac<T>,
) -> Result<Vec<T>, KineticsError> {
    check_forward_inputs(params, reference)?;
    let k2_s = params.k2_per_min / T::cst(SECONDS_PER_MINUTE);
    let lambda = k2_s / params.dvr;
    let r1 = params.r1;
    let step = reference.grid.step();

    let substeps = (lambda * step / T::cst(0.05))
        .to_f64()
        .unwrap()
        .ceil()
        .max(1.0)
        .min(1000.0) as usize;
    let h = step / T::from_usize(substeps).unwrap();

    let values = &reference.values;
    let mut out = Vec::with_capacity(values.len());
    let mut y = r1 * values[0];
    out.push(y);
    for w in values.windows(2) {
        let slope = (w[1] - w[0]) / step;
        // within the segment: C_R(u) = w[0] + slope * u, u in [0, step]
        let f = |u: T, y: T| r1 * slope + k2_s * (w[0] + slope * u) - lambda * y;
        let mut u = T::zero();
        for _ in 0..substeps {
            let half = T::cst(0.5);
            let k1 = f(u, y);
            let k2 = f(u + half * h, y + half * h * k1);
            let k3 = f(u + half * h, y + half * h * k2);
            let k4 = f(u + h, y + h * k3);
            y = y + h / T::cst(6.0) * (k1 + T::cst(2.0) * (k2 + k3) + k4);
            u = u + h;
        }
        out.push(y);
    }
    Ok(out)
}

/// Grid index range (start, end) of every frame; errors if a frame boundary
/// falls between grid points or the grid does not reach the end of the scan.
pub fn frame_index_ranges<T: Real>(
    grid: &UniformGrid<T>,
    schedule: &FrameSchedule<T>,
) -> Result<Vec<(usize, usize)>, KineticsError> {
    if grid.end().to_f64().unwrap() < schedule.total().to_f64().unwrap() - 1e-9 {
        return Err(KineticsError::GridTooShort {
            end_s: grid.end().to_f64().unwrap(),
            total_s: schedule.total().to_f64().unwrap(),
        });
    }
    let boundaries = schedule.boundaries();
    let mut ranges = Vec::with_capacity(schedule.n_frames());
    let mut prev = grid.index_of(boundaries[0])?;
    for &b in &boundaries[1..] {
        let idx = grid.index_of(b)?;
        ranges.push((prev, idx));
        prev = idx;
    }
    Ok(ranges)
}

/// Per-frame trapezoidal integral of a fine-grid curve.
pub fn integrate_frames<T: Real>(
    curve: &[T],
    grid: &UniformGrid<T>,
    schedule: &FrameSchedule<T>,
) -> Result<Vec<T>, KineticsError> {
    let ranges = frame_index_ranges(grid, schedule)?;
    let mut out = Vec::with_capacity(ranges.len());
    integrate_frames_with_ranges(curve, grid.step(), &ranges, &mut out);
    Ok(out)
}

/// Trapezoid integration against precomputed frame index ranges.
pub fn integrate_frames_with_ranges<T: Real>(
    curve: &[T],
    step: T,
    ranges: &[(usize, usize)],
    out: &mut Vec<T>,
) {
    out.clear();
    let half = T::cst(0.5);
    for &(i0, i1) in ranges {
        let mut acc = half * (curve[i0] + curve[i1]);
        for &v in &curve[i0 + 1..i1] {
            acc = acc + v;
        }
        out.push(acc * step);
    }
}

/// Bundles the ingredients of the forward map x -> y: reference curve, frame
/// schedule (with precomputed grid ranges), and noise model.
#[derive(Debug, Clone)]
pub struct ForwardModel<T> {
    pub reference: ReferenceTac<T>,
    pub schedule: FrameSchedule<T>,
    pub noise: NoiseModel<T>,
    frame_ranges: Vec<(usize, usize)>,
}

impl<T: Real> ForwardModel<T> {
    pub fn new(
        reference: ReferenceTac<T>,
        schedule: FrameSchedule<T>,
        noise: NoiseModel<T>,
    ) -> Result<Self, KineticsError> {
        let frame_ranges = frame_index_ranges(&reference.grid, &schedule)?;
        Ok(Self { reference, schedule, noise, frame_ranges })
    }

    pub fn n_frames(&self) -> usize {
        self.schedule.n_frames()
    }

    /// Noiseless frame integrals of the target curve for `params`.
    pub fn noiseless_frames(&self, params: &KineticParams<T>) -> Result<Vec<T>, KineticsError> {
        let mut scratch = ForwardScratch::default();
        let mut out = Vec::new();
        self.noiseless_frames_into(params, &mut scratch, &mut out)?;
        Ok(out)
    }

    /// Buffer-reusing form of [`Self::noiseless_frames`].
    pub fn noiseless_frames_into(
        &self,
        params: &KineticParams<T>,
        scratch: &mut ForwardScratch<T>,
        out: &mut Vec<T>,
    ) -> Result<(), KineticsError> {
        srtm_target_tac_into(params, &self.reference, &mut scratch.conv, &mut scratch.curve)?;
        integrate_frames_with_ranges(&scratch.curve, self.reference.grid.step(), &self.frame_ranges, out);
        Ok(())
    }

    /// Full forward draw: noiseless frames, one sigma from the noise model,
    /// per-frame noise. Returns (noisy measurement, drawn sigma).
    pub fn simulate<R: Rng + ?Sized>(
        &self,
        params: &KineticParams<T>,
        rng: &mut R,
    ) -> Result<(Measurement<T>, T), KineticsError> {
        let y = self.noiseless_frames(params)?;
        let clean = Measurement::new(y, self.schedule.clone())?;
        Ok(add_noise(&clean, &self.noise, rng))
    }
}

/// Reusable buffers for repeated forward evaluations.
#[derive(Debug, Clone, Default)]
pub struct ForwardScratch<T> {
    conv: Vec<T>,
    curve: Vec<T>,
}
