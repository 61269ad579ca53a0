//! The three conditional-VAE variants (vanilla, dual-encoder, dual-decoder):
//! reparameterized Gaussian latents, the closed-form KL terms, the combined
//! losses with exact gradients through every path, the training loop, and
//! amortized posterior sampling.
//!
//! Networks operate on per-dimension standardized inputs and outputs; the
//! normalization statistics live in the checkpoint so inference is
//! self-contained.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinetics::Measurement;
use crate::mcmc::{PosteriorSamples, SourceTag};
use crate::neural::{
    backward_into, forward, infer, init_params, sgd_step, NetworkGrads, NetworkParams,
    NetworkSpec, NeuralError,
};
use crate::priors::Dataset;
use crate::scalar::Real;
use crate::seed::{derive_seed, rng_for};

/// Dimension of the parameter vector x = (DVR, k2, R1).
pub const PARAM_DIM: usize = 3;

#[derive(Debug, Error)]
pub enum CvaeError {
    #[error("invalid training input: {0}")]
    InvalidInput(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("model has not been trained")]
    Untrained,
    #[error("latent dimensions differ: {p} vs {q}")]
    LatentDimMismatch { p: usize, q: usize },
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

/// Which of the three architectures a model implements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Vanilla,
    DualEncoder,
    DualDecoder,
}

impl Variant {
    pub fn source_tag(self) -> SourceTag {
        match self {
            Variant::Vanilla => SourceTag::CvaeVanilla,
            Variant::DualEncoder => SourceTag::CvaeDualEncoder,
            Variant::DualDecoder => SourceTag::CvaeDualDecoder,
        }
    }

    pub const ALL: [Variant; 3] = [Variant::Vanilla, Variant::DualEncoder, Variant::DualDecoder];
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::Vanilla => "vanilla",
            Variant::DualEncoder => "dual-encoder",
            Variant::DualDecoder => "dual-decoder",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vanilla" => Ok(Variant::Vanilla),
            "dual-encoder" => Ok(Variant::DualEncoder),
            "dual-decoder" => Ok(Variant::DualDecoder),
            other => Err(format!("unknown variant {other:?} (expected vanilla | dual-encoder | dual-decoder)")),
        }
    }
}

/// Mean and log-variance of a diagonal Gaussian latent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianLatentParams<T> {
    pub mu: Vec<T>,
    pub log_var: Vec<T>,
}

impl<T: Real> GaussianLatentParams<T> {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Splits a dual-head network output (means first, log-variances second).
    pub fn from_flat(output: &[T]) -> Self {
        let k = output.len() / 2;
        Self { mu: output[..k].to_vec(), log_var: output[k..].to_vec() }
    }
}

/// z = mu + exp(log_var / 2) ⊙ eps with eps ~ N(0, I).
pub fn reparameterize<T: Real, R: Rng + ?Sized>(
    latent: &GaussianLatentParams<T>,
    rng: &mut R,
) -> Vec<T> {
    let eps: Vec<T> = (0..latent.dim()).map(|_| T::standard_normal(rng)).collect();
    reparameterize_with(latent, &eps)
}

/// Deterministic form of [`reparameterize`] for a given noise draw.
pub fn reparameterize_with<T: Real>(latent: &GaussianLatentParams<T>, eps: &[T]) -> Vec<T> {
    let half = T::cst(0.5);
    latent
        .mu
        .iter()
        .zip(&latent.log_var)
        .zip(eps)
        .map(|((&m, &lv), &e)| m + (half * lv).exp() * e)
        .collect()
}

/// KL( N(mu, sigma^2) || N(mu', sigma'^2) ), both diagonal:
/// -1/2 sum_k [ 1 + log(s_k^2 / s'_k^2) - s_k^2 / s'_k^2 - (m_k - m'_k)^2 / s'_k^2 ].
pub fn kl_two_gaussians<T: Real>(
    p: &GaussianLatentParams<T>,
    q: &GaussianLatentParams<T>,
) -> Result<T, CvaeError> {
    if p.dim() != q.dim() {
        return Err(CvaeError::LatentDimMismatch { p: p.dim(), q: q.dim() });
    }
    let half = T::cst(0.5);
    let mut acc = T::zero();
    for k in 0..p.dim() {
        let dlv = p.log_var[k] - q.log_var[k];
        let ratio = dlv.exp();
        let dm = p.mu[k] - q.mu[k];
        let m_term = dm * dm * (-q.log_var[k]).exp();
        acc = acc - half * (T::one() + dlv - ratio - m_term);
    }
    Ok(acc)
}

/// KL( N(mu, sigma^2) || N(0, I) ):
/// -1/2 sum_k ( 1 + log s_k^2 - s_k^2 - m_k^2 ).
pub fn kl_standard_normal<T: Real>(p: &GaussianLatentParams<T>) -> T {
    let half = T::cst(0.5);
    let mut acc = T::zero();
    for k in 0..p.dim() {
        let ratio = p.log_var[k].exp();
        let m_term = p.mu[k] * p.mu[k];
        acc = acc - half * (T::one() + p.log_var[k] - ratio - m_term);
    }
    acc
}

/// Layer widths of the four networks; the defaults are the reference
/// architecture (hidden 128/100/50 encoders and decoder, 16/16/32 for the
/// measurement decoder, K = 10).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub decoder_prime_hidden: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            latent_dim: 10,
            encoder_hidden: vec![128, 100, 50],
            decoder_hidden: vec![128, 100, 50],
            decoder_prime_hidden: vec![16, 16, 32],
        }
    }
}

impl Architecture {
    /// Shrunken widths for gradient-check tests.
    pub fn miniature() -> Self {
        Self {
            latent_dim: 2,
            encoder_hidden: vec![16, 12, 6],
            decoder_hidden: vec![16, 12, 6],
            decoder_prime_hidden: vec![4, 4, 6],
        }
    }

    fn spec(&self, input: usize, hidden: &[usize], output: usize, dual_head: bool) -> NetworkSpec {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(output);
        NetworkSpec::new(widths, dual_head).expect("architecture widths are valid")
    }

    /// Encoder phi: [x, y] -> (mu, log sigma^2).
    pub fn encoder_spec(&self, y_dim: usize) -> NetworkSpec {
        self.spec(PARAM_DIM + y_dim, &self.encoder_hidden, 2 * self.latent_dim, true)
    }

    /// Encoder phi': y -> (mu', log sigma'^2).
    pub fn encoder_prime_spec(&self, y_dim: usize) -> NetworkSpec {
        self.spec(y_dim, &self.encoder_hidden, 2 * self.latent_dim, true)
    }

    /// Decoder theta: [y, z] -> x_tilde.
    pub fn decoder_spec(&self, y_dim: usize) -> NetworkSpec {
        self.spec(y_dim + self.latent_dim, &self.decoder_hidden, PARAM_DIM, false)
    }

    /// Decoder theta': z -> y_tilde.
    pub fn decoder_prime_spec(&self, y_dim: usize) -> NetworkSpec {
        self.spec(self.latent_dim, &self.decoder_prime_hidden, y_dim, false)
    }
}

/// Training protocol knobs. `beta` weights the KL term of every variant;
/// `lambda` weights the measurement-reconstruction term (dual-decoder only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, bound(deserialize = "T: Real"))]
pub struct TrainConfig<T> {
    pub learning_rate: T,
    pub momentum: T,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta: T,
    pub lambda: T,
    pub seed: u64,
    pub architecture: Architecture,
    /// Floor applied to encoder log-variances during loss evaluation; a
    /// numerical guard that never binds in healthy training (hits counted).
    pub log_var_floor: T,
    /// Global gradient-norm ceiling per batch across all component networks;
    /// a numerical guard against heavy-tailed noise draws that rarely binds
    /// in healthy training (binds counted in the checkpoint).
    pub grad_clip_norm: T,
}

impl<T: Real> Default for TrainConfig<T> {
    fn default() -> Self {
        Self {
            learning_rate: T::cst(1e-4),
            momentum: T::cst(0.9),
            epochs: 200,
            batch_size: 100,
            beta: T::one(),
            lambda: T::one(),
            seed: 0,
            architecture: Architecture::default(),
            log_var_floor: T::cst(-20.0),
            grad_clip_norm: T::cst(100.0),
        }
    }
}

/// Per-dimension standardization statistics for x and y.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization<T> {
    pub x_mean: Vec<T>,
    pub x_std: Vec<T>,
    pub y_mean: Vec<T>,
    pub y_std: Vec<T>,
}

impl<T: Real> Normalization<T> {
    pub fn from_dataset(dataset: &Dataset<T>) -> Result<Self, CvaeError> {
        if dataset.is_empty() {
            return Err(CvaeError::InvalidInput("dataset is empty".into()));
        }
        let n = T::from_usize(dataset.len()).unwrap();
        let y_dim = dataset.samples[0].y.len();
        let floor = T::cst(1e-12);

        let mut x_mean = vec![T::zero(); PARAM_DIM];
        let mut y_mean = vec![T::zero(); y_dim];
        for s in &dataset.samples {
            for (m, v) in x_mean.iter_mut().zip(s.params.as_array()) {
                *m += v;
            }
            for (m, &v) in y_mean.iter_mut().zip(&s.y) {
                *m += v;
            }
        }
        x_mean.iter_mut().for_each(|m| *m /= n);
        y_mean.iter_mut().for_each(|m| *m /= n);

        let mut x_var = vec![T::zero(); PARAM_DIM];
        let mut y_var = vec![T::zero(); y_dim];
        for s in &dataset.samples {
            for (va, (v, m)) in x_var.iter_mut().zip(s.params.as_array().iter().zip(&x_mean)) {
                let d = *v - *m;
                *va += d * d;
            }
            for (va, (&v, m)) in y_var.iter_mut().zip(s.y.iter().zip(&y_mean)) {
                let d = v - *m;
                *va += d * d;
            }
        }
        let x_std = x_var.iter().map(|&v| (v / n).sqrt().max(floor)).collect();
        let y_std = y_var.iter().map(|&v| (v / n).sqrt().max(floor)).collect();
        Ok(Self { x_mean, x_std, y_mean, y_std })
    }

    pub fn normalize_x(&self, x: &[T]) -> Vec<T> {
        x.iter().zip(self.x_mean.iter().zip(&self.x_std)).map(|(&v, (m, s))| (v - *m) / *s).collect()
    }

    pub fn denormalize_x(&self, x: &[T]) -> Vec<T> {
        x.iter().zip(self.x_mean.iter().zip(&self.x_std)).map(|(&v, (m, s))| v * *s + *m).collect()
    }

    pub fn normalize_y(&self, y: &[T]) -> Vec<T> {
        y.iter().zip(self.y_mean.iter().zip(&self.y_std)).map(|(&v, (m, s))| (v - *m) / *s).collect()
    }
}

/// One trained (or in training) CVAE: the networks of its variant plus the
/// normalization statistics and training metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvaeModel<T> {
    pub variant: Variant,
    pub encoder_phi: NetworkParams<T>,
    pub decoder_theta: NetworkParams<T>,
    pub encoder_phi_prime: Option<NetworkParams<T>>,
    pub decoder_theta_prime: Option<NetworkParams<T>>,
    pub normalization: Normalization<T>,
    pub latent_dim: usize,
    pub trained_epochs: usize,
    pub epoch_losses: Vec<T>,
    pub log_var_clamp_hits: u64,
    pub grad_clip_binds: u64,
    pub seed: u64,
}

impl<T: Real> CvaeModel<T> {
    /// Freshly initialized networks for a variant (He weights, zero biases).
    pub fn init(variant: Variant, arch: &Architecture, y_dim: usize, norm: Normalization<T>, seed: u64) -> Self {
        let encoder_phi = init_params(&arch.encoder_spec(y_dim), &mut rng_for(seed, "cvae-init-phi", 0));
        let decoder_theta = init_params(&arch.decoder_spec(y_dim), &mut rng_for(seed, "cvae-init-theta", 0));
        let encoder_phi_prime = (variant == Variant::DualEncoder)
            .then(|| init_params(&arch.encoder_prime_spec(y_dim), &mut rng_for(seed, "cvae-init-phi-prime", 0)));
        let decoder_theta_prime = (variant == Variant::DualDecoder)
            .then(|| init_params(&arch.decoder_prime_spec(y_dim), &mut rng_for(seed, "cvae-init-theta-prime", 0)));
        Self {
            variant,
            encoder_phi,
            decoder_theta,
            encoder_phi_prime,
            decoder_theta_prime,
            normalization: norm,
            latent_dim: arch.latent_dim,
            trained_epochs: 0,
            epoch_losses: Vec::new(),
            log_var_clamp_hits: 0,
            grad_clip_binds: 0,
            seed,
        }
    }

    pub fn y_dim(&self) -> usize {
        self.normalization.y_mean.len()
    }
}

/// Gradients for every network of a variant.
#[derive(Debug, Clone)]
pub struct CvaeGrads<T> {
    pub phi: NetworkGrads<T>,
    pub theta: NetworkGrads<T>,
    pub phi_prime: Option<NetworkGrads<T>>,
    pub theta_prime: Option<NetworkGrads<T>>,
}

impl<T: Real> CvaeGrads<T> {
    pub fn zeros(model: &CvaeModel<T>) -> Self {
        Self {
            phi: NetworkGrads::zeros(&model.encoder_phi.spec),
            theta: NetworkGrads::zeros(&model.decoder_theta.spec),
            phi_prime: model.encoder_phi_prime.as_ref().map(|n| NetworkGrads::zeros(&n.spec)),
            theta_prime: model.decoder_theta_prime.as_ref().map(|n| NetworkGrads::zeros(&n.spec)),
        }
    }

    fn reset(&mut self) {
        self.phi.reset();
        self.theta.reset();
        if let Some(g) = &mut self.phi_prime {
            g.reset();
        }
        if let Some(g) = &mut self.theta_prime {
            g.reset();
        }
    }

    fn scale(&mut self, factor: T) {
        self.phi.scale(factor);
        self.theta.scale(factor);
        if let Some(g) = &mut self.phi_prime {
            g.scale(factor);
        }
        if let Some(g) = &mut self.theta_prime {
            g.scale(factor);
        }
    }

    fn squared_norm(&self) -> T {
        let part = |g: &NetworkGrads<T>| {
            g.layers
                .iter()
                .map(|l| {
                    l.weights.iter().map(|&v| v * v).sum::<T>()
                        + l.bias.iter().map(|&v| v * v).sum::<T>()
                })
                .sum::<T>()
        };
        let mut acc = part(&self.phi) + part(&self.theta);
        if let Some(g) = &self.phi_prime {
            acc += part(g);
        }
        if let Some(g) = &self.theta_prime {
            acc += part(g);
        }
        acc
    }

    /// Rescales so the joint gradient norm does not exceed `max_norm`;
    /// returns true when it had to.
    fn clip_norm(&mut self, max_norm: T) -> bool {
        let norm = self.squared_norm().sqrt();
        if norm > max_norm && norm.is_finite() {
            self.scale(max_norm / norm);
            true
        } else {
            false
        }
    }
}

/// Result of one batch-loss evaluation.
#[derive(Debug)]
pub struct BatchLoss<T> {
    pub loss: T,
    pub grads: CvaeGrads<T>,
    pub clamp_hits: u64,
}

/// Batch-mean variant loss with one reparameterized draw per example, and
/// exact gradients through every path (reconstruction, KL, and the
/// reparameterized sample). Inputs must already be normalized.
pub fn loss<T: Real, R: Rng + ?Sized>(
    model: &CvaeModel<T>,
    batch_x: &[&[T]],
    batch_y: &[&[T]],
    beta: T,
    lambda: T,
    log_var_floor: T,
    rng: &mut R,
) -> Result<BatchLoss<T>, CvaeError> {
    let k = model.latent_dim;
    let eps: Vec<Vec<T>> = (0..batch_x.len())
        .map(|_| (0..k).map(|_| T::standard_normal(rng)).collect())
        .collect();
    loss_with_eps(model, batch_x, batch_y, beta, lambda, log_var_floor, &eps)
}

/// As [`loss`], with the reparameterization noise supplied explicitly (one
/// K-vector per example); finite-difference checks freeze it this way.
pub fn loss_with_eps<T: Real>(
    model: &CvaeModel<T>,
    batch_x: &[&[T]],
    batch_y: &[&[T]],
    beta: T,
    lambda: T,
    log_var_floor: T,
    eps: &[Vec<T>],
) -> Result<BatchLoss<T>, CvaeError> {
    let mut grads = CvaeGrads::zeros(model);
    let (loss, clamp_hits) =
        loss_into(model, batch_x, batch_y, beta, lambda, log_var_floor, eps, &mut grads)?;
    Ok(BatchLoss { loss, grads, clamp_hits })
}

#[allow(clippy::too_many_arguments)]
fn loss_into<T: Real>(
    model: &CvaeModel<T>,
    batch_x: &[&[T]],
    batch_y: &[&[T]],
    beta: T,
    lambda: T,
    log_var_floor: T,
    eps: &[Vec<T>],
    grads: &mut CvaeGrads<T>,
) -> Result<(T, u64), CvaeError> {
    if batch_x.len() != batch_y.len() || batch_x.len() != eps.len() || batch_x.is_empty() {
        return Err(CvaeError::InvalidInput(format!(
            "batch sizes disagree: {} x, {} y, {} eps",
            batch_x.len(),
            batch_y.len(),
            eps.len()
        )));
    }
    let k = model.latent_dim;
    let half = T::cst(0.5);
    grads.reset();

    let mut total_loss = T::zero();
    let mut clamp_hits = 0u64;
    let mut enc_in = Vec::new();
    let mut dec_in = Vec::new();
    let mut scratch_grad = Vec::new();

    for ((x, y), eps_s) in batch_x.iter().zip(batch_y).zip(eps) {
        if x.len() != PARAM_DIM || y.len() != model.y_dim() || eps_s.len() != k {
            return Err(CvaeError::InvalidInput("sample width mismatch".into()));
        }

        // encoder phi([x, y]) -> (mu, log_var), log_var floored
        enc_in.clear();
        enc_in.extend_from_slice(x);
        enc_in.extend_from_slice(y);
        let (enc_out, enc_cache) = forward(&model.encoder_phi, &enc_in)?;
        let mu = &enc_out[..k];
        let mut log_var = enc_out[k..].to_vec();
        let mut clamp_mask = vec![false; k];
        for (lv, mask) in log_var.iter_mut().zip(&mut clamp_mask) {
            if *lv < log_var_floor {
                *lv = log_var_floor;
                *mask = true;
                clamp_hits += 1;
            }
        }

        // z = mu + exp(log_var / 2) eps
        let sigma: Vec<T> = log_var.iter().map(|&lv| (half * lv).exp()).collect();
        let z: Vec<T> = mu
            .iter()
            .zip(&sigma)
            .zip(eps_s)
            .map(|((&m, &s), &e)| m + s * e)
            .collect();

        // decoder theta([y, z]) -> x_tilde; L1 = 1/2 ||x - x_tilde||^2
        dec_in.clear();
        dec_in.extend_from_slice(y);
        dec_in.extend_from_slice(&z);
        let (x_tilde, dec_cache) = forward(&model.decoder_theta, &dec_in)?;
        let residual: Vec<T> = x_tilde.iter().zip(*x).map(|(&xt, &xv)| xt - xv).collect();
        let l_recon = half * residual.iter().map(|&r| r * r).sum::<T>();

        // d loss / d x_tilde = residual; the tail of the input gradient is dz
        backward_into(&model.decoder_theta, &dec_cache, &residual, &mut grads.theta, &mut scratch_grad)?;
        let mut dz: Vec<T> = scratch_grad[y.len()..].to_vec();

        // dual-decoder: theta'(z) -> y_tilde; L3 = 1/2 ||y - y_tilde||^2
        let mut l_y_recon = T::zero();
        if let (Some(theta_prime), Some(g_tp)) =
            (&model.decoder_theta_prime, &mut grads.theta_prime)
        {
            let (y_tilde, tp_cache) = forward(theta_prime, &z)?;
            let y_res: Vec<T> = y_tilde.iter().zip(*y).map(|(&yt, &yv)| yt - yv).collect();
            l_y_recon = half * y_res.iter().map(|&r| r * r).sum::<T>();
            let dy: Vec<T> = y_res.iter().map(|&r| lambda * r).collect();
            backward_into(theta_prime, &tp_cache, &dy, g_tp, &mut scratch_grad)?;
            for (d, &g) in dz.iter_mut().zip(&scratch_grad) {
                *d += g;
            }
        }

        // KL term and its gradients into (mu, log_var) and, for the
        // dual-encoder, into (mu', log_var')
        let latent = GaussianLatentParams { mu: mu.to_vec(), log_var: log_var.clone() };
        let mut d_mu = vec![T::zero(); k];
        let mut d_lv = vec![T::zero(); k];
        let l_kl;
        match (&model.encoder_phi_prime, &mut grads.phi_prime) {
            (Some(phi_prime), Some(g_pp)) => {
                let (pp_out, pp_cache) = forward(phi_prime, y)?;
                let mu_p = &pp_out[..k];
                let mut log_var_p = pp_out[k..].to_vec();
                let mut clamp_mask_p = vec![false; k];
                for (lv, mask) in log_var_p.iter_mut().zip(&mut clamp_mask_p) {
                    if *lv < log_var_floor {
                        *lv = log_var_floor;
                        *mask = true;
                        clamp_hits += 1;
                    }
                }
                let latent_p =
                    GaussianLatentParams { mu: mu_p.to_vec(), log_var: log_var_p.clone() };
                l_kl = kl_two_gaussians(&latent, &latent_p)?;

                let mut pp_grad = vec![T::zero(); 2 * k];
                for i in 0..k {
                    let ratio = (log_var[i] - log_var_p[i]).exp();
                    let inv_var_p = (-log_var_p[i]).exp();
                    let dm = mu[i] - mu_p[i];
                    d_mu[i] += beta * dm * inv_var_p;
                    d_lv[i] += -beta * half * (T::one() - ratio);
                    pp_grad[i] = -beta * dm * inv_var_p;
                    pp_grad[k + i] = if clamp_mask_p[i] {
                        T::zero()
                    } else {
                        -beta * half * (ratio + dm * dm * inv_var_p - T::one())
                    };
                }
                backward_into(phi_prime, &pp_cache, &pp_grad, g_pp, &mut scratch_grad)?;
            }
            _ => {
                l_kl = kl_standard_normal(&latent);
                for i in 0..k {
                    d_mu[i] += beta * mu[i];
                    d_lv[i] += -beta * half * (T::one() - log_var[i].exp());
                }
            }
        }

        // gradient through the reparameterized draw, then the clamp gate
        let mut enc_grad = vec![T::zero(); 2 * k];
        for i in 0..k {
            enc_grad[i] = dz[i] + d_mu[i];
            let through_z = dz[i] * half * sigma[i] * eps_s[i];
            enc_grad[k + i] = if clamp_mask[i] { T::zero() } else { through_z + d_lv[i] };
        }
        backward_into(&model.encoder_phi, &enc_cache, &enc_grad, &mut grads.phi, &mut scratch_grad)?;

        total_loss = total_loss + l_recon + beta * l_kl + lambda * l_y_recon;
    }

    let inv_b = T::one() / T::from_usize(batch_x.len()).unwrap();
    grads.scale(inv_b);
    Ok((total_loss * inv_b, clamp_hits))
}

/// Trains one variant on a dataset: standardizes inputs, then runs
/// `epochs` x `ceil(D / batch)` SGD-with-momentum steps on the joint loss of
/// all component networks. Deterministic for a given config seed.
pub fn train<T: Real>(
    variant: Variant,
    dataset: &Dataset<T>,
    config: &TrainConfig<T>,
) -> Result<CvaeModel<T>, CvaeError> {
    if dataset.is_empty() {
        return Err(CvaeError::InvalidInput("dataset is empty".into()));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(CvaeError::InvalidInput("batch size and epochs must be positive".into()));
    }
    if config.beta < T::zero() || config.lambda < T::zero() {
        return Err(CvaeError::InvalidInput("beta and lambda must be non-negative".into()));
    }

    let norm = Normalization::from_dataset(dataset)?;
    let y_dim = dataset.samples[0].y.len();
    let mut model = CvaeModel::init(variant, &config.architecture, y_dim, norm, config.seed);

    let xs: Vec<Vec<T>> = dataset
        .samples
        .iter()
        .map(|s| model.normalization.normalize_x(&s.params.as_array()))
        .collect();
    let ys: Vec<Vec<T>> =
        dataset.samples.iter().map(|s| model.normalization.normalize_y(&s.y)).collect();

    let n = dataset.len();
    let k = model.latent_dim;
    let mut order: Vec<usize> = (0..n).collect();
    let mut grads = CvaeGrads::zeros(&model);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut clamp_hits = 0u64;
    let mut clip_binds = 0u64;

    for epoch in 0..config.epochs {
        let mut shuffle_rng = rng_for(config.seed, "cvae-shuffle", epoch as u64);
        // Fisher-Yates
        for i in (1..n).rev() {
            let j = (T::uniform_01(&mut shuffle_rng) * T::from_usize(i + 1).unwrap())
                .to_usize()
                .unwrap()
                .min(i);
            order.swap(i, j);
        }

        let mut eps_rng = rng_for(config.seed, "cvae-eps", epoch as u64);
        let mut epoch_loss = T::zero();
        let mut n_batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch_x: Vec<&[T]> = chunk.iter().map(|&i| xs[i].as_slice()).collect();
            let batch_y: Vec<&[T]> = chunk.iter().map(|&i| ys[i].as_slice()).collect();
            let eps: Vec<Vec<T>> = (0..chunk.len())
                .map(|_| (0..k).map(|_| T::standard_normal(&mut eps_rng)).collect())
                .collect();
            let (batch_loss, hits) = loss_into(
                &model,
                &batch_x,
                &batch_y,
                config.beta,
                config.lambda,
                config.log_var_floor,
                &eps,
                &mut grads,
            )?;
            if !batch_loss.is_finite() {
                return Err(CvaeError::Diverged {
                    epoch,
                    loss: batch_loss.to_f64().unwrap_or(f64::NAN),
                });
            }
            clamp_hits += hits;
            epoch_loss += batch_loss;
            n_batches += 1;

            if config.grad_clip_norm > T::zero() && grads.clip_norm(config.grad_clip_norm) {
                clip_binds += 1;
            }
            sgd_step(&mut model.encoder_phi, &grads.phi, config.learning_rate, config.momentum);
            sgd_step(&mut model.decoder_theta, &grads.theta, config.learning_rate, config.momentum);
            if let (Some(net), Some(g)) = (&mut model.encoder_phi_prime, &grads.phi_prime) {
                sgd_step(net, g, config.learning_rate, config.momentum);
            }
            if let (Some(net), Some(g)) = (&mut model.decoder_theta_prime, &grads.theta_prime) {
                sgd_step(net, g, config.learning_rate, config.momentum);
            }
        }
        epoch_losses.push(epoch_loss / T::from_usize(n_batches).unwrap());
    }

    model.trained_epochs = config.epochs;
    model.epoch_losses = epoch_losses;
    model.log_var_clamp_hits = clamp_hits;
    model.grad_clip_binds = clip_binds;
    Ok(model)
}

/// Draws S posterior samples for a measurement through the inference path of
/// the trained variant: the dual-encoder samples z from phi'(y*), the other
/// two from N(0, I); every z is concatenated with the normalized y* and
/// decoded, then de-normalized to parameter units.
///
/// Draw chunks run on derived RNG streams, so the sample set depends only on
/// the caller's RNG state, not on worker count.
pub fn sample_posterior<T: Real, R: Rng + ?Sized>(
    model: &CvaeModel<T>,
    y_star: &Measurement<T>,
    n_samples: usize,
    measurement_id: usize,
    rng: &mut R,
) -> Result<PosteriorSamples<T>, CvaeError> {
    if model.trained_epochs == 0 {
        return Err(CvaeError::Untrained);
    }
    if n_samples == 0 {
        return Err(CvaeError::InvalidInput("need at least one posterior sample".into()));
    }
    if y_star.y.len() != model.y_dim() {
        return Err(CvaeError::InvalidInput(format!(
            "measurement has {} frames, model expects {}",
            y_star.y.len(),
            model.y_dim()
        )));
    }

    let y_norm = model.normalization.normalize_y(&y_star.y);
    let k = model.latent_dim;

    // latent distribution for the inference path
    let latent_prime = match (&model.variant, &model.encoder_phi_prime) {
        (Variant::DualEncoder, Some(phi_prime)) => {
            let out = infer(phi_prime, &y_norm)?;
            Some(GaussianLatentParams::from_flat(&out))
        }
        (Variant::DualEncoder, None) => {
            return Err(CvaeError::InvalidInput("dual-encoder model lacks phi'".into()))
        }
        _ => None,
    };

    const CHUNK: usize = 2048;
    let n_chunks = n_samples.div_ceil(CHUNK);
    let chunk_seeds: Vec<u64> = (0..n_chunks)
        .map(|i| derive_seed(rng.next_u64() ^ (i as u64), "cvae-posterior-chunk", i as u64))
        .collect();

    let chunks: Vec<Vec<[T; 3]>> = chunk_seeds
        .par_iter()
        .enumerate()
        .map(|(ci, &cs)| {
            let mut rng = ChaCha8Rng::seed_from_u64(cs);
            let lo = ci * CHUNK;
            let hi = ((ci + 1) * CHUNK).min(n_samples);
            let mut dec_in = Vec::with_capacity(y_norm.len() + k);
            let mut out = Vec::with_capacity(hi - lo);
            for _ in lo..hi {
                dec_in.clear();
                dec_in.extend_from_slice(&y_norm);
                match &latent_prime {
                    Some(latent) => {
                        dec_in.extend(reparameterize(latent, &mut rng));
                    }
                    None => {
                        dec_in.extend((0..k).map(|_| T::standard_normal(&mut rng)));
                    }
                }
                let x_norm = infer(&model.decoder_theta, &dec_in).expect("widths checked above");
                let x = model.normalization.denormalize_x(&x_norm);
                out.push([x[0], x[1], x[2]]);
            }
            out
        })
        .collect();

    let draws: Vec<[T; 3]> = chunks.into_iter().flatten().collect();
    Ok(PosteriorSamples {
        draws,
        noise_sigmas: None,
        source: model.variant.source_tag(),
        measurement_id,
    })
}
