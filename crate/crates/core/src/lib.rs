//! Simulation-based Bayesian inference for PET kinetic parameters.
//!
//! The crate simulates frame-integrated time-activity curves from the
//! simplified reference tissue model, samples reference posteriors with
//! random-walk Metropolis-Hastings, trains three conditional-VAE variants
//! (vanilla, dual-encoder, dual-decoder) for amortized posterior sampling,
//! and quantifies their agreement with MCMC.
//!
//! All numerics are generic over the scalar type ([`scalar::Real`], i.e.
//! `f32` or `f64`); the aliases at the crate root fix the `f64`
//! instantiation the command-line pipeline uses.

pub mod cvae;
pub mod evaluation;
pub mod io;
pub mod kinetics;
pub mod mcmc;
pub mod neural;
pub mod priors;
pub mod scalar;
pub mod seed;

pub use scalar::Real;

/// f64 instantiations used by the shipped pipeline.
pub type KineticParams = kinetics::KineticParams<f64>;
pub type FrameSchedule = kinetics::FrameSchedule<f64>;
pub type UniformGrid = kinetics::UniformGrid<f64>;
pub type ReferenceTac = kinetics::ReferenceTac<f64>;
pub type Measurement = kinetics::Measurement<f64>;
pub type NoiseModel = kinetics::NoiseModel<f64>;
pub type ForwardModel = kinetics::ForwardModel<f64>;
pub type PriorConfig = priors::PriorConfig<f64>;
pub type Dataset = priors::Dataset<f64>;
pub type McmcConfig = mcmc::McmcConfig<f64>;
pub type PosteriorSamples = mcmc::PosteriorSamples<f64>;
pub type GewekeReport = mcmc::GewekeReport<f64>;
pub type CvaeModel = cvae::CvaeModel<f64>;
pub type TrainConfig = cvae::TrainConfig<f64>;
pub type EvalReport = evaluation::EvalReport<f64>;
