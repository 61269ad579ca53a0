//! Floating-point scalar abstraction: every numerical routine in this crate
//! is generic over [`Real`], implemented for `f32` and `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Scalar type the toolkit computes in: `f32` or `f64`.
///
/// Bundles the numeric traits the math needs plus the random draws used
/// throughout (so call sites never name `rand_distr` types directly).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` constant into `Self`. Panics only for values not
    /// representable at all (never happens for the finite constants used here).
    fn cst(value: f64) -> Self {
        Self::from_f64(value).expect("constant not representable in scalar type")
    }

    /// Parses the scalar from its `Display` form (used by the CSV readers;
    /// shortest round-trip formatting makes this bit-exact).
    fn parse_str(text: &str) -> Option<Self>;

    /// One standard-normal draw.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// One uniform draw from the half-open interval [0, 1).
    fn uniform_01<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// One draw from Gamma(shape, rate).
    fn sample_gamma<R: Rng + ?Sized>(rng: &mut R, shape: Self, rate: Self) -> Self;
}

impl Real for f64 {
    fn parse_str(text: &str) -> Option<Self> {
        text.parse().ok()
    }

    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }

    fn uniform_01<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.random()
    }

    fn sample_gamma<R: Rng + ?Sized>(rng: &mut R, shape: Self, rate: Self) -> Self {
        Gamma::new(shape, 1.0 / rate)
            .expect("gamma shape and rate must be positive")
            .sample(rng)
    }
}

impl Real for f32 {
    fn parse_str(text: &str) -> Option<Self> {
        text.parse().ok()
    }

    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }

    fn uniform_01<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.random()
    }

    fn sample_gamma<R: Rng + ?Sized>(rng: &mut R, shape: Self, rate: Self) -> Self {
        Gamma::new(shape, 1.0 / rate)
            .expect("gamma shape and rate must be positive")
            .sample(rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gamma_unit_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 20_000;
        let mean: f64 = (0..n).map(|_| f64::sample_gamma(&mut rng, 1.0, 1.0)).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.03, "Gamma(1,1) mean {mean}");
    }

    #[test]
    fn f32_draws_are_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            assert!(f32::standard_normal(&mut rng).is_finite());
            let u = f32::uniform_01(&mut rng);
            assert!((0.0..1.0).contains(&u));
        }
    }
}
