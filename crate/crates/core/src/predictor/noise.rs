use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

/// Standard normal quantile at 0.999.
const Z_999: f64 = 3.090_232_306_167_813;

/// Multiplicative execution-time noise with mean exactly 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma: f64,
}

/// Ratio of the default noise's 99.9th percentile to its mean.
pub const NOISE_P999_RATIO: f64 = 1.15;

impl NoiseModel {
    pub const NONE: NoiseModel = NoiseModel { sigma: 0.0 };

    /// Lognormal whose 99.9th percentile sits at `ratio` times the mean.
    pub fn with_p999_ratio(ratio: f64) -> Self {
        assert!(ratio > 1.0);
        // exp(sigma z - sigma^2 / 2) = ratio, smaller root.
        let sigma = Z_999 - (Z_999 * Z_999 - 2.0 * ratio.ln()).sqrt();
        Self { sigma }
    }

    /// Default simulation noise: p99.9 at 1.15x the mean.
    pub fn standard() -> Self {
        Self::with_p999_ratio(NOISE_P999_RATIO)
    }

    pub fn is_none(&self) -> bool {
        self.sigma == 0.0
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.is_none() {
            return 1.0;
        }
        LogNormal::new(-self.sigma * self.sigma / 2.0, self.sigma)
            .expect("sigma is finite and positive")
            .sample(rng)
    }

    /// Applies a sampled multiplier to a duration, keeping it at least 1 ns.
    pub fn perturb<R: Rng + ?Sized>(&self, ns: u64, rng: &mut R) -> u64 {
        if self.is_none() {
            return ns;
        }
        ((ns as f64 * self.sample(rng)).round() as u64).max(1)
    }
}
