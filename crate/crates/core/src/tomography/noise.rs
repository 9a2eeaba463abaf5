//! Measurement models turning noiseless line integrals into data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use super::TomoError;
use crate::real::Real;

/// Attenuation per unit line integral for MNIST-scaled images (pixel values
/// in `[0, 1]`, unit pixels). The central vertical ray of an MNIST digit
/// integrates to about 8.5 on average, and `exp(-0.19 * 8.5) ~= 0.2`, so a
/// typical full-intensity digit transmits about 20% along its central ray.
pub const MNIST_ATTENUATION: f64 = 0.19;

/// Count floor used by [`PoissonModel::log_transform`] so zero counts stay
/// finite.
pub const COUNT_FLOOR: f64 = 0.5;

/// Photon counting: each bin is `Poisson(photons * exp(-mu * Ax))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoissonModel {
    pub photons_per_line: f64,
    pub attenuation: f64,
}

impl PoissonModel {
    pub fn new(photons_per_line: f64, attenuation: f64) -> Result<Self, TomoError> {
        if !(photons_per_line > 0.0 && photons_per_line.is_finite()) {
            return Err(TomoError::Noise(format!("photons_per_line must be positive, got {photons_per_line}")));
        }
        if !(attenuation > 0.0 && attenuation.is_finite()) {
            return Err(TomoError::Noise(format!("attenuation must be positive, got {attenuation}")));
        }
        Ok(PoissonModel { photons_per_line, attenuation })
    }

    /// 60 photons per line with [`MNIST_ATTENUATION`].
    pub fn mnist() -> Self {
        PoissonModel { photons_per_line: 60.0, attenuation: MNIST_ATTENUATION }
    }

    pub fn expected_counts(&self, line_integral: f64) -> f64 {
        self.photons_per_line * (-self.attenuation * line_integral).exp()
    }

    /// Draws counts for noiseless line integrals.
    pub fn sample<T: Real>(&self, line_integrals: &[T], rng: &mut ChaCha8Rng) -> Result<Vec<T>, TomoError> {
        line_integrals
            .iter()
            .map(|&v| {
                let mean = self.expected_counts(v.as_f64());
                if !mean.is_finite() || mean < 0.0 {
                    return Err(TomoError::Noise(format!("invalid Poisson mean {mean}")));
                }
                if mean == 0.0 {
                    return Ok(T::zero());
                }
                let d = Poisson::new(mean).map_err(|e| TomoError::Noise(e.to_string()))?;
                Ok(T::of(d.sample(rng)))
            })
            .collect()
    }

    pub fn sample_seeded<T: Real>(&self, line_integrals: &[T], seed: u64) -> Result<Vec<T>, TomoError> {
        self.sample(line_integrals, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// `-ln(max(counts, 0.5) / photons) / mu`: approximate line integrals.
    pub fn log_transform<T: Real>(&self, counts: &[T]) -> Vec<T> {
        counts
            .iter()
            .map(|&c| T::of(-(c.as_f64().max(COUNT_FLOOR) / self.photons_per_line).ln() / self.attenuation))
            .collect()
    }
}

/// Additive white Gaussian noise with standard deviation
/// `level * mean(|Ax|)` over the sinogram.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianModel {
    pub level: f64,
}

impl GaussianModel {
    pub fn new(level: f64) -> Result<Self, TomoError> {
        if !(level >= 0.0 && level.is_finite()) {
            return Err(TomoError::Noise(format!("noise level must be non-negative, got {level}")));
        }
        Ok(GaussianModel { level })
    }

    pub fn sigma<T: Real>(&self, clean: &[T]) -> f64 {
        if clean.is_empty() {
            return 0.0;
        }
        self.level * clean.iter().map(|v| v.as_f64().abs()).sum::<f64>() / clean.len() as f64
    }

    pub fn sample<T: Real>(&self, clean: &[T], rng: &mut ChaCha8Rng) -> Vec<T> {
        let sigma = self.sigma(clean);
        if sigma == 0.0 {
            return clean.to_vec();
        }
        clean
            .iter()
            .map(|&v| {
                let e: f64 = StandardNormal.sample(rng);
                T::of(v.as_f64() + sigma * e)
            })
            .collect()
    }
}
