//! Uniform posterior and Gaussian-convolved-with-uniform prior.

use super::normal::{std_normal_cdf, std_normal_pdf};

pub const SIGMA_MIN: f64 = 1e-2;
pub const SIGMA_MAX: f64 = 1e2;
/// Floor applied to the prior density before taking logs.
pub const DENSITY_FLOOR: f64 = 1e-9;

/// Unit-width uniform posterior centred at `mu`.
#[derive(Clone, Copy, Debug)]
pub struct UniformPosterior {
    pub mu: f64,
}

impl UniformPosterior {
    pub fn density(&self, z: f64) -> f64 {
        if (z - self.mu).abs() <= 0.5 {
            1.0
        } else {
            0.0
        }
    }

    /// Sample by additive noise, `u` in [-1/2, 1/2).
    pub fn sample_with(&self, u: f64) -> f64 {
        self.mu + u
    }
}

/// N(mean, std²) convolved with U(-1/2, 1/2).
#[derive(Clone, Copy, Debug)]
pub struct BoxedGaussian {
    pub mean: f64,
    pub std: f64,
}

impl BoxedGaussian {
    pub fn new(mean: f64, std: f64) -> Self {
        BoxedGaussian {
            mean,
            std: clamp_sigma(std),
        }
    }

    pub fn density(&self, z: f64) -> f64 {
        prior_density(z, self.mean, self.std)
    }
}

#[inline]
pub fn clamp_sigma(sigma: f64) -> f64 {
    sigma.clamp(SIGMA_MIN, SIGMA_MAX)
}

/// Φ((z−μ̂+½)/σ̂) − Φ((z−μ̂−½)/σ̂), without the floor. Evaluated on the
/// lower tail (the density is symmetric in z−μ̂) to avoid cancellation.
#[inline]
fn raw_density(z: f64, mean: f64, sigma: f64) -> f64 {
    let v = -(z - mean).abs();
    std_normal_cdf((v + 0.5) / sigma) - std_normal_cdf((v - 0.5) / sigma)
}

/// Prior density, floored at [`DENSITY_FLOOR`].
#[inline]
pub fn prior_density(z: f64, mean: f64, sigma: f64) -> f64 {
    raw_density(z, mean, sigma).max(DENSITY_FLOOR)
}

/// −ln p(z) in nats.
#[inline]
pub fn rate_nats(z: f64, mean: f64, sigma: f64) -> f64 {
    -prior_density(z, mean, sigma).ln()
}

/// Rate together with its partial derivatives w.r.t. (z, mean, sigma).
/// Derivatives are zero where the density floor is active.
#[inline]
pub fn rate_nats_with_grad(z: f64, mean: f64, sigma: f64) -> (f64, [f64; 3]) {
    let d = z - mean;
    let v = -d.abs();
    let upper = (v + 0.5) / sigma;
    let lower = (v - 0.5) / sigma;
    let p = std_normal_cdf(upper) - std_normal_cdf(lower);
    if p < DENSITY_FLOOR {
        return (-DENSITY_FLOOR.ln(), [0.0; 3]);
    }
    let pu = std_normal_pdf(upper);
    let pl = std_normal_pdf(lower);
    // dp/dv, and dv/dd = -sign(d); at d = 0 the two pdf terms cancel.
    let dp_dv = (pu - pl) / sigma;
    let dp_dd = if d >= 0.0 { -dp_dv } else { dp_dv };
    let dp_dsigma = (-upper * pu + lower * pl) / sigma;
    let inv = -1.0 / p;
    (-p.ln(), [inv * dp_dd, -inv * dp_dd, inv * dp_dsigma])
}
