//! Standard normal CDF/PDF built on `erf`/`erfc`.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Φ(x). Uses `erfc` so both tails keep full relative precision.
#[inline]
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// φ(x).
#[inline]
pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}
