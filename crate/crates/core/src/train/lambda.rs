//! Training-time distribution over the rate-distortion multiplier λ.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{QarvError, Result};

/// Space in which λ is sampled uniformly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaSpacing {
    /// Λ = Δ³ with Δ uniform between the cube roots of the bounds.
    #[default]
    CubeRoot,
    /// ln Λ uniform between the log bounds.
    LogUniform,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaSchedule {
    low: f64,
    high: f64,
    spacing: LambdaSpacing,
}

impl LambdaSchedule {
    pub fn new(low: f64, high: f64, spacing: LambdaSpacing) -> Result<Self> {
        if !(low > 0.0 && low < high && high.is_finite()) {
            return Err(QarvError::InvalidArgument(format!(
                "invalid lambda schedule [{low}, {high}]"
            )));
        }
        Ok(LambdaSchedule { low, high, spacing })
    }

    pub fn low(&self) -> f64 {
        self.low
    }

    pub fn high(&self) -> f64 {
        self.high
    }

    pub fn spacing(&self) -> LambdaSpacing {
        self.spacing
    }

    /// Endpoints of the uniform variable and the map back to λ.
    fn warp(&self, lambda: f64) -> f64 {
        match self.spacing {
            LambdaSpacing::CubeRoot => lambda.cbrt(),
            LambdaSpacing::LogUniform => lambda.ln(),
        }
    }

    /// λ for a point `delta` of the warped interval; the endpoints map to
    /// the bounds exactly.
    pub fn unwarp(&self, delta: f64) -> f64 {
        let (a, b) = (self.warp(self.low), self.warp(self.high));
        if delta <= a {
            return self.low;
        }
        if delta >= b {
            return self.high;
        }
        let v = match self.spacing {
            LambdaSpacing::CubeRoot => delta * delta * delta,
            LambdaSpacing::LogUniform => delta.exp(),
        };
        v.clamp(self.low, self.high)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        let (a, b) = (self.warp(self.low), self.warp(self.high));
        self.unwarp(a + (b - a) * rng.random::<f64>())
    }

    pub fn pdf(&self, lambda: f64) -> f64 {
        if !(lambda >= self.low && lambda <= self.high) {
            return 0.0;
        }
        let (a, b) = (self.warp(self.low), self.warp(self.high));
        let jacobian = match self.spacing {
            LambdaSpacing::CubeRoot => lambda.powf(-2.0 / 3.0) / 3.0,
            LambdaSpacing::LogUniform => 1.0 / lambda,
        };
        jacobian / (b - a)
    }

    pub fn cdf(&self, lambda: f64) -> f64 {
        if lambda <= self.low {
            return 0.0;
        }
        if lambda >= self.high {
            return 1.0;
        }
        let (a, b) = (self.warp(self.low), self.warp(self.high));
        (self.warp(lambda) - a) / (b - a)
    }

    /// M + 1 increasing edges of bins carrying mass 1/M each.
    pub fn bin_edges(&self, bins: usize) -> Result<Vec<f64>> {
        if bins == 0 {
            return Err(QarvError::InvalidArgument("need at least one bin".into()));
        }
        let (a, b) = (self.warp(self.low), self.warp(self.high));
        let m = bins as f64;
        Ok((0..=bins)
            .map(|i| {
                let t = i as f64;
                self.unwarp((m - t) / m * a + t / m * b)
            })
            .collect())
    }
}

pub fn sample_lambda(schedule: &LambdaSchedule, rng: &mut impl Rng) -> f64 {
    schedule.sample(rng)
}

pub fn pdf_lambda(schedule: &LambdaSchedule, lambda: f64) -> f64 {
    schedule.pdf(lambda)
}

pub fn equal_mass_bin_edges(schedule: &LambdaSchedule, bins: usize) -> Result<Vec<f64>> {
    schedule.bin_edges(bins)
}
