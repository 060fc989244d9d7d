//! PSNR, bits per pixel, Bjøntegaard delta rate, and R-D sweeps.

pub mod sweep;

use nalgebra::{DMatrix, DVector};

use crate::error::{QarvError, Result};
use crate::nn::{Real, Tensor};

pub use sweep::{curve_from_rows, rd_sweep, read_sweep_csv, write_sweep_csv, SweepRow, MEAN_ID};

/// −10·log10(mse); +∞ when mse is 0.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub fn mse<T: Real>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(QarvError::shape(
            "psnr",
            format!("{:?} vs {:?}", x.shape(), x_hat.shape()),
        ));
    }
    let sse: f64 = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(a, b)| (a.f64() - b.f64()).powi(2))
        .sum();
    Ok(sse / x.numel().max(1) as f64)
}

/// PSNR of images with values in [0, 1], over all channels.
pub fn psnr<T: Real>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, x_hat)?))
}

/// 8·bytes / (width·height).
pub fn bpp(file_bytes: usize, width: usize, height: usize) -> f64 {
    8.0 * file_bytes as f64 / (width * height) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct RdPoint {
    pub bpp: f64,
    pub psnr: f64,
    pub lambda: f64,
    pub image_id: String,
}

/// Points sorted by increasing bpp.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RdCurve {
    points: Vec<RdPoint>,
}

impl RdCurve {
    pub fn new(mut points: Vec<RdPoint>) -> Self {
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        RdCurve { points }
    }

    /// Curve from (bpp, psnr) pairs.
    pub fn from_pairs(pairs: &[(f64, f64)]) -> Self {
        Self::new(
            pairs
                .iter()
                .map(|&(bpp, psnr)| RdPoint {
                    bpp,
                    psnr,
                    lambda: f64::NAN,
                    image_id: String::new(),
                })
                .collect(),
        )
    }

    pub fn points(&self) -> &[RdPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_strictly_increasing(&self) -> bool {
        self.points.windows(2).all(|w| w[0].bpp < w[1].bpp)
    }
}

/// Least-squares cubic of log10(bpp) against normalized PSNR, integrated
/// over [lo, hi].
struct LogRateFit {
    coef: [f64; 4],
    center: f64,
    scale: f64,
}

impl LogRateFit {
    fn new(curve: &RdCurve, center: f64, scale: f64) -> Result<Self> {
        let pts: Vec<&RdPoint> = curve
            .points
            .iter()
            .filter(|p| p.psnr.is_finite() && p.bpp > 0.0)
            .collect();
        if pts.len() < 4 {
            return Err(QarvError::InvalidArgument(format!(
                "BD-rate needs at least 4 finite points, got {}",
                pts.len()
            )));
        }
        let a = DMatrix::from_fn(pts.len(), 4, |r, c| {
            ((pts[r].psnr - center) / scale).powi(c as i32)
        });
        let b = DVector::from_iterator(pts.len(), pts.iter().map(|p| p.bpp.log10()));
        let sol = a
            .svd(true, true)
            .solve(&b, 1e-12)
            .map_err(|e| QarvError::InvalidArgument(format!("cubic fit failed: {e}")))?;
        Ok(LogRateFit {
            coef: [sol[0], sol[1], sol[2], sol[3]],
            center,
            scale,
        })
    }

    fn antiderivative(&self, psnr: f64) -> f64 {
        let s = (psnr - self.center) / self.scale;
        let c = &self.coef;
        self.scale
            * (c[0] * s + c[1] * s.powi(2) / 2.0 + c[2] * s.powi(3) / 3.0 + c[3] * s.powi(4) / 4.0)
    }

    fn integral(&self, lo: f64, hi: f64) -> f64 {
        self.antiderivative(hi) - self.antiderivative(lo)
    }
}

/// Average rate difference of `test` relative to `anchor`, in percent,
/// over the overlapping PSNR interval.
pub fn bd_rate(anchor: &RdCurve, test: &RdCurve) -> Result<f64> {
    let range = |c: &RdCurve| {
        let finite = c.points.iter().map(|p| p.psnr).filter(|p| p.is_finite());
        let lo = finite.clone().fold(f64::INFINITY, f64::min);
        let hi = finite.fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    };
    let (alo, ahi) = range(anchor);
    let (tlo, thi) = range(test);
    let (lo, hi) = (alo.max(tlo), ahi.min(thi));
    if !(hi > lo) {
        return Err(QarvError::InvalidArgument(format!(
            "PSNR ranges do not overlap: [{alo}, {ahi}] vs [{tlo}, {thi}]"
        )));
    }
    // Shared normalization keeps both fits equally conditioned.
    let center = 0.5 * (lo + hi);
    let scale = 0.5 * (hi - lo);
    let fa = LogRateFit::new(anchor, center, scale)?;
    let ft = LogRateFit::new(test, center, scale)?;
    let avg = (ft.integral(lo, hi) - fa.integral(lo, hi)) / (hi - lo);
    Ok((10f64.powf(avg) - 1.0) * 100.0)
}
