//! Trains config variants along one axis with a shared seed and budget.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::error::{QarvError, Result};
use crate::image::RgbImage;
use crate::metrics::rd_sweep;
use crate::model::{BlockConfig, ModelConfig, NormType, Qarv};
use crate::train::{Dataset, TrainConfig, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    BlockConfig,
    AffinePosition,
    NormType,
    LambdaRange,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 4] = [
        AblationAxis::BlockConfig,
        AblationAxis::AffinePosition,
        AblationAxis::NormType,
        AblationAxis::LambdaRange,
    ];
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationAxis::BlockConfig => "block-config",
            AblationAxis::AffinePosition => "affine-position",
            AblationAxis::NormType => "norm-type",
            AblationAxis::LambdaRange => "lambda-range",
        })
    }
}

impl FromStr for AblationAxis {
    type Err = QarvError;

    fn from_str(s: &str) -> Result<Self> {
        AblationAxis::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| QarvError::InvalidArgument(format!("unknown ablation axis '{s}'")))
    }
}

/// λ ranges compared on the lambda-range axis; all contain [64, 512].
pub const LAMBDA_RANGES: [(f64, f64); 3] = [(16.0, 2048.0), (32.0, 1024.0), (64.0, 512.0)];

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub model: ModelConfig,
}

pub fn variants(axis: AblationAxis, base: &ModelConfig) -> Vec<Variant> {
    let with = |name: String, edit: &dyn Fn(&mut ModelConfig)| {
        let mut model = base.clone();
        edit(&mut model);
        Variant { name, model }
    };
    match axis {
        AblationAxis::BlockConfig => BlockConfig::ALL
            .iter()
            .map(|&b| with(format!("{b:?}"), &|m| m.block_config = b))
            .collect(),
        AblationAxis::AffinePosition => (0..=4u8)
            .map(|p| with(p.to_string(), &|m| m.affine_position = p))
            .collect(),
        AblationAxis::NormType => [
            ("layer", NormType::Layer),
            ("group", NormType::Group),
            ("instance", NormType::Instance),
        ]
        .into_iter()
        .map(|(name, n)| with(name.into(), &|m| m.norm = n))
        .collect(),
        AblationAxis::LambdaRange => LAMBDA_RANGES
            .iter()
            .map(|&(lo, hi)| {
                with(format!("{lo}-{hi}"), &|m| {
                    m.lambda_low = lo;
                    m.lambda_high = hi;
                })
            })
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub variant: String,
    /// Mean training loss over the last tenth of iterations.
    pub final_loss: f64,
    pub mean_bpp: f64,
    pub mean_psnr: f64,
    /// No training loss or evaluation metric was NaN or infinite.
    pub finite: bool,
}

impl AblationRow {
    pub const CSV_HEADER: &'static str = "axis,variant,final_loss,mean_bpp,mean_psnr,finite";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.axis, self.variant, self.final_loss, self.mean_bpp, self.mean_psnr, self.finite
        )
    }
}

/// Trains every variant from the same seed, then evaluates each with its
/// trained weights at the in-range subset of `lambdas`.
pub fn run_ablation(
    axis: AblationAxis,
    base: &ModelConfig,
    train: &TrainConfig,
    data: &Dataset,
    eval: &[(String, RgbImage)],
    lambdas: &[f64],
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for v in variants(axis, base) {
        let model = Qarv::new(&v.model, train.seed)?;
        let mut trainer = Trainer::new(model, train.clone())?;
        let log = trainer.run(data, None, |_| {})?;
        let tail = &log[log.len() - (log.len() / 10).max(1)..];
        let final_loss = tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64;
        let in_range: Vec<f64> = lambdas
            .iter()
            .copied()
            .filter(|&l| v.model.lambda_in_range(l))
            .collect();
        if in_range.is_empty() {
            return Err(QarvError::InvalidArgument(format!(
                "no evaluation lambda inside [{}, {}]",
                v.model.lambda_low, v.model.lambda_high
            )));
        }
        let (curve, _) = rd_sweep(trainer.model(), eval, &in_range)?;
        let n = curve.len() as f64;
        let mean_bpp = curve.points().iter().map(|p| p.bpp).sum::<f64>() / n;
        let mean_psnr = curve.points().iter().map(|p| p.psnr).sum::<f64>() / n;
        let row = AblationRow {
            axis,
            variant: v.name,
            final_loss,
            mean_bpp,
            mean_psnr,
            finite: log.iter().all(|r| r.loss.is_finite())
                && mean_bpp.is_finite()
                && mean_psnr.is_finite(),
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut text = format!("{}\n", AblationRow::CSV_HEADER);
    for r in rows {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(text.as_bytes()))
        .map_err(|e| QarvError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::synthetic_textures;

    #[test]
    fn axis_names_round_trip() {
        for a in AblationAxis::ALL {
            assert_eq!(a.to_string().parse::<AblationAxis>().unwrap(), a);
        }
        assert!("depth".parse::<AblationAxis>().is_err());
    }

    #[test]
    fn variant_counts() {
        let base = ModelConfig::tiny();
        let count = |a| variants(a, &base).len();
        assert_eq!(count(AblationAxis::BlockConfig), 3);
        assert_eq!(count(AblationAxis::AffinePosition), 5);
        assert_eq!(count(AblationAxis::NormType), 3);
        assert_eq!(count(AblationAxis::LambdaRange), 3);
        for a in AblationAxis::ALL {
            for v in variants(a, &base) {
                v.model.validate().unwrap();
            }
        }
    }

    #[test]
    fn short_run_emits_rows() {
        let data = Dataset::new(synthetic_textures(4, 16, 0)).unwrap();
        let eval = vec![("e".to_string(), synthetic_textures(1, 16, 9).remove(0))];
        let train = TrainConfig {
            batch_size: 1,
            iterations: 2,
            crop: 16,
            ..TrainConfig::default()
        };
        let rows = run_ablation(
            AblationAxis::BlockConfig,
            &ModelConfig::tiny(),
            &train,
            &data,
            &eval,
            &[64.0],
            |_| {},
        )
        .unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.finite));
        assert!(rows[0].csv_row().starts_with("block-config,A,"));
    }
}
