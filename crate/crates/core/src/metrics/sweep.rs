use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{bpp, psnr, RdCurve, RdPoint};
use crate::codec::{compress, decompress, DecodeMode};
use crate::error::{QarvError, Result};
use crate::image::RgbImage;
use crate::model::Qarv;

/// Image id of the per-λ dataset average.
pub const MEAN_ID: &str = "__mean__";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub image_id: String,
    pub lambda: f64,
    pub bpp: f64,
    pub psnr: f64,
}

/// Compresses every image at every λ and measures the decoded 8-bit result.
/// Rows are ordered by λ then image, each λ followed by its mean row.
/// The returned curve holds the mean rows.
pub fn rd_sweep(
    model: &Qarv<f32>,
    images: &[(String, RgbImage)],
    lambdas: &[f64],
) -> Result<(RdCurve, Vec<SweepRow>)> {
    if images.is_empty() {
        return Err(QarvError::InvalidArgument(
            "sweep needs at least one image".into(),
        ));
    }
    let mut rows = Vec::with_capacity(lambdas.len() * (images.len() + 1));
    let mut means = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let per_image: Vec<SweepRow> = images
            .par_iter()
            .map(|(id, img)| {
                let x = img.to_tensor::<f32>();
                let enc = compress(model, &x, lambda)?;
                let bytes = enc.container.to_bytes()?;
                let dec = decompress(model, &enc.container, DecodeMode::Full)?;
                let out = RgbImage::from_tensor(&dec.image)?.to_tensor::<f64>();
                Ok(SweepRow {
                    image_id: id.clone(),
                    lambda,
                    bpp: bpp(bytes.len(), img.width, img.height),
                    psnr: psnr(&img.to_tensor::<f64>(), &out)?,
                })
            })
            .collect::<Result<_>>()?;
        let n = per_image.len() as f64;
        let mean = SweepRow {
            image_id: MEAN_ID.into(),
            lambda,
            bpp: per_image.iter().map(|r| r.bpp).sum::<f64>() / n,
            psnr: per_image.iter().map(|r| r.psnr).sum::<f64>() / n,
        };
        means.push(RdPoint {
            bpp: mean.bpp,
            psnr: mean.psnr,
            lambda,
            image_id: MEAN_ID.into(),
        });
        rows.extend(per_image);
        rows.push(mean);
    }
    Ok((RdCurve::new(means), rows))
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| QarvError::io(path, e))
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_error(path, e)))
        .collect()
}

/// Curve of the mean rows, or of all rows when there are none.
pub fn curve_from_rows(rows: &[SweepRow]) -> RdCurve {
    let has_mean = rows.iter().any(|r| r.image_id == MEAN_ID);
    RdCurve::new(
        rows.iter()
            .filter(|r| !has_mean || r.image_id == MEAN_ID)
            .map(|r| RdPoint {
                bpp: r.bpp,
                psnr: r.psnr,
                lambda: r.lambda,
                image_id: r.image_id.clone(),
            })
            .collect(),
    )
}

fn csv_error(path: &Path, e: csv::Error) -> QarvError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => QarvError::io(path, io),
        other => QarvError::InvalidArgument(format!("{}: {other:?}", path.display())),
    }
}
