//! Training images, random crops, and a seeded synthetic texture set.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{QarvError, Result};
use crate::image::RgbImage;
use crate::nn::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct Dataset {
    images: Vec<RgbImage>,
}

impl Dataset {
    pub fn new(images: Vec<RgbImage>) -> Result<Self> {
        if images.is_empty() {
            return Err(QarvError::InvalidArgument("dataset is empty".into()));
        }
        Ok(Dataset { images })
    }

    /// Every file in `dir` whose name matches `pattern`, in name order.
    pub fn from_dir(dir: &Path, pattern: &str) -> Result<Self> {
        let images = list_images(dir, pattern)?
            .iter()
            .map(|p| RgbImage::read(p))
            .collect::<Result<Vec<_>>>()?;
        Self::new(images)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[RgbImage] {
        &self.images
    }

    /// Smallest (width, height) over the set.
    pub fn min_dims(&self) -> (usize, usize) {
        let w = self.images.iter().map(|i| i.width).min().unwrap_or(0);
        let h = self.images.iter().map(|i| i.height).min().unwrap_or(0);
        (w, h)
    }

    /// [batch, 3, crop, crop] random crops, each mirrored horizontally with
    /// probability `flip_prob`. The flip draw happens regardless of the
    /// probability, so crop positions do not depend on it.
    pub fn batch<T: Real>(
        &self,
        rng: &mut impl Rng,
        batch: usize,
        crop: usize,
        flip_prob: f64,
    ) -> Result<Tensor<T>> {
        let (mw, mh) = self.min_dims();
        if crop == 0 || crop > mw || crop > mh {
            return Err(QarvError::InvalidArgument(format!(
                "crop {crop} does not fit the smallest image {mw}x{mh}"
            )));
        }
        let plane = crop * crop;
        let mut data = vec![T::ZERO; batch * 3 * plane];
        for item in data.chunks_mut(3 * plane) {
            let img = &self.images[rng.random_range(0..self.images.len())];
            let y0 = rng.random_range(0..=img.height - crop);
            let x0 = rng.random_range(0..=img.width - crop);
            let flip = rng.random::<f64>() < flip_prob;
            for y in 0..crop {
                for x in 0..crop {
                    let sx = if flip { x0 + crop - 1 - x } else { x0 + x };
                    let src = 3 * ((y0 + y) * img.width + sx);
                    for c in 0..3 {
                        item[c * plane + y * crop + x] = T::of(img.pixels[src + c] as f64 / 255.0);
                    }
                }
            }
        }
        Tensor::new(vec![batch, 3, crop, crop], data)
    }
}

/// Seeded synthetic textures: a base colour, two coloured sinusoidal
/// gratings, a soft disc, and light noise.
pub fn synthetic_textures(count: usize, size: usize, seed: u64) -> Vec<RgbImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| texture(&mut rng, size)).collect()
}

fn texture(rng: &mut impl Rng, size: usize) -> RgbImage {
    let mut color = |amp: f64| -> [f64; 3] { std::array::from_fn(|_| rng.random_range(-amp..amp)) };
    let base = color(0.35).map(|v| v + 0.5);
    let grating_colors = [color(0.25), color(0.25)];
    let disc_color = color(0.3);
    let gratings: Vec<(f64, f64, f64, [f64; 3])> = grating_colors
        .into_iter()
        .map(|c| {
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let period = rng.random_range(4.0..16.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (theta, period, phase, c)
        })
        .collect();
    let s = size as f64;
    let (cx, cy) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
    let radius = rng.random_range(0.12 * s..0.4 * s);

    let mut pixels = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64, y as f64);
            let mut v = base;
            for (theta, period, phase, c) in &gratings {
                let t =
                    (fx * theta.cos() + fy * theta.sin()) * std::f64::consts::TAU / period + phase;
                let wave = t.sin();
                for k in 0..3 {
                    v[k] += c[k] * wave;
                }
            }
            let d = ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt();
            let inside = 1.0 / (1.0 + ((d - radius) / 1.5).exp());
            for k in 0..3 {
                v[k] += disc_color[k] * inside + rng.random_range(-0.02..0.02);
                pixels.push((v[k].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    RgbImage::new(size, size, pixels).expect("shape")
}

/// Paths in `dir` whose file name matches `pattern`, sorted; errors when none match.
pub fn list_images(dir: &Path, pattern: &str) -> Result<Vec<PathBuf>> {
    let pat = glob::Pattern::new(pattern)
        .map_err(|e| QarvError::InvalidArgument(format!("bad pattern '{pattern}': {e}")))?;
    let entries = std::fs::read_dir(dir).map_err(|e| QarvError::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| pat.matches(n))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(QarvError::InvalidArgument(format!(
            "no images matching '{pattern}' in {}",
            dir.display()
        )));
    }
    Ok(paths)
}

/// Matching images keyed by file stem.
pub fn read_named(dir: &Path, pattern: &str) -> Result<Vec<(String, RgbImage)>> {
    list_images(dir, pattern)?
        .into_iter()
        .map(|p| {
            let id = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((id, RgbImage::read(&p)?))
        })
        .collect()
}

/// Writes images as `img_00000.ppm`, `img_00001.ppm`, ... into `dir`.
pub fn write_images(dir: &Path, images: &[RgbImage]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| QarvError::io(dir, e))?;
    for (i, img) in images.iter().enumerate() {
        img.write_ppm(&dir.join(format!("img_{i:05}.ppm")))?;
    }
    Ok(())
}
