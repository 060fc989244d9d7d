//! Compression and decompression with a trained model.

pub mod container;

use std::fmt;
use std::str::FromStr;

use crate::error::{QarvError, Result};
use crate::model::{LatentSite, LatentSource, Qarv};
use crate::nn::{Tape, Tensor, Var};
use crate::prob::pmf::{pmf_for_sigma, QuantizedPmf, N_MAX, N_MIN};
use crate::prob::range_coder::{RangeDecoder, RangeEncoder};

pub use container::CompressedImage;

/// Which latents a decoder reads from the bitstream. Indices are 1-based;
/// skipped latents take their prior mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Full,
    /// Latents 1..=i.
    Progressive(usize),
    /// Every latent except i.
    LeaveOneOut(usize),
    /// Latent i only.
    Disjoint(usize),
}

impl DecodeMode {
    fn check(self, n: usize) -> Result<()> {
        let i = match self {
            DecodeMode::Full => return Ok(()),
            DecodeMode::Progressive(i) | DecodeMode::LeaveOneOut(i) | DecodeMode::Disjoint(i) => i,
        };
        if i == 0 || i > n {
            return Err(QarvError::InvalidArgument(format!(
                "decode mode {self} needs 1 <= i <= {n}"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeMode::Full => write!(f, "full"),
            DecodeMode::Progressive(i) => write!(f, "progressive:{i}"),
            DecodeMode::LeaveOneOut(i) => write!(f, "loo:{i}"),
            DecodeMode::Disjoint(i) => write!(f, "disjoint:{i}"),
        }
    }
}

impl FromStr for DecodeMode {
    type Err = QarvError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(DecodeMode::Full);
        }
        let bad = || QarvError::InvalidArgument(format!("unknown decode mode '{s}'"));
        let (kind, index) = s.split_once(':').ok_or_else(bad)?;
        let i: usize = index.parse().map_err(|_| bad())?;
        match kind {
            "progressive" => Ok(DecodeMode::Progressive(i)),
            "loo" => Ok(DecodeMode::LeaveOneOut(i)),
            "disjoint" => Ok(DecodeMode::Disjoint(i)),
            _ => Err(bad()),
        }
    }
}

/// n = clamp(round(μ − μ̂)), z = μ̂ + n.
pub fn quantize_latent(mu: f32, mu_hat: f32) -> (f32, i32) {
    let n = (mu as f64 - mu_hat as f64)
        .round()
        .clamp(N_MIN as f64, N_MAX as f64) as i32;
    ((mu_hat as f64 + n as f64) as f32, n)
}

/// Encoder output plus side-channel values for verification.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub container: CompressedImage,
    /// Quantized z per latent.
    pub latents: Vec<Tensor<f32>>,
    pub symbols: Vec<Vec<i32>>,
    pub posterior_means: Vec<Tensor<f32>>,
    pub prior_means: Vec<Tensor<f32>>,
    /// Σ −log2 P(n) per stream under the integer tables.
    pub ideal_bits: Vec<f64>,
    /// Encoder-side reconstruction, cropped and clamped to [0, 1].
    pub reconstruction: Tensor<f32>,
}

#[derive(Clone, Debug)]
pub struct Decoded {
    pub image: Tensor<f32>,
    /// z per latent as used by the final pass.
    pub latents: Vec<Tensor<f32>>,
}

/// Replicates the last row/column so both dims become multiples of `d`.
pub fn pad_replicate(x: &Tensor<f32>, d: usize) -> Result<Tensor<f32>> {
    let (n, c, h, w) = x.dims4()?;
    let (hp, wp) = (h.div_ceil(d) * d, w.div_ceil(d) * d);
    let src = x.data();
    let mut out = Vec::with_capacity(n * c * hp * wp);
    for plane in src.chunks(h * w) {
        for y in 0..hp {
            let row = &plane[y.min(h - 1) * w..][..w];
            out.extend_from_slice(row);
            out.extend(std::iter::repeat_n(row[w - 1], wp - w));
        }
    }
    Tensor::new(vec![n, c, hp, wp], out)
}

/// Top-left `h × w` window, clamped to [0, 1].
fn crop_clamp(x: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    let (n, c, hp, wp) = x.dims4()?;
    let mut out = Vec::with_capacity(n * c * h * w);
    for plane in x.data().chunks(hp * wp) {
        for y in 0..h {
            out.extend(plane[y * wp..][..w].iter().map(|v| v.clamp(0.0, 1.0)));
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

fn pmfs(sigma: &Tensor<f32>) -> Vec<QuantizedPmf> {
    sigma
        .data()
        .iter()
        .map(|&s| pmf_for_sigma(s as f64))
        .collect()
}

fn check_lambda(model: &Qarv<f32>, lambda: f64) -> Result<()> {
    let cfg = model.config();
    if !cfg.lambda_in_range(lambda) {
        return Err(QarvError::LambdaOutOfRange {
            lambda,
            low: cfg.lambda_low,
            high: cfg.lambda_high,
        });
    }
    Ok(())
}

struct Encoder {
    features: Vec<Var>,
    streams: Vec<Vec<u8>>,
    out: Vec<(Tensor<f32>, Vec<i32>, Tensor<f32>, Tensor<f32>, f64)>,
}

impl LatentSource<f32> for Encoder {
    fn sample(&mut self, tape: &mut Tape<'_, f32>, site: &LatentSite<'_>) -> Result<Var> {
        let lb = site.block;
        let mu = lb.posterior_from_features(tape, self.features[lb.stage], site.feat, site.e)?;
        tape.check_finite(mu, &format!("posterior mean of latent block {}", lb.index))?;
        let (mu_v, mean_v, sigma_v) = (
            tape.value(mu).clone(),
            tape.value(site.prior.mean).clone(),
            tape.value(site.prior.sigma),
        );
        let tables = pmfs(sigma_v);
        let (z, symbols): (Vec<f32>, Vec<i32>) = mu_v
            .data()
            .iter()
            .zip(mean_v.data())
            .map(|(&m, &mh)| quantize_latent(m, mh))
            .unzip();
        let mut enc = RangeEncoder::new();
        let mut ideal = 0.0;
        for (&s, pmf) in symbols.iter().zip(&tables) {
            enc.encode(s, pmf)?;
            ideal += pmf.bits(s);
        }
        self.streams.push(enc.finish());
        let z = Tensor::new(mu_v.shape().to_vec(), z)?;
        let zv = tape.constant(z.clone());
        self.out.push((z, symbols, mu_v, mean_v, ideal));
        Ok(zv)
    }
}

/// Compresses a [1, 3, H, W] image with values in [0, 1].
pub fn compress(model: &Qarv<f32>, image: &Tensor<f32>, lambda: f64) -> Result<Encoded> {
    let (n, c, h, w) = image.dims4()?;
    if n != 1 || c != 3 {
        return Err(QarvError::shape("compress", format!("{:?}", image.shape())));
    }
    check_lambda(model, lambda)?;
    let header_lambda = lambda as f32;
    check_lambda(model, header_lambda as f64)?;
    let x = pad_replicate(image, model.config().max_downsample)?;
    let (_, _, hp, wp) = x.dims4()?;

    let mut tape = Tape::inference(&model.store);
    let e = model.net.embed(&mut tape, &[header_lambda as f64])?;
    let xv = tape.constant(x);
    let features = model.net.encode_features(&mut tape, xv, e)?;
    let mut enc = Encoder {
        features,
        streams: Vec::new(),
        out: Vec::new(),
    };
    let x_hat = model.net.top_down(&mut tape, e, 1, hp, wp, &mut enc)?;
    let reconstruction = crop_clamp(tape.value(x_hat), h, w)?;

    let container = CompressedImage {
        config_hash: model.config().hash(),
        lambda: header_lambda,
        width: w as u32,
        height: h as u32,
        streams: enc.streams,
    };
    let mut encoded = Encoded {
        container,
        latents: Vec::new(),
        symbols: Vec::new(),
        posterior_means: Vec::new(),
        prior_means: Vec::new(),
        ideal_bits: Vec::new(),
        reconstruction,
    };
    for (z, s, mu, mean, bits) in enc.out {
        encoded.latents.push(z);
        encoded.symbols.push(s);
        encoded.posterior_means.push(mu);
        encoded.prior_means.push(mean);
        encoded.ideal_bits.push(bits);
    }
    Ok(encoded)
}

/// Reads latent i from stream i when `read[i]`, else uses the prior mean.
struct StreamReader<'a> {
    streams: &'a [Vec<u8>],
    read: Vec<bool>,
    latents: Vec<Tensor<f32>>,
}

impl LatentSource<f32> for StreamReader<'_> {
    fn sample(&mut self, tape: &mut Tape<'_, f32>, site: &LatentSite<'_>) -> Result<Var> {
        let i = site.block.index;
        if !self.read[i] {
            self.latents.push(tape.value(site.prior.mean).clone());
            return Ok(site.prior.mean);
        }
        let mean = tape.value(site.prior.mean);
        let tables = pmfs(tape.value(site.prior.sigma));
        let mut dec = RangeDecoder::new(&self.streams[i])?;
        let z = tables
            .iter()
            .zip(mean.data())
            .map(|(pmf, &mh)| Ok((mh as f64 + dec.decode(pmf)? as f64) as f32))
            .collect::<Result<Vec<f32>>>()?;
        let z = Tensor::new(mean.shape().to_vec(), z)?;
        self.latents.push(z.clone());
        Ok(tape.constant(z))
    }
}

/// Known z where given, prior mean elsewhere.
struct Substitute {
    given: Vec<Option<Tensor<f32>>>,
    latents: Vec<Tensor<f32>>,
}

impl LatentSource<f32> for Substitute {
    fn sample(&mut self, tape: &mut Tape<'_, f32>, site: &LatentSite<'_>) -> Result<Var> {
        match &self.given[site.block.index] {
            Some(z) => {
                self.latents.push(z.clone());
                Ok(tape.constant(z.clone()))
            }
            None => {
                self.latents.push(tape.value(site.prior.mean).clone());
                Ok(site.prior.mean)
            }
        }
    }
}

pub fn decompress(
    model: &Qarv<f32>,
    container: &CompressedImage,
    mode: DecodeMode,
) -> Result<Decoded> {
    if container.config_hash != model.config().hash() {
        return Err(QarvError::ModelMismatch);
    }
    let n = model.config().num_latents();
    if container.streams.len() != n {
        return Err(QarvError::Container(format!(
            "{} streams for a model with {n} latents",
            container.streams.len()
        )));
    }
    mode.check(n)?;
    let lambda = container.lambda as f64;
    check_lambda(model, lambda)?;
    let (h, w) = (container.height as usize, container.width as usize);
    let d = model.config().max_downsample;
    let (hp, wp) = (h.div_ceil(d) * d, w.div_ceil(d) * d);

    let run = |source: &mut dyn LatentSource<f32>| -> Result<Tensor<f32>> {
        let mut tape = Tape::inference(&model.store);
        let e = model.net.embed(&mut tape, &[lambda])?;
        let x_hat = model.net.top_down(&mut tape, e, 1, hp, wp, source)?;
        crop_clamp(tape.value(x_hat), h, w)
    };
    let ancestral = |read: Vec<bool>| -> Result<(Tensor<f32>, Vec<Tensor<f32>>)> {
        let mut reader = StreamReader {
            streams: &container.streams,
            read,
            latents: Vec::new(),
        };
        let image = run(&mut reader)?;
        Ok((image, reader.latents))
    };

    let (image, latents) = match mode {
        DecodeMode::Full => ancestral(vec![true; n])?,
        DecodeMode::Progressive(i) => ancestral((0..n).map(|j| j < i).collect())?,
        DecodeMode::LeaveOneOut(i) | DecodeMode::Disjoint(i) => {
            // Later streams were coded under priors conditioned on the true
            // earlier latents, so recover those first, then rerun the
            // top-down pass with the skipped latents replaced.
            let last = if matches!(mode, DecodeMode::Disjoint(_)) {
                i
            } else {
                n
            };
            let (_, truth) = ancestral((0..n).map(|j| j < last).collect())?;
            let keep = |j: usize| match mode {
                DecodeMode::LeaveOneOut(_) => j + 1 != i,
                _ => j + 1 == i,
            };
            let mut sub = Substitute {
                given: truth
                    .into_iter()
                    .enumerate()
                    .map(|(j, z)| keep(j).then_some(z))
                    .collect(),
                latents: Vec::new(),
            };
            let image = run(&mut sub)?;
            (image, sub.latents)
        }
    };
    Ok(Decoded { image, latents })
}

/// Per-latent share of the payload.
#[derive(Clone, Debug, PartialEq)]
pub struct RateBreakdown {
    pub bits: Vec<f64>,
    pub fractions: Vec<f64>,
    pub header_bits: f64,
}

pub fn rate_breakdown(container: &CompressedImage) -> RateBreakdown {
    let bits: Vec<f64> = container
        .streams
        .iter()
        .map(|s| 8.0 * s.len() as f64)
        .collect();
    let total: f64 = bits.iter().sum();
    let fractions = if total > 0.0 {
        bits.iter().map(|b| b / total).collect()
    } else {
        vec![1.0 / bits.len().max(1) as f64; bits.len()]
    };
    RateBreakdown {
        bits,
        fractions,
        header_bits: 8.0 * container.header_len() as f64,
    }
}
