//! Binary PPM (P6) and PGM (P5) images with 8-bit samples.

use std::path::Path;

use crate::error::{QarvError, Result};
use crate::nn::{Real, Tensor};

/// Interleaved 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(QarvError::Image(format!(
                "{} bytes for a {width}x{height} RGB image",
                pixels.len()
            )));
        }
        Ok(RgbImage {
            width,
            height,
            pixels,
        })
    }

    /// [1, 3, H, W] planar tensor with values in [0, 1].
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let (w, h) = (self.width, self.height);
        let mut data = vec![T::ZERO; 3 * w * h];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * w * h + i] = T::of(px[c] as f64 / 255.0);
            }
        }
        Tensor::new(vec![1, 3, h, w], data).expect("shape")
    }

    /// Rounds a [1, 3, H, W] tensor (clamped to [0, 1]) to 8 bits.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        if n != 1 || c != 3 {
            return Err(QarvError::shape("image", format!("{:?}", t.shape())));
        }
        let src = t.data();
        let mut pixels = vec![0u8; 3 * w * h];
        for i in 0..w * h {
            for ch in 0..3 {
                let v = src[ch * w * h + i].f64().clamp(0.0, 1.0);
                pixels[3 * i + ch] = (v * 255.0).round() as u8;
            }
        }
        RgbImage::new(w, h, pixels)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut p = Header { bytes, pos: 0 };
        let magic = p.token()?;
        let channels = match magic.as_str() {
            "P6" => 3,
            "P5" => 1,
            other => {
                return Err(QarvError::Image(format!(
                    "unsupported magic '{other}', expected P6 or P5"
                )))
            }
        };
        let width = p.number()?;
        let height = p.number()?;
        let maxval = p.number()?;
        if maxval != 255 {
            return Err(QarvError::Image(format!(
                "maxval {maxval}, only 255 is supported"
            )));
        }
        if width == 0 || height == 0 {
            return Err(QarvError::Image("zero image dimension".into()));
        }
        // Exactly one whitespace byte separates the header from the raster.
        match bytes.get(p.pos) {
            Some(b) if b.is_ascii_whitespace() => p.pos += 1,
            _ => return Err(QarvError::Image("missing separator before raster".into())),
        }
        let need = width * height * channels;
        let raster = bytes
            .get(p.pos..p.pos + need)
            .ok_or_else(|| QarvError::Image(format!("raster truncated: need {need} bytes")))?;
        let pixels = if channels == 3 {
            raster.to_vec()
        } else {
            raster.iter().flat_map(|&g| [g, g, g]).collect()
        };
        RgbImage::new(width, height, pixels)
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| QarvError::io(path, e))?;
        Self::decode(&bytes).map_err(|e| QarvError::Image(format!("{}: {e}", path.display())))
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_ppm()).map_err(|e| QarvError::io(path, e))
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<String> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self
            .bytes
            .get(self.pos)
            .is_some_and(|b| !b.is_ascii_whitespace())
        {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(QarvError::Image("truncated header".into()));
        }
        Ok(String::from_utf8_lossy(&self.bytes[start..self.pos]).into_owned())
    }

    fn number(&mut self) -> Result<usize> {
        let t = self.token()?;
        t.parse()
            .map_err(|_| QarvError::Image(format!("bad header field '{t}'")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pgm_expands_to_gray_rgb() {
        let mut bytes = b"P5\n# comment\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[7, 200]);
        let img = RgbImage::decode(&bytes).unwrap();
        assert_eq!(img.pixels, [7, 7, 7, 200, 200, 200]);
    }

    #[test]
    fn rejects_other_formats() {
        let err = RgbImage::decode(b"P3\n1 1\n255\n0 0 0").unwrap_err();
        assert!(err.to_string().contains("P3"));
        assert!(RgbImage::decode(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
        assert!(RgbImage::decode(b"P6\n2 2\n255\n\0\0\0").is_err());
        assert!(RgbImage::decode(b"").is_err());
    }

    #[test]
    fn tensor_conversion_is_lossless_at_8_bits() {
        let img = RgbImage::new(3, 2, (0..18).map(|v| (v * 14) as u8).collect()).unwrap();
        let t = img.to_tensor::<f32>();
        assert_eq!(t.shape(), [1, 3, 2, 3]);
        assert_eq!(t.data()[6], (14.0f64 / 255.0) as f32);
        assert_eq!(RgbImage::from_tensor(&t).unwrap(), img);
    }

    proptest! {
        #[test]
        fn ppm_round_trip(w in 1usize..20, h in 1usize..20, seed: u64) {
            let pixels = (0..w * h * 3).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 7) as u8).collect();
            let img = RgbImage::new(w, h, pixels).unwrap();
            prop_assert_eq!(RgbImage::decode(&img.encode_ppm()).unwrap(), img);
        }
    }
}
