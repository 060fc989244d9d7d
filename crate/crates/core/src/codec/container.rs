//! Bitstream container.
//!
//! Layout, all integers little-endian:
//!
//! | field          | size      |
//! |----------------|-----------|
//! | magic `QARV`   | 4         |
//! | version        | u16       |
//! | config hash    | 8         |
//! | λ              | f32       |
//! | width, height  | u32 each  |
//! | stream count N | u8        |
//! | per stream     | u32 length + payload |

use crate::error::{QarvError, Result};

pub const MAGIC: &[u8; 4] = b"QARV";
pub const VERSION: u16 = 1;
/// Bytes before the per-stream records.
pub const FIXED_HEADER: usize = 4 + 2 + 8 + 4 + 4 + 4 + 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CompressedImage {
    pub config_hash: [u8; 8],
    pub lambda: f32,
    pub width: u32,
    pub height: u32,
    pub streams: Vec<Vec<u8>>,
}

impl CompressedImage {
    /// Fixed header plus the length prefixes of every stream.
    pub fn header_len(&self) -> usize {
        FIXED_HEADER + 4 * self.streams.len()
    }

    pub fn payload_len(&self) -> usize {
        self.streams.iter().map(Vec::len).sum()
    }

    pub fn total_len(&self) -> usize {
        self.header_len() + self.payload_len()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.streams.len() > u8::MAX as usize {
            return Err(QarvError::Container(format!(
                "{} streams exceed 255",
                self.streams.len()
            )));
        }
        let mut out = Vec::with_capacity(self.total_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&self.lambda.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.push(self.streams.len() as u8);
        for s in &self.streams {
            let len = u32::try_from(s.len())
                .map_err(|_| QarvError::Container("stream longer than 4 GiB".into()))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(s);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(QarvError::Container("bad magic".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(QarvError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let config_hash = r.array()?;
        let lambda = f32::from_le_bytes(r.array()?);
        let width = u32::from_le_bytes(r.array()?);
        let height = u32::from_le_bytes(r.array()?);
        let count = r.take(1)?[0] as usize;
        let mut streams = Vec::with_capacity(count);
        for _ in 0..count {
            let len = u32::from_le_bytes(r.array()?) as usize;
            streams.push(r.take(len)?.to_vec());
        }
        if r.pos != bytes.len() {
            return Err(QarvError::Container(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        if width == 0 || height == 0 {
            return Err(QarvError::Container("zero image dimension".into()));
        }
        Ok(CompressedImage {
            config_hash,
            lambda,
            width,
            height,
            streams,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| QarvError::Container("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> CompressedImage {
        CompressedImage {
            config_hash: *b"abcdefgh",
            lambda: 512.0,
            width: 48,
            height: 32,
            streams: vec![vec![1, 2, 3], vec![], vec![9; 10]],
        }
    }

    #[test]
    fn byte_layout() {
        let c = sample();
        let b = c.to_bytes().unwrap();
        assert_eq!(b.len(), c.total_len());
        assert_eq!(c.header_len(), 27 + 12);
        assert_eq!(&b[..4], b"QARV");
        assert_eq!(&b[4..6], &1u16.to_le_bytes());
        assert_eq!(&b[14..18], &512f32.to_le_bytes());
        assert_eq!(b[26], 3);
    }

    #[test]
    fn malformed_inputs() {
        let b = sample().to_bytes().unwrap();
        assert!(matches!(
            CompressedImage::from_bytes(&b[..b.len() - 1]),
            Err(QarvError::Container(_))
        ));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(CompressedImage::from_bytes(&bad).is_err());
        let mut v2 = b.clone();
        v2[4] = 2;
        assert!(matches!(
            CompressedImage::from_bytes(&v2),
            Err(QarvError::Version { found: 2, .. })
        ));
        let mut long = b;
        long.push(0);
        assert!(CompressedImage::from_bytes(&long).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(
            hash: [u8; 8],
            lambda_bits: u32,
            w in 1u32..5000,
            h in 1u32..5000,
            streams in proptest::collection::vec(proptest::collection::vec(any::<u8>(), 0..40), 0..6),
        ) {
            let c = CompressedImage { config_hash: hash, lambda: f32::from_bits(lambda_bits), width: w, height: h, streams };
            let back = CompressedImage::from_bytes(&c.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back.lambda.to_bits(), lambda_bits);
            prop_assert_eq!(back.streams, c.streams);
            prop_assert_eq!((back.width, back.height, back.config_hash), (w, h, hash));
        }
    }
}
