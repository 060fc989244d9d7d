//! Self-describing binary checkpoint.
//!
//! Layout (little-endian): magic `QARVCKPT`, version u16, config length u32
//! + UTF-8 JSON model configuration, tensor count u32, then per tensor:
//! name length u16 + UTF-8 name, dtype tag u8, rank u8, extents u32 each,
//! raw values.

use std::io::{Read, Write};
use std::path::Path;

use super::tensor::{DType, Real, Tensor};
use crate::error::{QarvError, Result};

pub const MAGIC: &[u8; 8] = b"QARVCKPT";
pub const VERSION: u16 = 1;

/// Suffix under which EMA shadows are stored.
pub const EMA_SUFFIX: &str = "/ema";

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Entry {
    pub fn from_tensor<T: Real>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        Entry {
            name: name.into(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            values: t.data().iter().map(|v| v.f64()).collect(),
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_parts(
            self.shape.clone(),
            self.values.iter().map(|&v| T::of(v)).collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub config_json: String,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_json.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            let name = e.name.as_bytes();
            let name_len = u16::try_from(name.len())
                .map_err(|_| QarvError::Checkpoint(format!("name too long: {}", e.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(e.dtype as u8);
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &e.values {
                match e.dtype {
                    DType::F32 => (v as f32).to_le_bytes_vec(&mut out),
                    DType::F64 => v.to_le_bytes_vec(&mut out),
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(QarvError::Checkpoint("bad magic".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(QarvError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let clen = r.u32()? as usize;
        let config_json = String::from_utf8(r.take(clen)?.to_vec())
            .map_err(|_| QarvError::Checkpoint("config is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| QarvError::Checkpoint("name is not UTF-8".into()))?;
            let dtype = DType::from_tag(r.u8()?)
                .ok_or_else(|| QarvError::Checkpoint(format!("{name}: unknown dtype")))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let values = match dtype {
                DType::F32 => r
                    .take(numel * 4)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_slice(c) as f64)
                    .collect(),
                DType::F64 => r
                    .take(numel * 8)?
                    .chunks_exact(8)
                    .map(f64::from_le_slice)
                    .collect(),
            };
            entries.push(Entry {
                name,
                dtype,
                shape,
                values,
            });
        }
        if r.pos != bytes.len() {
            return Err(QarvError::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint {
            config_json,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        // Write to a sibling temp file first so an interrupted save never
        // clobbers the previous checkpoint.
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| QarvError::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| QarvError::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| QarvError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| QarvError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| QarvError::Checkpoint("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
