//! Named-tensor checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DSRT"              4 bytes magic
//! version             u32 (currently 1)
//! entry count         u32
//! per entry:
//!   name length       u32
//!   name              UTF-8 bytes
//!   rank              u32
//!   extents           rank × u64
//!   dtype             u8 (0 = f32, 1 = f64)
//!   values            product(extents) × dtype size, row-major
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"DSRT";
pub const VERSION: u32 = 1;

pub fn encode<T: Scalar>(entries: &BTreeMap<String, Tensor<T>>) -> Vec<u8> {
    encode_with_offsets(entries).0
}

/// Encodes and also reports the byte offset at which each entry starts.
pub fn encode_with_offsets<T: Scalar>(entries: &BTreeMap<String, Tensor<T>>) -> (Vec<u8>, BTreeMap<String, u64>) {
    let mut offsets = BTreeMap::new();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        offsets.insert(name.clone(), out.len() as u64);
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        out.push(T::DTYPE.tag());
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    (out, offsets)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                reason: format!("truncated {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Decodes a checkpoint, converting stored values to `T`.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<BTreeMap<String, Tensor<T>>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "bad magic".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("entry count")?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Format {
                offset: at,
                reason: "name is not UTF-8".into(),
            })?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let at = r.pos;
        let tag = r.take(1, "dtype")?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format {
            offset: at,
            reason: format!("unknown dtype tag {tag}"),
        })?;
        let n: usize = shape.iter().product();
        let at = r.pos;
        let raw = r.take(n * dtype.size(), "values")?;
        let data: Vec<T> = match dtype {
            DType::F32 => raw.chunks(4).map(|c| T::from_f64(f32::read_le(c) as f64)).collect(),
            DType::F64 => raw.chunks(8).map(|c| T::from_f64(f64::read_le(c))).collect(),
        };
        let t = Tensor::new(shape, data).map_err(|_| Error::Format {
            offset: at,
            reason: format!("non-finite values in {name}"),
        })?;
        if out.insert(name.clone(), t).is_some() {
            return Err(Error::Format {
                offset: at,
                reason: format!("duplicate entry {name}"),
            });
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos,
            reason: "trailing bytes".into(),
        });
    }
    Ok(out)
}

pub fn save<T: Scalar>(path: impl AsRef<Path>, entries: &BTreeMap<String, Tensor<T>>) -> Result<()> {
    fs::write(path, encode(entries))?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<BTreeMap<String, Tensor<T>>> {
    decode(&fs::read(path)?)
}
