//! The CBNT tensor container.
//!
//! Little-endian layout:
//!
//! ```text
//! magic   b"CBNT"
//! version u32 = 1
//! count   u32
//! count times:
//!     name_len u32, name (UTF-8)
//!     dtype    u8   (0 = f32, 1 = f64)
//!     rank     u32, rank x extent u32
//!     payload  row-major, 4 or 8 bytes per element
//! ```
//!
//! Entries are written in name order, so equal maps produce equal bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Shape, Tensor, MAX_RANK};

pub const MAGIC: &[u8; 4] = b"CBNT";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 12;

pub type TensorMap = BTreeMap<String, Tensor>;

pub fn encode(tensors: &TensorMap) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(tensors.len(), "tensor count")?.to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&to_u32(name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(match t.dtype() {
            DType::F32 => 0,
            DType::F64 => 1,
        });
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&to_u32(d, "extent")?.to_le_bytes());
        }
        match t.dtype() {
            DType::F32 => {
                for &v in t.data() {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            DType::F64 => {
                for &v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Input(format!("{what} {v} does not fit in u32")))
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
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn fail(&self, at: usize, message: String) -> Error {
        Error::Format {
            offset: at,
            message,
        }
    }
}

pub fn decode(bytes: &[u8]) -> Result<TensorMap> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.fail(0, "bad magic, expected \"CBNT\"".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.fail(4, format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut out = TensorMap::new();
    for _ in 0..count {
        let name_at = r.pos;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| r.fail(name_at + 4, "name is not UTF-8".into()))?
            .to_string();
        let dtype_at = r.pos;
        let dtype = match r.take(1, "dtype")?[0] {
            0 => DType::F32,
            1 => DType::F64,
            other => return Err(r.fail(dtype_at, format!("unknown dtype byte {other}"))),
        };
        let rank_at = r.pos;
        let rank = r.u32("rank")? as usize;
        if rank > MAX_RANK {
            return Err(r.fail(rank_at, format!("rank {rank} exceeds {MAX_RANK}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("extent")? as usize);
        }
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        let width = dtype.size_in_bytes();
        let payload = r.take(
            n.checked_mul(width).ok_or_else(|| r.fail(r.pos, "payload size overflows".into()))?,
            "payload",
        )?;
        let data: Vec<f64> = match dtype {
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect(),
            DType::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect(),
        };
        if out.contains_key(&name) {
            return Err(r.fail(name_at, format!("duplicate tensor name {name:?}")));
        }
        out.insert(name, Tensor::from_parts(dtype, shape, data));
    }
    if r.pos != bytes.len() {
        return Err(r.fail(r.pos, "trailing bytes after last tensor".into()));
    }
    Ok(out)
}

pub fn write(path: impl AsRef<Path>, tensors: &TensorMap) -> Result<()> {
    fs::write(path, encode(tensors)?)?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<TensorMap> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_map_is_header_only() {
        let bytes = encode(&TensorMap::new()).unwrap();
        assert_eq!(bytes.len(), 12);
        assert_eq!(&bytes[..4], b"CBNT");
        assert!(decode(&bytes).unwrap().is_empty());
    }

    #[test]
    fn single_f64_round_trip() {
        let mut m = TensorMap::new();
        m.insert(
            "X".into(),
            Tensor::from_f64([2, 2], vec![1.0, -2.5, 3.125, f64::MIN_POSITIVE]).unwrap(),
        );
        let bytes = encode(&m).unwrap();
        // header + name_len + "X" + dtype + rank + 2 extents + 4 * 8 payload
        assert_eq!(bytes.len(), 12 + 4 + 1 + 1 + 4 + 8 + 32);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn bad_dtype_byte() {
        let mut m = TensorMap::new();
        m.insert("a".into(), Tensor::zeros(DType::F32, [1]));
        let mut bytes = encode(&m).unwrap();
        let dtype_at = 12 + 4 + 1;
        bytes[dtype_at] = 7;
        match decode(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, dtype_at),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_version_and_truncation() {
        let good = encode(&TensorMap::new()).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 4, .. })));
        assert!(matches!(decode(&good[..10]), Err(Error::Format { offset: 8, .. })));

        let mut m = TensorMap::new();
        m.insert("w".into(), Tensor::ones(DType::F64, [3]));
        let full = encode(&m).unwrap();
        match decode(&full[..full.len() - 1]) {
            Err(Error::Format { message, .. }) => assert!(message.contains("payload")),
            other => panic!("{other:?}"),
        }
    }
}
