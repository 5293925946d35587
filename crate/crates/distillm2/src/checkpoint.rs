//! Binary checkpoint format shared by every model in the crate.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   "DLM2"
//! version u32
//! count   u32
//! per tensor:
//!   name_len u32, name UTF-8 bytes
//!   rank u32, dims u64 * rank
//!   payload f32 little-endian, row-major
//! ```
//!
//! Values are truncated to f32 on save and widened back to f64 on load, so
//! save -> load -> save round-trips bit-exactly.

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"DLM2";
pub const VERSION: u32 = 1;

pub fn to_bytes(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let nb = name.as_bytes();
        out.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        out.extend_from_slice(nb);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.values() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| Error::Format(format!("tensor name not UTF-8: {e}")))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            values.push(r.f32()? as f64);
        }
        tensors.push((name, Tensor::new(shape, values)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(tensors)
}

pub fn save(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, to_bytes(tensors)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    from_bytes(&fs::read(path)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated checkpoint: need {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        let v = f32::from_le_bytes(self.take(4)?.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("checkpoint payload value {v}")));
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact_after_f32_truncation() {
        let tensors = vec![
            (
                "w".to_string(),
                Tensor::new(vec![2, 3], vec![0.1, -0.2, 0.3, 1.5e-8, 7.0, -3.25]).unwrap(),
            ),
            ("b".to_string(), Tensor::new(vec![3], vec![0.0, 1.0, -1.0]).unwrap()),
            ("s".to_string(), Tensor::scalar(0.12345678901234567)),
        ];
        let bytes1 = to_bytes(&tensors).unwrap();
        let loaded = from_bytes(&bytes1).unwrap();
        let bytes2 = to_bytes(&loaded).unwrap();
        assert_eq!(bytes1, bytes2, "save -> load -> save must be byte-identical");
        // widened values equal the f32 truncation of the originals
        for ((_, orig), (_, got)) in tensors.iter().zip(&loaded) {
            for (o, g) in orig.values().iter().zip(got.values()) {
                assert_eq!(*o as f32 as f64, *g);
            }
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(from_bytes(b"NOPE"), Err(Error::Format(_))));
        let tensors = vec![("x".to_string(), Tensor::scalar(1.0))];
        let mut bytes = to_bytes(&tensors).unwrap();
        bytes.truncate(bytes.len() - 2);
        assert!(matches!(from_bytes(&bytes), Err(Error::Format(_))));
    }
}
