//! Single-file container of named tensors plus an embedded text section.
//!
//! Layout (little-endian): magic `DFDC`, u32 version, u32 text length,
//! text bytes, u32 tensor count, then per tensor: u32 name length, name,
//! u8 dtype (0 = f32, 1 = f64), u32 rank, u64 dims, raw values.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DFDC";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct BlobFile {
    pub text: String,
    pub tensors: BTreeMap<String, Tensor>,
}

pub fn encode(text: &str, tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let flat = t.flatten_all()?;
        match t.dtype() {
            DType::F64 => {
                out.push(1);
                push_dims(&mut out, t.dims());
                for v in flat.to_vec1::<f64>()? {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            _ => {
                out.push(0);
                push_dims(&mut out, t.dims());
                for v in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

fn push_dims(out: &mut Vec<u8>, dims: &[usize]) {
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::corrupt(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8], path: &Path, device: &Device) -> Result<BlobFile> {
    let mut cur = Cursor { buf, pos: 0, path };
    if cur.take(4)? != MAGIC {
        return Err(Error::corrupt(path, "bad magic"));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::corrupt(path, format!("unsupported version {version}")));
    }
    let tlen = cur.u32()? as usize;
    let text = String::from_utf8(cur.take(tlen)?.to_vec())
        .map_err(|_| Error::corrupt(path, "text section is not UTF-8"))?;
    let count = cur.u32()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let nlen = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(nlen)?.to_vec())
            .map_err(|_| Error::corrupt(path, "tensor name is not UTF-8"))?;
        let dtype = cur.take(1)?[0];
        let rank = cur.u32()? as usize;
        if rank > 8 {
            return Err(Error::corrupt(path, format!("tensor {name} has rank {rank}")));
        }
        let dims: Vec<usize> = (0..rank).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<_>>()?;
        let n: usize = dims.iter().product();
        let t = match dtype {
            0 => {
                let raw = cur.take(n.checked_mul(4).ok_or_else(|| Error::corrupt(path, "size overflow"))?)?;
                let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, dims, device)?
            }
            1 => {
                let raw = cur.take(n.checked_mul(8).ok_or_else(|| Error::corrupt(path, "size overflow"))?)?;
                let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, dims, device)?
            }
            other => return Err(Error::corrupt(path, format!("unknown dtype code {other}"))),
        };
        tensors.insert(name, t);
    }
    if cur.pos != buf.len() {
        return Err(Error::corrupt(path, "trailing bytes after last tensor"));
    }
    Ok(BlobFile { text, tensors })
}

/// Writes `bytes` to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}tmp",
        path.extension().map(|e| format!("{}.", e.to_string_lossy())).unwrap_or_default()
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save(path: impl AsRef<Path>, text: &str, tensors: &[(String, Tensor)]) -> Result<()> {
    write_atomic(path.as_ref(), &encode(text, tensors)?)
}

pub fn load(path: impl AsRef<Path>, device: &Device) -> Result<BlobFile> {
    let path = path.as_ref();
    let buf = std::fs::read(path)?;
    decode(&buf, path, device)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation() {
        let dev = Device::Cpu;
        let a = Tensor::new(&[[1.5f32, -2.0], [0.25, 8.0]], &dev).unwrap();
        let b = Tensor::new(&[1e-300f64, 3.0], &dev).unwrap();
        let bytes = encode("k=v\n", &[("a".into(), a.clone()), ("b".into(), b.clone())]).unwrap();
        let back = decode(&bytes, Path::new("x"), &dev).unwrap();
        assert_eq!(back.text, "k=v\n");
        assert_eq!(back.tensors["a"].to_vec2::<f32>().unwrap(), a.to_vec2::<f32>().unwrap());
        assert_eq!(back.tensors["b"].to_vec1::<f64>().unwrap(), b.to_vec1::<f64>().unwrap());
        for cut in [3, 10, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut], Path::new("x"), &dev), Err(Error::Corruption { .. })));
        }
    }
}
