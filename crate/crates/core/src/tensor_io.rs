//! Binary tensor container shared by backbone feature files, anomaly-map
//! sidecars and checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  b"ZSTC"
//! version    u32      1
//! n_meta     u32
//!   key      u32 length + UTF-8 bytes
//!   value    u32 length + UTF-8 bytes
//! n_tensors  u32
//!   name     u32 length + UTF-8 bytes
//!   dtype    u8       1 = f32, 2 = f64
//!   ndim     u32
//!   dims     u64 * ndim
//!   data     row-major little-endian floats
//! ```
//!
//! Externally produced feature files use dtype f32. Checkpoints use f64 so a
//! save/load cycle is lossless.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ZSTC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub dtype: DType,
    pub data: ArrayD<f64>,
}

/// Named tensors plus string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    pub meta: BTreeMap<String, String>,
    pub tensors: IndexMap<String, StoredTensor>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.meta.insert(key.into(), value.into());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn insert(&mut self, name: impl Into<String>, dtype: DType, data: ArrayD<f64>) {
        self.tensors
            .insert(name.into(), StoredTensor { dtype, data });
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.tensors
            .get(name)
            .map(|t| &t.data)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.push(t.dtype.code());
            out.extend_from_slice(&(t.data.ndim() as u32).to_le_bytes());
            for &d in t.data.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match t.dtype {
                DType::F32 => {
                    for &x in t.data.iter() {
                        out.extend_from_slice(&(x as f32).to_le_bytes());
                    }
                }
                DType::F64 => {
                    for &x in t.data.iter() {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader {
            buf: bytes,
            pos: 0,
            origin,
        };
        if r.take(4)? != MAGIC {
            return Err(r.err("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(&format!("unsupported version {version}")));
        }
        let mut container = TensorContainer::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            container.meta.insert(k, v);
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let code = r.take(1)?[0];
            let dtype = DType::from_code(code).ok_or_else(|| r.err("unknown dtype"))?;
            let ndim = r.u32()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u64()? as usize);
            }
            let count: usize = dims.iter().product();
            let mut values = Vec::with_capacity(count);
            match dtype {
                DType::F32 => {
                    let raw = r.take(count * 4)?;
                    values.extend(
                        raw.chunks_exact(4)
                            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64),
                    );
                }
                DType::F64 => {
                    let raw = r.take(count * 8)?;
                    values.extend(raw.chunks_exact(8).map(|c| {
                        f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]])
                    }));
                }
            }
            let data = ArrayD::from_shape_vec(IxDyn(&dims), values)
                .map_err(|e| r.err(&e.to_string()))?;
            container.insert(name, dtype, data);
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes"));
        }
        Ok(container)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, reason: &str) -> Error {
        Error::Container {
            path: self.origin.to_path_buf(),
            reason: format!("{reason} (offset {})", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.err("unexpected end of data"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.err("invalid UTF-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array3};

    #[test]
    fn f64_tensors_roundtrip_exactly() {
        let mut c = TensorContainer::new();
        c.set_meta("config_hash", "abc");
        c.insert(
            "w",
            DType::F64,
            arr2(&[[1.0 / 3.0, -2.5], [1e-300, 7.0]]).into_dyn(),
        );
        c.insert("empty", DType::F64, Array3::<f64>::zeros((0, 2, 3)).into_dyn());
        let back = TensorContainer::from_bytes(&c.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn f32_tensors_lose_only_precision() {
        let mut c = TensorContainer::new();
        c.insert("x", DType::F32, arr2(&[[0.1, 0.2]]).into_dyn());
        let back = TensorContainer::from_bytes(&c.to_bytes(), Path::new("mem")).unwrap();
        let x = back.get("x").unwrap();
        assert!((x[[0, 0]] - 0.1).abs() < 1e-7);
        assert_eq!(back.tensors["x"].dtype, DType::F32);
    }

    #[test]
    fn rejects_truncated_and_bad_magic() {
        let mut c = TensorContainer::new();
        c.insert("x", DType::F32, arr2(&[[0.1, 0.2]]).into_dyn());
        let bytes = c.to_bytes();
        assert!(TensorContainer::from_bytes(&bytes[..bytes.len() - 1], Path::new("m")).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(TensorContainer::from_bytes(&bad, Path::new("m")).is_err());
    }
}
