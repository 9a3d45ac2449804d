//! Keyed array container (`.lfds`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "LFDS0001"
//! count    u32
//! count x {
//!   name_len u32, name utf-8
//!   dtype    u8     (1 = f64, 2 = i64)
//!   ndim     u32, dims u64 x ndim
//!   payload  8 bytes x numel, row-major
//! }
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LFDS0001";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F64 = 1,
    I64 = 2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub dtype: DType,
    pub values: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    arrays: IndexMap<String, Array>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, dtype: DType, values: Tensor) -> Result<()> {
        let name = name.into();
        if dtype == DType::I64 {
            if let Some(v) = values.data().iter().find(|v| v.fract() != 0.0 || !v.is_finite()) {
                return Err(Error::Format(format!("array `{name}` stored as i64 holds {v}")));
            }
        }
        self.arrays.insert(name, Array { dtype, values });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.arrays.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|a| &a.values)
            .ok_or_else(|| Error::MissingArray(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, arr) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(arr.dtype as u8);
            let shape = arr.values.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in arr.values.data() {
                match arr.dtype {
                    DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
                    DType::I64 => out.extend_from_slice(&(v as i64).to_le_bytes()),
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad magic, expected LFDS0001".into()));
        }
        let count = r.u32()?;
        let mut arrays = IndexMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("array name is not utf-8".into()))?
                .to_string();
            let dtype = match r.take(1)?[0] {
                1 => DType::F64,
                2 => DType::I64,
                other => return Err(Error::Format(format!("unknown dtype tag {other} for `{name}`"))),
            };
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let raw: [u8; 8] = r.take(8)?.try_into().unwrap();
                data.push(match dtype {
                    DType::F64 => f64::from_le_bytes(raw),
                    DType::I64 => i64::from_le_bytes(raw) as f64,
                });
            }
            arrays.insert(
                name,
                Array {
                    dtype,
                    values: Tensor::new(shape, data)?,
                },
            );
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Writes to a sibling temp file, then renames over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
