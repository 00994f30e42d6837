//! The CFST tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    "CFST"
//! version  u8 = 1
//! count    u32
//! entries  count x {
//!     name_len u16, name bytes (UTF-8),
//!     dtype    u8 (2 = f64),
//!     ndim     u8, dims ndim x u64,
//!     payload  product(dims) x f64, row-major
//! }
//! ```
//!
//! Entries are written in ascending name order, so equal maps produce equal
//! bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CFST";
pub const VERSION: u8 = 1;
pub const DTYPE_F64: u8 = 2;

pub type TensorMap = BTreeMap<String, Tensor>;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic bytes {found:?}, expected \"CFST\"")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),
    #[error("entry `{entry}`: unsupported dtype {dtype}")]
    UnsupportedDtype { entry: String, dtype: u8 },
    #[error("truncated file while reading {what}")]
    Truncated { what: String },
    #[error("entry name is not valid UTF-8")]
    InvalidName,
    #[error("duplicate entry `{0}`")]
    DuplicateEntry(String),
    #[error("entry `{entry}`: invalid shape {dims:?}")]
    InvalidShape { entry: String, dims: Vec<u64> },
    #[error("{0} trailing bytes after the last entry")]
    TrailingBytes(usize),
    #[error("entry name `{0}` is longer than 65535 bytes")]
    NameTooLong(String),
    #[error("entry `{0}` has more than 255 dimensions")]
    TooManyDims(String),
}

pub fn encode(map: &TensorMap) -> Result<Vec<u8>, FormatError> {
    let payload: usize = map.values().map(|t| t.numel() * 8 + 8 * t.shape().len()).sum();
    let mut out = Vec::with_capacity(9 + payload + map.len() * 16);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(map.len() as u32).to_le_bytes());
    for (name, tensor) in map {
        let name_len = u16::try_from(name.len()).map_err(|_| FormatError::NameTooLong(name.clone()))?;
        let ndim = u8::try_from(tensor.shape().len()).map_err(|_| FormatError::TooManyDims(name.clone()))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.push(ndim);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: impl FnOnce() -> String) -> Result<&'a [u8], FormatError> {
        if self.buf.len() - self.pos < n {
            return Err(FormatError::Truncated { what: what() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: impl FnOnce() -> String) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: impl FnOnce() -> String) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: impl FnOnce() -> String) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: impl FnOnce() -> String) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<TensorMap, FormatError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, || "magic".into()).map_err(|_| FormatError::BadMagic {
        found: bytes[..bytes.len().min(4)].to_vec(),
    })?;
    if magic != MAGIC {
        return Err(FormatError::BadMagic {
            found: magic.to_vec(),
        });
    }
    let version = r.u8(|| "version".into())?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let count = r.u32(|| "entry count".into())?;
    let mut map = TensorMap::new();
    for i in 0..count {
        let name_len = r.u16(|| format!("name length of entry {i}"))? as usize;
        let raw = r.take(name_len, || format!("name of entry {i}"))?;
        let name = std::str::from_utf8(raw).map_err(|_| FormatError::InvalidName)?.to_owned();
        let dtype = r.u8(|| format!("dtype of entry `{name}`"))?;
        if dtype != DTYPE_F64 {
            return Err(FormatError::UnsupportedDtype { entry: name, dtype });
        }
        let ndim = r.u8(|| format!("rank of entry `{name}`"))? as usize;
        let dims = (0..ndim)
            .map(|_| r.u64(|| format!("shape of entry `{name}`")))
            .collect::<Result<Vec<u64>, _>>()?;
        let numel = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .filter(|_| ndim > 0 && dims.iter().all(|&d| d > 0))
            .and_then(|n| usize::try_from(n).ok())
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| FormatError::InvalidShape {
                entry: name.clone(),
                dims: dims.clone(),
            })?;
        let payload = r.take(numel * 8, || format!("payload of entry `{name}`"))?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let shape = dims.iter().map(|&d| d as usize).collect();
        let tensor = Tensor::new(shape, data).map_err(|_| FormatError::InvalidShape {
            entry: name.clone(),
            dims: dims.clone(),
        })?;
        if map.insert(name.clone(), tensor).is_some() {
            return Err(FormatError::DuplicateEntry(name));
        }
    }
    if r.pos != bytes.len() {
        return Err(FormatError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(map)
}

pub fn write_tensor_file(path: impl AsRef<Path>, map: &TensorMap) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(map)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<TensorMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes)?)
}

/// Stores UTF-8 text as a 1-D tensor of byte values, for header entries such
/// as an embedded JSON config.
pub fn text_to_tensor(text: &str) -> Result<Tensor> {
    Tensor::vector(text.bytes().map(f64::from).collect())
}

pub fn tensor_to_text(t: &Tensor) -> Result<String> {
    let bytes = t
        .data()
        .iter()
        .map(|&v| {
            (v.fract() == 0.0 && (0.0..=255.0).contains(&v))
                .then_some(v as u8)
                .ok_or_else(|| Error::Data(format!("{v} is not a byte value")))
        })
        .collect::<Result<Vec<u8>>>()?;
    String::from_utf8(bytes).map_err(|_| Error::Data("text entry is not UTF-8".into()))
}
