//! `TCR3` tensor container: a flat list of named little-endian arrays.

use std::io::{Read, Write};
use std::path::Path;

use reftrack_core::scalar::Scalar;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"TCR3";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    U8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::U8 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            2 => Ok(DType::U8),
            c => Err(CliError::Format(format!("unknown dtype code {c}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<u64>,
    /// Raw little-endian payload.
    pub payload: Vec<u8>,
}

impl Entry {
    pub fn numel(&self) -> usize {
        self.dims.iter().product::<u64>() as usize
    }

    pub fn from_scalars<T: Scalar>(name: impl Into<String>, dims: &[usize], values: &[T]) -> Result<Self> {
        let name = name.into();
        let numel: usize = dims.iter().product();
        if numel != values.len() {
            return Err(CliError::Format(format!("entry {name}: dims {dims:?} hold {numel} values, got {}", values.len())));
        }
        Ok(Self {
            name,
            dtype: DType::from_code(T::DTYPE_CODE)?,
            dims: dims.iter().map(|&d| d as u64).collect(),
            payload: T::to_le_bytes_vec(values),
        })
    }

    pub fn from_bytes(name: impl Into<String>, bytes: Vec<u8>) -> Self {
        Self {
            name: name.into(),
            dtype: DType::U8,
            dims: vec![bytes.len() as u64],
            payload: bytes,
        }
    }

    /// Decodes a float entry, converting between `f32` and `f64` if needed.
    pub fn to_scalars<T: Scalar>(&self) -> Result<Vec<T>> {
        match self.dtype {
            DType::F32 => Ok(<f32 as Scalar>::from_le_bytes_slice(&self.payload).into_iter().map(|v| T::of(v as f64)).collect()),
            DType::F64 => Ok(<f64 as Scalar>::from_le_bytes_slice(&self.payload).into_iter().map(T::of).collect()),
            DType::U8 => Err(CliError::Format(format!("entry {} holds bytes, not floats", self.name))),
        }
    }

    pub fn dims_usize(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorContainer {
    pub entries: Vec<Entry>,
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an entry; names must be unique.
    pub fn push(&mut self, entry: Entry) -> Result<()> {
        if self.get(&entry.name).is_some() {
            return Err(CliError::Format(format!("duplicate entry name {}", entry.name)));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Entry> {
        self.get(name).ok_or_else(|| CliError::Format(format!("missing entry {name}")))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            if e.payload.len() != e.numel() * e.dtype.size() {
                return Err(CliError::Format(format!("entry {}: payload does not match dims", e.name)));
            }
            let name = e.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[e.dtype.code(), e.dims.len() as u8])?;
            for d in &e.dims {
                w.write_all(&d.to_le_bytes())?;
            }
            w.write_all(&e.payload)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        if &read_exact::<4>(r)? != MAGIC {
            return Err(CliError::Format("not a TCR3 container".into()));
        }
        let version = u16::from_le_bytes(read_exact(r)?);
        if version != VERSION {
            return Err(CliError::Format(format!("unsupported container version {version}")));
        }
        let count = u32::from_le_bytes(read_exact(r)?);
        let mut out = Self::new();
        for _ in 0..count {
            let len = u32::from_le_bytes(read_exact(r)?) as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| CliError::Format("entry name is not UTF-8".into()))?;
            let [code, ndim] = read_exact::<2>(r)?;
            let dtype = DType::from_code(code)?;
            let dims = (0..ndim).map(|_| Ok(u64::from_le_bytes(read_exact(r)?))).collect::<Result<Vec<u64>>>()?;
            let bytes = dims
                .iter()
                .try_fold(dtype.size() as u64, |acc, d| acc.checked_mul(*d))
                .ok_or_else(|| CliError::Format(format!("entry {name}: size overflows")))?;
            let mut payload = Vec::new();
            r.take(bytes).read_to_end(&mut payload)?;
            if payload.len() as u64 != bytes {
                return Err(CliError::Format(format!("entry {name}: truncated payload")));
            }
            out.push(Entry {
                name,
                dtype,
                dims,
                payload,
            })?;
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_matches_format() {
        let mut c = TensorContainer::new();
        c.push(Entry::from_scalars("ab", &[2], &[1.0f32, -2.0]).unwrap()).unwrap();
        let bytes = c.to_bytes().unwrap();
        let mut want = b"TCR3".to_vec();
        want.extend_from_slice(&1u16.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(b"ab");
        want.extend_from_slice(&[0, 1]);
        want.extend_from_slice(&2u64.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(TensorContainer::from_bytes(b"NOPE\x01\x00\x00\x00\x00\x00").is_err());
        let mut c = TensorContainer::new();
        c.push(Entry::from_bytes("x", vec![1, 2, 3])).unwrap();
        assert!(c.push(Entry::from_bytes("x", vec![])).is_err());
        let bytes = c.to_bytes().unwrap();
        assert!(TensorContainer::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Entry::from_scalars("y", &[3], &[1.0f64]).is_err());
    }
}
