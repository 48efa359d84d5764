//! Flat tensor archive: named f64 tensors in one little-endian file.
//!
//! Layout:
//!   magic  b"SGBA"
//!   version u32
//!   count   u32
//!   then per entry:
//!     name_len u32, name bytes (UTF-8),
//!     rank u32, dims u64 * rank,
//!     data f64 * prod(dims)
//!
//! Entries keep insertion order; readers get them back in file order plus
//! a name index. Datasets, checkpoints, and feature dumps all use this.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"SGBA";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: expected \"SGBA\", got {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0} (expected {VERSION})")]
    BadVersion(u32),
    #[error("entry name is not valid UTF-8")]
    BadName,
    #[error("duplicate entry name {0}")]
    DuplicateName(String),
    #[error("missing entry {0}")]
    Missing(String),
    #[error("entry {name}: shape {got} does not match expected {want}")]
    ShapeMismatch { name: String, got: String, want: String },
    #[error("entry {name}: unreasonable dimension {dim}")]
    DimTooLarge { name: String, dim: u64 },
}

/// Ordered collection of named tensors.
#[derive(Debug, Default)]
pub struct Archive {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, t: Tensor) -> Result<(), ArchiveError> {
        if self.index.contains_key(name) {
            return Err(ArchiveError::DuplicateName(name.to_string()));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor, ArchiveError> {
        self.get(name).ok_or_else(|| ArchiveError::Missing(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), ArchiveError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u32).to_le_bytes())?;
            w.write_all(nb)?;
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for &d in &t.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, ArchiveError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ArchiveError::BadMagic(magic));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(ArchiveError::BadVersion(version));
        }
        let count = read_u32(r)? as usize;
        let mut out = Archive::new();
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf)?;
            let name = String::from_utf8(name_buf).map_err(|_| ArchiveError::BadName)?;
            let rank = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = read_u64(r)?;
                // 2^32 elements of f64 would be 32 GiB; anything near that
                // is a corrupt file, not a tensor.
                if d > u32::MAX as u64 {
                    return Err(ArchiveError::DimTooLarge { name, dim: d });
                }
                shape.push(d as usize);
            }
            let n = numel(&shape);
            let mut data = vec![0.0f64; n];
            let mut buf = [0u8; 8];
            for v in data.iter_mut() {
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
            out.push(&name, Tensor { shape, data })?;
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<(), ArchiveError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ArchiveError> {
        let mut r = BufReader::new(File::open(path)?);
        let a = Self::read_from(&mut r)?;
        Ok(a)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ArchiveError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, ArchiveError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
