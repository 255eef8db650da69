//! Binary parameter blobs.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "P2NXBLOB"
//! version u32      1
//! count   u32      number of tensors
//! repeated `count` times:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   ndim     u32, dims (u64 each, ndim entries)
//!   data     f32 row-major, product(dims) entries
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"P2NXBLOB";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct BlobTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl BlobTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            name: name.into(),
            shape,
            data,
        }
    }
}

pub fn write_blob(path: &Path, tensors: &[BlobTensor]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes()).map_err(io)?;
    for t in tensors {
        let name = t.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name).map_err(io)?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes()).map_err(io)?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
        for v in &t.data {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn read_blob(path: &Path) -> Result<Vec<BlobTensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_blob(&bytes).map_err(|reason| Error::CorruptBlob {
        path: path.to_path_buf(),
        reason,
    })
}

fn parse_blob(bytes: &[u8]) -> std::result::Result<Vec<BlobTensor>, String> {
    let mut c = Cursor { bytes, pos: 0 };
    let truncated = || "truncated".to_string();
    if c.take(8).ok_or_else(truncated)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = c.u32().ok_or_else(truncated)?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = c.u32().ok_or_else(truncated)? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = c.u32().ok_or_else(truncated)? as usize;
        let name = std::str::from_utf8(c.take(name_len).ok_or_else(truncated)?)
            .map_err(|e| format!("tensor name: {e}"))?
            .to_string();
        let ndim = c.u32().ok_or_else(truncated)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u64().ok_or_else(truncated)? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = c
            .take(numel.checked_mul(4).ok_or("tensor too large")?)
            .ok_or_else(truncated)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push(BlobTensor { name, shape, data });
    }
    if c.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - c.pos));
    }
    Ok(out)
}
