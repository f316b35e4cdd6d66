//! `CKPT` tensor archive.
//!
//! Little-endian layout:
//!
//! ```text
//! "CKPT" | version u32 | count u32 |
//!   count × { name_len u32 | name utf-8 | ndim u32 | dims u32 × ndim | f32 × prod(dims) }
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::Scalar;

pub const CKPT_MAGIC: &[u8; 4] = b"CKPT";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

impl CheckpointEntry {
    pub fn new<T: Scalar>(name: impl Into<String>, dims: &[usize], values: &[T]) -> Self {
        Self {
            name: name.into(),
            dims: dims.to_vec(),
            values: values.iter().map(|v| v.as_f32()).collect(),
        }
    }

    pub fn values_as<T: Scalar>(&self) -> Vec<T> {
        self.values.iter().map(|&v| T::from_f64_lossy(v as f64)).collect()
    }
}

fn bad(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

pub fn write_checkpoint<W: Write>(mut w: W, entries: &[CheckpointEntry]) -> Result<()> {
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for e in entries {
        let n: usize = e.dims.iter().product();
        if n != e.values.len() {
            return Err(bad(format!(
                "{}: {} values for dims {:?}",
                e.name,
                e.values.len(),
                e.dims
            )));
        }
        w.write_all(&(e.name.len() as u32).to_le_bytes())?;
        w.write_all(e.name.as_bytes())?;
        w.write_all(&(e.dims.len() as u32).to_le_bytes())?;
        for &d in &e.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(4 * n);
        for v in &e.values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&payload)?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: io::Error) -> TensorError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        bad("truncated file")
    } else {
        TensorError::Io(e)
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<CheckpointEntry>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != CKPT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != CKPT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not utf-8"))?;
        let ndim = read_u32(&mut r)? as usize;
        let dims = (0..ndim)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let mut payload = vec![0u8; 4 * n];
        r.read_exact(&mut payload).map_err(truncated)?;
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entries.push(CheckpointEntry { name, dims, values });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes after last tensor"));
    }
    Ok(entries)
}

pub fn save_checkpoint(path: &Path, entries: &[CheckpointEntry]) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, entries)?;
    // write-then-rename so an interrupted save never leaves a torn file
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<CheckpointEntry>> {
    let bytes = fs::read(path)?;
    read_checkpoint(bytes.as_slice())
}
