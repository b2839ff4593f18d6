//! Versioned binary checkpoint container.
//!
//! Layout (little endian): 4-byte magic, `u32` version, `u64` header length,
//! JSON header, `u32` tensor count, then per tensor `u32` rows, `u32` cols
//! and `rows * cols` `f64` values in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::autodiff::Mat;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<H: Serialize>(path: &Path, magic: &[u8; 4], header: &H, tensors: &[&Mat]) -> Result<()> {
    let header = serde_json::to_vec(header)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(magic).map_err(io)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION).map_err(io)?;
    w.write_u64::<LittleEndian>(header.len() as u64).map_err(io)?;
    w.write_all(&header).map_err(io)?;
    w.write_u32::<LittleEndian>(tensors.len() as u32).map_err(io)?;
    for t in tensors {
        w.write_u32::<LittleEndian>(t.nrows() as u32).map_err(io)?;
        w.write_u32::<LittleEndian>(t.ncols() as u32).map_err(io)?;
        for &x in t.iter() {
            w.write_f64::<LittleEndian>(x).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_checkpoint<H: DeserializeOwned>(path: &Path, magic: &[u8; 4]) -> Result<(H, Vec<Mat>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut found = [0u8; 4];
    r.read_exact(&mut found).map_err(|_| Error::TruncatedCheckpoint)?;
    if &found != magic {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(magic).into(),
            found: String::from_utf8_lossy(&found).into(),
        });
    }
    let trunc = |_| Error::TruncatedCheckpoint;
    let version = r.read_u32::<LittleEndian>().map_err(trunc)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion { expected: CHECKPOINT_VERSION, found: version });
    }
    let len = r.read_u64::<LittleEndian>().map_err(trunc)? as usize;
    if len > 1 << 30 {
        return Err(Error::Corrupt(format!("header length {len}")));
    }
    let mut header = vec![0u8; len];
    r.read_exact(&mut header).map_err(trunc)?;
    let header: H = serde_json::from_slice(&header)?;
    let count = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let rows = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let cols = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let mut data = vec![0.0; rows * cols];
        r.read_f64_into::<LittleEndian>(&mut data).map_err(trunc)?;
        tensors.push(Mat::from_shape_vec((rows, cols), data).expect("shape matches length"));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Corrupt("trailing bytes after checkpoint payload".into()));
    }
    Ok((header, tensors))
}

/// Copies loaded tensors into `targets`, checking count and shapes.
pub fn assign_tensors(targets: Vec<&mut Mat>, loaded: Vec<Mat>) -> Result<()> {
    if targets.len() != loaded.len() {
        return Err(Error::CheckpointMismatch(format!(
            "expected {} tensors, found {}",
            targets.len(),
            loaded.len()
        )));
    }
    for (i, (t, l)) in targets.into_iter().zip(loaded).enumerate() {
        if t.dim() != l.dim() {
            return Err(Error::CheckpointMismatch(format!("tensor {i}: expected {:?}, found {:?}", t.dim(), l.dim())));
        }
        *t = l;
    }
    Ok(())
}
