//! Tensor snapshot format.
//!
//! A snapshot is a sequence of records, each laid out little-endian as:
//! path length (u32), UTF-8 path bytes, dtype tag (u8: 0=f32, 1=f64),
//! rank (u32), one u64 per extent, then the raw values.

use std::io::{self, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{DType, Shape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum SnapshotError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("record path is not valid UTF-8")]
    BadPath,
    #[error("unknown dtype tag {0}")]
    BadDType(u8),
    #[error("record for {path}: {reason}")]
    BadRecord { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, SnapshotError>;

/// Write one named tensor record.
pub fn write_record(w: &mut impl Write, path: &str, tensor: &Tensor) -> Result<()> {
    w.write_u32::<LittleEndian>(path.len() as u32)?;
    w.write_all(path.as_bytes())?;
    w.write_u8(tensor.dtype().tag())?;
    w.write_u32::<LittleEndian>(tensor.shape().rank() as u32)?;
    for &d in tensor.shape().dims() {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    w.write_all(&tensor.to_le_bytes())?;
    Ok(())
}

/// Read one record; `Ok(None)` at a clean end of stream.
pub fn read_record(r: &mut impl Read) -> Result<Option<(String, Tensor)>> {
    let path_len = match r.read_u32::<LittleEndian>() {
        Ok(n) => n as usize,
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let mut path_bytes = vec![0u8; path_len];
    r.read_exact(&mut path_bytes)?;
    let path = String::from_utf8(path_bytes).map_err(|_| SnapshotError::BadPath)?;
    let tag = r.read_u8()?;
    let dtype = DType::from_tag(tag).ok_or(SnapshotError::BadDType(tag))?;
    let rank = r.read_u32::<LittleEndian>()? as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(r.read_u64::<LittleEndian>()? as usize);
    }
    let shape = Shape::new(dims);
    let len = shape.checked_len().ok_or_else(|| SnapshotError::BadRecord {
        path: path.clone(),
        reason: "shape overflows".into(),
    })?;
    let mut raw = vec![0u8; len * dtype.size_bytes()];
    r.read_exact(&mut raw)?;
    let tensor = Tensor::from_le_bytes(shape, dtype, &raw).map_err(|e| SnapshotError::BadRecord {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    Ok(Some((path, tensor)))
}

/// Read records until end of stream.
pub fn read_all(r: &mut impl Read) -> Result<Vec<(String, Tensor)>> {
    let mut out = Vec::new();
    while let Some(rec) = read_record(r)? {
        out.push(rec);
    }
    Ok(out)
}
