//! Binary matrix container.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "LQMX"
//! 4       2     version (u16 LE, currently 1)
//! 6       1     dtype: 1 = f32, 2 = f64
//! 7       8     rows (u64 LE)
//! 15      8     cols (u64 LE)
//! 23      ...   rows*cols values, row-major, little-endian
//! ```

use std::path::Path;

use crate::error::{LqerError, Result};
use crate::io::{write_atomic, ByteReader, ByteWriter};
use crate::linalg::DenseMatrix;

pub const CONTAINER_MAGIC: [u8; 4] = *b"LQMX";
pub const CONTAINER_VERSION: u16 = 1;
pub const CONTAINER_HEADER_LEN: usize = 23;

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

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub fn encode_matrix(m: &DenseMatrix, dtype: DType) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.bytes(&CONTAINER_MAGIC);
    w.u16(CONTAINER_VERSION);
    w.u8(dtype.code());
    w.u64(m.rows() as u64);
    w.u64(m.cols() as u64);
    for &v in m.data() {
        match dtype {
            DType::F32 => w.bytes(&(v as f32).to_le_bytes()),
            DType::F64 => w.f64(v),
        }
    }
    w.into_inner()
}

pub(crate) fn read_matrix(r: &mut ByteReader<'_>) -> Result<(DenseMatrix, DType)> {
    let at = r.offset();
    let magic = r.take(4, "magic")?;
    if magic != CONTAINER_MAGIC {
        return Err(LqerError::format(
            at,
            format!("bad magic {magic:?}, expected \"LQMX\""),
        ));
    }
    let at = r.offset();
    let version = r.u16("version")?;
    if version != CONTAINER_VERSION {
        return Err(LqerError::format(
            at,
            format!("unsupported version {version}"),
        ));
    }
    let at = r.offset();
    let dtype = match r.u8("dtype")? {
        1 => DType::F32,
        2 => DType::F64,
        other => return Err(LqerError::format(at, format!("unknown dtype code {other}"))),
    };
    let at = r.offset();
    let rows = r.len("row count")?;
    let cols = r.len("column count")?;
    if rows == 0 || cols == 0 {
        return Err(LqerError::format(at, format!("empty matrix {rows}x{cols}")));
    }
    let count = rows
        .checked_mul(cols)
        .filter(|c| c.checked_mul(dtype.width()).is_some())
        .ok_or_else(|| LqerError::format(at, "matrix dimensions overflow"))?;
    let payload_at = r.offset();
    let payload = r.take(count * dtype.width(), "payload")?;
    let data: Vec<f64> = match dtype {
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(LqerError::format(
            payload_at + (i * dtype.width()) as u64,
            "non-finite value in payload",
        ));
    }
    Ok((DenseMatrix::new(rows, cols, data)?, dtype))
}

/// Decodes a complete container; trailing bytes are an error.
pub fn decode_matrix(bytes: &[u8]) -> Result<(DenseMatrix, DType)> {
    let mut r = ByteReader::new(bytes);
    let out = read_matrix(&mut r)?;
    if r.remaining() != 0 {
        return Err(LqerError::format(
            r.offset(),
            format!("{} trailing bytes after payload", r.remaining()),
        ));
    }
    Ok(out)
}

/// Saves as f64, which round-trips exactly.
pub fn save_matrix(path: impl AsRef<Path>, m: &DenseMatrix) -> Result<()> {
    save_matrix_as(path, m, DType::F64)
}

pub fn save_matrix_as(path: impl AsRef<Path>, m: &DenseMatrix, dtype: DType) -> Result<()> {
    write_atomic(path.as_ref(), &encode_matrix(m, dtype))
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    let bytes = std::fs::read(path)?;
    Ok(decode_matrix(&bytes)?.0)
}
