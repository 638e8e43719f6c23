//! Flat binary tensor files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset  size       field
//! 0       4          magic 0x46 0x54 0x4E 0x53 ("FTNS")
//! 4       1          format version, currently 1
//! 5       1          dtype: 0 = f32, 1 = f64, 2 = i8, 3 = i32
//! 6       1          ndim (>= 1)
//! 7       1          reserved, must be 0
//! 8       8 * ndim   dims as u64, each >= 1
//! ...     payload    row-major elements, little-endian
//! ```
//!
//! The header is `8 + 8 * ndim` bytes; an f64 scalar (`dims = [1]`) is a
//! 24-byte file. Payload length must match the dim product exactly: short
//! files are truncated, longer files carry trailing garbage, both are
//! rejected.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use fastobq_core::Mat;

use crate::HarnessError;

pub const MAGIC: [u8; 4] = [0x46, 0x54, 0x4E, 0x53];
pub const FORMAT_VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    I8,
    I32,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
            Dtype::I8 => 2,
            Dtype::I32 => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            2 => Some(Dtype::I8),
            3 => Some(Dtype::I32),
            _ => None,
        }
    }

    pub fn elem_size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::I8 => 1,
            Dtype::I32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I8(Vec<i8>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
            TensorData::I8(_) => Dtype::I8,
            TensorData::I32(_) => Dtype::I32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I8(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<u64>,
    pub data: TensorData,
}

impl TensorFile {
    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    /// Checked element count from the dims.
    pub fn elem_count(&self) -> Result<u64, HarnessError> {
        self.dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| {
                HarnessError::InvalidHeader(format!("dimension product overflows: {:?}", self.dims))
            })
    }

    /// Structural checks shared by the reader and the writer.
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.dims.is_empty() {
            return Err(HarnessError::InvalidHeader(
                "ndim must be at least 1".into(),
            ));
        }
        if self.dims.len() > u8::MAX as usize {
            return Err(HarnessError::InvalidHeader("ndim exceeds 255".into()));
        }
        if let Some(pos) = self.dims.iter().position(|&d| d == 0) {
            return Err(HarnessError::InvalidHeader(format!("dim {pos} is 0")));
        }
        let count = self.elem_count()?;
        if count != self.data.len() as u64 {
            return Err(HarnessError::InvalidHeader(format!(
                "dims {:?} imply {count} elements, buffer holds {}",
                self.dims,
                self.data.len()
            )));
        }
        Ok(())
    }

    /// Widens a 2-D tensor of any dtype to an `f64` matrix.
    pub fn to_mat(&self) -> Result<Mat, HarnessError> {
        if self.dims.len() != 2 {
            return Err(HarnessError::ShapeMismatch {
                context: format!("expected a 2-D tensor, got dims {:?}", self.dims),
            });
        }
        let rows = self.dims[0] as usize;
        let cols = self.dims[1] as usize;
        let data: Vec<f64> = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::I8(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::I32(v) => v.iter().map(|&x| x as f64).collect(),
        };
        Ok(Mat::from_vec(rows, cols, data))
    }

    pub fn from_mat(m: &Mat) -> Self {
        TensorFile {
            dims: vec![m.rows() as u64, m.cols() as u64],
            data: TensorData::F64(m.data().to_vec()),
        }
    }
}

/// Reads and fully validates one tensor file.
pub fn read_tensor(path: &Path) -> Result<TensorFile, HarnessError> {
    let file = File::open(path).map_err(|e| match e.kind() {
        ErrorKind::NotFound => HarnessError::MissingFile(path.to_path_buf()),
        _ => HarnessError::Io(e),
    })?;
    read_tensor_from(&mut BufReader::new(file))
}

/// Reads a tensor from any byte stream.
pub fn read_tensor_from(r: &mut impl Read) -> Result<TensorFile, HarnessError> {
    let mut head = [0u8; 8];
    r.read_exact(&mut head).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => HarnessError::BadMagic,
        _ => HarnessError::Io(e),
    })?;
    if head[0..4] != MAGIC {
        return Err(HarnessError::BadMagic);
    }
    if head[4] != FORMAT_VERSION {
        return Err(HarnessError::UnsupportedVersion(head[4]));
    }
    let dtype = Dtype::from_code(head[5]).ok_or(HarnessError::UnsupportedDtype(head[5]))?;
    let ndim = head[6] as usize;
    if ndim == 0 {
        return Err(HarnessError::InvalidHeader(
            "ndim must be at least 1".into(),
        ));
    }
    if head[7] != 0 {
        return Err(HarnessError::InvalidHeader(format!(
            "reserved byte is {}",
            head[7]
        )));
    }

    let mut dim_bytes = vec![0u8; 8 * ndim];
    r.read_exact(&mut dim_bytes).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => {
            HarnessError::InvalidHeader("file ends inside the dim table".into())
        }
        _ => HarnessError::Io(e),
    })?;
    let dims: Vec<u64> = dim_bytes
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(pos) = dims.iter().position(|&d| d == 0) {
        return Err(HarnessError::InvalidHeader(format!("dim {pos} is 0")));
    }

    let count = dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| {
            HarnessError::InvalidHeader(format!("dimension product overflows: {dims:?}"))
        })?;
    let expected = count
        .checked_mul(dtype.elem_size() as u64)
        .ok_or_else(|| HarnessError::InvalidHeader(format!("payload size overflows: {dims:?}")))?;
    if usize::try_from(expected).is_err() {
        return Err(HarnessError::InvalidHeader(format!(
            "payload of {expected} bytes is not addressable"
        )));
    }

    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(HarnessError::Io)?;
    if (payload.len() as u64) < expected {
        return Err(HarnessError::TruncatedPayload {
            expected,
            actual: payload.len() as u64,
        });
    }
    if (payload.len() as u64) > expected {
        return Err(HarnessError::TrailingData {
            extra: payload.len() as u64 - expected,
        });
    }

    let data = match dtype {
        Dtype::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::F64 => TensorData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::I8 => TensorData::I8(payload.iter().map(|&b| b as i8).collect()),
        Dtype::I32 => TensorData::I32(
            payload
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    let t = TensorFile { dims, data };
    t.validate()?;
    Ok(t)
}

/// Validates, then writes one tensor file. Nothing is written on a
/// validation failure.
pub fn write_tensor(t: &TensorFile, path: &Path) -> Result<(), HarnessError> {
    t.validate()?;
    let mut w = BufWriter::new(File::create(path).map_err(HarnessError::Io)?);
    write_tensor_to(t, &mut w)?;
    w.flush().map_err(HarnessError::Io)
}

/// Writes a tensor to any byte stream.
pub fn write_tensor_to(t: &TensorFile, w: &mut impl Write) -> Result<(), HarnessError> {
    t.validate()?;
    let mut head = [0u8; 8];
    head[0..4].copy_from_slice(&MAGIC);
    head[4] = FORMAT_VERSION;
    head[5] = t.dtype().code();
    head[6] = t.dims.len() as u8;
    head[7] = 0;
    w.write_all(&head).map_err(HarnessError::Io)?;
    for &d in &t.dims {
        w.write_all(&d.to_le_bytes()).map_err(HarnessError::Io)?;
    }
    match &t.data {
        TensorData::F32(v) => {
            for x in v {
                w.write_all(&x.to_le_bytes()).map_err(HarnessError::Io)?;
            }
        }
        TensorData::F64(v) => {
            for x in v {
                w.write_all(&x.to_le_bytes()).map_err(HarnessError::Io)?;
            }
        }
        TensorData::I8(v) => {
            for x in v {
                w.write_all(&x.to_le_bytes()).map_err(HarnessError::Io)?;
            }
        }
        TensorData::I32(v) => {
            for x in v {
                w.write_all(&x.to_le_bytes()).map_err(HarnessError::Io)?;
            }
        }
    }
    Ok(())
}

/// In-memory serialization, mostly for tests and golden files.
pub fn to_bytes(t: &TensorFile) -> Result<Vec<u8>, HarnessError> {
    let mut buf = Vec::new();
    write_tensor_to(t, &mut buf)?;
    Ok(buf)
}
