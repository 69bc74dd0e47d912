//! `.evbt` tensor files: the carrier for exported tokens, attention inputs,
//! point maps and depth maps.
//!
//! Layout (little-endian): 8-byte magic `EVB1TENS`, `u8` dtype code
//! (0 = f32, 1 = f64), `u8` rank, `rank × u64` dims, then the row-major
//! payload. Depth maps are `H×W` tensors where 0 marks an invalid pixel.

use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"EVB1TENS";

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: not an .evbt tensor")]
    BadMagic,
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("truncated header")]
    TruncatedHeader,
    #[error("shape {shape:?} overflows")]
    ShapeOverflow { shape: Vec<u64> },
    #[error("shape {shape:?} needs {expected} values, payload holds {actual} bytes")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("expected shape {expected}, got {actual:?}")]
    UnexpectedShape { expected: String, actual: Vec<usize> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

fn checked_len(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self, TensorError> {
        let actual = match &data {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        };
        let expected = checked_len(&shape).ok_or_else(|| TensorError::ShapeOverflow {
            shape: shape.iter().map(|&d| d as u64).collect(),
        })?;
        if expected != actual {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                actual: actual * if matches!(data, TensorData::F32(_)) { 4 } else { 8 },
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(shape, TensorData::F64(data))
    }

    pub fn zeros_f32(shape: Vec<usize>) -> Self {
        let n = checked_len(&shape).expect("shape overflow");
        Self {
            shape,
            data: TensorData::F32(vec![0.0; n]),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn len(&self) -> usize {
        match &self.data {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values widened to f64, row-major.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    pub fn expect_rank(&self, rank: usize, what: &str) -> Result<(), TensorError> {
        if self.shape.len() != rank {
            return Err(TensorError::UnexpectedShape {
                expected: what.into(),
                actual: self.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(10 + 8 * self.shape.len() + self.len() * self.dtype().size());
        out.extend_from_slice(MAGIC);
        out.push(self.dtype().code());
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, TensorError> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(TensorError::BadMagic);
        }
        if bytes.len() < 10 {
            return Err(TensorError::TruncatedHeader);
        }
        let dtype = DType::from_code(bytes[8]).ok_or(TensorError::UnknownDtype(bytes[8]))?;
        let rank = bytes[9] as usize;
        let header = 10 + 8 * rank;
        if bytes.len() < header {
            return Err(TensorError::TruncatedHeader);
        }
        let dims: Vec<u64> = (0..rank)
            .map(|k| LittleEndian::read_u64(&bytes[10 + 8 * k..18 + 8 * k]))
            .collect();
        let shape: Vec<usize> = dims
            .iter()
            .map(|&d| usize::try_from(d))
            .collect::<Result<_, _>>()
            .map_err(|_| TensorError::ShapeOverflow { shape: dims.clone() })?;
        let n = checked_len(&shape)
            .and_then(|n| n.checked_mul(dtype.size()).map(|_| n))
            .ok_or(TensorError::ShapeOverflow { shape: dims })?;
        let payload = &bytes[header..];
        if payload.len() != n * dtype.size() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected: n,
                actual: payload.len(),
            });
        }
        let data = match dtype {
            DType::F32 => TensorData::F32(payload.chunks_exact(4).map(LittleEndian::read_f32).collect()),
            DType::F64 => TensorData::F64(payload.chunks_exact(8).map(LittleEndian::read_f64).collect()),
        };
        Ok(Self { shape, data })
    }
}

pub fn read_tensor(path: &Path) -> Result<Tensor, TensorError> {
    let bytes = std::fs::read(path).map_err(|source| TensorError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Tensor::decode(&bytes)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<(), TensorError> {
    std::fs::write(path, t.encode()).map_err(|source| TensorError::Io {
        path: path.display().to_string(),
        source,
    })
}
