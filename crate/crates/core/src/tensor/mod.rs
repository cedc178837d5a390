//! Dense tensors and the machinery that operates on them.
//!
//! A [`Tensor`] is a shape plus contiguous row-major storage in one of four
//! element types. Real-valued computation (training, lowered partial sums) runs
//! in `f64`; integer spike counts use `i32`; binary spike planes use one byte
//! per element holding `0` or `1` (they are bit-packed only on disk).
//!
//! Submodules:
//! - [`ops`]: forward/backward kernels for convolution, affine maps, pooling
//!   and batch normalization, plus shape-checked functional wrappers.
//! - [`Tape`]: reverse-mode differentiation over those kernels.
//! - [`Sgd`] / [`Adam`]: parameter updates.
//! - [`read_tensor`] / [`write_tensor`]: the IBRT container.

mod io;
pub mod ops;
mod optim;
mod tape;

use std::borrow::Cow;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use io::{load_tensor, read_tensor, save_tensor, write_tensor, ContainerError, MAGIC, VERSION};
pub use optim::{Adam, AdamConfig, OptimError, Optimizer, ParamKey, Sgd};
pub use tape::{Gradients, Tape, Var};

/// Element type of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Real32,
    Int32,
    Bit,
    Real64,
}

impl DType {
    /// Code written into the container header.
    pub fn code(self) -> u8 {
        match self {
            DType::Real32 => 0,
            DType::Int32 => 1,
            DType::Bit => 2,
            DType::Real64 => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::Real32),
            1 => Some(DType::Int32),
            2 => Some(DType::Bit),
            3 => Some(DType::Real64),
            _ => None,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            DType::Real32 => "real32",
            DType::Int32 => "int32",
            DType::Bit => "bit",
            DType::Real64 => "real64",
        };
        f.write_str(name)
    }
}

/// Typed element storage.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    Real32(Vec<f32>),
    Real64(Vec<f64>),
    Int32(Vec<i32>),
    /// One byte per element, always `0` or `1`.
    Bit(Vec<u8>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::Real32(v) => v.len(),
            TensorData::Real64(v) => v.len(),
            TensorData::Int32(v) => v.len(),
            TensorData::Bit(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::Real32(_) => DType::Real32,
            TensorData::Real64(_) => DType::Real64,
            TensorData::Int32(_) => DType::Int32,
            TensorData::Bit(_) => DType::Bit,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} elements but {actual} values were supplied")]
    SizeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("bit tensor holds value {value} at index {index}")]
    NotABit { index: usize, value: u8 },
    #[error("{op}: expected a {expected} tensor, found {found}")]
    DType {
        op: &'static str,
        expected: DType,
        found: DType,
    },
    #[error("{0}")]
    Invalid(String),
}

/// Dense n-dimensional array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::SizeMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if let TensorData::Bit(bits) = &data {
            if let Some((index, &value)) = bits.iter().enumerate().find(|(_, &b)| b > 1) {
                return Err(TensorError::NotABit { index, value });
            }
        }
        Ok(Self { shape, data })
    }

    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(shape, TensorData::Real64(data))
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        Self::new(shape, TensorData::Real32(data))
    }

    pub fn from_i32(shape: Vec<usize>, data: Vec<i32>) -> Result<Self, TensorError> {
        Self::new(shape, TensorData::Int32(data))
    }

    pub fn from_bits(shape: Vec<usize>, data: Vec<u8>) -> Result<Self, TensorError> {
        Self::new(shape, TensorData::Bit(data))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: TensorData::Real64(vec![0.0; n]),
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: TensorData::Real64(vec![value; n]),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: TensorData::Real64(vec![value]),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn as_f64(&self) -> Result<&[f64], TensorError> {
        match &self.data {
            TensorData::Real64(v) => Ok(v),
            other => Err(TensorError::DType {
                op: "as_f64",
                expected: DType::Real64,
                found: other.dtype(),
            }),
        }
    }

    pub fn as_f64_mut(&mut self) -> Result<&mut [f64], TensorError> {
        match &mut self.data {
            TensorData::Real64(v) => Ok(v),
            other => Err(TensorError::DType {
                op: "as_f64_mut",
                expected: DType::Real64,
                found: other.dtype(),
            }),
        }
    }

    pub fn as_i32(&self) -> Result<&[i32], TensorError> {
        match &self.data {
            TensorData::Int32(v) => Ok(v),
            other => Err(TensorError::DType {
                op: "as_i32",
                expected: DType::Int32,
                found: other.dtype(),
            }),
        }
    }

    pub fn as_bits(&self) -> Result<&[u8], TensorError> {
        match &self.data {
            TensorData::Bit(v) => Ok(v),
            other => Err(TensorError::DType {
                op: "as_bits",
                expected: DType::Bit,
                found: other.dtype(),
            }),
        }
    }

    /// Values widened to `f64`, borrowing when already stored that way.
    pub fn real_values(&self) -> Cow<'_, [f64]> {
        match &self.data {
            TensorData::Real64(v) => Cow::Borrowed(v),
            TensorData::Real32(v) => Cow::Owned(v.iter().map(|&x| x as f64).collect()),
            TensorData::Int32(v) => Cow::Owned(v.iter().map(|&x| x as f64).collect()),
            TensorData::Bit(v) => Cow::Owned(v.iter().map(|&x| x as f64).collect()),
        }
    }

    /// Converts to a `Real64` tensor of the same shape.
    pub fn to_f64(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: TensorData::Real64(self.real_values().into_owned()),
        }
    }

    pub fn into_f64_vec(self) -> Vec<f64> {
        match self.data {
            TensorData::Real64(v) => v,
            other => Tensor {
                shape: vec![other.len()],
                data: other,
            }
            .real_values()
            .into_owned(),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Selects rows `[start, end)` along the leading axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor, TensorError> {
        let rows = *self.shape.first().ok_or_else(|| {
            TensorError::Invalid("slice_rows on a rank-0 tensor".to_string())
        })?;
        if start > end || end > rows {
            return Err(TensorError::Invalid(format!(
                "row range {start}..{end} out of bounds for {rows} rows"
            )));
        }
        let stride: usize = self.shape[1..].iter().product();
        let range = start * stride..end * stride;
        let data = match &self.data {
            TensorData::Real32(v) => TensorData::Real32(v[range].to_vec()),
            TensorData::Real64(v) => TensorData::Real64(v[range].to_vec()),
            TensorData::Int32(v) => TensorData::Int32(v[range].to_vec()),
            TensorData::Bit(v) => TensorData::Bit(v[range].to_vec()),
        };
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor { shape, data })
    }

    /// Gathers rows by index along the leading axis into a `Real64` tensor.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Tensor, TensorError> {
        let total = *self.shape.first().unwrap_or(&0);
        let stride: usize = self.shape[1..].iter().product();
        let values = self.real_values();
        let mut out = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= total {
                return Err(TensorError::Invalid(format!(
                    "row {r} out of bounds for {total} rows"
                )));
            }
            out.extend_from_slice(&values[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor::from_f64(shape, out)
    }
}
