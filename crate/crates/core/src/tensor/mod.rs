//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The op set is exactly what the descriptor network needs: 2-D convolution
//! with per-axis padding modes (zero vertically, zero or circular
//! horizontally), 1-D convolution, pooling, elementwise nonlinearities,
//! matrix multiply, softmax and L2 normalization. Convolution gathers its
//! windows explicitly so circular indexing takes column indices modulo the
//! image width, which makes column-shift equivariance hold bit-exactly
//! rather than approximately.

mod graph;
mod io;
mod real;

pub use graph::{Graph, PoolKind, Var};
pub use io::{read_checkpoint, read_checkpoint_file, write_checkpoint, write_checkpoint_file};
pub use real::Real;

use std::fmt;

/// Horizontal padding of a 2-D convolution. `Zero(n)` pads `n` columns of
/// zeros on each side; `Circular` wraps the opposite edge with a possibly
/// uneven left/right split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HorizontalPad {
    Zero(usize),
    Circular { left: usize, right: usize },
}

impl HorizontalPad {
    pub fn widths(self) -> (usize, usize) {
        match self {
            HorizontalPad::Zero(n) => (n, n),
            HorizontalPad::Circular { left, right } => (left, right),
        }
    }
}

/// Per-axis padding of a 2-D convolution. The vertical axis is always
/// zero-padded; only the horizontal axis may wrap.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PadMode {
    /// Rows of zeros added above and below.
    pub vertical: usize,
    pub horizontal: HorizontalPad,
}

impl PadMode {
    pub fn new(vertical: usize, horizontal: HorizontalPad) -> Self {
        Self { vertical, horizontal }
    }
}

/// Padding of a 1-D convolution over a length-preserving odd kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pad1d {
    Zero,
    Circular,
}

#[derive(Debug)]
pub enum TensorError {
    ShapeMismatch { context: &'static str, expected: String, actual: String },
    EmptyShape,
    ZeroDimension { axis: usize },
    DataLength { expected: usize, actual: usize },
    ZeroStride,
    KernelTooLarge { context: &'static str, kernel: usize, padded: usize },
    EvenKernel { len: usize },
    InvalidAxis { axis: usize, rank: usize },
    ZeroNormSlice { slice: usize },
    NonScalarLoss { len: usize },
    Checkpoint(String),
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { context, expected, actual } => {
                write!(f, "{context}: shape mismatch, expected {expected}, got {actual}")
            }
            TensorError::EmptyShape => write!(f, "tensor shape must have at least one dimension"),
            TensorError::ZeroDimension { axis } => {
                write!(f, "tensor dimension {axis} must be positive")
            }
            TensorError::DataLength { expected, actual } => {
                write!(f, "data length {actual} does not match shape product {expected}")
            }
            TensorError::ZeroStride => write!(f, "convolution stride must be positive"),
            TensorError::KernelTooLarge { context, kernel, padded } => {
                write!(f, "{context}: kernel extent {kernel} exceeds padded input {padded}")
            }
            TensorError::EvenKernel { len } => {
                write!(f, "1-D convolution kernel length must be odd, got {len}")
            }
            TensorError::InvalidAxis { axis, rank } => {
                write!(f, "axis {axis} out of range for rank-{rank} tensor")
            }
            TensorError::ZeroNormSlice { slice } => {
                write!(f, "cannot L2-normalize slice {slice}: all elements are zero")
            }
            TensorError::NonScalarLoss { len } => {
                write!(f, "backward requires a scalar loss, got {len} elements")
            }
            TensorError::Checkpoint(msg) => write!(f, "checkpoint: {msg}"),
        }
    }
}

impl std::error::Error for TensorError {}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Real> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self, TensorError> {
        if shape.is_empty() {
            return Err(TensorError::EmptyShape);
        }
        if let Some(axis) = shape.iter().position(|&d| d == 0) {
            return Err(TensorError::ZeroDimension { axis });
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::DataLength { expected, actual: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self, TensorError> {
        let len = shape.iter().product();
        Self::new(shape, vec![E::ZERO; len])
    }

    pub fn filled(shape: Vec<usize>, value: E) -> Result<Self, TensorError> {
        let len = shape.iter().product();
        Self::new(shape, vec![value; len])
    }

    pub fn scalar(value: E) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Result<Self, TensorError> {
        Self::new(shape, values.iter().map(|&v| E::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Value at a multi-index. Panics on out-of-range indices; intended for
    /// small fixtures and tests, not hot loops.
    pub fn at(&self, index: &[usize]) -> E {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (axis, (&i, &d)) in index.iter().zip(&self.shape).enumerate() {
            assert!(i < d, "index {i} out of range on axis {axis}");
            flat = flat * d + i;
        }
        self.data[flat]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        if shape.is_empty() {
            return Err(TensorError::EmptyShape);
        }
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::DataLength { expected, actual: self.data.len() });
        }
        self.shape = shape;
        Ok(self)
    }
}

pub(crate) fn shape_string(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", dims.join("x"))
}
