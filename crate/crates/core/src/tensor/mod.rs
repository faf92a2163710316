//! Dense row-major tensors and a tape-based reverse-mode autodiff engine.
//!
//! Everything here is deliberately small: the operator set covers what a
//! residual CNN classifier and an input-gradient attack need, nothing more.
//! Tensors are always laid out row-major, images as NCHW.

mod gemm;
mod graph;
pub mod gradcheck;
mod ops;

use std::fmt;

use num_traits::Float;
use thiserror::Error;

pub use gradcheck::{finite_diff_check, GradCheck};
pub use graph::{Gradients, Graph, Var};
pub use ops::{BatchNormConfig, BatchStats, BnMode, RunningStats};

/// Errors raised by tensor construction and operators.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch on {axes}: {detail}")]
    DimensionMismatch {
        op: &'static str,
        axes: &'static str,
        detail: String,
    },
    #[error("tensor dims {dims:?} hold {expected} values but {actual} were given")]
    LengthMismatch {
        dims: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("backward requires a scalar loss, got dims {0:?}")]
    NotScalar(Vec<usize>),
    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Floating-point precision of a computation graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScalarMode {
    Single,
    Double,
}

impl ScalarMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ScalarMode::Single => "single",
            ScalarMode::Double => "double",
        }
    }
}

impl fmt::Display for ScalarMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ScalarMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "single" | "f32" => Ok(ScalarMode::Single),
            "double" | "f64" => Ok(ScalarMode::Double),
            other => Err(format!("unknown precision '{other}'")),
        }
    }
}

/// Element type of a tensor. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float + Default + fmt::Debug + fmt::Display + Send + Sync + std::iter::Sum + 'static
{
    const MODE: ScalarMode;
    /// Byte width of one element in the checkpoint encoding.
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `c = alpha * a * b + beta * c` with arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: (&[Self], isize, isize),
        b: (&[Self], isize, isize),
        beta: Self,
        c: (&mut [Self], isize, isize),
    );
}

impl Scalar for f32 {
    const MODE: ScalarMode = ScalarMode::Single;
    const BYTES: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: (&[Self], isize, isize),
        b: (&[Self], isize, isize),
        beta: Self,
        c: (&mut [Self], isize, isize),
    ) {
        gemm::check_extent(m, k, a.0.len(), a.1, a.2);
        gemm::check_extent(k, n, b.0.len(), b.1, b.2);
        gemm::check_extent(m, n, c.0.len(), c.1, c.2);
        // SAFETY: every addressed element lies inside its slice (checked above).
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.0.as_ptr(),
                a.1,
                a.2,
                b.0.as_ptr(),
                b.1,
                b.2,
                beta,
                c.0.as_mut_ptr(),
                c.1,
                c.2,
            );
        }
    }
}

impl Scalar for f64 {
    const MODE: ScalarMode = ScalarMode::Double;
    const BYTES: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: (&[Self], isize, isize),
        b: (&[Self], isize, isize),
        beta: Self,
        c: (&mut [Self], isize, isize),
    ) {
        gemm::check_extent(m, k, a.0.len(), a.1, a.2);
        gemm::check_extent(k, n, b.0.len(), b.1, b.2);
        gemm::check_extent(m, n, c.0.len(), c.1, c.2);
        // SAFETY: every addressed element lies inside its slice (checked above).
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.0.as_ptr(),
                a.1,
                a.2,
                b.0.as_ptr(),
                b.1,
                b.2,
                beta,
                c.0.as_mut_ptr(),
                c.1,
                c.2,
            );
        }
    }
}

/// An n-dimensional array with optional gradient storage.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    values: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: Vec<usize>, values: Vec<T>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(TensorError::Config(format!(
                "tensor dims must be non-empty and positive, got {dims:?}"
            )));
        }
        let expected: usize = dims.iter().product();
        if expected != values.len() {
            return Err(TensorError::LengthMismatch {
                dims,
                expected,
                actual: values.len(),
            });
        }
        Ok(Self {
            dims,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: &[usize], value: T) -> Self {
        let n = dims.iter().product();
        Self::new(dims.to_vec(), vec![value; n]).expect("positive dims")
    }

    pub fn scalar(value: T) -> Self {
        Self::new(vec![1], vec![value]).expect("scalar")
    }

    pub fn from_f64(dims: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(dims.to_vec(), values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Returns a copy with a different shape over the same values.
    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        let mut t = Self::new(dims.to_vec(), self.values.clone())?;
        t.requires_grad = self.requires_grad;
        Ok(t)
    }

    /// Rows `start..start+len` along the leading axis.
    pub fn slice_outer(&self, start: usize, len: usize) -> Result<Self> {
        let outer = self.dims[0];
        if start + len > outer || len == 0 {
            return Err(TensorError::DimensionMismatch {
                op: "slice_outer",
                axes: "axis 0",
                detail: format!("range {start}..{} out of 0..{outer}", start + len),
            });
        }
        let inner = self.numel() / outer;
        let mut dims = self.dims.clone();
        dims[0] = len;
        Self::new(dims, self.values[start * inner..(start + len) * inner].to_vec())
    }

    /// Gathers rows along the leading axis.
    pub fn gather_outer(&self, rows: &[usize]) -> Result<Self> {
        let outer = self.dims[0];
        let inner = self.numel() / outer;
        let mut values = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            if r >= outer {
                return Err(TensorError::DimensionMismatch {
                    op: "gather_outer",
                    axes: "axis 0",
                    detail: format!("row {r} out of 0..{outer}"),
                });
            }
            values.extend_from_slice(&self.values[r * inner..(r + 1) * inner]);
        }
        let mut dims = self.dims.clone();
        dims[0] = rows.len();
        Self::new(dims, values)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            values: self.values.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::from_f64(v.as_f64())).collect()),
        }
    }

    /// Bitwise equality of dims and values; gradient state is ignored.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.values.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("dims", &self.dims)
            .field("values", &preview)
            .field("requires_grad", &self.requires_grad)
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}
