//! Dense tensors and the scalar abstraction.
//!
//! Tensors are immutable, row-major, and shared: cloning a [`Tensor`] clones
//! an `Arc`, never the payload. Hyperspectral feature cubes use the layout
//! `[H, W, D, C]` (rows, columns, bands, channels) with the channel axis
//! fastest-moving; plain images drop the channel axis and live as `[H, W, D]`.
//! Rank is capped at [`MAX_RANK`] and every extent must be at least 1.
//!
//! All numerics are generic over [`Scalar`], which is implemented for `f32`
//! (the working precision) and `f64` (used by oracles and gradient checks).

pub mod fdiff;
pub mod kernels;
pub mod ops;
pub mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};
use std::sync::Arc;

use crate::error::{Error, Result};

/// Hard cap on tensor rank; enough for `[kh, kw, kd, Cin, Cout]` kernels.
pub const MAX_RANK: usize = 5;

/// Element type tag used by binary containers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    Single,
    Double,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::Single => 0,
            Dtype::Double => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::Single),
            1 => Some(Dtype::Double),
            _ => None,
        }
    }
}

/// Whether an operation runs with training semantics (batch statistics,
/// stochastic choices) or inference semantics (running statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Floating-point element abstraction: `f32` for the working precision,
/// `f64` for verification. Everything the kernels need lives here so they
/// can be written once.
pub trait Scalar:
    Copy
    + PartialOrd
    + Debug
    + Display
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum<Self>
{
    const ZERO: Self;
    const ONE: Self;
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;

    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn minimum(self, other: Self) -> Self;
    /// Exact Gauss error function, double precision internally.
    fn erf(self) -> Self;
    fn is_finite(self) -> bool;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: Dtype = Dtype::Single;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f32(self) -> f32 {
        self
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn ln(self) -> Self {
        self.ln()
    }
    fn abs(self) -> Self {
        self.abs()
    }
    fn maximum(self, other: Self) -> Self {
        self.max(other)
    }
    fn minimum(self, other: Self) -> Self {
        self.min(other)
    }
    fn erf(self) -> Self {
        libm::erf(self as f64) as f32
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: Dtype = Dtype::Double;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn ln(self) -> Self {
        self.ln()
    }
    fn abs(self) -> Self {
        self.abs()
    }
    fn maximum(self, other: Self) -> Self {
        self.max(other)
    }
    fn minimum(self, other: Self) -> Self {
        self.min(other)
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Immutable dense tensor. Row-major, last axis fastest.
#[derive(Clone)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor from owned data, validating shape and length.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        validate_shape(shape)?;
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::contract(
                "tensor",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        let n: usize = shape.iter().product();
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![T::ZERO; n]),
        })
    }

    /// Constant-filled tensor of the given shape.
    pub fn full(shape: &[usize], v: T) -> Result<Self> {
        validate_shape(shape)?;
        let n: usize = shape.iter().product();
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; n]),
        })
    }

    /// Rank-0 scalar tensor.
    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: Arc::new(vec![v]),
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Row-major strides for this shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    /// Extracts the single element of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::contract(
                "item",
                format!("tensor of shape {:?} is not a scalar", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    /// Multi-index accessor; panics on rank/bounds errors (test helper).
    pub fn at(&self, idx: &[usize]) -> T {
        assert_eq!(idx.len(), self.rank(), "index rank mismatch");
        let strides = self.strides();
        let mut off = 0;
        for (a, (&i, &n)) in idx.iter().zip(self.shape.iter()).enumerate() {
            assert!(i < n, "index {i} out of bounds on axis {a} (extent {n})");
            off += i * strides[a];
        }
        self.data[off]
    }

    /// Same payload under a new shape (element counts must agree).
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::contract(
                "reshape",
                format!(
                    "cannot view {} elements as shape {shape:?} ({n} elements)",
                    self.numel()
                ),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    /// Elementwise combination of two same-shape tensors.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::contract(
                "zip",
                format!("shape {:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
        })
    }

    /// Lossless-as-possible element cast between scalar types.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect()),
        }
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Maximum absolute element (0 for empty — unreachable, extents ≥ 1).
    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::ZERO, |acc, &v| acc.maximum(v.abs()))
    }
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 8 {
            write!(f, " {:?}", &self.data[..])?;
        }
        Ok(())
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.len() > MAX_RANK {
        return Err(Error::contract(
            "tensor",
            format!("rank {} exceeds maximum {MAX_RANK}", shape.len()),
        ));
    }
    if let Some(axis) = shape.iter().position(|&n| n == 0) {
        return Err(Error::contract(
            "tensor",
            format!("axis {axis} has zero extent in shape {shape:?}"),
        ));
    }
    Ok(())
}

/// Row-major strides for a shape.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for a in (0..shape.len().saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * shape[a + 1];
    }
    strides
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_validates_rank_and_extents() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::zeros(&[1, 1, 1, 1, 1, 1]).is_err());
        assert!(Tensor::<f32>::zeros(&[2, 0, 3]).is_err());
    }

    #[test]
    fn clone_shares_payload() {
        let t = Tensor::<f64>::full(&[4, 4], 1.5).unwrap();
        let u = t.clone();
        assert!(Arc::ptr_eq(&t.data, &u.data));
        assert_eq!(u.at(&[3, 3]), 1.5);
    }

    #[test]
    fn reshape_is_a_view() {
        let t = Tensor::<f32>::from_vec(&[2, 3], (0..6).map(|v| v as f32).collect()).unwrap();
        let u = t.reshaped(&[3, 2]).unwrap();
        assert_eq!(u.at(&[2, 1]), 5.0);
        assert!(t.reshaped(&[4, 2]).is_err());
    }

    #[test]
    fn strides_are_row_major() {
        assert_eq!(strides_of(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides_of(&[]), Vec::<usize>::new());
    }

    #[test]
    fn erf_matches_reference_values() {
        // Reference: double-precision error function.
        assert!((Scalar::erf(0.5f64) - 0.5204998778130465).abs() < 1e-15);
        assert!((Scalar::erf(1.0f64) - 0.8427007929497149).abs() < 1e-15);
        assert!((Scalar::erf(2.0f64) - 0.9953222650189527).abs() < 1e-15);
        assert!((Scalar::erf(-1.0f64) + 0.8427007929497149).abs() < 1e-15);
    }
}
