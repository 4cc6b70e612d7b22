//! Minimal n-dimensional tensor engine with reverse-mode automatic
//! differentiation.
//!
//! Values are plain [`Tensor`]s; differentiable computations are recorded on
//! a [`Tape`]. Training runs in f32; the same code instantiated at f64 backs
//! the finite-difference gradient checks. A tape is built per forward pass:
//! leaves are inserted for inputs and parameters, ops append nodes,
//! [`Tape::backward`] sweeps once in reverse topological order, and leaf
//! gradients accumulate additively across fan-out.

mod adam;
mod checkpoint;
mod composites;
mod gradcheck;
mod kernels;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState, Param};
pub use checkpoint::{load_state, save_state, CheckpointError};
pub use composites::{lstm_cell, multi_head_attention, MhaDropout, MhaWeights};
pub use gradcheck::{gradcheck, GradCheckConfig, GradCheckReport};
pub use tape::{BatchStats, Id, Tape};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("{op}: {details}")]
    Dimension { op: &'static str, details: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{op} expects a scalar root, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
}

/// Train/eval switch for batch normalization and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Element type of tensors: f32 for training, f64 for verification.
pub trait Scalar:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
    /// General matrix multiply C = alpha*A*B + beta*C with explicit strides.
    ///
    /// # Safety
    /// Pointers must reference buffers valid for the given dimensions and
    /// strides; see `matrixmultiply` for the exact contract.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Dense n-dimensional value, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Dimension {
                op: "Tensor::new",
                details: format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![T::ZERO; shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..numel).map(&mut f).collect() }
    }

    /// Normal samples with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl rand::Rng) -> Self {
        use rand_distr::Distribution;
        let dist = rand_distr::Normal::new(0.0f64, std).expect("valid std");
        Self::from_fn(shape, |_| T::from_f64(dist.sample(rng)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn item(&self) -> Result<T, TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar { op: "item", shape: self.shape.clone() });
        }
        Ok(self.data[0])
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => Err(TensorError::Dimension {
                op,
                details: format!("expected 2 dims, got {:?}", self.shape),
            }),
        }
    }

    pub(crate) fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize), TensorError> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(TensorError::Dimension {
                op,
                details: format!("expected 3 dims, got {:?}", self.shape),
            }),
        }
    }

    pub(crate) fn dims4(
        &self,
        op: &'static str,
    ) -> Result<(usize, usize, usize, usize), TensorError> {
        match self.shape[..] {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(TensorError::Dimension {
                op,
                details: format!("expected 4 dims, got {:?}", self.shape),
            }),
        }
    }
}

/// Sinusoidal positional encoding: PE(pos, 2i) = sin(pos / 10000^(2i/d)),
/// PE(pos, 2i+1) = cos of the same argument. Shape [len, d_model].
pub fn positional_encoding<T: Scalar>(len: usize, d_model: usize) -> Tensor<T> {
    assert!(len >= 1 && d_model >= 1, "positional encoding needs positive dims");
    let mut data = Vec::with_capacity(len * d_model);
    for pos in 0..len {
        for k in 0..d_model {
            let i = k / 2;
            let denom = 10_000.0f64.powf(2.0 * i as f64 / d_model as f64);
            let arg = pos as f64 / denom;
            data.push(T::from_f64(if k % 2 == 0 { arg.sin() } else { arg.cos() }));
        }
    }
    Tensor { shape: vec![len, d_model], data }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positional_encoding_reference_properties() {
        let pe: Tensor<f64> = positional_encoding(12, 16);
        assert_eq!(pe.shape(), &[12, 16]);
        // Position 0: even columns sin(0) = 0, odd columns cos(0) = 1.
        for k in 0..16 {
            let v = pe.data()[k];
            if k % 2 == 0 {
                assert_eq!(v, 0.0);
            } else {
                assert_eq!(v, 1.0);
            }
        }
        // Column 0 is sin(pos) at frequency 1.
        for pos in 0..12 {
            assert_eq!(pe.data()[pos * 16], (pos as f64).sin());
        }
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn tensor_shape_validation() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::scalar(4.0);
        assert_eq!(t.item().unwrap(), 4.0);
    }
}
