//! Dense row-major tensors and the scalar abstraction used to run the same
//! graph in f32 (training) or f64 (gradient-check mode).

pub mod kernels;
pub mod tape;

use crate::error::{shape_err, Result};

/// Element type of all tensors. Training runs in f32; gradient checks run the
/// identical code in f64.
pub trait Scalar:
    Copy
    + Send
    + Sync
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::MulAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(n: usize) -> Self {
        Self::from_f64(n as f64)
    }

    /// exp tuned for throughput; f32 uses a polynomial (~1e-7 rel), f64 libm.
    fn fast_exp(self) -> Self;
    /// ln with the same precision policy as [`Scalar::fast_exp`].
    fn fast_ln(self) -> Self;
    fn fast_tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn maxv(self, other: Self) -> Self;
    fn minv(self, other: Self) -> Self;
    fn is_finite_v(self) -> bool;
    fn mul_add_v(self, a: Self, b: Self) -> Self;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn fast_exp(self) -> Self {
        kernels::exp_f32(self)
    }
    #[inline(always)]
    fn fast_ln(self) -> Self {
        kernels::ln_f32(self)
    }
    #[inline(always)]
    fn fast_tanh(self) -> Self {
        kernels::tanh_f32(self)
    }
    #[inline(always)]
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    #[inline(always)]
    fn abs(self) -> Self {
        f32::abs(self)
    }
    #[inline(always)]
    fn powi(self, n: i32) -> Self {
        f32::powi(self, n)
    }
    #[inline(always)]
    fn maxv(self, other: Self) -> Self {
        f32::max(self, other)
    }
    #[inline(always)]
    fn minv(self, other: Self) -> Self {
        f32::min(self, other)
    }
    #[inline(always)]
    fn is_finite_v(self) -> bool {
        self.is_finite()
    }
    #[inline(always)]
    fn mul_add_v(self, a: Self, b: Self) -> Self {
        f32::mul_add(self, a, b)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn fast_exp(self) -> Self {
        f64::exp(self)
    }
    #[inline(always)]
    fn fast_ln(self) -> Self {
        f64::ln(self)
    }
    #[inline(always)]
    fn fast_tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline(always)]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline(always)]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    #[inline(always)]
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
    #[inline(always)]
    fn maxv(self, other: Self) -> Self {
        f64::max(self, other)
    }
    #[inline(always)]
    fn minv(self, other: Self) -> Self {
        f64::min(self, other)
    }
    #[inline(always)]
    fn is_finite_v(self) -> bool {
        self.is_finite()
    }
    #[inline(always)]
    fn mul_add_v(self, a: Self, b: Self) -> Self {
        f64::mul_add(self, a, b)
    }
}

/// Dense n-dimensional array, row-major. `grad` is populated for leaves after
/// a backward pass; intermediate results keep it `None`.
#[derive(Debug, Clone)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub grad: Option<Vec<T>>,
    pub requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(shape_err!(
                "shape {:?} does not describe a buffer of {} elements",
                shape,
                data.len()
            ));
        }
        Ok(Tensor { shape, data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![T::ZERO; n], grad: None, requires_grad: false }
    }

    pub fn filled(shape: Vec<usize>, v: T) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![v; n], grad: None, requires_grad: false }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![1], data: vec![v], grad: None, requires_grad: false }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let n = rows.first().map(|r| r.len()).unwrap_or(0);
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(shape_err!("ragged or empty row list"));
        }
        let mut data = Vec::with_capacity(rows.len() * n);
        for r in rows {
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), n], data)
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

    /// The two dimensions of a matrix, erroring on other ranks.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(shape_err!("expected rank-2 tensor, got {:?}", self.shape)),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [p, m, n] => Ok((p, m, n)),
            _ => Err(shape_err!("expected rank-3 tensor, got {:?}", self.shape)),
        }
    }

    /// Size of the trailing axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let n = self.last_dim();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite_v())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
            requires_grad: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0f32; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0f32; 6]).is_ok());
    }

    #[test]
    fn fast_exp_ln_accuracy_f32() {
        // polynomial exp/ln must stay within ~1e-6 relative of libm over the
        // range softmax/cross-entropy actually use
        let mut x = -87.0f32;
        while x < 20.0 {
            let got = x.fast_exp() as f64;
            let want = (x as f64).exp();
            let rel = ((got - want) / want).abs();
            assert!(rel < 2e-6, "exp({x}) rel err {rel}");
            x += 0.0137;
        }
        let mut y = 1e-12f32;
        while y < 1e6 {
            let got = y.fast_ln() as f64;
            let want = (y as f64).ln();
            let err = (got - want).abs() / want.abs().max(1.0);
            assert!(err < 2e-6, "ln({y}) err {err}");
            y *= 1.7;
        }
    }

    #[test]
    fn fast_tanh_accuracy_f32() {
        let mut x = -9.0f32;
        while x < 9.0 {
            let got = x.fast_tanh() as f64;
            let want = (x as f64).tanh();
            assert!((got - want).abs() < 3e-6, "tanh({x})");
            x += 0.013;
        }
        assert_eq!(30.0f32.fast_tanh(), 1.0);
        assert_eq!((-30.0f32).fast_tanh(), -1.0);
    }
}
