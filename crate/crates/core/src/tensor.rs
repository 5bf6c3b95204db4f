//! Dense row-major tensors and the handful of kernels the network needs.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point type the network can run in. Implemented for `f32` and `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    fn to_f32_lossy(self) -> f32 {
        self.to_f32().unwrap_or(f32::NAN)
    }

    fn from_f32(x: f32) -> Self {
        Self::lit(x as f64)
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); len],
        }
    }

    /// Panics if `data.len()` does not match the shape.
    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(&other.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all trailing dimensions (row width of the leading axis).
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn fill(&mut self, v: F) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| G::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap_or(G::nan()))
                .collect(),
        }
    }

    pub fn max_abs(&self) -> F {
        self.data.iter().fold(F::zero(), |m, &x| m.max(x.abs()))
    }

    /// `out = self · x` for a 2-D matrix.
    pub fn matvec(&self, x: &[F], out: &mut [F]) {
        let c = self.cols();
        debug_assert_eq!(x.len(), c);
        debug_assert_eq!(out.len(), self.rows());
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(c)) {
            *o = dot(row, x);
        }
    }

    pub fn mv(&self, x: &[F]) -> Vec<F> {
        let mut out = vec![F::zero(); self.rows()];
        self.matvec(x, &mut out);
        out
    }

    /// `out += selfᵀ · dy`.
    pub fn matvec_t_acc(&self, dy: &[F], out: &mut [F]) {
        let c = self.cols();
        debug_assert_eq!(dy.len(), self.rows());
        debug_assert_eq!(out.len(), c);
        for (&g, row) in dy.iter().zip(self.data.chunks_exact(c)) {
            if g == F::zero() {
                continue;
            }
            axpy(g, row, out);
        }
    }

    /// `self += dy · xᵀ`.
    pub fn outer_acc(&mut self, dy: &[F], x: &[F]) {
        let c = self.cols();
        debug_assert_eq!(dy.len(), self.rows());
        debug_assert_eq!(x.len(), c);
        for (&g, row) in dy.iter().zip(self.data.chunks_exact_mut(c)) {
            if g == F::zero() {
                continue;
            }
            axpy(g, x, row);
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: F) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }
}

pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `y += a · x`
pub fn axpy<F: Real>(a: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn add_into<F: Real>(x: &[F], y: &mut [F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += xi;
    }
}

pub fn norm<F: Real>(a: &[F]) -> F {
    dot(a, a).sqrt()
}

pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Numerically stable softmax.
pub fn softmax<F: Real>(logits: &[F]) -> Vec<F> {
    let max = logits.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
    let mut out: Vec<F> = logits.iter().map(|&x| (x - max).exp()).collect();
    let z: F = out.iter().copied().sum();
    out.iter_mut().for_each(|x| *x = *x / z);
    out
}

/// Gradient of a softmax: given `p = softmax(x)` and `dL/dp`, returns `dL/dx`.
pub fn softmax_backward<F: Real>(p: &[F], dp: &[F]) -> Vec<F> {
    let s = dot(p, dp);
    p.iter().zip(dp).map(|(&pi, &gi)| pi * (gi - s)).collect()
}
