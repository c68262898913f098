//! Minimal dense linear algebra over `f32`/`f64`.
//!
//! Model math is generic over [`Real`] so the exact same forward and
//! backward code can run in 32-bit for production and in 64-bit for
//! numerical verification (e.g. finite-difference gradient checks).

use std::cmp::Ordering;

/// Scalar type for model parameters and activations.
pub trait Real: num_traits::Float + std::fmt::Debug + Default + Send + Sync + 'static {
    fn total_order(&self, other: &Self) -> Ordering;
    fn from_f64(x: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Real for f32 {
    fn total_order(&self, other: &Self) -> Ordering {
        self.total_cmp(other)
    }
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn total_order(&self, other: &Self) -> Ordering {
        self.total_cmp(other)
    }
    fn from_f64(x: f64) -> Self {
        x
    }
    fn into_f64(self) -> f64 {
        self
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Real> Matrix<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub(crate) fn data_vec_mut(&mut self) -> &mut Vec<F> {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `y = W x`
    pub fn matvec(&self, x: &[F]) -> Vec<F> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `x = Wᵀ y` (gradient flow through `matvec`).
    pub fn matvec_transposed(&self, y: &[F]) -> Vec<F> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![F::zero(); self.cols];
        for (r, &yr) in y.iter().enumerate() {
            add_scaled(&mut out, self.row(r), yr);
        }
        out
    }

    /// Rank-one accumulation `W += y xᵀ`.
    pub fn add_outer(&mut self, y: &[F], x: &[F]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        for (r, &yr) in y.iter().enumerate() {
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            add_scaled(row, x, yr);
        }
    }
}

pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

/// `a += b`
pub fn add_assign<F: Real>(a: &mut [F], b: &[F]) {
    debug_assert_eq!(a.len(), b.len());
    for (x, &y) in a.iter_mut().zip(b) {
        *x = *x + y;
    }
}

/// `a += s · b`
pub fn add_scaled<F: Real>(a: &mut [F], b: &[F], s: F) {
    debug_assert_eq!(a.len(), b.len());
    for (x, &y) in a.iter_mut().zip(b) {
        *x = *x + s * y;
    }
}

/// `a *= s`
pub fn scale<F: Real>(a: &mut [F], s: F) {
    for x in a.iter_mut() {
        *x = *x * s;
    }
}

/// Exponential linear unit: identity for positive inputs, `exp(x) − 1`
/// below zero. Continuous, with derivative 1 at the origin.
pub fn elu<F: Real>(x: F) -> F {
    if x > F::zero() {
        x
    } else {
        x.exp() - F::one()
    }
}

/// Derivative of [`elu`] recovered from its *output*: 1 where the output
/// is positive, `output + 1` (= `exp(input)`) elsewhere.
pub fn elu_deriv_from_output<F: Real>(y: F) -> F {
    if y > F::zero() {
        F::one()
    } else {
        y + F::one()
    }
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_and_transpose_agree_with_hand_math() {
        // W = [[1,2,3],[4,5,6]]
        let mut w = Matrix::<f64>::zeros(2, 3);
        w.data_mut().copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(w.matvec(&[1.0, 0.0, -1.0]), vec![-2.0, -2.0]);
        assert_eq!(w.matvec_transposed(&[1.0, 1.0]), vec![5.0, 7.0, 9.0]);
    }

    #[test]
    fn add_outer_accumulates_rank_one() {
        let mut w = Matrix::<f64>::zeros(2, 2);
        w.add_outer(&[1.0, 2.0], &[3.0, 4.0]);
        w.add_outer(&[1.0, 0.0], &[1.0, 1.0]);
        assert_eq!(w.data(), &[4.0, 5.0, 6.0, 8.0]);
    }

    #[test]
    fn elu_matches_reference_values() {
        assert_eq!(elu(2.0f64), 2.0);
        assert_eq!(elu(0.0f64), 0.0);
        let v = elu(-1.0f64);
        assert!((v - (-0.632_120_558_828_557_7)).abs() < 1e-15, "elu(-1) = {v}");
    }

    #[test]
    fn elu_derivative_is_continuous_at_zero() {
        assert_eq!(elu_deriv_from_output(elu(0.0f64)), 1.0);
        assert_eq!(elu_deriv_from_output(elu(1e-12f64)), 1.0);
        let below = elu_deriv_from_output(elu(-1e-12f64));
        assert!((below - 1.0).abs() < 1e-11);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(100.0f64) <= 1.0);
        assert!(sigmoid(-100.0f64) >= 0.0);
        assert!((sigmoid(3.0f64) + sigmoid(-3.0f64) - 1.0).abs() < 1e-15);
    }
}
