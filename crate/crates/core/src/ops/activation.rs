use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Exact GELU, `x * Phi(x)`, using the error function rather than the tanh fit.
pub fn gelu_scalar<T: Float>(x: T) -> T {
    let half = T::of(0.5);
    x * half * (T::one() + (x * T::of(FRAC_1_SQRT_2)).erf())
}

/// `d/dx [x * Phi(x)] = Phi(x) + x * phi(x)`.
pub fn gelu_grad_scalar<T: Float>(x: T) -> T {
    let cdf = T::of(0.5) * (T::one() + (x * T::of(FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::of(0.5)).exp() * T::of(1.0 / (2.0 * PI).sqrt());
    cdf + x * pdf
}

pub fn gelu<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

pub fn gelu_backward<T: Float>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(dy, "gelu_backward", |x, d| d * gelu_grad_scalar(x))
}

pub fn sigmoid_scalar<T: Float>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Backward through the sigmoid given its *output* `y`.
pub fn sigmoid_backward<T: Float>(y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    y.zip_map(dy, "sigmoid_backward", |y, d| d * y * (T::one() - y))
}

/// `(outer, n, inner)` factorization of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(
            "softmax",
            format!("axis {axis} out of range for rank {}", shape.len()),
        ));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

/// Numerically stable softmax along `axis` (max-subtracted).
pub fn softmax<T: Float>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, n, inner) = split_axis(x.shape(), axis)?;
    let mut y = x.data().to_vec();
    let mut mx = vec![T::zero(); inner];
    let mut sum = vec![T::zero(); inner];
    for o in 0..outer {
        let block = &mut y[o * n * inner..(o + 1) * n * inner];
        mx.fill(T::neg_infinity());
        for row in block.chunks_exact(inner) {
            for (m, &v) in mx.iter_mut().zip(row) {
                *m = m.max(v);
            }
        }
        sum.fill(T::zero());
        for row in block.chunks_exact_mut(inner) {
            for ((v, &m), s) in row.iter_mut().zip(&mx).zip(sum.iter_mut()) {
                *v = (*v - m).exp();
                *s += *v;
            }
        }
        for row in block.chunks_exact_mut(inner) {
            for (v, &s) in row.iter_mut().zip(&sum) {
                *v /= s;
            }
        }
    }
    Tensor::new(x.shape(), y)
}

/// Backward through softmax given its output `y`: `y * (dy - <dy, y>)`.
pub fn softmax_backward<T: Float>(y: &Tensor<T>, dy: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    y.expect_same_shape(dy, "softmax_backward")?;
    let (outer, n, inner) = split_axis(y.shape(), axis)?;
    let mut dx = vec![T::zero(); y.len()];
    let mut dots = vec![T::zero(); inner];
    for o in 0..outer {
        let base = o * n * inner;
        dots.fill(T::zero());
        for k in 0..n {
            let off = base + k * inner;
            for (i, d) in dots.iter_mut().enumerate() {
                *d += y.data()[off + i] * dy.data()[off + i];
            }
        }
        for k in 0..n {
            let off = base + k * inner;
            for (i, &d) in dots.iter().enumerate() {
                dx[off + i] = y.data()[off + i] * (dy.data()[off + i] - d);
            }
        }
    }
    Tensor::new(y.shape(), dx)
}

/// In-place softmax of each contiguous row of length `n`.
pub(crate) fn softmax_rows<T: Float>(data: &mut [T], n: usize, scale: T) {
    for row in data.chunks_exact_mut(n) {
        let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = ((*v - mx) * scale).exp();
            s += *v;
        }
        let inv = s.recip();
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert!((gelu_scalar(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-15);
        assert!((gelu_scalar(10.0f64) - 10.0).abs() < 1e-12);
        assert!(gelu_scalar(-10.0f64).abs() < 1e-12);
        assert!((gelu_grad_scalar(0.0f64) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_closed_forms() {
        let x = Tensor::<f64>::new(&[2], vec![0.0, 2f64.ln()]).unwrap();
        let y = softmax(&x, 0).unwrap();
        assert!((y.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((y.data()[1] - 2.0 / 3.0).abs() < 1e-15);
        let u = softmax(&Tensor::<f64>::full(&[4], 2.5), 0).unwrap();
        assert!(u.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn softmax_middle_axis_sums_to_one() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 2, 2], |i| (i as f64 * 0.37).sin() * 4.0);
        let y = softmax(&x, 1).unwrap();
        for b in 0..2 {
            for s in 0..4 {
                let total: f64 = (0..3).map(|c| y.data()[(b * 3 + c) * 4 + s]).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
        let shifted = softmax(&x.map(|v| v + 100.0), 1).unwrap();
        for (a, b) in y.data().iter().zip(shifted.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(softmax(&x, 4).is_err());
    }

    #[test]
    fn sigmoid_extremes() {
        assert_eq!(sigmoid_scalar(0.0f64), 0.5);
        let hi = sigmoid_scalar(800.0f64);
        let lo = sigmoid_scalar(-800.0f64);
        assert!(hi.is_finite() && lo.is_finite() && hi <= 1.0 && lo >= 0.0);
    }
}
