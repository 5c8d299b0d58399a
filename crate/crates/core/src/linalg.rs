//! Strided matrix views over flat buffers and a checked GEMM entry point.

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a, T> MatRef<'a, T> {
    /// Row-major `rows x cols` view of the front of `data`.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "matrix view exceeds buffer");
        MatRef {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs as usize + (self.cols - 1) * self.cs as usize + 1
        }
    }
}

pub struct MatMut<'a, T> {
    data: &'a mut [T],
    rows: usize,
    cols: usize,
}

impl<'a, T> MatMut<'a, T> {
    pub fn new(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "matrix view exceeds buffer");
        MatMut { data, rows, cols }
    }
}

/// `c = alpha * a * b + beta * c`. When `beta` is zero `c` is overwritten.
pub fn gemm<T: Float>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: MatMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    assert_eq!(c.rows, a.rows, "gemm output rows");
    assert_eq!(c.cols, b.cols, "gemm output cols");
    assert!(a.span() <= a.data.len() && b.span() <= b.data.len());
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for x in c.data[..m * n].iter_mut() {
            *x = if beta == T::zero() { T::zero() } else { *x * beta };
        }
        return;
    }
    // SAFETY: the spans of all three views were checked against their buffers.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Product of two rank-2 tensors.
pub fn matmul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = dims2(a, "matmul")?;
    let (k2, n) = dims2(b, "matmul")?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner dimensions differ: lhs cols {k} vs rhs rows {k2}"),
        ));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(
        T::one(),
        MatRef::new(a.data(), m, k),
        MatRef::new(b.data(), k, n),
        T::zero(),
        MatMut::new(&mut out, m, n),
    );
    Tensor::new(&[m, n], out)
}

/// Cotangents of `matmul(a, b)`: `(dy * b^T, a^T * dy)`.
pub fn matmul_backward<T: Float>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (m, k) = dims2(a, "matmul_backward")?;
    let (_, n) = dims2(b, "matmul_backward")?;
    if dy.shape() != [m, n] {
        return Err(Error::shape(
            "matmul_backward",
            format!("cotangent shape {:?}, expected [{m}, {n}]", dy.shape()),
        ));
    }
    let mut da = vec![T::zero(); m * k];
    gemm(
        T::one(),
        MatRef::new(dy.data(), m, n),
        MatRef::new(b.data(), k, n).t(),
        T::zero(),
        MatMut::new(&mut da, m, k),
    );
    let mut db = vec![T::zero(); k * n];
    gemm(
        T::one(),
        MatRef::new(a.data(), m, k).t(),
        MatRef::new(dy.data(), m, n),
        T::zero(),
        MatMut::new(&mut db, k, n),
    );
    Ok((Tensor::new(&[m, k], da)?, Tensor::new(&[k, n], db)?))
}

fn dims2<T: Float>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::shape(
            op,
            format!("expected a rank-2 tensor, got shape {:?}", t.shape()),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(&[3, 1], vec![1.0, 0.0, -1.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[-2.0, -2.0]);
    }

    #[test]
    fn transposed_views() {
        // a^T * a for a = [[1,2],[3,4]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let mut c = [0.0f64; 4];
        gemm(
            1.0,
            MatRef::new(&a, 2, 2).t(),
            MatRef::new(&a, 2, 2),
            0.0,
            MatMut::new(&mut c, 2, 2),
        );
        assert_eq!(c, [10.0, 14.0, 14.0, 20.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::ShapeMismatch { .. })));
    }
}
