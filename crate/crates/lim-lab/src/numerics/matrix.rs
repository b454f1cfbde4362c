//! Row-major dense matrix. Public constructors and operations keep the
//! invariant that every entry is finite.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        let m = Matrix { rows, cols, data };
        m.ensure_finite("from_vec")?;
        Ok(m)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix::from_vec(rows, cols, data)
    }

    /// Single-row matrix from a slice.
    pub fn row_vector(values: &[S]) -> Result<Self> {
        Matrix::from_vec(1, values.len(), values.to_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> S {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: S) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix<S> {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix<S>) -> Result<Matrix<S>> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "add: lhs {}x{}, rhs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Matrix::from_vec(self.rows, self.cols, data)
    }

    pub fn sub(&self, other: &Matrix<S>) -> Result<Matrix<S>> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "sub: lhs {}x{}, rhs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a - b)
            .collect();
        Matrix::from_vec(self.rows, self.cols, data)
    }

    pub fn scale(&self, factor: S) -> Result<Matrix<S>> {
        let data = self.data.iter().map(|&a| a * factor).collect();
        Matrix::from_vec(self.rows, self.cols, data)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|x| {
                let v = x.as_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Euclidean distance between two rows of possibly different matrices.
    pub fn row_distance(&self, r: usize, other: &Matrix<S>, or: usize) -> f64 {
        self.row(r)
            .iter()
            .zip(other.row(or))
            .map(|(&a, &b)| {
                let d = a.as_f64() - b.as_f64();
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn ensure_finite(&self, ctx: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{ctx}: entry ({}, {}) is {v}",
                    i / self.cols.max(1),
                    i % self.cols.max(1)
                )));
            }
        }
        Ok(())
    }

    /// Widen or narrow the element type; used to move between the f32
    /// training precision and the f64 test precision.
    pub fn cast<T: Scalar>(&self) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| T::of(v.as_f64())).collect(),
        }
    }

    pub fn append_digest_bytes(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        for v in &self.data {
            v.append_le_bytes(out);
        }
    }
}

/// Internal kernels, shared by the pure ops and the tape. All loops are
/// fixed-order so results are bit-reproducible.
pub(crate) mod kernel {
    use crate::scalar::Scalar;

    /// c = a(m x k) * b(k x n)
    pub fn matmul_into<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        for ci in c.iter_mut() {
            *ci = S::zero();
        }
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                let brow = &b[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv = *cv + aip * bv;
                }
            }
        }
    }

    /// c += a(m x k) * b(k x n)
    pub fn matmul_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                let brow = &b[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv = *cv + aip * bv;
                }
            }
        }
    }

    /// c = a(m x k) * b(n x k)^T, i.e. c[i][j] = dot(a row i, b row j)
    pub fn matmul_bt_into<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), n * k);
        debug_assert_eq!(c.len(), m * n);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                let mut acc = S::zero();
                for (&av, &bv) in arow.iter().zip(brow) {
                    acc = acc + av * bv;
                }
                c[i * n + j] = acc;
            }
        }
    }

    /// c += a(m x k) * b(n x k)^T
    pub fn matmul_bt_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                let mut acc = S::zero();
                for (&av, &bv) in arow.iter().zip(brow) {
                    acc = acc + av * bv;
                }
                c[i * n + j] = c[i * n + j] + acc;
            }
        }
    }

    /// c += a(m x k)^T * b(m x n), i.e. c is k x n
    pub fn matmul_at_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), m * n);
        debug_assert_eq!(c.len(), k * n);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let brow = &b[i * n..(i + 1) * n];
            for (p, &ap) in arow.iter().enumerate() {
                let crow = &mut c[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv = *cv + ap * bv;
                }
            }
        }
    }

    /// Row-wise softmax with max subtraction, in place.
    pub fn softmax_rows_into<S: Scalar>(x: &[S], out: &mut [S], rows: usize, cols: usize) {
        for r in 0..rows {
            let xr = &x[r * cols..(r + 1) * cols];
            let or = &mut out[r * cols..(r + 1) * cols];
            let mut mx = xr[0];
            for &v in xr.iter() {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = S::zero();
            for (o, &v) in or.iter_mut().zip(xr) {
                let e = (v - mx).exp();
                *o = e;
                sum = sum + e;
            }
            for o in or.iter_mut() {
                *o = *o / sum;
            }
        }
    }

    /// GELU, tanh form.
    pub fn gelu_scalar<S: Scalar>(x: S) -> S {
        let c = S::of(0.7978845608028654); // sqrt(2/pi)
        let k = S::of(0.044715);
        let half = S::of(0.5);
        let u = c * (x + k * x * x * x);
        half * x * (S::one() + u.tanh())
    }

    pub fn gelu_derivative<S: Scalar>(x: S) -> S {
        let c = S::of(0.7978845608028654);
        let k = S::of(0.044715);
        let half = S::of(0.5);
        let three = S::of(3.0);
        let u = c * (x + k * x * x * x);
        let t = u.tanh();
        let sech2 = S::one() - t * t;
        half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * k * x * x)
    }

    /// y = (x - mean) / sqrt(var + eps) * gamma + beta, per row.
    /// Also writes the normalized values and inverse stddev when requested,
    /// which the backward pass reuses.
    pub fn layer_norm_into<S: Scalar>(
        x: &[S],
        gamma: &[S],
        beta: &[S],
        eps: S,
        out: &mut [S],
        rows: usize,
        cols: usize,
    ) {
        let n = S::of(cols as f64);
        for r in 0..rows {
            let xr = &x[r * cols..(r + 1) * cols];
            let mut mean = S::zero();
            for &v in xr {
                mean = mean + v;
            }
            mean = mean / n;
            let mut var = S::zero();
            for &v in xr {
                let d = v - mean;
                var = var + d * d;
            }
            var = var / n;
            let inv_std = S::one() / (var + eps).sqrt();
            let or = &mut out[r * cols..(r + 1) * cols];
            for c in 0..cols {
                let xhat = (xr[c] - mean) * inv_std;
                or[c] = xhat * gamma[c] + beta[c];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        let r = Matrix::<f64>::from_vec(2, 3, vec![0.0; 5]);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn from_vec_rejects_nan() {
        let r = Matrix::from_vec(1, 2, vec![1.0, f64::NAN]);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn add_shape_error_names_both_shapes() {
        let a = Matrix::<f64>::zeros(2, 3);
        let b = Matrix::<f64>::zeros(3, 2);
        let err = a.add(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("3x2"), "{msg}");
    }

    #[test]
    fn transpose_roundtrip() {
        let a = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(a.transpose().transpose(), a);
        assert_eq!(a.transpose().get(2, 1), 6.0);
    }

    #[test]
    fn cast_widens_exactly() {
        let a = Matrix::from_vec(1, 3, vec![1.5f32, -0.25, 3.0]).unwrap();
        let b: Matrix<f64> = a.cast();
        assert_eq!(b.data(), &[1.5, -0.25, 3.0]);
    }
}
