//! Pure (tape-free) numeric operations. The tape records calls into the same
//! kernels, so taped and untaped forward passes agree bit for bit.

use crate::error::{Error, Result};
use crate::numerics::matrix::kernel;
use crate::numerics::Matrix;
use crate::scalar::Scalar;

pub fn matmul<S: Scalar>(a: &Matrix<S>, b: &Matrix<S>) -> Result<Matrix<S>> {
    if a.cols() != b.rows() {
        return Err(Error::Shape(format!(
            "matmul: lhs {}x{}, rhs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let mut out = Matrix::zeros(a.rows(), b.cols());
    kernel::matmul_into(a.data(), b.data(), out.data_mut(), a.rows(), a.cols(), b.cols());
    out.ensure_finite("matmul")?;
    Ok(out)
}

/// Row-wise softmax with max subtraction; each row sums to one.
pub fn softmax_rows<S: Scalar>(x: &Matrix<S>) -> Result<Matrix<S>> {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    kernel::softmax_rows_into(x.data(), out.data_mut(), x.rows(), x.cols());
    out.ensure_finite("softmax_rows")?;
    Ok(out)
}

/// Per-row layer normalization with learnable scale and shift.
pub fn layer_norm<S: Scalar>(
    x: &Matrix<S>,
    gamma: &[S],
    beta: &[S],
    eps: S,
) -> Result<Matrix<S>> {
    if gamma.len() != x.cols() || beta.len() != x.cols() {
        return Err(Error::Shape(format!(
            "layer_norm: input {}x{}, gamma {}, beta {}",
            x.rows(),
            x.cols(),
            gamma.len(),
            beta.len()
        )));
    }
    let mut out = Matrix::zeros(x.rows(), x.cols());
    kernel::layer_norm_into(x.data(), gamma, beta, eps, out.data_mut(), x.rows(), x.cols());
    out.ensure_finite("layer_norm")?;
    Ok(out)
}

pub fn gelu<S: Scalar>(x: &Matrix<S>) -> Result<Matrix<S>> {
    let data = x.data().iter().map(|&v| kernel::gelu_scalar(v)).collect();
    Matrix::from_vec(x.rows(), x.cols(), data)
}

/// Multi-head scaled dot-product attention without projections:
/// the inputs are split into `heads` column blocks, each block runs
/// softmax(Q Kᵀ / sqrt(dim/heads)) V, and the blocks are concatenated back.
pub fn scaled_dot_attention<S: Scalar>(
    q: &Matrix<S>,
    k: &Matrix<S>,
    v: &Matrix<S>,
    heads: usize,
) -> Result<Matrix<S>> {
    let dim = q.cols();
    if k.cols() != dim || v.cols() != dim {
        return Err(Error::Shape(format!(
            "attention: q {}x{}, k {}x{}, v {}x{}",
            q.rows(),
            q.cols(),
            k.rows(),
            k.cols(),
            v.rows(),
            v.cols()
        )));
    }
    if k.rows() != v.rows() {
        return Err(Error::Shape(format!(
            "attention: k has {} rows, v has {}",
            k.rows(),
            v.rows()
        )));
    }
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!(
            "attention: dim {dim} not divisible into {heads} heads"
        )));
    }
    let dh = dim / heads;
    let scale = S::one() / S::of((dh as f64).sqrt());
    let tq = q.rows();
    let tk = k.rows();
    let mut out = Matrix::zeros(tq, dim);
    let mut qh = vec![S::zero(); tq * dh];
    let mut kh = vec![S::zero(); tk * dh];
    let mut vh = vec![S::zero(); tk * dh];
    let mut scores = vec![S::zero(); tq * tk];
    let mut probs = vec![S::zero(); tq * tk];
    let mut oh = vec![S::zero(); tq * dh];
    for h in 0..heads {
        let c0 = h * dh;
        copy_cols(q.data(), &mut qh, tq, dim, c0, dh);
        copy_cols(k.data(), &mut kh, tk, dim, c0, dh);
        copy_cols(v.data(), &mut vh, tk, dim, c0, dh);
        kernel::matmul_bt_into(&qh, &kh, &mut scores, tq, dh, tk);
        for s in scores.iter_mut() {
            *s = *s * scale;
        }
        kernel::softmax_rows_into(&scores, &mut probs, tq, tk);
        kernel::matmul_into(&probs, &vh, &mut oh, tq, tk, dh);
        paste_cols(&oh, out.data_mut(), tq, dim, c0, dh);
    }
    out.ensure_finite("scaled_dot_attention")?;
    Ok(out)
}

fn copy_cols<S: Scalar>(src: &[S], dst: &mut [S], rows: usize, cols: usize, c0: usize, width: usize) {
    for r in 0..rows {
        dst[r * width..(r + 1) * width]
            .copy_from_slice(&src[r * cols + c0..r * cols + c0 + width]);
    }
}

fn paste_cols<S: Scalar>(src: &[S], dst: &mut [S], rows: usize, cols: usize, c0: usize, width: usize) {
    for r in 0..rows {
        dst[r * cols + c0..r * cols + c0 + width]
            .copy_from_slice(&src[r * width..(r + 1) * width]);
    }
}
