//! Fixed sinusoidal position table.

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

/// Position table with `table[pos][2i] = sin(pos / 10000^(2i/dim))` and
/// `table[pos][2i+1] = cos` of the same angle. One table is built at the
/// maximum length a model needs and sliced per sequence.
#[derive(Clone, Debug)]
pub struct SinusoidalTable<S> {
    table: Matrix<S>,
}

impl<S: Scalar> SinusoidalTable<S> {
    pub fn new(max_len: usize, dim: usize) -> Result<Self> {
        if max_len == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "sinusoidal table needs positive dimensions, got {max_len}x{dim}"
            )));
        }
        let table = Matrix::from_fn(max_len, dim, |pos, col| {
            let i = (col / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / dim as f64);
            S::of(if col % 2 == 0 { angle.sin() } else { angle.cos() })
        })?;
        Ok(SinusoidalTable { table })
    }

    pub fn max_len(&self) -> usize {
        self.table.rows()
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    /// First `len` rows as a standalone matrix.
    pub fn slice(&self, len: usize) -> Result<Matrix<S>> {
        if len > self.table.rows() {
            return Err(Error::Input(format!(
                "position table holds {} rows, requested {len}",
                self.table.rows()
            )));
        }
        let mut data = Vec::with_capacity(len * self.dim());
        for r in 0..len {
            data.extend_from_slice(self.table.row(r));
        }
        Matrix::from_vec(len, self.dim(), data)
    }
}
