//! Reverse-mode differentiation tape.
//!
//! A `Tape` owns an arena of value buffers and a record of the operations
//! that produced them. `backward` seeds one or more scalar outputs and
//! replays the record in exact reverse order, accumulating gradients
//! additively into every buffer. A tape is single-use: one forward pass,
//! at most one backward pass.
//!
//! Forward computation goes through the same kernels as the pure functions
//! in [`crate::numerics`], so a taped forward pass is bit-identical to an
//! untaped one.

use crate::error::{Error, Result};
use crate::numerics::matrix::kernel;
use crate::numerics::Matrix;
use crate::scalar::Scalar;

pub type BufId = usize;

struct Buf<S> {
    value: Matrix<S>,
    param: bool,
}

enum Op<S> {
    Matmul { a: BufId, b: BufId, out: BufId },
    /// out = a * b^T
    MatmulBt { a: BufId, b: BufId, out: BufId },
    Add { a: BufId, b: BufId, out: BufId },
    Scale { x: BufId, factor: S, out: BufId },
    LayerNorm { x: BufId, gamma: BufId, beta: BufId, eps: S, out: BufId },
    SoftmaxRows { x: BufId, out: BufId },
    Gelu { x: BufId, out: BufId },
    EmbedRows { table: BufId, ids: Vec<usize>, out: BufId },
    ConcatRows { parts: Vec<BufId>, out: BufId },
    SliceCols { x: BufId, c0: usize, width: usize, out: BufId },
    ConcatCols { parts: Vec<BufId>, out: BufId },
    MeanRows { x: BufId, out: BufId },
    /// Negative log-likelihood of `target` under softmax(logits); 1x1 output.
    NllLoss { logits: BufId, target: usize, out: BufId },
    /// Mean squared difference over all entries; 1x1 output.
    MseLoss { pred: BufId, target: BufId, out: BufId },
}

pub struct Tape<S: Scalar> {
    bufs: Vec<Buf<S>>,
    ops: Vec<Op<S>>,
    grads: Option<Vec<Matrix<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { bufs: Vec::new(), ops: Vec::new(), grads: None }
    }

    pub fn op_count(&self) -> usize {
        self.ops.len()
    }

    fn push(&mut self, value: Matrix<S>, param: bool) -> BufId {
        #[cfg(debug_assertions)]
        value.ensure_finite("tape buffer").expect("non-finite tape buffer");
        self.bufs.push(Buf { value, param });
        self.bufs.len() - 1
    }

    /// Register a non-trainable input buffer.
    pub fn constant(&mut self, value: Matrix<S>) -> BufId {
        self.push(value, false)
    }

    /// Register a trainable parameter buffer.
    pub fn param(&mut self, value: Matrix<S>) -> BufId {
        self.push(value, true)
    }

    pub fn value(&self, id: BufId) -> &Matrix<S> {
        &self.bufs[id].value
    }

    pub fn shape(&self, id: BufId) -> (usize, usize) {
        self.bufs[id].value.shape()
    }

    pub fn is_param(&self, id: BufId) -> bool {
        self.bufs[id].param
    }

    /// Gradient accumulated for a buffer. Zero until `backward` has run.
    pub fn grad(&self, id: BufId) -> Matrix<S> {
        let (r, c) = self.shape(id);
        match &self.grads {
            Some(g) => g[id].clone(),
            None => Matrix::zeros(r, c),
        }
    }

    pub fn scalar_value(&self, id: BufId) -> Result<S> {
        let v = &self.bufs[id].value;
        if v.shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "expected 1x1 scalar buffer, got {}x{}",
                v.rows(),
                v.cols()
            )));
        }
        Ok(v.get(0, 0))
    }

    pub fn matmul(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        if ka != kb {
            return Err(Error::Shape(format!("matmul: lhs {m}x{ka}, rhs {kb}x{n}")));
        }
        let mut out = Matrix::zeros(m, n);
        kernel::matmul_into(
            self.bufs[a].value.data(),
            self.bufs[b].value.data(),
            out.data_mut(),
            m,
            ka,
            n,
        );
        let out = self.push(out, false);
        self.ops.push(Op::Matmul { a, b, out });
        Ok(out)
    }

    /// out = a * b^T, with `a` of shape m x k and `b` of shape n x k.
    pub fn matmul_bt(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let (m, ka) = self.shape(a);
        let (n, kb) = self.shape(b);
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul_bt: lhs {m}x{ka}, rhs transposed {n}x{kb}"
            )));
        }
        let mut out = Matrix::zeros(m, n);
        kernel::matmul_bt_into(
            self.bufs[a].value.data(),
            self.bufs[b].value.data(),
            out.data_mut(),
            m,
            ka,
            n,
        );
        let out = self.push(out, false);
        self.ops.push(Op::MatmulBt { a, b, out });
        Ok(out)
    }

    pub fn add(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        if self.shape(a) != self.shape(b) {
            let (ar, ac) = self.shape(a);
            let (br, bc) = self.shape(b);
            return Err(Error::Shape(format!("add: lhs {ar}x{ac}, rhs {br}x{bc}")));
        }
        let value = self.bufs[a].value.add(&self.bufs[b].value)?;
        let out = self.push(value, false);
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    pub fn scale(&mut self, x: BufId, factor: S) -> Result<BufId> {
        let value = self.bufs[x].value.scale(factor)?;
        let out = self.push(value, false);
        self.ops.push(Op::Scale { x, factor, out });
        Ok(out)
    }

    pub fn layer_norm(&mut self, x: BufId, gamma: BufId, beta: BufId, eps: S) -> Result<BufId> {
        let (rows, cols) = self.shape(x);
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let (gr, gc) = self.shape(id);
            if gr != 1 || gc != cols {
                return Err(Error::Shape(format!(
                    "layer_norm: input {rows}x{cols}, {name} {gr}x{gc}"
                )));
            }
        }
        let mut out = Matrix::zeros(rows, cols);
        kernel::layer_norm_into(
            self.bufs[x].value.data(),
            self.bufs[gamma].value.data(),
            self.bufs[beta].value.data(),
            eps,
            out.data_mut(),
            rows,
            cols,
        );
        let out = self.push(out, false);
        self.ops.push(Op::LayerNorm { x, gamma, beta, eps, out });
        Ok(out)
    }

    pub fn softmax_rows(&mut self, x: BufId) -> Result<BufId> {
        let (rows, cols) = self.shape(x);
        let mut out = Matrix::zeros(rows, cols);
        kernel::softmax_rows_into(self.bufs[x].value.data(), out.data_mut(), rows, cols);
        let out = self.push(out, false);
        self.ops.push(Op::SoftmaxRows { x, out });
        Ok(out)
    }

    pub fn gelu(&mut self, x: BufId) -> Result<BufId> {
        let (rows, cols) = self.shape(x);
        let data = self.bufs[x]
            .value
            .data()
            .iter()
            .map(|&v| kernel::gelu_scalar(v))
            .collect();
        let value = Matrix::from_vec(rows, cols, data)?;
        let out = self.push(value, false);
        self.ops.push(Op::Gelu { x, out });
        Ok(out)
    }

    /// Gather rows of `table` by index.
    pub fn embed_rows(&mut self, table: BufId, ids: &[usize]) -> Result<BufId> {
        let (vocab, dim) = self.shape(table);
        if ids.is_empty() {
            return Err(Error::Input("embed_rows: empty id list".into()));
        }
        for &id in ids {
            if id >= vocab {
                return Err(Error::Input(format!(
                    "embed_rows: id {id} out of vocabulary {vocab}"
                )));
            }
        }
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            data.extend_from_slice(self.bufs[table].value.row(id));
        }
        let value = Matrix::from_vec(ids.len(), dim, data)?;
        let out = self.push(value, false);
        self.ops.push(Op::EmbedRows { table, ids: ids.to_vec(), out });
        Ok(out)
    }

    pub fn concat_rows(&mut self, parts: &[BufId]) -> Result<BufId> {
        if parts.is_empty() {
            return Err(Error::Input("concat_rows: no parts".into()));
        }
        let cols = self.shape(parts[0]).1;
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pc != cols {
                return Err(Error::Shape(format!(
                    "concat_rows: widths differ, {cols} vs {pc}"
                )));
            }
            rows += pr;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.bufs[p].value.data());
        }
        let value = Matrix::from_vec(rows, cols, data)?;
        let out = self.push(value, false);
        self.ops.push(Op::ConcatRows { parts: parts.to_vec(), out });
        Ok(out)
    }

    pub fn slice_cols(&mut self, x: BufId, c0: usize, width: usize) -> Result<BufId> {
        let (rows, cols) = self.shape(x);
        if c0 + width > cols {
            return Err(Error::Shape(format!(
                "slice_cols: [{c0}, {}) out of width {cols}",
                c0 + width
            )));
        }
        let src = self.bufs[x].value.data();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + c0..r * cols + c0 + width]);
        }
        let value = Matrix::from_vec(rows, width, data)?;
        let out = self.push(value, false);
        self.ops.push(Op::SliceCols { x, c0, width, out });
        Ok(out)
    }

    pub fn concat_cols(&mut self, parts: &[BufId]) -> Result<BufId> {
        if parts.is_empty() {
            return Err(Error::Input("concat_cols: no parts".into()));
        }
        let rows = self.shape(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pr != rows {
                return Err(Error::Shape(format!(
                    "concat_cols: heights differ, {rows} vs {pr}"
                )));
            }
            cols += pc;
        }
        let mut out = Matrix::zeros(rows, cols);
        let mut c0 = 0;
        for &p in parts {
            let (_, pc) = self.shape(p);
            let src = self.bufs[p].value.data();
            for r in 0..rows {
                out.data_mut()[r * cols + c0..r * cols + c0 + pc]
                    .copy_from_slice(&src[r * pc..(r + 1) * pc]);
            }
            c0 += pc;
        }
        let out = self.push(out, false);
        self.ops.push(Op::ConcatCols { parts: parts.to_vec(), out });
        Ok(out)
    }

    /// Column-wise mean over rows; T x D becomes 1 x D.
    pub fn mean_rows(&mut self, x: BufId) -> Result<BufId> {
        let (rows, cols) = self.shape(x);
        if rows == 0 {
            return Err(Error::Shape("mean_rows: empty matrix".into()));
        }
        let inv = S::one() / S::of(rows as f64);
        let src = self.bufs[x].value.data();
        let mut data = vec![S::zero(); cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c] = data[c] + src[r * cols + c];
            }
        }
        for v in data.iter_mut() {
            *v = *v * inv;
        }
        let value = Matrix::from_vec(1, cols, data)?;
        let out = self.push(value, false);
        self.ops.push(Op::MeanRows { x, out });
        Ok(out)
    }

    pub fn nll_loss(&mut self, logits: BufId, target: usize) -> Result<BufId> {
        let (rows, cols) = self.shape(logits);
        if rows != 1 {
            return Err(Error::Shape(format!("nll_loss: logits must be 1xC, got {rows}x{cols}")));
        }
        if target >= cols {
            return Err(Error::Input(format!(
                "nll_loss: target {target} out of range for {cols} classes"
            )));
        }
        let row = self.bufs[logits].value.row(0);
        let mut mx = row[0];
        for &v in row {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = S::zero();
        for &v in row {
            sum = sum + (v - mx).exp();
        }
        let loss = mx + sum.ln() - row[target];
        let value = Matrix::from_vec(1, 1, vec![loss])?;
        let out = self.push(value, false);
        self.ops.push(Op::NllLoss { logits, target, out });
        Ok(out)
    }

    pub fn mse_loss(&mut self, pred: BufId, target: BufId) -> Result<BufId> {
        if self.shape(pred) != self.shape(target) {
            let (pr, pc) = self.shape(pred);
            let (tr, tc) = self.shape(target);
            return Err(Error::Shape(format!("mse_loss: pred {pr}x{pc}, target {tr}x{tc}")));
        }
        let (rows, cols) = self.shape(pred);
        let n = S::of((rows * cols) as f64);
        let mut acc = S::zero();
        for (&p, &t) in self.bufs[pred]
            .value
            .data()
            .iter()
            .zip(self.bufs[target].value.data())
        {
            let d = p - t;
            acc = acc + d * d;
        }
        let value = Matrix::from_vec(1, 1, vec![acc / n])?;
        let out = self.push(value, false);
        self.ops.push(Op::MseLoss { pred, target, out });
        Ok(out)
    }

    /// Seed the given scalar buffers and replay every recorded operation in
    /// reverse, accumulating gradients additively.
    pub fn backward(&mut self, seeds: &[(BufId, S)]) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::Input("backward already ran on this tape".into()));
        }
        let mut grads: Vec<Matrix<S>> = self
            .bufs
            .iter()
            .map(|b| Matrix::zeros(b.value.rows(), b.value.cols()))
            .collect();
        for &(id, w) in seeds {
            let (r, c) = self.shape(id);
            if (r, c) != (1, 1) {
                return Err(Error::Shape(format!(
                    "backward seed must be a 1x1 buffer, got {r}x{c}"
                )));
            }
            let cur = grads[id].get(0, 0);
            grads[id].set(0, 0, cur + w);
        }
        for op in self.ops.iter().rev() {
            match op {
                Op::Matmul { a, b, out } => {
                    let (m, k) = self.bufs[*a].value.shape();
                    let n = self.bufs[*b].value.cols();
                    let g = std::mem::replace(&mut grads[*out], Matrix::zeros(0, 0));
                    kernel::matmul_bt_acc(
                        g.data(),
                        self.bufs[*b].value.data(),
                        grads[*a].data_mut(),
                        m,
                        n,
                        k,
                    );
                    kernel::matmul_at_acc(
                        self.bufs[*a].value.data(),
                        g.data(),
                        grads[*b].data_mut(),
                        m,
                        k,
                        n,
                    );
                    grads[*out] = g;
                }
                Op::MatmulBt { a, b, out } => {
                    let (m, k) = self.bufs[*a].value.shape();
                    let n = self.bufs[*b].value.rows();
                    let g = std::mem::replace(&mut grads[*out], Matrix::zeros(0, 0));
                    // dA += g * B, dB += g^T * A
                    kernel::matmul_acc(
                        g.data(),
                        self.bufs[*b].value.data(),
                        grads[*a].data_mut(),
                        m,
                        n,
                        k,
                    );
                    kernel::matmul_at_acc(
                        g.data(),
                        self.bufs[*a].value.data(),
                        grads[*b].data_mut(),
                        m,
                        n,
                        k,
                    );
                    grads[*out] = g;
                }
                Op::Add { a, b, out } => {
                    let g = std::mem::replace(&mut grads[*out], Matrix::zeros(0, 0));
                    for (d, &s) in grads[*a].data_mut().iter_mut().zip(g.data()) {
                        *d = *d + s;
                    }
                    for (d, &s) in grads[*b].data_mut().iter_mut().zip(g.data()) {
                        *d = *d + s;
                    }
                    grads[*out] = g;
                }
                Op::Scale { x, factor, out } => {
                    let g = std::mem::replace(&mut grads[*out], Matrix::zeros(0, 0));
                    for (d, &s) in grads[*x].data_mut().iter_mut().zip(g.data()) {
                        *d = *d + s * *factor;
                    }
                    grads[*out] = g;
                }
                Op::LayerNorm { x, gamma, beta, eps, out } => {
                    self.layer_norm_backward(*x, *gamma, *beta, *eps, *out, &mut grads);
                }
                Op::SoftmaxRows { x, out } => {
                    let (rows, cols) = self.bufs[*out].value.shape();
                    let y = self.bufs[*out].value.data();
                    let g = std::mem::replace(&mut grads[*out], Matrix::zeros(0, 0));
                    let dx = grads[*x].data_mut();
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        let mut dot = S::zero();
                        for (&yv, &gv) in yr.iter().zip(gr) {
                            dot = dot + yv * gv;
                        }
                        let dr = &mut dx[r * cols..(r + 1) * cols];
                        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = *d + yv * (gv - dot);
                        }
                    }
                    grads[*out] = g;
                }
                Op::Gelu { x, out } => {
                    let g = std::mem::replace(&mut grads[*out], Matrix::zeros(0, 0));
                    let xv = self.bufs[*x].value.data();
                    for ((d, &s), &xi) in
                        grads[*x].data_mut().iter_mut().zip(g.data()).zip(xv)
                    {
                        *d = *d + s * kernel::gelu_derivative(xi);
                    }
                    grads[*out] = g;
                }
                Op::EmbedRows { table, ids, out } => {
                    let dim = self.bufs[*table].value.cols();
                    let g = std::mem::replace(&mut grads[*out], Matrix::zeros(0, 0));
                    let dt = grads[*table].data_mut();
                    for (r, &id) in ids.iter().enumerate() {
                        let gr = &g.data()[r * dim..(r + 1) * dim];
                        let tr = &mut dt[id * dim..(id + 1) * dim];
                        for (d, &s) in tr.iter_mut().zip(gr) {
                            *d = *d + s;
                        }
                    }
                    grads[*out] = g;
                }
                Op::ConcatRows { parts, out } => {
                    let g = std::mem::replace(&mut grads[*out], Matrix::zeros(0, 0));
                    let cols = g.cols();
                    let mut r0 = 0;
                    for &p in parts {
                        let pr = self.bufs[p].value.rows();
                        let src = &g.data()[r0 * cols..(r0 + pr) * cols];
                        for (d, &s) in grads[p].data_mut().iter_mut().zip(src) {
                            *d = *d + s;
                        }
                        r0 += pr;
                    }
                    grads[*out] = g;
                }
                Op::SliceCols { x, c0, width, out } => {
                    let g = std::mem::replace(&mut grads[*out], Matrix::zeros(0, 0));
                    let cols = self.bufs[*x].value.cols();
                    let rows = g.rows();
                    let dx = grads[*x].data_mut();
                    for r in 0..rows {
                        let gr = &g.data()[r * width..(r + 1) * width];
                        let dr = &mut dx[r * cols + c0..r * cols + c0 + width];
                        for (d, &s) in dr.iter_mut().zip(gr) {
                            *d = *d + s;
                        }
                    }
                    grads[*out] = g;
                }
                Op::ConcatCols { parts, out } => {
                    let g = std::mem::replace(&mut grads[*out], Matrix::zeros(0, 0));
                    let cols = g.cols();
                    let rows = g.rows();
                    let mut c0 = 0;
                    for &p in parts {
                        let pc = self.bufs[p].value.cols();
                        let dp = grads[p].data_mut();
                        for r in 0..rows {
                            let gr = &g.data()[r * cols + c0..r * cols + c0 + pc];
                            let dr = &mut dp[r * pc..(r + 1) * pc];
                            for (d, &s) in dr.iter_mut().zip(gr) {
                                *d = *d + s;
                            }
                        }
                        c0 += pc;
                    }
                    grads[*out] = g;
                }
                Op::MeanRows { x, out } => {
                    let g = std::mem::replace(&mut grads[*out], Matrix::zeros(0, 0));
                    let (rows, cols) = self.bufs[*x].value.shape();
                    let inv = S::one() / S::of(rows as f64);
                    let dx = grads[*x].data_mut();
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[r * cols + c] = dx[r * cols + c] + g.data()[c] * inv;
                        }
                    }
                    grads[*out] = g;
                }
                Op::NllLoss { logits, target, out } => {
                    let g = grads[*out].get(0, 0);
                    let row = self.bufs[*logits].value.row(0);
                    let cols = row.len();
                    let mut mx = row[0];
                    for &v in row {
                        if v > mx {
                            mx = v;
                        }
                    }
                    let mut sum = S::zero();
                    let mut probs = Vec::with_capacity(cols);
                    for &v in row {
                        let e = (v - mx).exp();
                        probs.push(e);
                        sum = sum + e;
                    }
                    let dl = grads[*logits].data_mut();
                    for (c, d) in dl.iter_mut().enumerate() {
                        let p = probs[c] / sum;
                        let y = if c == *target { S::one() } else { S::zero() };
                        *d = *d + g * (p - y);
                    }
                }
                Op::MseLoss { pred, target, out } => {
                    let g = grads[*out].get(0, 0);
                    let (rows, cols) = self.bufs[*pred].value.shape();
                    let scale = S::of(2.0) / S::of((rows * cols) as f64) * g;
                    let pv = self.bufs[*pred].value.data();
                    let tv = self.bufs[*target].value.data();
                    {
                        let dp = grads[*pred].data_mut();
                        for i in 0..pv.len() {
                            dp[i] = dp[i] + scale * (pv[i] - tv[i]);
                        }
                    }
                    let dt = grads[*target].data_mut();
                    for i in 0..pv.len() {
                        dt[i] = dt[i] - scale * (pv[i] - tv[i]);
                    }
                }
            }
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn layer_norm_backward(
        &self,
        x: BufId,
        gamma: BufId,
        beta: BufId,
        eps: S,
        out: BufId,
        grads: &mut [Matrix<S>],
    ) {
        let (rows, cols) = self.bufs[x].value.shape();
        let n = S::of(cols as f64);
        let xv = self.bufs[x].value.data();
        let gv = self.bufs[gamma].value.data();
        let g = grads[out].clone();
        for r in 0..rows {
            let xr = &xv[r * cols..(r + 1) * cols];
            let gr = &g.data()[r * cols..(r + 1) * cols];
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

            // dgamma, dbeta
            {
                let dg = grads[gamma].data_mut();
                for c in 0..cols {
                    let xhat = (xr[c] - mean) * inv_std;
                    dg[c] = dg[c] + gr[c] * xhat;
                }
            }
            {
                let db = grads[beta].data_mut();
                for c in 0..cols {
                    db[c] = db[c] + gr[c];
                }
            }

            // dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat .* xhat))
            let mut mean_dxhat = S::zero();
            let mut mean_dxhat_xhat = S::zero();
            for c in 0..cols {
                let dxhat = gr[c] * gv[c];
                let xhat = (xr[c] - mean) * inv_std;
                mean_dxhat = mean_dxhat + dxhat;
                mean_dxhat_xhat = mean_dxhat_xhat + dxhat * xhat;
            }
            mean_dxhat = mean_dxhat / n;
            mean_dxhat_xhat = mean_dxhat_xhat / n;
            let dx = grads[x].data_mut();
            for c in 0..cols {
                let dxhat = gr[c] * gv[c];
                let xhat = (xr[c] - mean) * inv_std;
                dx[r * cols + c] =
                    dx[r * cols + c] + inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
            }
        }
    }
}

/// Multi-head attention with learned projections:
/// softmax(LN'd inputs projected by wq/wk against wk, per head) applied to
/// wv projections, heads concatenated and mixed by wo.
pub fn taped_attention<S: Scalar>(
    tape: &mut Tape<S>,
    heads: usize,
    q: BufId,
    k: BufId,
    v: BufId,
    wq: BufId,
    wk: BufId,
    wv: BufId,
    wo: BufId,
) -> Result<BufId> {
    let qp = tape.matmul(q, wq)?;
    let kp = tape.matmul(k, wk)?;
    let vp = tape.matmul(v, wv)?;
    let mixed = taped_split_head_attention(tape, heads, qp, kp, vp)?;
    tape.matmul(mixed, wo)
}

/// The projection-free core: split columns into heads, run scaled
/// dot-product attention per head, concatenate.
pub fn taped_split_head_attention<S: Scalar>(
    tape: &mut Tape<S>,
    heads: usize,
    q: BufId,
    k: BufId,
    v: BufId,
) -> Result<BufId> {
    let dim = tape.shape(q).1;
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!(
            "attention: dim {dim} not divisible into {heads} heads"
        )));
    }
    if tape.shape(k).1 != dim || tape.shape(v).1 != dim {
        return Err(Error::Shape(format!(
            "attention: q width {dim}, k width {}, v width {}",
            tape.shape(k).1,
            tape.shape(v).1
        )));
    }
    if tape.shape(k).0 != tape.shape(v).0 {
        return Err(Error::Shape(format!(
            "attention: k has {} rows, v has {}",
            tape.shape(k).0,
            tape.shape(v).0
        )));
    }
    let dh = dim / heads;
    let scale = S::one() / S::of((dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let scores = tape.matmul_bt(qh, kh)?;
        let scaled = tape.scale(scores, scale)?;
        let probs = tape.softmax_rows(scaled)?;
        outs.push(tape.matmul(probs, vh)?);
    }
    tape.concat_cols(&outs)
}

/// Two-layer position-wise feed-forward with GELU.
pub fn taped_ffn<S: Scalar>(tape: &mut Tape<S>, x: BufId, w1: BufId, w2: BufId) -> Result<BufId> {
    let h = tape.matmul(x, w1)?;
    let a = tape.gelu(h)?;
    tape.matmul(a, w2)
}
