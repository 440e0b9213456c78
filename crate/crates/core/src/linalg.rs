//! Dense and CSR numerics used by the trainer.
//!
//! Every reduction runs in a fixed order so that two runs over the same
//! inputs produce bit-identical results.

use crate::error::{Error, Result};

/// Row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "buffer of length {} cannot hold a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. Panics on ragged input; meant
    /// for literals in tests and fixtures.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        DenseMatrix { rows: rows.len(), cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn gather_rows(&self, idx: &[usize]) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(idx.len(), self.cols);
        for (dst, &src) in idx.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    /// Stacks `self` on top of `below`.
    pub fn vstack(&self, below: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != below.cols {
            return Err(Error::shape(format!(
                "vstack of {}-column and {}-column matrices",
                self.cols, below.cols
            )));
        }
        let mut data = Vec::with_capacity(self.data.len() + below.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&below.data);
        Ok(DenseMatrix { rows: self.rows + below.rows, cols: self.cols, data })
    }

    /// Places `right` next to `self` column-wise.
    pub fn hstack(&self, right: &DenseMatrix) -> Result<DenseMatrix> {
        if self.rows != right.rows {
            return Err(Error::shape(format!(
                "hstack of {}-row and {}-row matrices",
                self.rows, right.rows
            )));
        }
        let cols = self.cols + right.cols;
        let mut out = DenseMatrix::zeros(self.rows, cols);
        for i in 0..self.rows {
            let row = out.row_mut(i);
            row[..self.cols].copy_from_slice(self.row(i));
            row[self.cols..].copy_from_slice(right.row(i));
        }
        Ok(out)
    }

    /// Splits columns at `at` into `[.., at)` and `[at, ..)`.
    pub fn split_cols(&self, at: usize) -> (DenseMatrix, DenseMatrix) {
        assert!(at <= self.cols);
        let mut left = DenseMatrix::zeros(self.rows, at);
        let mut right = DenseMatrix::zeros(self.rows, self.cols - at);
        for i in 0..self.rows {
            left.row_mut(i).copy_from_slice(&self.row(i)[..at]);
            right.row_mut(i).copy_from_slice(&self.row(i)[at..]);
        }
        (left, right)
    }

    pub fn add_assign(&mut self, other: &DenseMatrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "elementwise add of {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn hadamard(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "elementwise product of {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Ok(DenseMatrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Index of the largest entry in each row; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// Compressed sparse row matrix with strictly increasing columns per row.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn new(
        rows: usize,
        cols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if row_ptr.len() != rows + 1 || row_ptr[0] != 0 {
            return Err(Error::shape("row_ptr must have rows+1 entries starting at 0"));
        }
        if row_ptr[rows] != col_idx.len() || col_idx.len() != values.len() {
            return Err(Error::shape("row_ptr[rows], col_idx and values disagree on nnz"));
        }
        for r in 0..rows {
            let (lo, hi) = (row_ptr[r], row_ptr[r + 1]);
            if lo > hi {
                return Err(Error::shape(format!("row_ptr decreases at row {r}")));
            }
            let cs = &col_idx[lo..hi];
            if cs.iter().any(|&c| c >= cols) {
                return Err(Error::shape(format!("column index out of range in row {r}")));
            }
            if cs.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::shape(format!("columns not strictly increasing in row {r}")));
            }
        }
        Ok(CsrMatrix { rows, cols, row_ptr, col_idx, values })
    }

    /// Builds from per-row `(col, value)` lists. Columns are sorted; duplicate
    /// columns are summed.
    pub fn from_row_entries(cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for mut entries in rows.iter().cloned() {
            entries.sort_by_key(|e| e.0);
            let start = col_idx.len();
            for (c, v) in entries {
                if col_idx.len() > start && *col_idx.last().unwrap() == c {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_idx.push(c);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        CsrMatrix::new(rows.len(), cols, row_ptr, col_idx, values)
    }

    pub fn identity(n: usize) -> Self {
        CsrMatrix {
            rows: n,
            cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `(col, value)` pairs of row `r`, in column order.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (lo, hi) = (self.row_ptr[r], self.row_ptr[r + 1]);
        self.col_idx[lo..hi].iter().copied().zip(self.values[lo..hi].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (lo, hi) = (self.row_ptr[r], self.row_ptr[r + 1]);
        match self.col_idx[lo..hi].binary_search(&c) {
            Ok(k) => self.values[lo + k],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut d = DenseMatrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                d.set(r, c, v);
            }
        }
        d
    }
}

fn dim_check(what: &str, ok: bool, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::shape(format!("{what}: incompatible shapes {a:?} and {b:?}")))
    }
}

/// `a · b` with an i-k-j loop; each output entry accumulates over `k` in
/// increasing order.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    dim_check("matmul", a.cols == b.rows, a.shape(), b.shape())?;
    let mut out = DenseMatrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    dim_check("matmul_tn", a.rows == b.rows, a.shape(), b.shape())?;
    let mut out = DenseMatrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let arow = a.row(k);
        let brow = b.row(k);
        for (i, &aki) in arow.iter().enumerate() {
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aki * bkj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    dim_check("matmul_nt", a.cols == b.cols, a.shape(), b.shape())?;
    let mut out = DenseMatrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(b.row(j)) {
                acc += x * y;
            }
            out.data[i * b.rows + j] = acc;
        }
    }
    Ok(out)
}

/// Sparse-dense product `a · h`; row `i` accumulates its nonzeros in column
/// order.
pub fn spmm(a: &CsrMatrix, h: &DenseMatrix) -> Result<DenseMatrix> {
    dim_check("spmm", a.cols == h.rows, (a.rows, a.cols), h.shape())?;
    let d = h.cols;
    let mut out = DenseMatrix::zeros(a.rows, d);
    for i in 0..a.rows {
        let orow = &mut out.data[i * d..(i + 1) * d];
        for (j, v) in a.row(i) {
            for (o, &x) in orow.iter_mut().zip(h.row(j)) {
                *o += v * x;
            }
        }
    }
    Ok(out)
}

/// Transposed sparse-dense product `aᵀ · h`, scattering rows of `h` in
/// row-major order of `a`.
pub fn spmm_t(a: &CsrMatrix, h: &DenseMatrix) -> Result<DenseMatrix> {
    dim_check("spmm_t", a.rows == h.rows, (a.rows, a.cols), h.shape())?;
    let d = h.cols;
    let mut out = DenseMatrix::zeros(a.cols, d);
    for i in 0..a.rows {
        let hrow = h.row(i);
        for (j, v) in a.row(i) {
            let orow = &mut out.data[j * d..(j + 1) * d];
            for (o, &x) in orow.iter_mut().zip(hrow) {
                *o += v * x;
            }
        }
    }
    Ok(out)
}

pub fn relu(m: &DenseMatrix) -> DenseMatrix {
    let data = m.data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
    DenseMatrix { rows: m.rows, cols: m.cols, data }
}

/// Derivative of ReLU at each pre-activation; the subgradient at 0 is 0.
pub fn relu_grad(pre_activation: &DenseMatrix) -> DenseMatrix {
    let data = pre_activation.data.iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }).collect();
    DenseMatrix { rows: pre_activation.rows, cols: pre_activation.cols, data }
}

/// Masked mean cross-entropy over softmax of `logits`.
///
/// Loss and gradient are divided by `norm` rather than the mask size so that
/// per-partition contributions sum to the whole-graph value. Rows outside
/// `mask` get a zero gradient. An empty mask yields `(0, 0)`.
pub fn softmax_cross_entropy(
    logits: &DenseMatrix,
    labels: &[usize],
    mask: &[bool],
    norm: f64,
) -> Result<(f64, DenseMatrix)> {
    if labels.len() != logits.rows || mask.len() != logits.rows {
        return Err(Error::shape(format!(
            "{} logit rows but {} labels and {} mask entries",
            logits.rows,
            labels.len(),
            mask.len()
        )));
    }
    let mut grad = DenseMatrix::zeros(logits.rows, logits.cols);
    if !mask.iter().any(|&m| m) {
        return Ok((0.0, grad));
    }
    if !(norm > 0.0) {
        return Err(Error::Numeric(format!("loss normalizer must be positive, got {norm}")));
    }
    let mut loss = 0.0;
    for i in 0..logits.rows {
        if !mask[i] {
            continue;
        }
        let y = labels[i];
        if y >= logits.cols {
            return Err(Error::shape(format!(
                "label {y} of row {i} exceeds {} classes",
                logits.cols
            )));
        }
        let row = logits.row(i);
        let (arg, max) = row
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (j, z)| if z > best.1 { (j, z) } else { best });
        let mut rest = 0.0;
        for (j, &z) in row.iter().enumerate() {
            if j != arg {
                rest += (z - max).exp();
            }
        }
        let log_sum = rest.ln_1p();
        loss += -(row[y] - max - log_sum);
        let g = grad.row_mut(i);
        for (j, &z) in row.iter().enumerate() {
            let p = (z - max - log_sum).exp();
            g[j] = (p - if j == y { 1.0 } else { 0.0 }) / norm;
        }
    }
    Ok((loss / norm, grad))
}

/// Adam moments and hyperparameters for one weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: DenseMatrix,
    pub v: DenseMatrix,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize, lr: f64) -> Self {
        AdamState {
            m: DenseMatrix::zeros(rows, cols),
            v: DenseMatrix::zeros(rows, cols),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `w` in place.
pub fn adam_step(w: &mut DenseMatrix, g: &DenseMatrix, s: &mut AdamState) -> Result<()> {
    if w.shape() != g.shape() || w.shape() != s.m.shape() || w.shape() != s.v.shape() {
        return Err(Error::shape(format!(
            "adam_step: weight {:?}, gradient {:?}, moments {:?}",
            w.shape(),
            g.shape(),
            s.m.shape()
        )));
    }
    s.t += 1;
    let t = s.t as i32;
    let c1 = 1.0 - s.beta1.powi(t);
    let c2 = 1.0 - s.beta2.powi(t);
    for k in 0..w.data.len() {
        let gk = g.data[k];
        let m = s.beta1 * s.m.data[k] + (1.0 - s.beta1) * gk;
        let v = s.beta2 * s.v.data[k] + (1.0 - s.beta2) * gk * gk;
        s.m.data[k] = m;
        s.v.data[k] = v;
        let m_hat = m / c1;
        let v_hat = v / c2;
        w.data[k] -= s.lr * m_hat / (v_hat.sqrt() + s.eps);
    }
    Ok(())
}
