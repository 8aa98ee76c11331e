//! Dense row-major `f64` matrices and the handful of kernels the encoder needs.
//!
//! Matrix products go through `matrixmultiply::dgemm`, which accepts arbitrary
//! strides, so per-head slices and transposes never need to be copied.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix::from_vec(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(self.row(i));
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(1.0, self.view(), other.view(), 0.0, &mut out);
        out
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "t_matmul inner dimension");
        let mut out = Matrix::zeros(self.cols, other.cols);
        gemm(1.0, self.view().t(), other.view(), 0.0, &mut out);
        out
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_t inner dimension");
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm(1.0, self.view(), other.view().t(), 0.0, &mut out);
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn add_row_vector(&mut self, v: &[f64]) {
        assert_eq!(v.len(), self.cols);
        for row in self.data.chunks_mut(self.cols) {
            for (a, b) in row.iter_mut().zip(v) {
                *a += b;
            }
        }
    }

    /// Column sums accumulated into `acc`.
    pub fn col_sums_into(&self, acc: &mut [f64]) {
        assert_eq!(acc.len(), self.cols);
        for row in self.iter_rows() {
            for (a, b) in acc.iter_mut().zip(row) {
                *a += b;
            }
        }
    }

    pub fn view(&self) -> View<'_> {
        View {
            data: &self.data,
            offset: 0,
            rows: self.rows,
            cols: self.cols,
            rs: self.cols as isize,
            cs: 1,
        }
    }

    /// The `nrows × ncols` block starting at `(r0, c0)`, viewed in place.
    pub fn block(&self, r0: usize, nrows: usize, c0: usize, ncols: usize) -> View<'_> {
        assert!(r0 + nrows <= self.rows && c0 + ncols <= self.cols);
        View {
            data: &self.data,
            offset: r0 * self.cols + c0,
            rows: nrows,
            cols: ncols,
            rs: self.cols as isize,
            cs: 1,
        }
    }

    /// Columns `start..start + width` viewed in place.
    pub fn col_block(&self, start: usize, width: usize) -> View<'_> {
        assert!(start + width <= self.cols);
        View {
            data: &self.data,
            offset: start,
            rows: self.rows,
            cols: width,
            rs: self.cols as isize,
            cs: 1,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// A strided read-only window into matrix storage.
#[derive(Clone, Copy, Debug)]
pub struct View<'a> {
    data: &'a [f64],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> View<'a> {
    pub fn t(self) -> View<'a> {
        View {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    fn check_bounds(&self) {
        if self.rows == 0 || self.cols == 0 {
            return;
        }
        let last = self.offset as isize
            + (self.rows as isize - 1) * self.rs
            + (self.cols as isize - 1) * self.cs;
        assert!(
            last >= 0 && (last as usize) < self.data.len(),
            "view out of bounds"
        );
    }
}

/// A strided writable window; used to write one head's columns of a larger matrix.
pub struct ViewMut<'a> {
    data: &'a mut [f64],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> ViewMut<'a> {
    pub fn col_block(m: &'a mut Matrix, start: usize, width: usize) -> Self {
        assert!(start + width <= m.cols);
        let rs = m.cols as isize;
        ViewMut {
            rows: m.rows,
            cols: width,
            data: &mut m.data,
            offset: start,
            rs,
            cs: 1,
        }
    }

    pub fn block(m: &'a mut Matrix, r0: usize, nrows: usize, c0: usize, ncols: usize) -> Self {
        assert!(r0 + nrows <= m.rows && c0 + ncols <= m.cols);
        let rs = m.cols as isize;
        ViewMut {
            data: &mut m.data,
            offset: r0 * m.cols + c0,
            rows: nrows,
            cols: ncols,
            rs,
            cs: 1,
        }
    }

    pub fn full(m: &'a mut Matrix) -> Self {
        let (rows, cols) = m.shape();
        ViewMut {
            data: &mut m.data,
            offset: 0,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }
}

/// `c ← alpha·a·b + beta·c`
pub fn gemm(alpha: f64, a: View<'_>, b: View<'_>, beta: f64, c: &mut Matrix) {
    gemm_into(alpha, a, b, beta, ViewMut::full(c));
}

pub fn gemm_into(alpha: f64, a: View<'_>, b: View<'_>, beta: f64, c: ViewMut<'_>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "gemm output shape");
    a.check_bounds();
    b.check_bounds();
    if c.rows > 0 && c.cols > 0 {
        let last = c.offset as isize + (c.rows as isize - 1) * c.rs + (c.cols as isize - 1) * c.cs;
        assert!(
            last >= 0 && (last as usize) < c.data.len(),
            "output view out of bounds"
        );
    }
    // SAFETY: every index touched by dgemm lies inside the bounds checked above,
    // and `c` is a unique borrow so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs,
            a.cs,
            b.data.as_ptr().add(b.offset),
            b.rs,
            b.cs,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs,
            c.cs,
        );
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// In-place numerically stable softmax over a row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Given softmax output `p` and upstream `dp`, overwrite `dp` with the logit gradient.
pub fn softmax_backward_in_place(p: &[f64], dp: &mut [f64]) {
    let s = dot(p, dp);
    for (d, &pi) in dp.iter_mut().zip(p) {
        *d = pi * (*d - s);
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Saved statistics of a row-wise layer norm.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub xhat: Matrix,
    pub rstd: Vec<f64>,
}

pub fn layer_norm(x: &Matrix, gamma: &[f64], beta: &[f64]) -> (Matrix, LayerNormCache) {
    let (n, c) = x.shape();
    let mut xhat = Matrix::zeros(n, c);
    let mut out = Matrix::zeros(n, c);
    let mut rstd = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(r);
        let xh = xhat.row_mut(i);
        for j in 0..c {
            xh[j] = (row[j] - mean) * r;
        }
        let o = out.row_mut(i);
        for j in 0..c {
            o[j] = xh[j] * gamma[j] + beta[j];
        }
    }
    (out, LayerNormCache { xhat, rstd })
}

/// Input gradient of a layer norm; parameter gradients are not needed because
/// norm parameters are frozen.
pub fn layer_norm_backward(dy: &Matrix, gamma: &[f64], cache: &LayerNormCache) -> Matrix {
    let (n, c) = dy.shape();
    let mut dx = Matrix::zeros(n, c);
    let mut g = vec![0.0; c];
    for i in 0..n {
        let dyr = dy.row(i);
        let xh = cache.xhat.row(i);
        for j in 0..c {
            g[j] = dyr[j] * gamma[j];
        }
        let mean_g = g.iter().sum::<f64>() / c as f64;
        let mean_gx = dot(&g, xh) / c as f64;
        let r = cache.rstd[i];
        let out = dx.row_mut(i);
        for j in 0..c {
            out[j] = r * (g[j] - mean_g - xh[j] * mean_gx);
        }
    }
    dx
}

/// CLIP's sigmoid-approximated GELU, `x·σ(1.702x)`.
pub fn quick_gelu(x: f64) -> f64 {
    x / (1.0 + (-1.702 * x).exp())
}

pub fn quick_gelu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-1.702 * x).exp());
    s + 1.702 * x * s * (1.0 - s)
}

/// L2-normalize every row; returns the normalized matrix and the original norms.
pub fn l2_normalize_rows(x: &Matrix) -> (Matrix, Vec<f64>) {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let n = norm2(x.row(i));
        norms.push(n);
        for v in out.row_mut(i) {
            *v /= n;
        }
    }
    (out, norms)
}

/// Gradient through `y = x/‖x‖` given normalized rows `y` and the norms.
pub fn l2_normalize_backward(dy: &Matrix, y: &Matrix, norms: &[f64]) -> Matrix {
    let mut dx = Matrix::zeros(dy.rows(), dy.cols());
    for i in 0..dy.rows() {
        let yr = y.row(i);
        let dr = dy.row(i);
        let proj = dot(yr, dr);
        let out = dx.row_mut(i);
        for j in 0..yr.len() {
            out[j] = (dr[j] - yr[j] * proj) / norms[i];
        }
    }
    dx
}
