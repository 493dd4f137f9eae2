//! Dense row-major matrices.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: S) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "buffer of {} values cannot form a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row_vector(data: Vec<S>) -> Self {
        Self { rows: 1, cols: data.len(), data }
    }

    pub fn scalar(v: S) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        Self::from_vec(rows, cols, data.iter().map(|&v| lit(v)).collect())
    }

    /// Entries drawn i.i.d. from N(0, std^2).
    pub fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols).map(|_| lit(normal.sample(rng))).collect();
        Self { rows, cols, data }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: S) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> S {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: S) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn add_assign(&mut self, other: &Tensor<S>) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: S) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn transpose(&self) -> Tensor<S> {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Converts precision, e.g. an f32 checkpoint into f64 for analysis.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| T::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Plain product `self * other`.
    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        gemm_into(self, false, other, false, &mut out, S::one(), S::zero());
        Ok(out)
    }
}

/// `out = alpha * op(a) * op(b) + beta * out`, where `op` optionally transposes.
pub fn gemm_into<S: Scalar>(
    a: &Tensor<S>,
    trans_a: bool,
    b: &Tensor<S>,
    trans_b: bool,
    out: &mut Tensor<S>,
    alpha: S,
    beta: S,
) {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "inner dimensions differ");
    assert_eq!((out.rows, out.cols), (m, n), "output shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.scale_assign(beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if trans_b { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: shapes are checked above and the buffers own rows*cols values.
    unsafe {
        S::gemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.data.as_mut_ptr(),
            out.cols as isize,
            1,
        );
    }
}

/// Raw-slice variant used by the attention kernels, which work on strided head views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: S,
    a: &[S],
    rsa: isize,
    csa: isize,
    b: &[S],
    rsb: isize,
    csb: isize,
    beta: S,
    c: &mut [S],
    rsc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass views that stay inside the provided slices.
    unsafe {
        S::gemm(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, 1);
    }
}
