//! Dense row-major matrices and the handful of products the rest of the
//! crate lives on. The heavy lifting is delegated to `matrixmultiply`;
//! with the `parallel` feature, large products are split over fixed-size
//! row blocks so results are bit-identical for any worker count.

use crate::error::{Error, Result};

/// Row block size used when splitting a product across threads. Fixed so
/// that the accumulation pattern (and therefore every output bit) does not
/// depend on how many workers are available.
#[cfg(feature = "parallel")]
const PAR_ROW_BLOCK: usize = 128;
/// Products below this many multiply-adds are not worth scheduling.
#[cfg(feature = "parallel")]
const PAR_MIN_FLOPS: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch { expected: rows * cols, got: data.len() });
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |v| v.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::DimensionMismatch { expected: c, got: row.len() });
            }
            data.extend_from_slice(row);
        }
        Ok(Mat { rows: r, cols: c, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for x in &mut self.data {
            *x *= s;
        }
    }

    /// self += s * other
    pub fn add_scaled(&mut self, other: &Mat, s: f64) {
        assert_eq!(self.data.len(), other.data.len(), "shape mismatch in add_scaled");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    /// Matrix-vector product.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec dimension mismatch");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// self (m x k) * b (k x n)
    pub fn matmul(&self, b: &Mat) -> Mat {
        assert_eq!(self.cols, b.rows, "matmul inner dimension mismatch");
        let mut out = Mat::zeros(self.rows, b.cols);
        gemm_blocked(
            self.rows, self.cols, b.cols,
            &self.data, self.cols as isize, 1,
            &b.data, b.cols as isize, 1,
            &mut out.data,
        );
        out
    }

    /// self^T (k x m) * b (m x n); self is m x k.
    pub fn matmul_tn(&self, b: &Mat) -> Mat {
        assert_eq!(self.rows, b.rows, "matmul_tn inner dimension mismatch");
        let mut out = Mat::zeros(self.cols, b.cols);
        gemm_blocked(
            self.cols, self.rows, b.cols,
            &self.data, 1, self.cols as isize,
            &b.data, b.cols as isize, 1,
            &mut out.data,
        );
        out
    }

    /// self (m x k) * b^T (k x n); b is n x k.
    pub fn matmul_nt(&self, b: &Mat) -> Mat {
        assert_eq!(self.cols, b.cols, "matmul_nt inner dimension mismatch");
        let mut out = Mat::zeros(self.rows, b.rows);
        gemm_blocked(
            self.rows, self.cols, b.rows,
            &self.data, self.cols as isize, 1,
            &b.data, 1, b.cols as isize,
            &mut out.data,
        );
        out
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// C = A * B with arbitrary strides, output row-major, split over row blocks.
#[allow(clippy::too_many_arguments)]
fn gemm_blocked(
    m: usize, k: usize, n: usize,
    a: &[f64], rsa: isize, csa: isize,
    b: &[f64], rsb: isize, csb: isize,
    c: &mut [f64],
) {
    let run = |a_off: usize, rows: usize, c_chunk: &mut [f64]| {
        // Base pointer of the row block: rows of the (possibly transposed)
        // view advance by rsa elements.
        let a_ptr = unsafe { a.as_ptr().offset(a_off as isize * rsa) };
        unsafe {
            matrixmultiply::dgemm(
                rows, k, n, 1.0,
                a_ptr, rsa, csa,
                b.as_ptr(), rsb, csb,
                0.0,
                c_chunk.as_mut_ptr(), n as isize, 1,
            );
        }
    };

    #[cfg(feature = "parallel")]
    {
        if m * k * n >= PAR_MIN_FLOPS && m > PAR_ROW_BLOCK {
            use rayon::prelude::*;
            c.par_chunks_mut(PAR_ROW_BLOCK * n)
                .enumerate()
                .for_each(|(blk, chunk)| {
                    let r0 = blk * PAR_ROW_BLOCK;
                    run(r0, chunk.len() / n, chunk);
                });
            return;
        }
    }
    run(0, m, c);
}

/// Symmetric matrix: validated on construction, then treated as plain data.
#[derive(Debug, Clone)]
pub struct SymMatrix {
    mat: Mat,
}

impl SymMatrix {
    /// Relative symmetry tolerance.
    pub const SYM_TOL: f64 = 1e-12;

    pub fn new(mat: Mat) -> Result<Self> {
        if mat.rows() != mat.cols() {
            return Err(Error::DimensionMismatch { expected: mat.rows(), got: mat.cols() });
        }
        if !mat.is_finite() {
            return Err(Error::NonFinite("symmetric matrix entries".into()));
        }
        let scale = mat.max_abs().max(1e-300);
        let mut max_asym: f64 = 0.0;
        for i in 0..mat.rows() {
            for j in (i + 1)..mat.cols() {
                max_asym = max_asym.max((mat[(i, j)] - mat[(j, i)]).abs());
            }
        }
        if max_asym > Self::SYM_TOL * scale {
            return Err(Error::NotSymmetric { max_asym: max_asym / scale, tol: Self::SYM_TOL });
        }
        Ok(SymMatrix { mat })
    }

    /// Symmetrize (average off-diagonal pairs) and wrap. For matrices that
    /// are symmetric by construction up to rounding, e.g. Gram matrices
    /// assembled in parallel.
    pub fn symmetrize(mut mat: Mat) -> Result<Self> {
        for i in 0..mat.rows() {
            for j in (i + 1)..mat.cols() {
                let avg = 0.5 * (mat[(i, j)] + mat[(j, i)]);
                mat[(i, j)] = avg;
                mat[(j, i)] = avg;
            }
        }
        Self::new(mat)
    }

    pub fn n(&self) -> usize {
        self.mat.rows()
    }

    pub fn mat(&self) -> &Mat {
        &self.mat
    }

    pub fn into_mat(self) -> Mat {
        self.mat
    }
}

impl std::ops::Index<(usize, usize)> for SymMatrix {
    type Output = f64;
    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.mat[idx]
    }
}

/// Solve (A + shift*I) x = b for symmetric positive definite A by Cholesky.
/// Used as the direct-solve route when cross-checking flow limits.
pub fn solve_spd_shifted(a: &SymMatrix, shift: f64, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.n();
    if b.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: b.len() });
    }
    // Lower-triangular factor, row-major.
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[(i, j)] + if i == j { shift } else { 0.0 };
            for p in 0..j {
                s -= l[i * n + p] * l[j * n + p];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::NonFinite(format!(
                        "Cholesky pivot {i} is non-positive ({s:.3e}); matrix not positive definite"
                    )));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    // Forward then backward substitution.
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for p in 0..i {
            s -= l[i * n + p] * y[p];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for p in (i + 1)..n {
            s -= l[p * n + i] * x[p];
        }
        x[i] = s / l[i * n + i];
    }
    Ok(x)
}
