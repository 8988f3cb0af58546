//! Cyclic Jacobi eigendecomposition for dense symmetric matrices.
//!
//! Robust for the symmetric PSD matrices this crate produces (kernel Gram
//! matrices up to ~1000 samples); no external dependency needed at these
//! sizes.

use crate::error::{Error, Result};
use crate::linalg::{Mat, SymMatrix};

/// Off-diagonal Frobenius threshold, relative to the matrix Frobenius norm.
const OFFDIAG_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 64;

/// Eigenvalues in descending order; `vectors` columns are the matching
/// orthonormal eigenvectors.
#[derive(Debug, Clone)]
pub struct Eigensystem {
    pub values: Vec<f64>,
    pub vectors: Mat,
}

impl Eigensystem {
    pub fn n(&self) -> usize {
        self.values.len()
    }

    /// Project a sample-space vector onto the eigenbasis: out_a = v_a . x
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n();
        assert_eq!(x.len(), n, "projection dimension mismatch");
        (0..n)
            .map(|a| (0..n).map(|i| self.vectors[(i, a)] * x[i]).sum())
            .collect()
    }

    /// Reconstruct a sample-space vector from mode coefficients.
    pub fn unproject(&self, modes: &[f64]) -> Vec<f64> {
        let n = self.n();
        assert_eq!(modes.len(), n, "mode dimension mismatch");
        (0..n)
            .map(|i| (0..n).map(|a| self.vectors[(i, a)] * modes[a]).sum())
            .collect()
    }
}

fn offdiag_frobenius(a: &Mat) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            s += 2.0 * a[(i, j)] * a[(i, j)];
        }
    }
    s.sqrt()
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
pub fn eig_sym(m: &SymMatrix) -> Result<Eigensystem> {
    let n = m.n();
    let mut a = m.mat().clone();
    let mut v = Mat::identity(n);

    let frob = {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                s += a[(i, j)] * a[(i, j)];
            }
        }
        s.sqrt().max(1e-300)
    };

    let mut sweeps = 0;
    while offdiag_frobenius(&a) > OFFDIAG_TOL * frob {
        if sweeps >= MAX_SWEEPS {
            return Err(Error::EigNoConvergence {
                sweeps,
                offdiag: offdiag_frobenius(&a) / frob,
            });
        }
        sweeps += 1;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= OFFDIAG_TOL * frob / (n as f64) {
                    continue;
                }
                // Rotation angle annihilating a_pq.
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = {
                    let s = theta.signum();
                    // signum(0.0) is 1.0 which is what we want here
                    s / (theta.abs() + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                let tau = s / (1.0 + c);

                let app = a[(p, p)];
                let aqq = a[(q, q)];
                a[(p, p)] = app - t * apq;
                a[(q, q)] = aqq + t * apq;
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for i in 0..n {
                    if i != p && i != q {
                        let aip = a[(i, p)];
                        let aiq = a[(i, q)];
                        a[(i, p)] = aip - s * (aiq + tau * aip);
                        a[(i, q)] = aiq + s * (aip - tau * aiq);
                        a[(p, i)] = a[(i, p)];
                        a[(q, i)] = a[(i, q)];
                    }
                }
                for i in 0..n {
                    let vip = v[(i, p)];
                    let viq = v[(i, q)];
                    v[(i, p)] = vip - s * (viq + tau * vip);
                    v[(i, q)] = viq + s * (vip - tau * viq);
                }
            }
        }
    }

    // Sort descending by eigenvalue, carrying columns along.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].partial_cmp(&a[(i, i)]).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = Mat::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        for i in 0..n {
            vectors[(i, new_col)] = v[(i, old_col)];
        }
    }
    Ok(Eigensystem { values, vectors })
}
