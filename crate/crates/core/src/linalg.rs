//! Small dense helpers for symmetric positive-definite matrices.
//!
//! Everything here targets the low-dimensional systems used by the mixture
//! oracles and the proximal step (d up to a few dozen), so plain row-major
//! loops are sufficient.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    lower: Array2<f64>,
}

impl Cholesky {
    pub fn factor(a: ArrayView2<'_, f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::dim("cholesky (square)", n, a.ncols()));
        }
        let mut l = Array2::<f64>::zeros((n, n));
        for j in 0..n {
            let mut diag = a[[j, j]];
            for k in 0..j {
                diag -= l[[j, k]] * l[[j, k]];
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(Error::NotPositiveDefinite("cholesky pivot"));
            }
            let ljj = diag.sqrt();
            l[[j, j]] = ljj;
            for i in (j + 1)..n {
                let mut s = a[[i, j]];
                for k in 0..j {
                    s -= l[[i, k]] * l[[j, k]];
                }
                l[[i, j]] = s / ljj;
            }
        }
        Ok(Self { lower: l })
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn lower(&self) -> &Array2<f64> {
        &self.lower
    }

    /// Solves `L z = b`.
    pub fn solve_lower(&self, b: ArrayView1<'_, f64>) -> Array1<f64> {
        let n = self.dim();
        let l = &self.lower;
        let mut z = Array1::<f64>::zeros(n);
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= l[[i, k]] * z[k];
            }
            z[i] = s / l[[i, i]];
        }
        z
    }

    /// Solves `Lᵀ x = z`.
    pub fn solve_upper(&self, z: ArrayView1<'_, f64>) -> Array1<f64> {
        let n = self.dim();
        let l = &self.lower;
        let mut x = Array1::<f64>::zeros(n);
        for i in (0..n).rev() {
            let mut s = z[i];
            for k in (i + 1)..n {
                s -= l[[k, i]] * x[k];
            }
            x[i] = s / l[[i, i]];
        }
        x
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: ArrayView1<'_, f64>) -> Array1<f64> {
        let z = self.solve_lower(b);
        self.solve_upper(z.view())
    }

    /// `L v`, used to colour standard-normal draws.
    pub fn mul_lower(&self, v: ArrayView1<'_, f64>) -> Array1<f64> {
        let n = self.dim();
        let l = &self.lower;
        let mut out = Array1::<f64>::zeros(n);
        for i in 0..n {
            let mut s = 0.0;
            for k in 0..=i {
                s += l[[i, k]] * v[k];
            }
            out[i] = s;
        }
        out
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diag().iter().map(|v| v.ln()).sum::<f64>()
    }

    /// Squared Mahalanobis norm `vᵀ A⁻¹ v`.
    pub fn quad_form_inv(&self, v: ArrayView1<'_, f64>) -> f64 {
        let z = self.solve_lower(v);
        z.dot(&z)
    }

    pub fn inverse(&self) -> Array2<f64> {
        let n = self.dim();
        let mut inv = Array2::<f64>::zeros((n, n));
        let mut e = Array1::<f64>::zeros(n);
        for j in 0..n {
            e.fill(0.0);
            e[j] = 1.0;
            let col = self.solve(e.view());
            inv.column_mut(j).assign(&col);
        }
        symmetrize(&mut inv);
        inv
    }
}

/// Replaces `a` with `(a + aᵀ)/2`.
pub fn symmetrize(a: &mut Array2<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[[i, j]] + a[[j, i]]);
            a[[i, j]] = m;
            a[[j, i]] = m;
        }
    }
}

/// Materializes a linear map on ℝⁿ by applying it to the canonical basis.
pub fn dense_from_matvec<F>(n: usize, mut matvec: F) -> Array2<f64>
where
    F: FnMut(ArrayView1<'_, f64>) -> Array1<f64>,
{
    let mut e = Array1::<f64>::zeros(n);
    let first = {
        e[0] = 1.0;
        matvec(e.view())
    };
    let mut out = Array2::<f64>::zeros((first.len(), n));
    out.column_mut(0).assign(&first);
    for j in 1..n {
        e.fill(0.0);
        e[j] = 1.0;
        out.column_mut(j).assign(&matvec(e.view()));
    }
    out
}

pub fn norm(v: ArrayView1<'_, f64>) -> f64 {
    v.dot(&v).sqrt()
}

pub fn is_symmetric(a: ArrayView2<'_, f64>, tol: f64) -> bool {
    let n = a.nrows();
    if a.ncols() != n {
        return false;
    }
    let scale = a.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0);
    (0..n).all(|i| (0..i).all(|j| (a[[i, j]] - a[[j, i]]).abs() <= tol * scale))
}
