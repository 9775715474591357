//! Linear forward operators `H: ℝᵈ → ℝᴹ` with exact adjoints, and the SPD
//! solvers used by the proximal refinement.
//!
//! Each variant implements `apply`, `apply_adjoint` and a structure-aware
//! `gram_apply` (`HᵀH x`). The circulant variant uses periodic boundaries and
//! is applied spectrally.

use std::fmt;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::linalg::{self, Cholesky};

/// Dimension at or below which SPD systems are solved by dense Cholesky.
pub const DENSE_SOLVE_MAX_DIM: usize = 64;

#[derive(Clone)]
pub struct Circulant {
    kernel: Array1<f64>,
    spectrum: Vec<Complex64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Circulant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Circulant")
            .field("kernel", &self.kernel)
            .finish_non_exhaustive()
    }
}

impl Circulant {
    fn new(kernel: Array1<f64>) -> Self {
        let n = kernel.len();
        let mut planner = FftPlanner::<f64>::new();
        let forward = planner.plan_fft_forward(n);
        let inverse = planner.plan_fft_inverse(n);
        let mut spectrum: Vec<Complex64> = kernel.iter().map(|&k| Complex64::new(k, 0.0)).collect();
        forward.process(&mut spectrum);
        Self {
            kernel,
            spectrum,
            forward,
            inverse,
        }
    }

    pub fn kernel(&self) -> &Array1<f64> {
        &self.kernel
    }

    /// Multiplies by a diagonal in Fourier space and returns the real part.
    fn filter(&self, x: ArrayView1<'_, f64>, gain: impl Fn(Complex64) -> Complex64) -> Array1<f64> {
        let n = self.kernel.len();
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward.process(&mut buf);
        for (b, &k) in buf.iter_mut().zip(&self.spectrum) {
            *b *= gain(k);
        }
        self.inverse.process(&mut buf);
        let scale = 1.0 / n as f64;
        buf.iter().map(|c| c.re * scale).collect()
    }
}

/// Forward operator of a linear inverse problem.
#[derive(Debug, Clone)]
pub enum LinearOperator {
    /// Explicit `M × d` matrix.
    Dense(Array2<f64>),
    /// Single measurement `hᵀx`.
    RowVector(Array1<f64>),
    /// Coordinate selection; `kept` is sorted and unique.
    Mask { dim: usize, kept: Vec<usize> },
    /// Periodic 1-D convolution `(Hx)_i = Σ_j k_{(i-j) mod d} x_j`.
    Circulant1D(Circulant),
    ScaledIdentity { dim: usize, scale: f64 },
}

fn ensure_finite(values: impl IntoIterator<Item = f64>, what: &str) -> Result<()> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{what} contains non-finite entries")))
    }
}

impl LinearOperator {
    pub fn dense(matrix: Array2<f64>) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.ncols() == 0 {
            return Err(Error::InvalidParameter("dense operator must be non-empty".into()));
        }
        ensure_finite(matrix.iter().copied(), "dense operator")?;
        Ok(Self::Dense(matrix))
    }

    pub fn row_vector(h: Array1<f64>) -> Result<Self> {
        if h.is_empty() {
            return Err(Error::InvalidParameter("row vector must be non-empty".into()));
        }
        ensure_finite(h.iter().copied(), "row vector")?;
        Ok(Self::RowVector(h))
    }

    pub fn mask(dim: usize, kept: impl IntoIterator<Item = usize>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("mask dimension must be positive".into()));
        }
        let mut kept: Vec<usize> = kept.into_iter().collect();
        kept.sort_unstable();
        let before = kept.len();
        kept.dedup();
        if kept.len() != before {
            return Err(Error::InvalidParameter("mask indices must be unique".into()));
        }
        if let Some(&bad) = kept.iter().find(|&&i| i >= dim) {
            return Err(Error::InvalidParameter(format!(
                "mask index {bad} out of range for dimension {dim}"
            )));
        }
        Ok(Self::Mask { dim, kept })
    }

    pub fn circulant(kernel: Array1<f64>) -> Result<Self> {
        if kernel.is_empty() {
            return Err(Error::InvalidParameter("circulant kernel must be non-empty".into()));
        }
        ensure_finite(kernel.iter().copied(), "circulant kernel")?;
        Ok(Self::Circulant1D(Circulant::new(kernel)))
    }

    pub fn scaled_identity(dim: usize, scale: f64) -> Result<Self> {
        if dim == 0 || !scale.is_finite() {
            return Err(Error::InvalidParameter(
                "scaled identity needs positive dimension and finite scale".into(),
            ));
        }
        Ok(Self::ScaledIdentity { dim, scale })
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Self::Dense(m) => m.ncols(),
            Self::RowVector(h) => h.len(),
            Self::Mask { dim, .. } | Self::ScaledIdentity { dim, .. } => *dim,
            Self::Circulant1D(c) => c.kernel.len(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Self::Dense(m) => m.nrows(),
            Self::RowVector(_) => 1,
            Self::Mask { kept, .. } => kept.len(),
            Self::Circulant1D(c) => c.kernel.len(),
            Self::ScaledIdentity { dim, .. } => *dim,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Self::Dense(_) => "dense",
            Self::RowVector(_) => "row_vector",
            Self::Mask { .. } => "mask",
            Self::Circulant1D(_) => "circulant",
            Self::ScaledIdentity { .. } => "scaled_identity",
        }
    }

    fn check_in(&self, x: ArrayView1<'_, f64>, context: &'static str) -> Result<()> {
        if x.len() != self.in_dim() {
            return Err(Error::dim(context, self.in_dim(), x.len()));
        }
        Ok(())
    }

    /// `Hx`.
    pub fn apply(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        self.check_in(x, "operator apply")?;
        Ok(match self {
            Self::Dense(m) => m.dot(&x),
            Self::RowVector(h) => Array1::from_elem(1, h.dot(&x)),
            Self::Mask { kept, .. } => kept.iter().map(|&i| x[i]).collect(),
            Self::Circulant1D(c) => c.filter(x, |k| k),
            Self::ScaledIdentity { scale, .. } => x.mapv(|v| v * scale),
        })
    }

    /// `Hᵀu`. The mask adjoint zero-fills unobserved coordinates.
    pub fn apply_adjoint(&self, u: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if u.len() != self.out_dim() {
            return Err(Error::dim("operator adjoint", self.out_dim(), u.len()));
        }
        Ok(match self {
            Self::Dense(m) => m.t().dot(&u),
            Self::RowVector(h) => h * u[0],
            Self::Mask { dim, kept } => {
                let mut out = Array1::zeros(*dim);
                for (&i, &v) in kept.iter().zip(u.iter()) {
                    out[i] = v;
                }
                out
            }
            Self::Circulant1D(c) => c.filter(u, |k| k.conj()),
            Self::ScaledIdentity { scale, .. } => u.mapv(|v| v * scale),
        })
    }

    /// `HᵀHx`.
    pub fn gram_apply(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        self.check_in(x, "operator gram")?;
        Ok(match self {
            Self::Dense(m) => m.t().dot(&m.dot(&x)),
            Self::RowVector(h) => h * h.dot(&x),
            Self::Mask { dim, kept } => {
                let mut out = Array1::zeros(*dim);
                for &i in kept {
                    out[i] = x[i];
                }
                out
            }
            Self::Circulant1D(c) => c.filter(x, |k| Complex64::new(k.norm_sqr(), 0.0)),
            Self::ScaledIdentity { scale, .. } => x.mapv(|v| v * scale * scale),
        })
    }

    /// Explicit `M × d` matrix of the operator.
    pub fn to_dense(&self) -> Array2<f64> {
        match self {
            Self::Dense(m) => m.clone(),
            Self::RowVector(h) => h.clone().insert_axis(ndarray::Axis(0)),
            _ => linalg::dense_from_matvec(self.in_dim(), |e| {
                self.apply(e).expect("basis vector has operator input dimension")
            }),
        }
    }

    /// Explicit `d × d` matrix `HᵀH`.
    pub fn gram_dense(&self) -> Array2<f64> {
        let d = self.in_dim();
        match self {
            Self::Dense(m) => m.t().dot(m),
            Self::RowVector(h) => {
                let col = h.view().insert_axis(ndarray::Axis(1));
                col.dot(&col.t())
            }
            Self::Mask { kept, .. } => {
                let mut g = Array2::zeros((d, d));
                for &i in kept {
                    g[[i, i]] = 1.0;
                }
                g
            }
            Self::ScaledIdentity { scale, .. } => Array2::eye(d) * (scale * scale),
            Self::Circulant1D(_) => {
                let mut g = linalg::dense_from_matvec(d, |e| {
                    self.gram_apply(e).expect("basis vector has operator input dimension")
                });
                linalg::symmetrize(&mut g);
                g
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpdSolveOptions {
    pub rel_tolerance: f64,
    /// `None` means `10·d`.
    pub max_iterations: Option<usize>,
}

impl Default for SpdSolveOptions {
    fn default() -> Self {
        Self {
            rel_tolerance: 1e-10,
            max_iterations: None,
        }
    }
}

impl SpdSolveOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tolerance > 0.0) {
            return Err(Error::InvalidParameter("rel_tolerance must be positive".into()));
        }
        if self.max_iterations == Some(0) {
            return Err(Error::InvalidParameter("max_iterations must be at least 1".into()));
        }
        Ok(())
    }

    fn iteration_cap(&self, dim: usize) -> usize {
        self.max_iterations.unwrap_or(10 * dim.max(1))
    }
}

/// Conjugate gradient for `A x = b` with `A` symmetric positive definite,
/// given only through its action.
///
/// The iteration restarts from its current iterate whenever the recursive
/// residual claims convergence but the true residual does not.
pub fn solve_spd<F>(mut matvec: F, b: ArrayView1<'_, f64>, opts: &SpdSolveOptions) -> Result<Array1<f64>>
where
    F: FnMut(ArrayView1<'_, f64>) -> Array1<f64>,
{
    opts.validate()?;
    let n = b.len();
    let b_norm = linalg::norm(b);
    let mut x = Array1::<f64>::zeros(n);
    if b_norm == 0.0 {
        return Ok(x);
    }
    let target = opts.rel_tolerance * b_norm;
    let cap = opts.iteration_cap(n);

    let mut r = b.to_owned();
    let mut p = r.clone();
    let mut rr = r.dot(&r);
    let mut iterations = 0;
    loop {
        if rr.sqrt() <= target {
            let true_r = &b - &matvec(x.view());
            let true_norm = linalg::norm(true_r.view());
            if true_norm <= target {
                return Ok(x);
            }
            r = true_r;
            p = r.clone();
            rr = r.dot(&r);
        }
        if iterations >= cap {
            let true_r = &b - &matvec(x.view());
            return Err(Error::SolverFailure {
                iterations,
                residual: linalg::norm(true_r.view()) / b_norm,
            });
        }
        let ap = matvec(p.view());
        let pap = p.dot(&ap);
        if !(pap > 0.0) {
            return Err(Error::NotPositiveDefinite("conjugate gradient curvature"));
        }
        let alpha = rr / pap;
        x.scaled_add(alpha, &p);
        r.scaled_add(-alpha, &ap);
        let rr_next = r.dot(&r);
        p = &r + &(p * (rr_next / rr));
        rr = rr_next;
        iterations += 1;
    }
}

/// Dense Cholesky solve, used as the small-dimension path and as an oracle.
pub fn solve_spd_dense(a: &Array2<f64>, b: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if a.nrows() != b.len() {
        return Err(Error::dim("dense SPD solve", a.nrows(), b.len()));
    }
    Ok(Cholesky::factor(a.view())?.solve(b))
}

/// The precision matrix `shift·I + weight·HᵀH` of the proximal step.
#[derive(Debug, Clone, Copy)]
pub struct ShiftedGram<'a> {
    pub op: &'a LinearOperator,
    pub shift: f64,
    pub weight: f64,
}

impl ShiftedGram<'_> {
    pub fn dim(&self) -> usize {
        self.op.in_dim()
    }

    pub fn matvec(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        let g = self.op.gram_apply(x).expect("system vector has operator input dimension");
        g * self.weight + &(x.to_owned() * self.shift)
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let d = self.dim();
        self.op.gram_dense() * self.weight + &(Array2::<f64>::eye(d) * self.shift)
    }

    /// Solves the system by dense Cholesky for small or explicitly dense
    /// operators and by conjugate gradient otherwise.
    pub fn solve(&self, b: ArrayView1<'_, f64>, opts: &SpdSolveOptions) -> Result<Array1<f64>> {
        if b.len() != self.dim() {
            return Err(Error::dim("shifted gram solve", self.dim(), b.len()));
        }
        if self.dim() <= DENSE_SOLVE_MAX_DIM || matches!(self.op, LinearOperator::Dense(_)) {
            solve_spd_dense(&self.to_dense(), b)
        } else {
            solve_spd(|v| self.matvec(v), b, opts)
        }
    }
}
