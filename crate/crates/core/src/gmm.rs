//! Gaussian mixtures with a shared covariance: the prior, its exact
//! linear-Gaussian posterior, the time-`t` marginal of the straight-line path
//! from a standard-normal source, and the closed-form conditional expectation
//! `E[X1 | Xt = x]` that serves as the exact velocity oracle.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, Cholesky};
use crate::operators::LinearOperator;
use crate::rng::standard_normal_vec;

const WEIGHT_SUM_TOLERANCE: f64 = 1e-12;

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Normalizes log-weights in place into probabilities.
fn softmax_in_place(values: &mut [f64]) {
    let lse = log_sum_exp(values);
    for v in values.iter_mut() {
        *v = (*v - lse).exp();
    }
}

#[derive(Debug, Clone)]
pub struct GaussianMixture {
    weights: Array1<f64>,
    /// `K × d`, one component mean per row.
    means: Array2<f64>,
    covariance: Array2<f64>,
    chol: Cholesky,
}

impl GaussianMixture {
    pub fn new(weights: Array1<f64>, means: Array2<f64>, covariance: Array2<f64>) -> Result<Self> {
        let k = means.nrows();
        let d = means.ncols();
        if k == 0 || d == 0 {
            return Err(Error::InvalidParameter("mixture needs at least one component of positive dimension".into()));
        }
        if weights.len() != k {
            return Err(Error::dim("mixture weights", k, weights.len()));
        }
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidParameter("mixture weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(Error::InvalidParameter(format!("mixture weights sum to {total}, not 1")));
        }
        if means.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("mixture means must be finite".into()));
        }
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(Error::dim("mixture covariance", d, covariance.nrows()));
        }
        if !linalg::is_symmetric(covariance.view(), 1e-12) {
            return Err(Error::InvalidParameter("mixture covariance must be symmetric".into()));
        }
        let chol = Cholesky::factor(covariance.view())?;
        Ok(Self {
            weights,
            means,
            covariance,
            chol,
        })
    }

    pub fn uniform(means: Array2<f64>, covariance: Array2<f64>) -> Result<Self> {
        let k = means.nrows().max(1);
        Self::new(Array1::from_elem(k, 1.0 / k as f64), means, covariance)
    }

    pub fn isotropic(weights: Array1<f64>, means: Array2<f64>, variance: f64) -> Result<Self> {
        let d = means.ncols();
        Self::new(weights, means, Array2::eye(d) * variance)
    }

    /// Three-component 2-D prior of the toy experiments: uniform weights,
    /// means (−¼,−¼), (−¼,¼), (¼,−¼) and covariance ¼²·I.
    pub fn toy_prior() -> Self {
        let means = ndarray::array![[-0.25, -0.25], [-0.25, 0.25], [0.25, -0.25]];
        Self::uniform(means, Array2::eye(2) * 0.0625).expect("toy prior is valid")
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn n_components(&self) -> usize {
        self.means.nrows()
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.weights
    }

    pub fn means(&self) -> &Array2<f64> {
        &self.means
    }

    pub fn covariance(&self) -> &Array2<f64> {
        &self.covariance
    }

    fn check_point(&self, x: ArrayView1<'_, f64>, context: &'static str) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::dim(context, self.dim(), x.len()));
        }
        Ok(())
    }

    /// Mixture mean `Σ_k w_k μ_k`.
    pub fn mean(&self) -> Array1<f64> {
        self.weights.dot(&self.means)
    }

    /// Mixture covariance `Σ + Σ_k w_k (μ_k − m)(μ_k − m)ᵀ`.
    pub fn total_covariance(&self) -> Array2<f64> {
        let m = self.mean();
        let mut cov = self.covariance.clone();
        for (w, mu) in self.weights.iter().zip(self.means.rows()) {
            let c = &mu - &m;
            let col = c.view().insert_axis(Axis(1));
            cov.scaled_add(*w, &col.dot(&col.t()));
        }
        cov
    }

    /// `log Σ_k w_k N(x; μ_k, Σ)`.
    pub fn log_density(&self, x: ArrayView1<'_, f64>) -> Result<f64> {
        self.check_point(x, "log density")?;
        let norm = -0.5 * (self.dim() as f64 * (2.0 * PI).ln() + self.chol.log_det());
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(self.means.rows())
            .map(|(&w, mu)| {
                let diff = &x - &mu;
                w.ln() + norm - 0.5 * self.chol.quad_form_inv(diff.view())
            })
            .collect();
        Ok(log_sum_exp(&terms))
    }

    /// Draws `n` samples as rows of an `n × d` matrix.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Array2<f64> {
        let d = self.dim();
        let mut out = Array2::<f64>::zeros((n, d));
        let cumulative: Vec<f64> = self
            .weights
            .iter()
            .scan(0.0, |acc, &w| {
                *acc += w;
                Some(*acc)
            })
            .collect();
        let last = self.n_components() - 1;
        for mut row in out.rows_mut() {
            let u: f64 = rng.random::<f64>() * cumulative[last];
            let k = cumulative.iter().position(|&c| u < c).unwrap_or(last);
            let z = standard_normal_vec(rng, d);
            row.assign(&(&self.means.row(k) + &self.chol.mul_lower(z.view())));
        }
        out
    }

    /// Exact posterior under `y = Hx + n`, `n ~ N(0, σ_n² I)`.
    ///
    /// Components share `Σ_post = (Σ⁻¹ + σ_n⁻² HᵀH)⁻¹`, means shift to
    /// `Σ_post(σ_n⁻² Hᵀy + Σ⁻¹μ_k)`, and weights are reweighted by the
    /// component evidence `N(y; Hμ_k, HΣHᵀ + σ_n² I)`.
    pub fn posterior_linear_gaussian(&self, obs: &LinearGaussianObservation) -> Result<Self> {
        let op = obs.operator();
        if op.in_dim() != self.dim() {
            return Err(Error::dim("posterior operator input", self.dim(), op.in_dim()));
        }
        let inv_noise = obs.noise_std().powi(-2);
        let prior_precision = self.chol.inverse();
        let precision = &prior_precision + &(op.gram_dense() * inv_noise);
        let post_chol = Cholesky::factor(precision.view())?;
        let post_cov = post_chol.inverse();

        let hty = op.apply_adjoint(obs.y().view())? * inv_noise;
        let mut post_means = Array2::<f64>::zeros(self.means.raw_dim());
        for (mu, mut out) in self.means.rows().into_iter().zip(post_means.rows_mut()) {
            let rhs = &hty + &prior_precision.dot(&mu);
            out.assign(&post_chol.solve(rhs.view()));
        }

        let h = op.to_dense();
        let m = op.out_dim();
        let evidence_cov = h.dot(&self.covariance).dot(&h.t()) + Array2::<f64>::eye(m) * obs.noise_std().powi(2);
        let evidence_chol = Cholesky::factor(evidence_cov.view())?;
        let mut log_w: Vec<f64> = self
            .weights
            .iter()
            .zip(self.means.rows())
            .map(|(&w, mu)| {
                let resid = obs.y() - &h.dot(&mu);
                w.ln() - 0.5 * evidence_chol.quad_form_inv(resid.view())
            })
            .collect();
        softmax_in_place(&mut log_w);
        let weights = Array1::from(log_w);

        let mut post_cov = post_cov;
        linalg::symmetrize(&mut post_cov);
        Self::new(weights, post_means, post_cov)
    }

    /// Law of `X_t = (1−t)X0 + tX1` with `X0 ~ N(0, I)` independent of `X1`.
    pub fn marginal_at_time(&self, t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("time {t} outside [0, 1]")));
        }
        let d = self.dim();
        let cov = &self.covariance * (t * t) + &(Array2::<f64>::eye(d) * (1.0 - t).powi(2));
        Self::new(self.weights.clone(), &self.means * t, cov)
    }

    /// Precomputes the time-`t` quantities behind `E[X1 | Xt = x]`.
    pub fn denoiser_at(&self, t: f64) -> Result<TimeDenoiser<'_>> {
        if !(0.0..1.0).contains(&t) {
            return Err(Error::Domain(format!(
                "conditional mean requires 0 <= t < 1, got {t}"
            )));
        }
        let d = self.dim();
        let marginal_cov = &self.covariance * (t * t) + &(Array2::<f64>::eye(d) * (1.0 - t).powi(2));
        let chol = Cholesky::factor(marginal_cov.view())?;
        let mut whitened_means = Array2::<f64>::zeros(self.means.raw_dim());
        for (mu, mut out) in self.means.rows().into_iter().zip(whitened_means.rows_mut()) {
            out.assign(&chol.solve_lower((&mu * t).view()));
        }
        Ok(TimeDenoiser {
            prior: self,
            t,
            chol,
            whitened_means,
            log_weights: self.weights.mapv(f64::ln),
        })
    }

    /// `E[X1 | Xt = x]` under the independent coupling with standard-normal
    /// source.
    pub fn conditional_mean_x1(&self, x: ArrayView1<'_, f64>, t: f64) -> Result<Array1<f64>> {
        self.check_point(x, "conditional mean")?;
        Ok(self.denoiser_at(t)?.conditional_mean(x))
    }

    /// CFM-optimal velocity `(E[X1 | Xt = x] − x)/(1 − t)`.
    pub fn analytic_velocity(&self, x: ArrayView1<'_, f64>, t: f64) -> Result<Array1<f64>> {
        let m = self.conditional_mean_x1(x, t)?;
        Ok((m - x) / (1.0 - t))
    }
}

/// `E[X1 | Xt = ·]` at a fixed time, with the marginal covariance
/// `C_t = t²Σ + (1−t)²I` factored once.
#[derive(Debug, Clone)]
pub struct TimeDenoiser<'a> {
    prior: &'a GaussianMixture,
    t: f64,
    chol: Cholesky,
    /// `L⁻¹(tμ_k)` per row, with `C_t = L Lᵀ`.
    whitened_means: Array2<f64>,
    log_weights: Array1<f64>,
}

impl TimeDenoiser<'_> {
    pub fn t(&self) -> f64 {
        self.t
    }

    /// Posterior component responsibilities `r_k(x)`.
    pub fn responsibilities(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        let z = self.chol.solve_lower(x);
        self.responsibilities_whitened(&z)
    }

    fn responsibilities_whitened(&self, z: &Array1<f64>) -> Array1<f64> {
        let mut logits: Vec<f64> = self
            .whitened_means
            .rows()
            .into_iter()
            .zip(self.log_weights.iter())
            .map(|(zk, lw)| {
                let diff = z - &zk;
                lw - 0.5 * diff.dot(&diff)
            })
            .collect();
        softmax_in_place(&mut logits);
        Array1::from(logits)
    }

    /// `Σ_k r_k(x)·[μ_k + tΣC_t⁻¹(x − tμ_k)]`, evaluated as
    /// `m̄ + tΣC_t⁻¹(x − t m̄)` with `m̄ = Σ_k r_k μ_k`.
    pub fn conditional_mean(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        let z = self.chol.solve_lower(x);
        let r = self.responsibilities_whitened(&z);
        let mixed_mean = r.dot(&self.prior.means);
        let mixed_white = r.dot(&self.whitened_means);
        let solved = self.chol.solve_upper((&z - &mixed_white).view());
        mixed_mean + self.prior.covariance.dot(&solved) * self.t
    }

    pub fn conditional_mean_batch(&self, xs: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros(xs.raw_dim());
        for (x, mut o) in xs.rows().into_iter().zip(out.rows_mut()) {
            o.assign(&self.conditional_mean(x));
        }
        out
    }
}

/// `y = Hx + n` with `n ~ N(0, σ_n² I)`.
#[derive(Debug, Clone)]
pub struct LinearGaussianObservation {
    operator: LinearOperator,
    noise_std: f64,
    y: Array1<f64>,
}

impl LinearGaussianObservation {
    pub fn new(operator: LinearOperator, noise_std: f64, y: Array1<f64>) -> Result<Self> {
        if !(noise_std > 0.0) || !noise_std.is_finite() {
            return Err(Error::InvalidParameter(format!("noise std must be positive, got {noise_std}")));
        }
        if y.len() != operator.out_dim() {
            return Err(Error::dim("observation length", operator.out_dim(), y.len()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("observation must be finite".into()));
        }
        Ok(Self {
            operator,
            noise_std,
            y,
        })
    }

    /// Simulates `y = H x_true + n`.
    pub fn simulate<R: Rng + ?Sized>(
        operator: LinearOperator,
        noise_std: f64,
        x_true: ArrayView1<'_, f64>,
        rng: &mut R,
    ) -> Result<Self> {
        let clean = operator.apply(x_true)?;
        let noise = standard_normal_vec(rng, clean.len()) * noise_std;
        Self::new(operator, noise_std, clean + noise)
    }

    pub fn operator(&self) -> &LinearOperator {
        &self.operator
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn y(&self) -> &Array1<f64> {
        &self.y
    }

    pub fn dim(&self) -> usize {
        self.operator.in_dim()
    }

    /// Data fidelity `‖Hx − y‖² / (2σ_n²)`.
    pub fn data_fidelity(&self, x: ArrayView1<'_, f64>) -> Result<f64> {
        let r = self.operator.apply(x)? - &self.y;
        Ok(r.dot(&r) / (2.0 * self.noise_std * self.noise_std))
    }

    /// Gradient `Hᵀ(Hx − y)/σ_n²`.
    pub fn data_fidelity_grad(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let r = self.operator.apply(x)? - &self.y;
        Ok(self.operator.apply_adjoint(r.view())? / (self.noise_std * self.noise_std))
    }
}
