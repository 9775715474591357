//! The three-step posterior sampler built on a pre-trained velocity field.
//!
//! Starting from `x_0 ~ N(0, I)`, each of the `N` iterations at `t = k/N`
//!
//! 1. estimates the destination `x̂₁ = x_t + (1−t) v_t(x_t)`,
//! 2. refines it against the measurement, `x̃₁ = μ_t + γ κ_t`, where
//!    `μ_t = prox_{ν_t² F_y}(x̂₁)` and `κ_t ~ N(0, Σ_t)` with
//!    `Σ_t = (ν_t⁻² I + σ_n⁻² HᵀH)⁻¹`,
//! 3. moves along the straight path, `x_{t+Δt} = (1−t−Δt) ε + (t+Δt) x̃₁`.
//!
//! With `γ = 1` the iteration draws from the Gaussian approximation of the
//! transition `X_{t+Δt} | X_t, Y`. With `γ = 0` it is a point-seeking scheme
//! that concentrates on high-probability regions.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::VelocityField;
use crate::gmm::LinearGaussianObservation;
use crate::operators::{ShiftedGram, SpdSolveOptions};
use crate::rng::{standard_normal_vec, stream_rng, LabRng};

/// Tolerance for recognising the terminal step `t + Δt = 1`.
const TERMINAL_EPS: f64 = 1e-12;

/// `ν_t = (1−t)/√(t² + (1−t)²)`.
pub fn nu(t: f64) -> f64 {
    let s = 1.0 - t;
    s / (t * t + s * s).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowerConfig {
    pub n_steps: usize,
    /// Uncertainty flag, 0 or 1.
    pub gamma: u8,
    pub seed: u64,
    pub n_avg: usize,
    pub record_trajectory: bool,
    #[serde(skip)]
    pub solver: SpdSolveOptions,
}

impl Default for FlowerConfig {
    fn default() -> Self {
        Self {
            n_steps: 1000,
            gamma: 1,
            seed: 0,
            n_avg: 1,
            record_trajectory: false,
            solver: SpdSolveOptions::default(),
        }
    }
}

impl FlowerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::InvalidParameter("n_steps must be at least 1".into()));
        }
        if self.gamma > 1 {
            return Err(Error::InvalidParameter(format!("gamma must be 0 or 1, got {}", self.gamma)));
        }
        if self.n_avg == 0 {
            return Err(Error::InvalidParameter("n_avg must be at least 1".into()));
        }
        self.solver.validate()
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.n_steps as f64
    }

    fn uses_uncertainty(&self) -> bool {
        self.gamma == 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub t: f64,
    pub x_t: Array1<f64>,
    pub x_hat1: Array1<f64>,
    pub mu: Array1<f64>,
    pub x_tilde1: Array1<f64>,
}

/// One entry per iteration, `t_k = k/N`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryRecord {
    pub steps: Vec<TrajectoryStep>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowerOutput {
    pub sample: Array1<f64>,
    pub trajectory: Option<TrajectoryRecord>,
}

/// Step 1: `x̂₁ = x_t + (1−t) v_t(x_t)`.
pub fn destination_estimate<V: VelocityField + ?Sized>(field: &V, x_t: ArrayView1<'_, f64>, t: f64) -> Array1<f64> {
    let remaining = 1.0 - t;
    if remaining == 0.0 {
        return x_t.to_owned();
    }
    let v = field.eval(x_t, t);
    &x_t + &(v * remaining)
}

fn check_nu(nu_t: f64) -> Result<()> {
    if !(nu_t > 0.0) || !nu_t.is_finite() {
        return Err(Error::Domain(format!("refinement needs ν_t > 0, got {nu_t}")));
    }
    Ok(())
}

fn precision(obs: &LinearGaussianObservation, nu_t: f64) -> ShiftedGram<'_> {
    ShiftedGram {
        op: obs.operator(),
        shift: nu_t.powi(-2),
        weight: obs.noise_std().powi(-2),
    }
}

/// Step 2 mean: `prox_{ν_t² F_y}(x̂₁)`, solving
/// `(ν_t⁻² I + σ_n⁻² HᵀH) μ = ν_t⁻² x̂₁ + σ_n⁻² Hᵀy`.
pub fn refine_mean(
    x_hat1: ArrayView1<'_, f64>,
    obs: &LinearGaussianObservation,
    t: f64,
    solver: &SpdSolveOptions,
) -> Result<Array1<f64>> {
    refine_mean_with_nu(x_hat1, obs, nu(t), solver)
}

pub fn refine_mean_with_nu(
    x_hat1: ArrayView1<'_, f64>,
    obs: &LinearGaussianObservation,
    nu_t: f64,
    solver: &SpdSolveOptions,
) -> Result<Array1<f64>> {
    check_nu(nu_t)?;
    if x_hat1.len() != obs.dim() {
        return Err(Error::dim("refinement input", obs.dim(), x_hat1.len()));
    }
    let sys = precision(obs, nu_t);
    let rhs = &x_hat1 * sys.shift + &(obs.operator().apply_adjoint(obs.y().view())? * sys.weight);
    sys.solve(rhs.view(), solver)
}

/// Gradient of `ν_t² F_y(w) + ½‖w − x̂₁‖²` at `w`; zero at the prox point.
pub fn prox_objective_gradient(
    w: ArrayView1<'_, f64>,
    x_hat1: ArrayView1<'_, f64>,
    obs: &LinearGaussianObservation,
    nu_t: f64,
) -> Result<Array1<f64>> {
    Ok(obs.data_fidelity_grad(w)? * (nu_t * nu_t) + &(&w - &x_hat1))
}

/// `κ_t = Σ_t (ν_t⁻¹ ε₁ + σ_n⁻¹ Hᵀ ε₂)`, which has law `N(0, Σ_t)`.
/// Draws `ε₁ ∈ ℝᵈ` then `ε₂ ∈ ℝᴹ`.
pub fn sample_kappa<R: Rng + ?Sized>(
    obs: &LinearGaussianObservation,
    t: f64,
    rng: &mut R,
    solver: &SpdSolveOptions,
) -> Result<Array1<f64>> {
    sample_kappa_with_nu(obs, nu(t), rng, solver)
}

pub fn sample_kappa_with_nu<R: Rng + ?Sized>(
    obs: &LinearGaussianObservation,
    nu_t: f64,
    rng: &mut R,
    solver: &SpdSolveOptions,
) -> Result<Array1<f64>> {
    check_nu(nu_t)?;
    let op = obs.operator();
    let eps1 = standard_normal_vec(rng, op.in_dim());
    let eps2 = standard_normal_vec(rng, op.out_dim());
    let rhs = eps1 / nu_t + &(op.apply_adjoint(eps2.view())? / obs.noise_std());
    precision(obs, nu_t).solve(rhs.view(), solver)
}

/// Step 2: `x̃₁ = μ_t + γ κ_t`. With `γ = 0` no randomness is consumed.
pub fn refine<R: Rng + ?Sized>(
    x_hat1: ArrayView1<'_, f64>,
    obs: &LinearGaussianObservation,
    t: f64,
    gamma: u8,
    rng: &mut R,
    solver: &SpdSolveOptions,
) -> Result<Array1<f64>> {
    let (_, x_tilde) = refine_parts(x_hat1, obs, nu(t), gamma, rng, solver)?;
    Ok(x_tilde)
}

fn refine_parts<R: Rng + ?Sized>(
    x_hat1: ArrayView1<'_, f64>,
    obs: &LinearGaussianObservation,
    nu_t: f64,
    gamma: u8,
    rng: &mut R,
    solver: &SpdSolveOptions,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let mu = refine_mean_with_nu(x_hat1, obs, nu_t, solver)?;
    match gamma {
        0 => Ok((mu.clone(), mu)),
        1 => {
            let kappa = sample_kappa_with_nu(obs, nu_t, rng, solver)?;
            let x_tilde = &mu + &kappa;
            Ok((mu, x_tilde))
        }
        g => Err(Error::InvalidParameter(format!("gamma must be 0 or 1, got {g}"))),
    }
}

/// Step 3: `(1−t−Δt) ε + (t+Δt) x̃₁` with fresh `ε ~ N(0, I)`. Landing on
/// `t + Δt = 1` returns `x̃₁` without drawing.
pub fn time_progress<R: Rng + ?Sized>(x_tilde1: ArrayView1<'_, f64>, t: f64, dt: f64, rng: &mut R) -> Result<Array1<f64>> {
    let next = t + dt;
    if next > 1.0 + TERMINAL_EPS || dt <= 0.0 {
        return Err(Error::Domain(format!("time step {t} + {dt} leaves (0, 1]")));
    }
    let noise_scale = 1.0 - next;
    if noise_scale <= TERMINAL_EPS {
        return Ok(x_tilde1.to_owned());
    }
    let eps = standard_normal_vec(rng, x_tilde1.len());
    Ok(eps * noise_scale + &(&x_tilde1 * next))
}

/// Runs the sampler for every generator in `rngs` in lockstep, evaluating the
/// field once per step on the stacked states. Each run consumes only its own
/// generator, in the order: `x_0`, then per step `ε₁, ε₂` (if `γ = 1`) and `ε`
/// (except on the final step).
pub fn run_lockstep<V, R>(
    field: &V,
    obs: &LinearGaussianObservation,
    cfg: &FlowerConfig,
    rngs: &mut [R],
) -> Result<Vec<FlowerOutput>>
where
    V: VelocityField + ?Sized,
    R: Rng,
{
    cfg.validate()?;
    let d = obs.dim();
    if field.dim() != d {
        return Err(Error::dim("velocity field dimension", d, field.dim()));
    }
    let n = rngs.len();
    let dt = cfg.dt();
    let mut xs = Array2::<f64>::zeros((n, d));
    for (mut row, rng) in xs.rows_mut().into_iter().zip(rngs.iter_mut()) {
        row.assign(&standard_normal_vec(rng, d));
    }
    let mut trajectories: Vec<TrajectoryRecord> = if cfg.record_trajectory {
        vec![TrajectoryRecord { steps: Vec::with_capacity(cfg.n_steps) }; n]
    } else {
        Vec::new()
    };
    let gamma = if cfg.uses_uncertainty() { 1 } else { 0 };

    for k in 0..cfg.n_steps {
        let t = k as f64 / cfg.n_steps as f64;
        let nu_t = nu(t);
        let v = field.eval_batch(xs.view(), t);
        let x_hat = &xs + &(v * (1.0 - t));
        let mut next = Array2::<f64>::zeros((n, d));
        for (i, rng) in rngs.iter_mut().enumerate() {
            let at_step = |e: Error| Error::AtStep { step: k, source: Box::new(e) };
            let (mu, x_tilde) =
                refine_parts(x_hat.row(i), obs, nu_t, gamma, rng, &cfg.solver).map_err(at_step)?;
            let x_next = if k + 1 == cfg.n_steps {
                x_tilde.clone()
            } else {
                time_progress(x_tilde.view(), t, dt, rng).map_err(at_step)?
            };
            if x_next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { step: k });
            }
            if cfg.record_trajectory {
                trajectories[i].steps.push(TrajectoryStep {
                    t,
                    x_t: xs.row(i).to_owned(),
                    x_hat1: x_hat.row(i).to_owned(),
                    mu,
                    x_tilde1: x_tilde,
                });
            }
            next.row_mut(i).assign(&x_next);
        }
        xs = next;
    }

    let mut trajectories = trajectories.into_iter();
    Ok(xs
        .rows()
        .into_iter()
        .map(|row| FlowerOutput {
            sample: row.to_owned(),
            trajectory: trajectories.next(),
        })
        .collect())
}

/// A single run driven by the caller's generator.
pub fn run<V, R>(field: &V, obs: &LinearGaussianObservation, cfg: &FlowerConfig, rng: &mut R) -> Result<FlowerOutput>
where
    V: VelocityField + ?Sized,
    R: Rng,
{
    let mut out = run_lockstep(field, obs, cfg, std::slice::from_mut(rng))?;
    Ok(out.pop().expect("one run requested"))
}

/// Generator of run `index` under `cfg.seed`.
pub fn run_rng(cfg: &FlowerConfig, index: u64) -> LabRng {
    stream_rng(cfg.seed, index)
}

/// Runs with stream indices `first..first + count`, in lockstep.
pub fn run_batch<V>(
    field: &V,
    obs: &LinearGaussianObservation,
    cfg: &FlowerConfig,
    first: u64,
    count: usize,
) -> Result<Vec<FlowerOutput>>
where
    V: VelocityField + ?Sized,
{
    let mut rngs: Vec<LabRng> = (0..count as u64).map(|i| run_rng(cfg, first + i)).collect();
    run_lockstep(field, obs, cfg, &mut rngs)
}

/// Coordinate-wise mean of `cfg.n_avg` independent runs (streams
/// `index·n_avg .. (index+1)·n_avg`). A point estimator, not a posterior
/// sample.
pub fn run_averaged_at<V>(field: &V, obs: &LinearGaussianObservation, cfg: &FlowerConfig, index: u64) -> Result<Array1<f64>>
where
    V: VelocityField + ?Sized,
{
    cfg.validate()?;
    let runs = run_batch(field, obs, cfg, index * cfg.n_avg as u64, cfg.n_avg)?;
    let mut mean = Array1::<f64>::zeros(obs.dim());
    for r in &runs {
        mean += &r.sample;
    }
    Ok(mean / cfg.n_avg as f64)
}

pub fn run_averaged<V>(field: &V, obs: &LinearGaussianObservation, cfg: &FlowerConfig) -> Result<Array1<f64>>
where
    V: VelocityField + ?Sized,
{
    run_averaged_at(field, obs, cfg, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::flow::AnalyticGmmField;
    use crate::gmm::GaussianMixture;
    use crate::operators::LinearOperator;

    struct Zero(usize);

    impl VelocityField for Zero {
        fn dim(&self) -> usize {
            self.0
        }

        fn eval(&self, _x: ArrayView1<'_, f64>, _t: f64) -> Array1<f64> {
            Array1::zeros(self.0)
        }
    }

    fn toy1() -> LinearGaussianObservation {
        LinearGaussianObservation::new(LinearOperator::row_vector(array![1.5, 1.5]).unwrap(), 0.25, array![1.0])
            .unwrap()
    }

    fn dense_sigma_t(obs: &LinearGaussianObservation, nu_t: f64) -> Array2<f64> {
        let h = obs.operator().to_dense();
        let p = Array2::<f64>::eye(obs.dim()) / (nu_t * nu_t) + &(h.t().dot(&h) / obs.noise_std().powi(2));
        let det = p[[0, 0]] * p[[1, 1]] - p[[0, 1]] * p[[1, 0]];
        array![[p[[1, 1]], -p[[0, 1]]], [-p[[1, 0]], p[[0, 0]]]] / det
    }

    #[test]
    fn nu_examples() {
        assert_eq!(nu(0.0), 1.0);
        assert_eq!(nu(1.0), 0.0);
        assert_abs_diff_eq!(nu(0.5), std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-15);
        let mut prev = nu(0.0);
        for k in 1..=1000 {
            let cur = nu(k as f64 / 1000.0);
            assert!(cur < prev);
            prev = cur;
        }
    }

    #[test]
    fn destination_examples() {
        let prior = GaussianMixture::toy_prior();
        let field = AnalyticGmmField::new(prior.clone());
        let x = array![0.3, -0.6];
        assert_eq!(destination_estimate(&field, x.view(), 1.0), x);
        assert_eq!(destination_estimate(&Zero(2), x.view(), 0.4), x);
        let got = destination_estimate(&field, x.view(), 0.4);
        let want = prior.conditional_mean_x1(x.view(), 0.4).unwrap();
        assert_abs_diff_eq!(got[0], want[0], epsilon = 1e-14);
        assert_abs_diff_eq!(got[1], want[1], epsilon = 1e-14);
    }

    #[test]
    fn refine_mean_examples() {
        let opts = SpdSolveOptions::default();
        let x_hat = array![0.4, -1.2, 2.0];
        let empty = LinearGaussianObservation::new(LinearOperator::mask(3, []).unwrap(), 0.5, array![]).unwrap();
        let mu = refine_mean(x_hat.view(), &empty, 0.3, &opts).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(mu[i], x_hat[i], epsilon = 1e-14);
        }

        let t = 0.3;
        let y = array![1.0, 0.0, -1.0];
        let id = LinearOperator::scaled_identity(3, 1.0).unwrap();
        let equal = LinearGaussianObservation::new(id.clone(), nu(t), y.clone()).unwrap();
        let mu = refine_mean(x_hat.view(), &equal, t, &opts).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(mu[i], 0.5 * (x_hat[i] + y[i]), epsilon = 1e-12);
        }

        let hard = LinearGaussianObservation::new(id, 1e-8, y.clone()).unwrap();
        let mu = refine_mean(x_hat.view(), &hard, t, &opts).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(mu[i], y[i], epsilon = 1e-6);
        }
        assert!(matches!(refine_mean(x_hat.view(), &hard, 1.0, &opts), Err(Error::Domain(_))));
    }

    #[test]
    fn refine_branches() {
        let obs = toy1();
        let x_hat = array![0.1, 0.2];
        let opts = SpdSolveOptions::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mu = refine_mean(x_hat.view(), &obs, 0.2, &opts).unwrap();
        assert_eq!(refine(x_hat.view(), &obs, 0.2, 0, &mut rng, &opts).unwrap(), mu);

        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        let with = refine(x_hat.view(), &obs, 0.2, 1, &mut a, &opts).unwrap();
        let kappa = sample_kappa(&obs, 0.2, &mut b, &opts).unwrap();
        let diff = &with - &mu;
        assert_abs_diff_eq!(diff[0], kappa[0], epsilon = 1e-14);
        assert_abs_diff_eq!(diff[1], kappa[1], epsilon = 1e-14);
        assert!(refine(x_hat.view(), &obs, 0.2, 2, &mut a, &opts).is_err());
    }

    #[test]
    fn kappa_determinism_and_null_operator_law() {
        let obs = toy1();
        let opts = SpdSolveOptions::default();
        let draw = |seed| sample_kappa(&obs, 0.4, &mut ChaCha8Rng::seed_from_u64(seed), &opts).unwrap();
        assert_eq!(draw(1), draw(1));
        assert_ne!(draw(1), draw(2));

        let t = 0.35;
        let empty = LinearGaussianObservation::new(LinearOperator::mask(1, []).unwrap(), 0.1, array![]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| sample_kappa(&empty, t, &mut rng, &opts).unwrap()[0]).collect();
        let var = draws.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let std = var.sqrt();
        // SE of the sample standard deviation of a Gaussian is σ/√(2n).
        let se = nu(t) / (2.0 * n as f64).sqrt();
        assert!((std - nu(t)).abs() <= 3.0 * se, "{} vs {}", std, nu(t));
    }

    #[test]
    fn kappa_covariance_matches_dense_sigma() {
        let obs = toy1();
        let t = 0.6;
        let sigma = dense_sigma_t(&obs, nu(t));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100_000;
        let mut acc = Array2::<f64>::zeros((2, 2));
        for _ in 0..n {
            let k = sample_kappa(&obs, t, &mut rng, &SpdSolveOptions::default()).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    acc[[i, j]] += k[i] * k[j];
                }
            }
        }
        let emp = acc / n as f64;
        for i in 0..2 {
            for j in 0..2 {
                let se = ((sigma[[i, i]] * sigma[[j, j]] + sigma[[i, j]].powi(2)) / n as f64).sqrt();
                assert!((emp[[i, j]] - sigma[[i, j]]).abs() <= 3.0 * se);
            }
        }
    }

    #[test]
    fn time_progress_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let xt = array![0.3, -0.4];
        assert_eq!(time_progress(xt.view(), 0.9, 0.1, &mut rng).unwrap(), xt);
        assert!(time_progress(xt.view(), 0.95, 0.1, &mut rng).is_err());

        let (t, dt) = (0.2, 0.3);
        let zero = array![0.0];
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| time_progress(zero.view(), t, dt, &mut rng).unwrap()[0]).collect();
        let std = (draws.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        let want = 1.0 - t - dt;
        assert!((std - want).abs() <= 3.0 * want / (2.0 * n as f64).sqrt());

        let center = array![1.0, -2.0];
        let mut mean = Array1::<f64>::zeros(2);
        let mut sq = Array1::<f64>::zeros(2);
        for _ in 0..n {
            let x = time_progress(center.view(), t, dt, &mut rng).unwrap();
            mean += &x;
            sq += &x.mapv(|v| v * v);
        }
        mean /= n as f64;
        let var = sq / n as f64 - &mean.mapv(|m| m * m);
        for i in 0..2 {
            let se = want / (n as f64).sqrt();
            assert!((mean[i] - (t + dt) * center[i]).abs() <= 3.0 * se);
            assert!((var[i] - want * want).abs() <= 3.0 * want * want * (2.0 / n as f64).sqrt());
        }
    }

    #[test]
    fn single_step_schedule() {
        let prior = GaussianMixture::toy_prior();
        let field = AnalyticGmmField::new(prior.clone());
        let obs = toy1();
        let cfg = FlowerConfig {
            n_steps: 1,
            gamma: 0,
            record_trajectory: true,
            ..FlowerConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let out = run(&field, &obs, &cfg, &mut rng).unwrap();
        let mut replay = ChaCha8Rng::seed_from_u64(9);
        let x0 = standard_normal_vec(&mut replay, 2);
        let x_hat = prior.conditional_mean_x1(x0.view(), 0.0).unwrap();
        let mu = refine_mean(x_hat.view(), &obs, 0.0, &cfg.solver).unwrap();
        assert_abs_diff_eq!(out.sample[0], mu[0], epsilon = 1e-14);
        assert_abs_diff_eq!(out.sample[1], mu[1], epsilon = 1e-14);
        let traj = out.trajectory.unwrap();
        assert_eq!(traj.steps.len(), 1);
        assert_eq!(traj.steps[0].x_t, x0);
    }

    #[test]
    fn lockstep_matches_individual_runs_and_records() {
        let field = AnalyticGmmField::new(GaussianMixture::toy_prior());
        let obs = toy1();
        let cfg = FlowerConfig {
            n_steps: 20,
            seed: 42,
            record_trajectory: true,
            ..FlowerConfig::default()
        };
        let batch = run_batch(&field, &obs, &cfg, 3, 4).unwrap();
        for (i, b) in batch.iter().enumerate() {
            let single = run(&field, &obs, &cfg, &mut run_rng(&cfg, 3 + i as u64)).unwrap();
            assert_eq!(&single, b);
            let traj = b.trajectory.as_ref().unwrap();
            assert_eq!(traj.steps.len(), 20);
            for (k, s) in traj.steps.iter().enumerate() {
                assert_eq!(s.t, k as f64 / 20.0);
            }
        }
        let avg = run_averaged(&field, &obs, &FlowerConfig { n_avg: 1, ..cfg.clone() }).unwrap();
        assert_eq!(avg, run(&field, &obs, &cfg, &mut run_rng(&cfg, 0)).unwrap().sample);
    }

    #[test]
    fn config_validation() {
        assert!(FlowerConfig { n_steps: 0, ..FlowerConfig::default() }.validate().is_err());
        assert!(FlowerConfig { gamma: 3, ..FlowerConfig::default() }.validate().is_err());
        assert!(FlowerConfig { n_avg: 0, ..FlowerConfig::default() }.validate().is_err());
        let field = AnalyticGmmField::new(GaussianMixture::toy_prior());
        let wrong = LinearGaussianObservation::new(LinearOperator::scaled_identity(3, 1.0).unwrap(), 1.0, array![0.0, 0.0, 0.0]).unwrap();
        assert!(run_batch(&field, &wrong, &FlowerConfig::default(), 0, 1).is_err());
    }

    #[test]
    fn solver_failure_carries_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let kernel = standard_normal_vec(&mut rng, 96);
        let op = LinearOperator::circulant(kernel).unwrap();
        let y = Array1::<f64>::zeros(96) + 1.0;
        let obs = LinearGaussianObservation::new(op, 0.01, y).unwrap();
        let cfg = FlowerConfig {
            n_steps: 3,
            solver: SpdSolveOptions { rel_tolerance: 1e-15, max_iterations: Some(1) },
            ..FlowerConfig::default()
        };
        let err = run(&Zero(96), &obs, &cfg, &mut rng).unwrap_err();
        assert!(matches!(err, Error::AtStep { step: 0, .. }), "{err:?}");
        assert!(err.is_numerical());
    }
}
