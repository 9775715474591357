//! Self-checks of every closed-form identity the solver relies on, reported
//! as a table of measured values against bounds.
//!
//! The refinement checks take the noise schedule as a parameter so that a
//! deliberately wrong schedule can be injected; the reference values are
//! always computed from the correct schedule.

use std::fmt;

use ndarray::{array, Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::flow::{checkpoint, coupling, euler_sample, AnalyticGmmField, Coupling, Mlp};
use crate::flow::train::cfm_loss;
use crate::flower::{self, destination_estimate, refine_mean_with_nu, sample_kappa_with_nu, time_progress};
use crate::gmm::{GaussianMixture, LinearGaussianObservation};
use crate::linalg::norm;
use crate::metrics::{empirical_moments, sliced_w2, wasserstein1d};
use crate::operators::{solve_spd_dense, LinearOperator, ShiftedGram, SpdSolveOptions};
use crate::rng::{standard_normal_matrix, standard_normal_vec};

pub type NuSchedule = fn(f64) -> f64;

/// `(1+t)/√(t² + (1−t)²)`: the schedule with the sign of `t` flipped in the
/// numerator. Used only to show that the moment checks catch it.
pub fn mutant_nu(t: f64) -> f64 {
    (1.0 + t) / (t * t + (1.0 - t) * (1.0 - t)).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub measured: f64,
    pub bound: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.measured <= self.bound
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InvariantReport {
    pub checks: Vec<Check>,
}

impl InvariantReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.checks.iter().filter(|c| !c.passed()).map(|c| c.name).collect()
    }
}

impl fmt::Display for InvariantReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        writeln!(f, "{:<width$}  {:>12}  {:>12}  result", "check", "measured", "bound")?;
        for c in &self.checks {
            writeln!(
                f,
                "{:<width$}  {:>12.4e}  {:>12.4e}  {}",
                c.name,
                c.measured,
                c.bound,
                if c.passed() { "PASS" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct InvariantOptions {
    pub nu: NuSchedule,
    pub seed: u64,
    /// Draws for each Monte Carlo moment check.
    pub draws: usize,
}

impl Default for InvariantOptions {
    fn default() -> Self {
        Self {
            nu: flower::nu,
            seed: 0,
            draws: 100_000,
        }
    }
}

fn toy1() -> LinearGaussianObservation {
    LinearGaussianObservation::new(LinearOperator::row_vector(array![1.5, 1.5]).expect("valid"), 0.25, array![1.0])
        .expect("valid")
}

/// Reference `ν_t`, written independently of the solver's schedule.
fn reference_nu(t: f64) -> f64 {
    (1.0 - t) / (t.powi(2) + (1.0 - t).powi(2)).sqrt()
}

/// Dense `(μ_t, Σ_t)` of the refinement step.
fn dense_refinement(obs: &LinearGaussianObservation, x_hat: ArrayView1<'_, f64>, nu_t: f64) -> (Array1<f64>, Array2<f64>) {
    let h = obs.operator().to_dense();
    let s2 = obs.noise_std().powi(2);
    let d = obs.dim();
    let precision = Array2::<f64>::eye(d) / (nu_t * nu_t) + &(h.t().dot(&h) / s2);
    let rhs = &x_hat / (nu_t * nu_t) + &(h.t().dot(obs.y()) / s2);
    let mean = solve_spd_dense(&precision, rhs.view()).expect("SPD");
    let mut cov = Array2::<f64>::zeros((d, d));
    for j in 0..d {
        let mut e = Array1::<f64>::zeros(d);
        e[j] = 1.0;
        cov.column_mut(j).assign(&solve_spd_dense(&precision, e.view()).expect("SPD"));
    }
    (mean, cov)
}

/// Largest |z-score| of the empirical mean and covariance of `draws` against
/// `(mean, cov)`. Covariance SEs use the Gaussian fourth-moment formula.
fn moment_z_scores(draws: &Array2<f64>, mean: &Array1<f64>, cov: &Array2<f64>) -> (f64, f64) {
    let n = draws.nrows() as f64;
    let m = empirical_moments(draws.view()).expect("n ≥ 2");
    let d = mean.len();
    let mut z_mean = 0.0_f64;
    let mut z_cov = 0.0_f64;
    for i in 0..d {
        z_mean = z_mean.max((m.mean[i] - mean[i]).abs() / (cov[[i, i]] / n).sqrt());
        for j in 0..d {
            let se = ((cov[[i, i]] * cov[[j, j]] + cov[[i, j]].powi(2)) / n).sqrt();
            z_cov = z_cov.max((m.covariance[[i, j]] - cov[[i, j]]).abs() / se);
        }
    }
    (z_mean, z_cov)
}

/// `∫ x1 p(x1) N(x; t x1, (1−t)² I) dx1 / ∫ p(x1) N(…) dx1` on a uniform grid.
fn quadrature_conditional_mean(prior: &GaussianMixture, x: ArrayView1<'_, f64>, t: f64, half_width: f64, n: usize) -> Array1<f64> {
    let h = 2.0 * half_width / n as f64;
    let s2 = (1.0 - t).powi(2);
    let mut num = Array1::<f64>::zeros(2);
    let mut den = 0.0;
    for i in 0..n {
        let a = -half_width + (i as f64 + 0.5) * h;
        for j in 0..n {
            let b = -half_width + (j as f64 + 0.5) * h;
            let p = array![a, b];
            let log_lik = -((x[0] - t * a).powi(2) + (x[1] - t * b).powi(2)) / (2.0 * s2);
            let w = (prior.log_density(p.view()).expect("2-D") + log_lik).exp();
            num[0] += w * a;
            num[1] += w * b;
            den += w;
        }
    }
    num / den
}

fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(1e-300)
}

fn flat_grads(layers: &[crate::flow::Layer<f64>]) -> Vec<f64> {
    layers
        .iter()
        .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied().collect::<Vec<_>>())
        .collect()
}

/// Central finite differences of the CFM loss on a small f64 network.
fn gradient_check(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Mlp::<f64>::new(&[3, 8, 8, 2], &mut rng).expect("valid");
    let x0 = standard_normal_matrix(&mut rng, 16, 2);
    let x1 = standard_normal_matrix(&mut rng, 16, 2);
    let ts: Array1<f64> = (0..16).map(|i| (i as f64 + 0.5) / 16.0).collect();
    let (_, grads) = cfm_loss(&net, x0.view(), x1.view(), ts.view()).expect("shapes");
    let analytic = flat_grads(&grads);
    let h = 1e-5;
    let mut numeric = Vec::with_capacity(analytic.len());
    let loss_at = |layers: Vec<crate::flow::Layer<f64>>| {
        let probe = Mlp::from_layers(layers).expect("same shapes");
        cfm_loss(&probe, x0.view(), x1.view(), ts.view()).expect("shapes").0
    };
    for l in 0..net.layers().len() {
        let n_w = net.layers()[l].weight.len();
        let n_b = net.layers()[l].bias.len();
        for p in 0..n_w + n_b {
            let bump = |delta: f64| {
                let mut layers = net.layers().to_vec();
                if p < n_w {
                    let v = layers[l].weight.as_slice_mut().expect("standard layout");
                    v[p] += delta;
                } else {
                    layers[l].bias[p - n_w] += delta;
                }
                loss_at(layers)
            };
            numeric.push((bump(h) - bump(-h)) / (2.0 * h));
        }
    }
    rel_error(&analytic, &numeric)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn operator_variants(rng: &mut ChaCha8Rng) -> Vec<LinearOperator> {
    vec![
        LinearOperator::dense(standard_normal_matrix(rng, 3, 5)).expect("valid"),
        LinearOperator::row_vector(standard_normal_vec(rng, 5)).expect("valid"),
        LinearOperator::mask(5, [0, 2, 3]).expect("valid"),
        LinearOperator::circulant(standard_normal_vec(rng, 5)).expect("valid"),
        LinearOperator::scaled_identity(5, 0.7).expect("valid"),
        LinearOperator::circulant(standard_normal_vec(rng, 32)).expect("valid"),
    ]
}

pub fn run_invariants(opts: &InvariantOptions) -> InvariantReport {
    let nu = opts.nu;
    let solver = SpdSolveOptions::default();
    let prior = GaussianMixture::toy_prior();
    let field = AnalyticGmmField::new(prior.clone());
    let obs = toy1();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut checks = Vec::new();

    // Schedule endpoints and agreement with the reference formula.
    let worst_nu = (0..=100)
        .map(|k| k as f64 / 100.0)
        .map(|t| (nu(t) - reference_nu(t)).abs())
        .fold(0.0_f64, f64::max);
    checks.push(Check { name: "nu_schedule", measured: worst_nu, bound: 1e-15 });

    // x + (1−t) v(x, t) reproduces the conditional mean exactly.
    let mut worst = 0.0_f64;
    for &t in &[0.1, 0.5, 0.9] {
        for i in 0..21 {
            for j in 0..21 {
                let x = array![-2.0 + 0.2 * i as f64, -2.0 + 0.2 * j as f64];
                let lhs = destination_estimate(&field, x.view(), t);
                let rhs = prior.conditional_mean_x1(x.view(), t).expect("t < 1");
                worst = worst.max(norm((&lhs - &rhs).view()));
            }
        }
    }
    checks.push(Check { name: "destination_identity", measured: worst, bound: 1e-10 });

    let mut worst = 0.0_f64;
    for &t in &[0.1, 0.5, 0.9] {
        for x in [array![0.3, -0.2], array![-1.0, 0.8]] {
            let quad = quadrature_conditional_mean(&prior, x.view(), t, 2.0, 400);
            let exact = prior.conditional_mean_x1(x.view(), t).expect("t < 1");
            worst = worst.max((&quad - &exact).iter().fold(0.0_f64, |m, v| m.max(v.abs())));
        }
    }
    checks.push(Check { name: "conditional_mean_quadrature", measured: worst, bound: 1e-6 });

    // Refinement moments at a fixed state.
    let t = 0.5;
    let dt = 0.01;
    let x_t = array![0.2, -0.3];
    let x_hat = destination_estimate(&field, x_t.view(), t);
    let (mean_ref, cov_ref) = dense_refinement(&obs, x_hat.view(), reference_nu(t));
    let n = opts.draws;
    let mut refined = Array2::<f64>::zeros((n, 2));
    let mut progressed = Array2::<f64>::zeros((n, 2));
    let mu = refine_mean_with_nu(x_hat.view(), &obs, nu(t), &solver).expect("SPD");
    for i in 0..n {
        let kappa = sample_kappa_with_nu(&obs, nu(t), &mut rng, &solver).expect("SPD");
        let x_tilde = &mu + &kappa;
        progressed.row_mut(i).assign(&time_progress(x_tilde.view(), t, dt, &mut rng).expect("t + dt < 1"));
        refined.row_mut(i).assign(&x_tilde);
    }
    let (zm, zc) = moment_z_scores(&refined, &mean_ref, &cov_ref);
    checks.push(Check { name: "refinement_mean_z", measured: zm, bound: 3.0 });
    checks.push(Check { name: "refinement_cov_z", measured: zc, bound: 3.0 });
    let s = t + dt;
    let step_mean = &mean_ref * s;
    let step_cov = &cov_ref * (s * s) + &(Array2::<f64>::eye(2) * (1.0 - s).powi(2));
    let (zm, zc) = moment_z_scores(&progressed, &step_mean, &step_cov);
    checks.push(Check { name: "transition_mean_z", measured: zm, bound: 3.0 });
    checks.push(Check { name: "transition_cov_z", measured: zc, bound: 3.0 });

    // Proximal optimality and solver agreement across operator kinds.
    let mut worst_grad = 0.0_f64;
    let mut worst_cg = 0.0_f64;
    let mut worst_adjoint = 0.0_f64;
    for op in operator_variants(&mut rng) {
        let d = op.in_dim();
        let x = standard_normal_vec(&mut rng, d);
        let u = standard_normal_vec(&mut rng, op.out_dim());
        let lhs = op.apply(x.view()).expect("dims").dot(&u);
        let rhs = x.dot(&op.apply_adjoint(u.view()).expect("dims"));
        worst_adjoint = worst_adjoint.max((lhs - rhs).abs() / (1.0 + norm(x.view()) * norm(u.view())));

        let y = standard_normal_vec(&mut rng, op.out_dim());
        let o = LinearGaussianObservation::new(op, 0.3, y).expect("valid");
        let x_hat = standard_normal_vec(&mut rng, d);
        for &t in &[0.0, 0.3, 0.9] {
            let nu_t = nu(t);
            if !(nu_t > 0.0) {
                continue;
            }
            let mu = refine_mean_with_nu(x_hat.view(), &o, nu_t, &solver).expect("SPD");
            let g = flower::prox_objective_gradient(mu.view(), x_hat.view(), &o, nu_t).expect("dims");
            let scale = 1.0 + norm(x_hat.view()) + norm(o.y().view());
            worst_grad = worst_grad.max(norm(g.view()) / scale);

            let sys = ShiftedGram { op: o.operator(), shift: nu_t.powi(-2), weight: o.noise_std().powi(-2) };
            let b = standard_normal_vec(&mut rng, d);
            let cg = crate::operators::solve_spd(|v| sys.matvec(v), b.view(), &solver).expect("converges");
            let dense = solve_spd_dense(&sys.to_dense(), b.view()).expect("SPD");
            worst_cg = worst_cg.max(norm((&cg - &dense).view()) / norm(dense.view()).max(1e-300));
        }
    }
    checks.push(Check { name: "adjoint_consistency", measured: worst_adjoint, bound: 1e-12 });
    checks.push(Check { name: "prox_optimality", measured: worst_grad, bound: 1e-8 });
    checks.push(Check { name: "cg_vs_cholesky", measured: worst_cg, bound: 1e-8 });

    // Posterior mean against prior × likelihood quadrature.
    let posterior = prior.posterior_linear_gaussian(&obs).expect("valid");
    let weight_gap = (posterior.weights().sum() - 1.0).abs();
    checks.push(Check { name: "posterior_weights_simplex", measured: weight_gap, bound: 1e-12 });
    let (half, m) = (2.0, 600);
    let hstep = 2.0 * half / m as f64;
    let mut num = Array1::<f64>::zeros(2);
    let mut den = 0.0;
    for i in 0..m {
        for j in 0..m {
            let p = array![-half + (i as f64 + 0.5) * hstep, -half + (j as f64 + 0.5) * hstep];
            let w = (prior.log_density(p.view()).expect("2-D") - obs.data_fidelity(p.view()).expect("dims")).exp();
            num += &(&p * w);
            den += w;
        }
    }
    let gap = (&(num / den) - &posterior.mean()).iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    checks.push(Check { name: "posterior_mean_quadrature", measured: gap, bound: 1e-6 });

    // Single-Gaussian flow map is affine: x1 = μ + s·x0.
    let mu_g = array![0.4, -0.3];
    let gauss = GaussianMixture::isotropic(array![1.0], mu_g.clone().insert_axis(ndarray::Axis(0)), 0.09).expect("valid");
    let gauss_field = AnalyticGmmField::new(gauss);
    let mut worst = 0.0_f64;
    for _ in 0..20 {
        let x0 = standard_normal_vec(&mut rng, 2);
        let x1 = euler_sample(&gauss_field, x0.view(), 1000);
        let exact = &mu_g + &(&x0 * 0.3);
        worst = worst.max((&x1 - &exact).iter().fold(0.0_f64, |a, v| a.max(v.abs())));
    }
    checks.push(Check { name: "euler_gaussian_endpoint", measured: worst, bound: 1e-2 });

    // Metrics.
    let a = prior.sample(&mut rng, 500);
    let b = prior.sample(&mut rng, 500);
    let self_dist = sliced_w2(a.view(), a.view(), 32, &mut rng).expect("shapes");
    let ab = sliced_w2(a.view(), b.view(), 32, &mut ChaCha8Rng::seed_from_u64(1)).expect("shapes");
    let ba = sliced_w2(b.view(), a.view(), 32, &mut ChaCha8Rng::seed_from_u64(1)).expect("shapes");
    checks.push(Check { name: "sliced_w2_identity_symmetry", measured: self_dist + (ab - ba).abs(), bound: 0.0 });

    let mut worst_w1 = 0.0_f64;
    let mut worst_ot = 0.0_f64;
    for n in 1..=7 {
        let perms = permutations(n);
        let pa = standard_normal_matrix(&mut rng, n, 2);
        let pb = standard_normal_matrix(&mut rng, n, 2);
        let cost = coupling::squared_distance_matrix(pa.view(), pb.view());
        let best = perms
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        let paired = coupling::pair_batch(Coupling::MinibatchOt, pa.view(), pb.view()).expect("shapes");
        worst_ot = worst_ot.max((coupling::pairing_cost(pa.view(), paired.view()) - best).abs());

        let mut sa: Vec<f64> = pa.column(0).to_vec();
        let mut sb: Vec<f64> = pb.column(0).to_vec();
        let best_1d = perms
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| (sa[i] - sb[j]).powi(2)).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        sa.sort_by(f64::total_cmp);
        sb.sort_by(f64::total_cmp);
        let w = wasserstein1d(&sa, &sb).expect("equal lengths");
        worst_w1 = worst_w1.max((w - (best_1d / n as f64).sqrt()).abs());
    }
    checks.push(Check { name: "w1d_vs_assignment", measured: worst_w1, bound: 1e-12 });
    checks.push(Check { name: "ot_coupling_optimal", measured: worst_ot, bound: 1e-12 });

    // Training gradients and checkpoint round trip.
    checks.push(Check { name: "mlp_gradient_check", measured: gradient_check(opts.seed), bound: 1e-4 });
    let net = Mlp::<f64>::new(&[3, 16, 16, 2], &mut rng).expect("valid");
    let decoded = checkpoint::decode::<f64>(&checkpoint::encode(&net)).expect("round trip");
    let probe = standard_normal_matrix(&mut rng, 8, 3);
    let gap = (&net.forward(probe.view()) - &decoded.forward(probe.view())).iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    checks.push(Check { name: "checkpoint_round_trip", measured: gap, bound: 0.0 });

    InvariantReport { checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mutant_schedule_differs() {
        assert_eq!(mutant_nu(0.0), 1.0);
        assert!((mutant_nu(0.5) - 3.0 * flower::nu(0.5)).abs() < 1e-12);
    }

    #[test]
    fn report_formats_one_line_per_check() {
        let report = InvariantReport {
            checks: vec![
                Check { name: "a", measured: 0.5, bound: 1.0 },
                Check { name: "bb", measured: 2.0, bound: 1.0 },
            ],
        };
        let text = report.to_string();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(1).unwrap().ends_with("PASS"));
        assert!(text.lines().nth(2).unwrap().ends_with("FAIL"));
        assert_eq!(report.failures(), vec!["bb"]);
        assert!(!report.all_passed());
    }
}
