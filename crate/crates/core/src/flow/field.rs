use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::flow::mlp::{Mlp, Scalar};
use crate::gmm::GaussianMixture;

/// Largest time at which the exact mixture field is evaluated; the field has
/// a removable singularity at `t = 1`.
pub const ANALYTIC_T_MAX: f64 = 1.0 - 1e-9;

/// Time-dependent velocity `v_t(x)` on ℝᵈ.
pub trait VelocityField: Send + Sync {
    fn dim(&self) -> usize;

    fn eval(&self, x: ArrayView1<'_, f64>, t: f64) -> Array1<f64>;

    /// Evaluates one point per row. The default loops over [`eval`](Self::eval).
    fn eval_batch(&self, xs: ArrayView2<'_, f64>, t: f64) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros(xs.raw_dim());
        for (x, mut o) in xs.rows().into_iter().zip(out.rows_mut()) {
            o.assign(&self.eval(x, t));
        }
        out
    }
}

impl<V: VelocityField + ?Sized> VelocityField for &V {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn eval(&self, x: ArrayView1<'_, f64>, t: f64) -> Array1<f64> {
        (**self).eval(x, t)
    }

    fn eval_batch(&self, xs: ArrayView2<'_, f64>, t: f64) -> Array2<f64> {
        (**self).eval_batch(xs, t)
    }
}

/// The CFM-optimal field of a Gaussian-mixture target with standard-normal
/// source and independent coupling.
#[derive(Debug, Clone)]
pub struct AnalyticGmmField {
    prior: GaussianMixture,
}

impl AnalyticGmmField {
    pub fn new(prior: GaussianMixture) -> Self {
        Self { prior }
    }

    pub fn prior(&self) -> &GaussianMixture {
        &self.prior
    }

    fn clamp(t: f64) -> f64 {
        t.clamp(0.0, ANALYTIC_T_MAX)
    }
}

impl VelocityField for AnalyticGmmField {
    fn dim(&self) -> usize {
        self.prior.dim()
    }

    fn eval(&self, x: ArrayView1<'_, f64>, t: f64) -> Array1<f64> {
        let t = Self::clamp(t);
        let denoiser = self.prior.denoiser_at(t).expect("clamped time is in [0, 1)");
        (denoiser.conditional_mean(x) - x) / (1.0 - t)
    }

    fn eval_batch(&self, xs: ArrayView2<'_, f64>, t: f64) -> Array2<f64> {
        let t = Self::clamp(t);
        let denoiser = self.prior.denoiser_at(t).expect("clamped time is in [0, 1)");
        (denoiser.conditional_mean_batch(xs) - xs) / (1.0 - t)
    }
}

/// A trained network `v_θ(x, t)` taking `[x, t]` as a `(d+1)`-vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpField<F = f32> {
    net: Mlp<F>,
}

impl<F: Scalar> MlpField<F> {
    pub fn new(net: Mlp<F>) -> crate::Result<Self> {
        if net.in_dim() != net.out_dim() + 1 {
            return Err(crate::Error::InvalidParameter(format!(
                "velocity network must map d+1 inputs to d outputs, got {:?}",
                net.sizes()
            )));
        }
        Ok(Self { net })
    }

    pub fn net(&self) -> &Mlp<F> {
        &self.net
    }

    pub fn into_net(self) -> Mlp<F> {
        self.net
    }

    /// Network input `[x, t]` for every row.
    pub fn assemble_input(xs: ArrayView2<'_, f64>, ts: ArrayView1<'_, f64>) -> Array2<F> {
        let (n, d) = xs.dim();
        let mut input = Array2::<F>::zeros((n, d + 1));
        input
            .slice_mut(ndarray::s![.., ..d])
            .zip_mut_with(&xs, |a, &b| *a = F::from_f64_lossy(b));
        input
            .column_mut(d)
            .zip_mut_with(&ts, |a, &b| *a = F::from_f64_lossy(b));
        input
    }
}

impl<F: Scalar> VelocityField for MlpField<F> {
    fn dim(&self) -> usize {
        self.net.out_dim()
    }

    fn eval(&self, x: ArrayView1<'_, f64>, t: f64) -> Array1<f64> {
        self.eval_batch(x.insert_axis(Axis(0)), t).row(0).to_owned()
    }

    fn eval_batch(&self, xs: ArrayView2<'_, f64>, t: f64) -> Array2<f64> {
        let ts = Array1::from_elem(xs.nrows(), t);
        let input = Self::assemble_input(xs, ts.view());
        self.net.forward(input.view()).mapv(|v| v.to_f64_lossless())
    }
}

/// Forward Euler integration of `dx/dt = v_t(x)` from `t = 0` to `t = 1`.
pub fn euler_sample<V: VelocityField + ?Sized>(field: &V, x0: ArrayView1<'_, f64>, n_steps: usize) -> Array1<f64> {
    let dt = 1.0 / n_steps as f64;
    let mut x = x0.to_owned();
    for k in 0..n_steps {
        let v = field.eval(x.view(), k as f64 * dt);
        x.scaled_add(dt, &v);
    }
    x
}

/// Like [`euler_sample`] but keeps every state `x_{k/N}`, `k = 0..=N`.
pub fn euler_trajectory<V: VelocityField + ?Sized>(
    field: &V,
    x0: ArrayView1<'_, f64>,
    n_steps: usize,
) -> Vec<Array1<f64>> {
    let dt = 1.0 / n_steps as f64;
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut x = x0.to_owned();
    states.push(x.clone());
    for k in 0..n_steps {
        let v = field.eval(x.view(), k as f64 * dt);
        x.scaled_add(dt, &v);
        states.push(x.clone());
    }
    states
}

/// Euler integration of many starting points at once (one per row).
pub fn euler_sample_batch<V: VelocityField + ?Sized>(
    field: &V,
    x0s: ArrayView2<'_, f64>,
    n_steps: usize,
) -> Array2<f64> {
    let dt = 1.0 / n_steps as f64;
    let mut xs = x0s.to_owned();
    for k in 0..n_steps {
        let v = field.eval_batch(xs.view(), k as f64 * dt);
        xs.scaled_add(dt, &v);
    }
    xs
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Constant(Array1<f64>);

    impl VelocityField for Constant {
        fn dim(&self) -> usize {
            self.0.len()
        }

        fn eval(&self, _x: ArrayView1<'_, f64>, _t: f64) -> Array1<f64> {
            self.0.clone()
        }
    }

    #[test]
    fn euler_on_constant_fields() {
        let x0 = array![0.5, -1.0];
        let zero = Constant(array![0.0, 0.0]);
        assert_eq!(euler_sample(&zero, x0.view(), 7), x0);
        let c = Constant(array![0.25, 2.0]);
        for n in [1, 3, 1000] {
            let x1 = euler_sample(&c, x0.view(), n);
            assert_abs_diff_eq!(x1[0], 0.75, epsilon = 1e-12);
            assert_abs_diff_eq!(x1[1], 1.0, epsilon = 1e-12);
        }
        let traj = euler_trajectory(&c, x0.view(), 4);
        assert_eq!(traj.len(), 5);
        assert_eq!(traj[0], x0);
    }

    #[test]
    fn gaussian_target_endpoint_matches_closed_form() {
        // For N(μ, s²I) the flow map is x1 = μ + s·x0 (affine), so Euler with
        // N = 1000 must land within 1e-2 per coordinate.
        let mu = array![0.4, -0.3];
        let s2 = 0.09;
        let prior = GaussianMixture::uniform(mu.clone().insert_axis(Axis(0)), ndarray::Array2::eye(2) * s2).unwrap();
        let field = AnalyticGmmField::new(prior);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x0 = crate::rng::standard_normal_vec(&mut rng, 2);
            let x1 = euler_sample(&field, x0.view(), 1000);
            let exact = &mu + &(&x0 * s2.sqrt());
            for i in 0..2 {
                assert!((x1[i] - exact[i]).abs() <= 1e-2);
            }
        }
    }

    #[test]
    fn analytic_field_identity_and_clamp() {
        let prior = GaussianMixture::toy_prior();
        let field = AnalyticGmmField::new(prior.clone());
        let x = array![0.2, 0.9];
        for t in [0.0, 0.25, 0.5, 0.99, 1.0 - 1e-6] {
            let v = field.eval(x.view(), t);
            let m = prior.conditional_mean_x1(x.view(), t).unwrap();
            let lhs = &x + &(v * (1.0 - t));
            assert_abs_diff_eq!(lhs[0], m[0], epsilon = 1e-10);
            assert_abs_diff_eq!(lhs[1], m[1], epsilon = 1e-10);
        }
        let at_one = field.eval(x.view(), 1.0);
        assert!(at_one.iter().all(|v| v.is_finite()));
        let xs = array![[0.2, 0.9], [-1.0, 0.3]];
        let batch = field.eval_batch(xs.view(), 0.4);
        assert_eq!(batch.row(1), field.eval(xs.row(1), 0.4));
    }

    #[test]
    fn mlp_field_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = Mlp::<f32>::new(&[3, 8, 2], &mut rng).unwrap();
        let field = MlpField::new(net).unwrap();
        let xs = array![[0.1, 0.2], [0.3, -0.4], [1.0, 1.0]];
        let batch = field.eval_batch(xs.view(), 0.3);
        assert_eq!(batch.dim(), (3, 2));
        let single = field.eval(xs.row(1), 0.3);
        for i in 0..2 {
            assert_abs_diff_eq!(single[i], batch[[1, i]], epsilon = 1e-6);
        }
        let bad = Mlp::<f32>::new(&[2, 8, 2], &mut rng).unwrap();
        assert!(MlpField::new(bad).is_err());
    }
}
