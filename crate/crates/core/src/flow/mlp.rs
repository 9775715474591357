//! Fully connected network with SiLU hidden activations and a linear output
//! layer, with hand-derived reverse-mode gradients and an Adam optimizer.
//!
//! The network is generic over the float type so that the same forward and
//! backward code is used for `f32` training and `f64` gradient checks.

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;

use crate::error::{Error, Result};

pub trait Scalar:
    LinalgScalar
    + Float
    + ScalarOperand
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Width in bytes, recorded in checkpoints.
    const BYTES: u8;

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("float conversion")
    }

    fn to_f64_lossless(self) -> f64 {
        self.to_f64().expect("float conversion")
    }

    /// Logistic function `1/(1 + e^{−z})`.
    fn sigmoid(z: Self) -> Self {
        Self::one() / (Self::one() + (-z).exp())
    }
}

impl Scalar for f32 {
    const BYTES: u8 = 4;

    /// Branch-free so that the activation loops vectorize; `e^{−z}` via
    /// `2^n · p(r)` with `|r| ≤ ln2/2` and a degree-6 Taylor polynomial
    /// (relative error below 3e-7). Rounding uses the 1.5·2²³ shifter
    /// rather than `f32::round`, which is a libm call on baseline x86-64
    /// and blocks vectorization.
    #[inline]
    fn sigmoid(z: f32) -> f32 {
        const SHIFTER: f32 = 12_582_912.0;
        let x = (-z).clamp(-87.0, 88.0);
        let shifted = x * std::f32::consts::LOG2_E + SHIFTER;
        let n = shifted - SHIFTER;
        let r = x - n * 0.693_145_75 - n * 1.428_606_8e-6;
        let p = 1.0
            + r * (1.0 + r * (0.5 + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
        // the shifter's low mantissa bits hold n
        let exponent = shifted.to_bits().wrapping_sub(SHIFTER.to_bits()).wrapping_add(127);
        1.0 / (1.0 + p * f32::from_bits(exponent << 23))
    }
}

impl Scalar for f64 {
    const BYTES: u8 = 8;
}

#[inline]
fn sigmoid<F: Scalar>(z: F) -> F {
    F::sigmoid(z)
}

#[inline]
fn silu<F: Scalar>(z: F) -> F {
    z * sigmoid(z)
}

#[cfg(test)]
fn silu_grad<F: Scalar>(z: F) -> F {
    let s = sigmoid(z);
    s * (F::one() + z * (F::one() - s))
}

/// Affine layer `a ↦ a Wᵀ + b` with `W` stored `out × in`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> Layer<F> {
    pub(crate) fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<F> {
    layers: Vec<Layer<F>>,
}

/// Backpropagated-signal buffers for [`Mlp::backward_into`].
#[derive(Debug)]
pub struct BackwardScratch<F> {
    delta: Array2<F>,
    upstream: Array2<F>,
}

impl<F: Scalar> Default for BackwardScratch<F> {
    fn default() -> Self {
        Self { delta: empty(), upstream: empty() }
    }
}

fn empty<F: Scalar>() -> Array2<F> {
    Array2::zeros((0, 0))
}

/// `buf` with shape `dim`, reallocated (zeroed) only when the shape changes.
fn reshaped<F: Scalar>(buf: &mut Array2<F>, dim: (usize, usize)) -> &mut Array2<F> {
    if buf.dim() != dim {
        *buf = Array2::zeros(dim);
    }
    buf
}

/// Per-layer inputs, hidden pre-activations and sigmoid gates, kept for the
/// backward pass. Reusing one cache across batches of the same size avoids
/// reallocating the activations.
#[derive(Debug)]
pub struct ForwardCache<F> {
    layer_inputs: Vec<Array2<F>>,
    pre_activations: Vec<Array2<F>>,
    gates: Vec<Array2<F>>,
    output: Array2<F>,
}

impl<F: Scalar> Default for ForwardCache<F> {
    fn default() -> Self {
        Self { layer_inputs: Vec::new(), pre_activations: Vec::new(), gates: Vec::new(), output: empty() }
    }
}

impl<F: Scalar> ForwardCache<F> {
    pub fn output(&self) -> &Array2<F> {
        &self.output
    }
}

impl<F: Scalar> Mlp<F> {
    /// Initializes every weight and bias from `U(−1/√fan_in, 1/√fan_in)`,
    /// layer by layer, weights (row-major) before biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidParameter(format!("invalid layer sizes {sizes:?}")));
        }
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for pair in sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let weight = Array2::from_shape_simple_fn((fan_out, fan_in), || {
                F::from_f64_lossy(rng.random_range(-bound..bound))
            });
            let bias = Array1::from_shape_simple_fn(fan_out, || F::from_f64_lossy(rng.random_range(-bound..bound)));
            layers.push(Layer { weight, bias });
        }
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Layer<F>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParameter("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::dim("layer bias", l.out_dim(), l.bias.len()));
            }
            if i > 0 && layers[i - 1].out_dim() != l.in_dim() {
                return Err(Error::dim("layer chaining", layers[i - 1].out_dim(), l.in_dim()));
            }
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter("network parameters must be finite".into()));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer<F>] {
        &self.layers
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].in_dim())
            .chain(self.layers.iter().map(Layer::out_dim))
            .collect()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(Layer::out_dim).unwrap_or(0)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn cast<G: Scalar>(&self) -> Mlp<G> {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: l.weight.mapv(|v| G::from_f64_lossy(v.to_f64_lossless())),
                    bias: l.bias.mapv(|v| G::from_f64_lossy(v.to_f64_lossless())),
                })
                .collect(),
        }
    }

    fn affine(layer: &Layer<F>, a: ArrayView2<'_, F>) -> Array2<F> {
        let mut z = a.dot(&layer.weight.t());
        z += &layer.bias;
        z
    }

    /// Batched forward pass; one sample per row.
    pub fn forward(&self, input: ArrayView2<'_, F>) -> Array2<F> {
        let mut a = Self::affine(&self.layers[0], input);
        for layer in &self.layers[1..] {
            a.mapv_inplace(silu);
            a = Self::affine(layer, a.view());
        }
        a
    }

    pub fn forward_with_cache(&self, input: ArrayView2<'_, F>) -> ForwardCache<F> {
        let mut cache = ForwardCache::default();
        self.forward_into(input, &mut cache);
        cache
    }

    /// [`Self::forward_with_cache`] writing into an existing cache.
    pub fn forward_into(&self, input: ArrayView2<'_, F>, cache: &mut ForwardCache<F>) {
        let n = input.nrows();
        let hidden = self.layers.len() - 1;
        cache.layer_inputs.resize_with(self.layers.len(), empty);
        cache.pre_activations.resize_with(hidden, empty);
        cache.gates.resize_with(hidden, empty);
        let input_buf = reshaped(&mut cache.layer_inputs[0], input.dim());
        input_buf.assign(&input);
        for l in 0..self.layers.len() {
            let layer = &self.layers[l];
            let (inputs, rest) = cache.layer_inputs.split_at_mut(l + 1);
            let z = if l < hidden { &mut cache.pre_activations[l] } else { &mut cache.output };
            let z = reshaped(z, (n, layer.out_dim()));
            general_mat_mul(F::one(), &inputs[l], &layer.weight.t(), F::zero(), z);
            *z += &layer.bias;
            if l < hidden {
                let s = reshaped(&mut cache.gates[l], z.dim());
                Zip::from(&mut *s).and(&*z).for_each(|s, &z| *s = sigmoid(z));
                let a = reshaped(&mut rest[0], z.dim());
                Zip::from(a).and(&*z).and(&*s).for_each(|a, &z, &s| *a = z * s);
            }
        }
    }

    /// Parameter gradients given `∂L/∂output`.
    pub fn backward(&self, cache: &ForwardCache<F>, grad_output: ArrayView2<'_, F>) -> Vec<Layer<F>> {
        let mut grads: Vec<Layer<F>> = self.layers.iter().map(Layer::zeros_like).collect();
        self.backward_into(cache, grad_output, &mut grads, &mut BackwardScratch::default());
        grads
    }

    /// [`Self::backward`] writing into `grads`, which must match the layer
    /// shapes.
    pub fn backward_into(
        &self,
        cache: &ForwardCache<F>,
        grad_output: ArrayView2<'_, F>,
        grads: &mut [Layer<F>],
        scratch: &mut BackwardScratch<F>,
    ) {
        let n = grad_output.nrows();
        let BackwardScratch { delta, upstream } = scratch;
        for l in (0..self.layers.len()).rev() {
            let d = if l + 1 == self.layers.len() { grad_output.view() } else { delta.view() };
            general_mat_mul(F::one(), &d.t(), &cache.layer_inputs[l], F::zero(), &mut grads[l].weight);
            grads[l].bias.assign(&d.sum_axis(Axis(0)));
            if l > 0 {
                let up = reshaped(upstream, (n, self.layers[l].in_dim()));
                general_mat_mul(F::one(), &d, &self.layers[l].weight, F::zero(), up);
                // d silu(z)/dz = s(1 + z(1 - s)) with s = sigmoid(z).
                Zip::from(up)
                    .and(&cache.pre_activations[l - 1])
                    .and(&cache.gates[l - 1])
                    .for_each(|g, &z, &s| *g = *g * s * (F::one() + z * (F::one() - s)));
                std::mem::swap(delta, upstream);
            }
        }
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer<F>] {
        &mut self.layers
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias-corrected first and second moments.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    cfg: AdamConfig,
    first: Vec<Layer<F>>,
    second: Vec<Layer<F>>,
    steps: i32,
}

impl<F: Scalar> Adam<F> {
    pub fn new(net: &Mlp<F>, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            first: net.layers.iter().map(Layer::zeros_like).collect(),
            second: net.layers.iter().map(Layer::zeros_like).collect(),
            steps: 0,
        }
    }

    pub fn step(&mut self, net: &mut Mlp<F>, grads: &[Layer<F>]) {
        self.steps += 1;
        let b1 = F::from_f64_lossy(self.cfg.beta1);
        let b2 = F::from_f64_lossy(self.cfg.beta2);
        let one = F::one();
        let c1 = one - b1.powi(self.steps);
        let c2 = one - b2.powi(self.steps);
        let lr = F::from_f64_lossy(self.cfg.learning_rate);
        let eps = F::from_f64_lossy(self.cfg.epsilon);
        let update = |p: &mut F, m: &mut F, v: &mut F, g: F| {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        for (((layer, m), v), g) in net
            .layers_mut()
            .iter_mut()
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
            .zip(grads)
        {
            Zip::from(&mut layer.weight)
                .and(&mut m.weight)
                .and(&mut v.weight)
                .and(&g.weight)
                .for_each(|p, m, v, &g| update(p, m, v, g));
            Zip::from(&mut layer.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .and(&g.bias)
                .for_each(|p, m, v, &g| update(p, m, v, g));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn f32_sigmoid_accuracy() {
        let (mut worst, mut worst_tail) = (0.0_f64, 0.0_f64);
        for i in -200_000..=200_000 {
            let z = i as f32 * 5e-4;
            let exact = 1.0 / (1.0 + (-(z as f64)).exp());
            let err = (<f32 as Scalar>::sigmoid(z) as f64 - exact).abs();
            // below e^-87 the value is subnormal in f32; only absolute accuracy is meaningful
            if z > -80.0 {
                worst = worst.max(err / exact);
            } else {
                worst_tail = worst_tail.max(err);
            }
        }
        assert!(worst < 5e-7, "{worst}");
        assert!(worst_tail < 1e-34, "{worst_tail}");
        for z in [-1e4_f32, -100.0, 100.0, 1e4] {
            let s = <f32 as Scalar>::sigmoid(z);
            assert!(s.is_finite() && (0.0..=1.0).contains(&s));
        }
        assert_eq!(<f32 as Scalar>::sigmoid(0.0), 0.5);
    }

    #[test]
    fn forward_matches_manual_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::<f64>::new(&[3, 4, 5, 2], &mut rng).unwrap();
        assert_eq!(net.sizes(), vec![3, 4, 5, 2]);
        assert_eq!(net.n_params(), 3 * 4 + 4 + 4 * 5 + 5 + 5 * 2 + 2);
        let x = ndarray::array![[0.3, -0.2, 0.7]];
        let out = net.forward(x.view());
        let mut a: Vec<f64> = x.row(0).to_vec();
        for (i, l) in net.layers().iter().enumerate() {
            let mut z: Vec<f64> = (0..l.out_dim())
                .map(|o| l.bias[o] + (0..l.in_dim()).map(|k| l.weight[[o, k]] * a[k]).sum::<f64>())
                .collect();
            if i + 1 < net.layers().len() {
                z = z.iter().map(|&v| v / (1.0 + (-v).exp())).collect();
            }
            a = z;
        }
        for (g, w) in out.row(0).iter().zip(a.iter()) {
            assert_abs_diff_eq!(g, w, epsilon = 1e-14);
        }
        let cached = net.forward_with_cache(x.view());
        assert_eq!(cached.output(), &out);
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Mlp::<f32>::new(&[3, 256, 2], &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = Mlp::<f32>::new(&[3, 256, 2], &mut rng).unwrap();
        assert_eq!(a, b);
        let bound = 1.0 / 3f32.sqrt();
        assert!(a.layers()[0].weight.iter().all(|v| v.abs() <= bound));
        assert!(Mlp::<f32>::new(&[3], &mut rng).is_err());
    }

    #[test]
    fn silu_derivative_matches_difference() {
        for z in [-4.0, -0.5, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let fd = (silu(z + h) - silu(z - h)) / (2.0 * h);
            assert_abs_diff_eq!(silu_grad(z), fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = Mlp::<f64>::new(&[2, 2], &mut rng).unwrap();
        let before = net.clone();
        let grads = vec![Layer {
            weight: ndarray::array![[1.0, -2.0], [0.5, 0.0]],
            bias: ndarray::array![3.0, -1.0],
        }];
        let mut opt = Adam::new(&net, AdamConfig::default());
        opt.step(&mut net, &grads);
        let dw = &before.layers()[0].weight - &net.layers()[0].weight;
        assert_abs_diff_eq!(dw[[0, 0]], 1e-3, epsilon = 1e-9);
        assert_abs_diff_eq!(dw[[0, 1]], -1e-3, epsilon = 1e-9);
        assert_abs_diff_eq!(dw[[1, 1]], 0.0, epsilon = 1e-12);
    }
}
