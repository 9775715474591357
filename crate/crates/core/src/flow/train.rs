//! Conditional flow-matching training.
//!
//! Each step draws a target batch, a standard-normal source batch and
//! per-sample times `t ~ U[0, 1]`, pairs the batches with the chosen coupling
//! and regresses `v_θ((1−t)x0 + t x1, t)` onto `x1 − x0`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::coupling::{pair_batch, Coupling};
use crate::flow::field::MlpField;
use crate::flow::mlp::{Adam, AdamConfig, BackwardScratch, ForwardCache, Layer, Mlp, Scalar};
use crate::gmm::GaussianMixture;
use crate::rng::{seeded, standard_normal_matrix};

/// Anything that can produce i.i.d. draws as rows.
pub trait Sampler {
    fn dim(&self) -> usize;
    fn sample_batch(&self, rng: &mut dyn rand::RngCore, n: usize) -> Array2<f64>;
}

impl Sampler for GaussianMixture {
    fn dim(&self) -> usize {
        GaussianMixture::dim(self)
    }

    fn sample_batch(&self, rng: &mut dyn rand::RngCore, n: usize) -> Array2<f64> {
        self.sample(rng, n)
    }
}

/// `N(0, I_d)`.
#[derive(Debug, Clone, Copy)]
pub struct StandardNormal {
    pub dim: usize,
}

impl Sampler for StandardNormal {
    fn dim(&self) -> usize {
        self.dim
    }

    fn sample_batch(&self, rng: &mut dyn rand::RngCore, n: usize) -> Array2<f64> {
        standard_normal_matrix(rng, n, self.dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    /// Decay of the exponential weight average returned as the trained
    /// network; 0 returns the last Adam iterate.
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 2048,
            steps: 20_000,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            hidden: vec![256, 256],
            ema_decay: 0.999,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(format!("train config: {m}")));
        if self.batch_size == 0 || self.steps == 0 {
            return bad("batch_size and steps must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.epsilon > 0.0) {
            return bad("learning_rate and epsilon must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1)");
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer sizes must be positive");
        }
        Ok(())
    }

    pub fn layer_sizes(&self, dim: usize) -> Vec<usize> {
        std::iter::once(dim + 1)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(dim))
            .collect()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

/// Mean squared CFM residual over a row-paired batch, and its parameter
/// gradients.
pub fn cfm_loss<F: Scalar>(
    net: &Mlp<F>,
    x0s: ArrayView2<'_, f64>,
    x1s: ArrayView2<'_, f64>,
    ts: ArrayView1<'_, f64>,
) -> Result<(F, Vec<Layer<F>>)> {
    let mut ws = LossWorkspace::new(net);
    let loss = cfm_loss_into(net, x0s, x1s, ts, &mut ws)?;
    Ok((loss, ws.grads))
}

/// Activations and gradient buffers reused across [`cfm_loss_into`] calls.
#[derive(Debug)]
pub struct LossWorkspace<F> {
    cache: ForwardCache<F>,
    scratch: BackwardScratch<F>,
    grads: Vec<Layer<F>>,
}

impl<F: Scalar> LossWorkspace<F> {
    pub fn new(net: &Mlp<F>) -> Self {
        Self {
            cache: ForwardCache::default(),
            scratch: BackwardScratch::default(),
            grads: net.layers().iter().map(Layer::zeros_like).collect(),
        }
    }

    /// Gradients from the last [`cfm_loss_into`] call.
    pub fn grads(&self) -> &[Layer<F>] {
        &self.grads
    }
}

/// [`cfm_loss`] with caller-owned buffers; gradients land in `ws`.
pub fn cfm_loss_into<F: Scalar>(
    net: &Mlp<F>,
    x0s: ArrayView2<'_, f64>,
    x1s: ArrayView2<'_, f64>,
    ts: ArrayView1<'_, f64>,
    ws: &mut LossWorkspace<F>,
) -> Result<F> {
    let n = x0s.nrows();
    if x1s.dim() != x0s.dim() {
        return Err(Error::dim("cfm batch", n, x1s.nrows()));
    }
    if ts.len() != n {
        return Err(Error::dim("cfm times", n, ts.len()));
    }
    if net.in_dim() != x0s.ncols() + 1 || net.out_dim() != x0s.ncols() {
        return Err(Error::dim("cfm network input", x0s.ncols() + 1, net.in_dim()));
    }
    let t_col = ts.insert_axis(Axis(1));
    let xt = &x0s * &(1.0 - &t_col) + &(&x1s * &t_col);
    let target = (&x1s - &x0s).mapv(F::from_f64_lossy);
    let input = MlpField::<F>::assemble_input(xt.view(), ts);
    net.forward_into(input.view(), &mut ws.cache);
    let resid = ws.cache.output() - &target;
    let inv_n = F::one() / F::from_usize(n).expect("batch size fits the float type");
    let loss = resid.iter().fold(F::zero(), |acc, &r| acc + r * r) * inv_n;
    let grad_out = resid * (inv_n + inv_n);
    net.backward_into(&ws.cache, grad_out.view(), &mut ws.grads, &mut ws.scratch);
    Ok(loss)
}

/// Trained network and its loss curve.
#[derive(Debug, Clone)]
pub struct TrainOutcome<F> {
    pub field: MlpField<F>,
    /// Batch loss before each optimizer step.
    pub losses: Vec<f64>,
}

/// Adam-trained velocity network.
///
/// Draw order per step: target batch, source batch, times. The target batch
/// is reordered by the coupling before the loss is formed.
pub fn train_cfm<F: Scalar>(
    target: &dyn Sampler,
    source: &dyn Sampler,
    coupling: Coupling,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<F>> {
    train_cfm_with_progress(target, source, coupling, cfg, |_, _| {})
}

pub fn train_cfm_with_progress<F: Scalar>(
    target: &dyn Sampler,
    source: &dyn Sampler,
    coupling: Coupling,
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    let d = target.dim();
    if source.dim() != d {
        return Err(Error::dim("source dimension", d, source.dim()));
    }
    let mut rng = seeded(cfg.seed);
    let mut net = Mlp::<F>::new(&cfg.layer_sizes(d), &mut rng)?;
    let mut opt = Adam::new(&net, cfg.adam());
    let mut average = WeightAverage::new(&net, cfg.ema_decay);
    let mut ws = LossWorkspace::new(&net);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let x1s = target.sample_batch(&mut rng, cfg.batch_size);
        let x0s = source.sample_batch(&mut rng, cfg.batch_size);
        let ts: Array1<f64> = (0..cfg.batch_size).map(|_| rng.random::<f64>()).collect();
        let x1s = pair_batch(coupling, x0s.view(), x1s.view())?;
        let loss = cfm_loss_into(&net, x0s.view(), x1s.view(), ts.view(), &mut ws)?.to_f64_lossless();
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { step, loss });
        }
        losses.push(loss);
        progress(step, loss);
        opt.step(&mut net, ws.grads());
        average.update(&net);
    }
    // from_layers only rejects non-finite parameters here
    let net = average.finish().map_err(|_| Error::TrainingDiverged {
        step: cfg.steps,
        loss: f64::NAN,
    })?;
    Ok(TrainOutcome {
        field: MlpField::new(net)?,
        losses,
    })
}

/// Bias-corrected exponential average of the iterates, accumulated in f64:
/// `Σ_k dᵏ⁻ⁱ(1−d) θᵢ / (1 − dᵏ)`.
struct WeightAverage {
    decay: f64,
    weight_of_start: f64,
    layers: Vec<Layer<f64>>,
}

impl WeightAverage {
    fn new<F: Scalar>(net: &Mlp<F>, decay: f64) -> Self {
        let zeroed = net.layers().iter().map(|l| Layer {
            weight: Array2::zeros(l.weight.raw_dim()),
            bias: Array1::zeros(l.bias.raw_dim()),
        });
        Self { decay, weight_of_start: 1.0, layers: zeroed.collect() }
    }

    fn update<F: Scalar>(&mut self, net: &Mlp<F>) {
        let d = self.decay;
        for (avg, cur) in self.layers.iter_mut().zip(net.layers()) {
            avg.weight.zip_mut_with(&cur.weight, |a, &w| *a = d * *a + (1.0 - d) * w.to_f64_lossless());
            avg.bias.zip_mut_with(&cur.bias, |a, &b| *a = d * *a + (1.0 - d) * b.to_f64_lossless());
        }
        self.weight_of_start *= d;
    }

    fn finish<F: Scalar>(self) -> Result<Mlp<F>> {
        let norm = 1.0 / (1.0 - self.weight_of_start);
        let layers = self.layers.into_iter().map(|l| Layer {
            weight: l.weight.mapv(|v| F::from_f64_lossy(v * norm)),
            bias: l.bias.mapv(|v| F::from_f64_lossy(v * norm)),
        });
        Mlp::from_layers(layers.collect())
    }
}

/// Centered moving average with window `w` (truncated at the ends).
pub fn smooth(values: &[f64], w: usize) -> Vec<f64> {
    let half = w / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}
