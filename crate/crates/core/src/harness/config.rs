//! Experiment configuration files.
//!
//! A config is TOML with the sections `prior`, `field`, `observation`,
//! `solver`, and optionally `train`, `baselines` and `outputs`. Relative
//! checkpoint paths are resolved against the config file's directory.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flow::coupling::Coupling;
use crate::flow::train::TrainConfig;
use crate::flower::FlowerConfig;
use crate::gmm::{GaussianMixture, LinearGaussianObservation};
use crate::operators::LinearOperator;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    seed: u64,
    prior: RawPrior,
    #[serde(default)]
    field: RawField,
    observation: Option<RawObservation>,
    #[serde(default)]
    solver: RawSolver,
    train: Option<RawTrain>,
    #[serde(default)]
    baselines: Baselines,
    #[serde(default)]
    outputs: RawOutputs,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPrior {
    weights: Option<Vec<f64>>,
    means: Vec<Vec<f64>>,
    covariance: RawCovariance,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum RawCovariance {
    Isotropic(f64),
    Matrix(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum RawField {
    #[default]
    Analytic,
    Mlp {
        checkpoint: PathBuf,
    },
    /// Train in-process from the `[train]` section.
    Train,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawObservation {
    operator: OperatorSpec,
    noise_std: f64,
    y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorSpec {
    Dense { matrix: Vec<Vec<f64>> },
    RowVector { h: Vec<f64> },
    Mask { dim: usize, kept: Vec<usize> },
    Circulant { kernel: Vec<f64> },
    ScaledIdentity { dim: usize, scale: f64 },
}

impl OperatorSpec {
    pub fn build(&self) -> Result<LinearOperator> {
        match self {
            OperatorSpec::Dense { matrix } => LinearOperator::dense(matrix_from_rows(matrix, "observation.operator.matrix")?),
            OperatorSpec::RowVector { h } => LinearOperator::row_vector(Array1::from(h.clone())),
            OperatorSpec::Mask { dim, kept } => LinearOperator::mask(*dim, kept.iter().copied()),
            OperatorSpec::Circulant { kernel } => LinearOperator::circulant(Array1::from(kernel.clone())),
            OperatorSpec::ScaledIdentity { dim, scale } => LinearOperator::scaled_identity(*dim, *scale),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawSolver {
    n_steps: usize,
    gamma: u8,
    n_avg: usize,
    n_samples: usize,
    trajectory_runs: usize,
}

impl Default for RawSolver {
    fn default() -> Self {
        let flower = FlowerConfig::default();
        Self {
            n_steps: flower.n_steps,
            gamma: flower.gamma,
            n_avg: flower.n_avg,
            n_samples: 1000,
            trajectory_runs: 0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawTrain {
    batch_size: usize,
    steps: usize,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    hidden: Vec<usize>,
    ema_decay: f64,
    coupling: Coupling,
}

impl Default for RawTrain {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            steps: t.steps,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            hidden: t.hidden,
            ema_decay: t.ema_decay,
            coupling: Coupling::Independent,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Baselines {
    /// Exact posterior draws for comparison (same count as the solver runs).
    pub exact_posterior_samples: bool,
    /// Euler samples of the field and exact prior draws.
    pub unconditional_samples: bool,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawOutputs {
    directory: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub enum FieldSpec {
    Analytic,
    Mlp { checkpoint: PathBuf },
    Train,
}

#[derive(Debug, Clone)]
pub struct TrainSpec {
    pub config: TrainConfig,
    pub coupling: Coupling,
}

#[derive(Debug, Clone)]
pub struct SolverSpec {
    pub flower: FlowerConfig,
    pub n_samples: usize,
    /// Trajectories are written for runs `0..trajectory_runs`.
    pub trajectory_runs: usize,
}

/// A validated experiment with every dimension checked.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub prior: GaussianMixture,
    pub field: FieldSpec,
    pub observation: Option<LinearGaussianObservation>,
    pub solver: SolverSpec,
    pub train: Option<TrainSpec>,
    pub baselines: Baselines,
    pub output_dir: Option<PathBuf>,
    /// Hex SHA-256 of the config file bytes.
    pub hash: String,
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<Array2<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || m == 0 {
        return Err(Error::Config(format!("{what} must be a non-empty matrix")));
    }
    let mut out = Array2::<f64>::zeros((n, m));
    for (i, r) in rows.iter().enumerate() {
        if r.len() != m {
            return Err(Error::Config(format!("{what}: row {i} has {} entries, expected {m}", r.len())));
        }
        out.row_mut(i).assign(&Array1::from(r.clone()));
    }
    Ok(out)
}

fn config_err(context: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Config(_) => e,
        other => Error::Config(format!("{context}: {other}")),
    }
}

pub fn config_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_bytes(&bytes, base).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Parses a config; relative checkpoint paths are joined to `base_dir`.
    pub fn from_bytes(bytes: &[u8], base_dir: &Path) -> Result<Self> {
        let text = std::str::from_utf8(bytes).map_err(|e| Error::Config(format!("config is not UTF-8: {e}")))?;
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let hash = config_hash(bytes);

        let means = matrix_from_rows(&raw.prior.means, "prior.means")?;
        let d = means.ncols();
        let k = means.nrows();
        let covariance = match &raw.prior.covariance {
            RawCovariance::Isotropic(v) => Array2::<f64>::eye(d) * *v,
            RawCovariance::Matrix(rows) => matrix_from_rows(rows, "prior.covariance")?,
        };
        let weights = match &raw.prior.weights {
            Some(w) => Array1::from(w.clone()),
            None => Array1::from_elem(k, 1.0 / k as f64),
        };
        let prior = GaussianMixture::new(weights, means, covariance).map_err(config_err("prior"))?;

        let observation = match &raw.observation {
            None => None,
            Some(o) => {
                let op = o.operator.build().map_err(config_err("observation.operator"))?;
                if op.in_dim() != d {
                    return Err(Error::Config(format!(
                        "observation operator acts on dimension {}, prior has dimension {d}",
                        op.in_dim()
                    )));
                }
                let obs = LinearGaussianObservation::new(op, o.noise_std, Array1::from(o.y.clone()))
                    .map_err(config_err("observation"))?;
                Some(obs)
            }
        };

        let flower = FlowerConfig {
            n_steps: raw.solver.n_steps,
            gamma: raw.solver.gamma,
            seed: raw.seed,
            n_avg: raw.solver.n_avg,
            record_trajectory: false,
            ..FlowerConfig::default()
        };
        flower.validate().map_err(config_err("solver"))?;
        if raw.solver.n_samples == 0 {
            return Err(Error::Config("solver.n_samples must be at least 1".into()));
        }
        if raw.solver.trajectory_runs > raw.solver.n_samples {
            return Err(Error::Config("solver.trajectory_runs exceeds solver.n_samples".into()));
        }

        let train = raw
            .train
            .map(|t| -> Result<TrainSpec> {
                let config = TrainConfig {
                    batch_size: t.batch_size,
                    steps: t.steps,
                    learning_rate: t.learning_rate,
                    beta1: t.beta1,
                    beta2: t.beta2,
                    epsilon: t.epsilon,
                    seed: raw.seed,
                    hidden: t.hidden,
                    ema_decay: t.ema_decay,
                };
                config.validate().map_err(config_err("train"))?;
                Ok(TrainSpec { config, coupling: t.coupling })
            })
            .transpose()?;

        let field = match raw.field {
            RawField::Analytic => FieldSpec::Analytic,
            RawField::Mlp { checkpoint } => {
                let checkpoint = if checkpoint.is_relative() { base_dir.join(checkpoint) } else { checkpoint };
                if !checkpoint.is_file() {
                    return Err(Error::Config(format!("field checkpoint {} does not exist", checkpoint.display())));
                }
                FieldSpec::Mlp { checkpoint }
            }
            RawField::Train => {
                if train.is_none() {
                    return Err(Error::Config("field kind \"train\" requires a [train] section".into()));
                }
                FieldSpec::Train
            }
        };

        Ok(Self {
            name: raw.name.unwrap_or_else(|| "experiment".into()),
            seed: raw.seed,
            prior,
            field,
            observation,
            solver: SolverSpec {
                flower,
                n_samples: raw.solver.n_samples,
                trajectory_runs: raw.solver.trajectory_runs,
            },
            train,
            baselines: raw.baselines,
            output_dir: raw.outputs.directory,
            hash,
        })
    }

    /// Replaces the master seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.solver.flower.seed = seed;
        if let Some(t) = &mut self.train {
            t.config.seed = seed;
        }
        self
    }

    pub fn dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn require_observation(&self) -> Result<&LinearGaussianObservation> {
        self.observation
            .as_ref()
            .ok_or_else(|| Error::Config("this command needs an [observation] section".into()))
    }

    pub fn require_train(&self) -> Result<&TrainSpec> {
        self.train
            .as_ref()
            .ok_or_else(|| Error::Config("this command needs a [train] section".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = r#"
name = "toy"
seed = 7

[prior]
means = [[-0.25, -0.25], [-0.25, 0.25], [0.25, -0.25]]
covariance = 0.0625

[observation]
operator = { kind = "row_vector", h = [1.5, 1.5] }
noise_std = 0.25
y = [1.0]

[solver]
n_steps = 100
gamma = 1
n_samples = 10
"#;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::from_bytes(text.as_bytes(), Path::new("."))
    }

    #[test]
    fn parses_toy_config() {
        let cfg = parse(TOY).unwrap();
        assert_eq!(cfg.name, "toy");
        assert_eq!(cfg.dim(), 2);
        assert_eq!(cfg.prior.weights().len(), 3);
        assert_eq!(cfg.solver.flower.seed, 7);
        assert_eq!(cfg.solver.flower.n_steps, 100);
        assert!(matches!(cfg.field, FieldSpec::Analytic));
        assert_eq!(cfg.hash, config_hash(TOY.as_bytes()));
        assert_eq!(cfg.hash.len(), 64);
        let reseeded = cfg.with_seed(99);
        assert_eq!(reseeded.solver.flower.seed, 99);
    }

    #[test]
    fn rejects_inconsistent_configs() {
        let wrong_dim = TOY.replace("h = [1.5, 1.5]", "h = [1.5, 1.5, 1.0]");
        assert!(matches!(parse(&wrong_dim), Err(Error::Config(_))));
        let bad_gamma = TOY.replace("gamma = 1", "gamma = 2");
        assert!(matches!(parse(&bad_gamma), Err(Error::Config(_))));
        let unknown = TOY.replace("n_samples = 10", "n_samples = 10\nbogus = 1");
        assert!(matches!(parse(&unknown), Err(Error::Config(_))));
        let missing_ckpt = format!("{TOY}\n[field]\nkind = \"mlp\"\ncheckpoint = \"/nonexistent/x.bin\"\n");
        assert!(matches!(parse(&missing_ckpt), Err(Error::Config(_))));
        let train_without_section = format!("{TOY}\n[field]\nkind = \"train\"\n");
        assert!(matches!(parse(&train_without_section), Err(Error::Config(_))));
        let ragged = TOY.replace("[0.25, -0.25]]", "[0.25]]");
        assert!(matches!(parse(&ragged), Err(Error::Config(_))));
    }

    #[test]
    fn operator_kinds_and_matrix_covariance() {
        let text = r#"
[prior]
means = [[0.0, 0.0, 0.0, 0.0]]
covariance = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]]
weights = [1.0]

[observation]
operator = { kind = "circulant", kernel = [0.5, 0.25, 0.0, 0.25] }
noise_std = 0.1
y = [0.0, 0.0, 0.0, 0.0]

[train]
steps = 10
batch_size = 16
coupling = "minibatch_ot"
"#;
        let cfg = parse(text).unwrap();
        assert_eq!(cfg.require_observation().unwrap().operator().tag(), "circulant");
        let train = cfg.require_train().unwrap();
        assert_eq!(train.coupling, Coupling::MinibatchOt);
        assert_eq!(train.config.hidden, vec![256, 256]);

        for spec in [
            OperatorSpec::Dense { matrix: vec![vec![1.0, 0.0], vec![0.0, 2.0]] },
            OperatorSpec::RowVector { h: vec![1.0, 1.0] },
            OperatorSpec::Mask { dim: 2, kept: vec![1] },
            OperatorSpec::Circulant { kernel: vec![1.0, 0.5] },
            OperatorSpec::ScaledIdentity { dim: 2, scale: 3.0 },
        ] {
            assert_eq!(spec.build().unwrap().in_dim(), 2);
        }
    }
}
