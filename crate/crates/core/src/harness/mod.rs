//! Config-driven experiments that write reproducible data files.
//!
//! Every command takes a validated [`ExperimentConfig`] and an output
//! directory, stages all files, and commits the directory only when every
//! file has been produced.

pub mod config;
pub mod invariants;
pub mod output;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ndarray::{Array1, Array2, ArrayView2};
use serde_json::json;

use crate::error::{Error, Result};
use crate::flow::{checkpoint, euler_sample_batch, train_cfm_with_progress, AnalyticGmmField, MlpField, StandardNormal, VelocityField};
use crate::flower::{run_batch, FlowerConfig, FlowerOutput};
use crate::gmm::{GaussianMixture, LinearGaussianObservation};
use crate::linalg::Cholesky;
use crate::metrics::{empirical_moments, sliced_w2, MetricReport, DEFAULT_PROJECTIONS};
use crate::rng::{standard_normal_matrix, stream_rng};

pub use config::{ExperimentConfig, FieldSpec};
pub use output::{AtomicDir, Provenance};

/// Stream indices for draws that are not solver runs; solver run `i` uses
/// stream `i`.
pub mod streams {
    pub const EXACT_POSTERIOR: u64 = 1 << 62;
    pub const NOISE_FLOOR: u64 = EXACT_POSTERIOR + 1;
    pub const PROJECTIONS: u64 = EXACT_POSTERIOR + 2;
    pub const PRIOR: u64 = EXACT_POSTERIOR + 3;
    pub const EULER_SOURCE: u64 = EXACT_POSTERIOR + 4;
}

/// Runs per work unit. Fixed, so results do not depend on the worker count.
pub const CHUNK_RUNS: usize = 256;

/// Covariance-determinant ratio (solver / exact) below which the solver is
/// flagged as missing posterior tails.
pub const TAIL_SHRINKAGE_RATIO: f64 = 0.8;

pub const THREADS_ENV: &str = "FLOWER_LAB_THREADS";

/// Worker count: `FLOWER_LAB_THREADS` if set to a positive integer, else the
/// available parallelism.
pub fn worker_count() -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(n) if n >= 1 => n,
        _ => available,
    }
}

/// Where a command writes: the explicit override, the config's
/// `outputs.directory`, or `out/<name>`.
pub fn resolve_output_dir(cfg: &ExperimentConfig, explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| Path::new("out").join(&cfg.name))
}

/// Runs `0..n_runs` of the solver across workers in fixed-size chunks, keeping
/// trajectories for runs below `keep_trajectories`.
pub fn run_flower_parallel(
    field: &dyn VelocityField,
    obs: &LinearGaussianObservation,
    cfg: &FlowerConfig,
    n_runs: usize,
    keep_trajectories: usize,
    workers: usize,
) -> Result<Vec<FlowerOutput>> {
    cfg.validate()?;
    let n_chunks = n_runs.div_ceil(CHUNK_RUNS);
    let results: Mutex<Vec<Option<Result<Vec<FlowerOutput>>>>> = Mutex::new((0..n_chunks).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let work = || loop {
        let c = next.fetch_add(1, Ordering::Relaxed);
        if c >= n_chunks {
            break;
        }
        let first = c * CHUNK_RUNS;
        let count = CHUNK_RUNS.min(n_runs - first);
        let chunk_cfg = FlowerConfig {
            record_trajectory: first < keep_trajectories,
            ..cfg.clone()
        };
        let mut out = run_batch(field, obs, &chunk_cfg, first as u64, count);
        if let Ok(runs) = &mut out {
            for (i, r) in runs.iter_mut().enumerate() {
                if first + i >= keep_trajectories {
                    r.trajectory = None;
                }
            }
        }
        results.lock().expect("no worker panicked")[c] = Some(out);
    };
    let workers = workers.clamp(1, n_chunks.max(1));
    if workers == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(work);
            }
        });
    }
    let mut all = Vec::with_capacity(n_runs);
    for chunk in results.into_inner().expect("no worker panicked") {
        all.extend(chunk.expect("every chunk is processed")?);
    }
    Ok(all)
}

/// Solver estimates `0..n`: single runs, or means of `n_avg` consecutive runs.
fn average_groups(runs: &[FlowerOutput], n_avg: usize, d: usize) -> Array2<f64> {
    let n = runs.len() / n_avg;
    let mut out = Array2::<f64>::zeros((n, d));
    for (i, group) in runs.chunks(n_avg).enumerate() {
        let mut row = out.row_mut(i);
        for r in group {
            row += &r.sample;
        }
        row /= n_avg as f64;
    }
    out
}

#[allow(clippy::large_enum_variant)] // one per command; boxing buys nothing
pub enum LoadedField {
    Analytic(AnalyticGmmField),
    Mlp(MlpField<f32>),
}

impl LoadedField {
    pub fn as_dyn(&self) -> &dyn VelocityField {
        match self {
            LoadedField::Analytic(f) => f,
            LoadedField::Mlp(f) => f,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LoadedField::Analytic(_) => "analytic",
            LoadedField::Mlp(_) => "mlp",
        }
    }
}

/// Result of an in-process training run.
pub struct Trained {
    pub field: MlpField<f32>,
    pub losses: Vec<f64>,
}

pub fn train_from_config(cfg: &ExperimentConfig, progress: &mut dyn FnMut(&str)) -> Result<Trained> {
    let spec = cfg.require_train()?;
    let total = spec.config.steps;
    let report_every = (total / 10).max(1);
    let outcome = train_cfm_with_progress::<f32>(
        &cfg.prior,
        &StandardNormal { dim: cfg.dim() },
        spec.coupling,
        &spec.config,
        |step, loss| {
            if (step + 1) % report_every == 0 {
                progress(&format!("train step {}/{total}: loss {loss:.5}", step + 1));
            }
        },
    )?;
    Ok(Trained {
        field: outcome.field,
        losses: outcome.losses,
    })
}

fn load_checkpoint_field(path: &Path, dim: usize) -> Result<MlpField<f32>> {
    let net = checkpoint::load::<f64>(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let field = MlpField::new(net.cast::<f32>()).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if field.dim() != dim {
        return Err(Error::Config(format!(
            "checkpoint {} models dimension {}, prior has dimension {dim}",
            path.display(),
            field.dim()
        )));
    }
    Ok(field)
}

fn provenance(cfg: &ExperimentConfig, kind: &'static str) -> Provenance {
    Provenance {
        kind,
        config_hash: cfg.hash.clone(),
        seed: cfg.seed,
    }
}

fn matrix_json(m: &Array2<f64>) -> serde_json::Value {
    json!(m.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>())
}

fn moments_json(s: ArrayView2<'_, f64>) -> Result<(serde_json::Value, f64)> {
    let m = empirical_moments(s)?;
    let det = determinant(&m.covariance);
    Ok((
        json!({
            "mean": m.mean.to_vec(),
            "covariance": matrix_json(&m.covariance),
            "covariance_det": det,
        }),
        det,
    ))
}

/// Determinant of a symmetric PSD matrix; 0 when the Cholesky factor fails.
fn determinant(m: &Array2<f64>) -> f64 {
    Cholesky::factor(m.view()).map_or(0.0, |c| c.log_det().exp())
}

fn residual_inf(obs: &LinearGaussianObservation, samples: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    let mut out = Array1::<f64>::zeros(samples.nrows());
    for (i, x) in samples.rows().into_iter().enumerate() {
        let r = obs.operator().apply(x)? - obs.y();
        out[i] = r.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    }
    Ok(out)
}

pub struct CommandSummary {
    pub output_dir: PathBuf,
    pub lines: Vec<String>,
}

pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, progress: &mut dyn FnMut(&str)) -> Result<CommandSummary> {
    let spec = cfg.require_train()?.clone();
    let dir = AtomicDir::create(out)?;
    let trained = train_from_config(cfg, progress)?;
    dir.write("checkpoint.bin", checkpoint::encode(&trained.field.net().cast::<f64>()))?;
    dir.write("loss.csv", output::loss_csv(&provenance(cfg, "loss"), &trained.losses))?;
    let tail = crate::flow::train::smooth(&trained.losses, 200);
    let summary = json!({
        "config_hash": cfg.hash,
        "seed": cfg.seed,
        "steps": spec.config.steps,
        "batch_size": spec.config.batch_size,
        "ema_decay": spec.config.ema_decay,
        "coupling": spec.coupling,
        "layer_sizes": spec.config.layer_sizes(cfg.dim()),
        "final_loss_smoothed": tail.last(),
    });
    dir.write("train.json", serde_json::to_string_pretty(&summary).expect("json") + "\n")?;
    let path = dir.commit()?;
    Ok(CommandSummary {
        lines: vec![format!(
            "trained {} steps; smoothed final loss {:.5}",
            spec.config.steps,
            tail.last().copied().unwrap_or(f64::NAN)
        )],
        output_dir: path,
    })
}

pub fn cmd_solve(cfg: &ExperimentConfig, out: &Path, progress: &mut dyn FnMut(&str)) -> Result<CommandSummary> {
    let obs = cfg.require_observation()?;
    let dir = AtomicDir::create(out)?;
    let d = cfg.dim();
    let field = match &cfg.field {
        FieldSpec::Analytic => LoadedField::Analytic(AnalyticGmmField::new(cfg.prior.clone())),
        FieldSpec::Mlp { checkpoint } => LoadedField::Mlp(load_checkpoint_field(checkpoint, d)?),
        FieldSpec::Train => {
            let trained = train_from_config(cfg, progress)?;
            dir.write("checkpoint.bin", checkpoint::encode(&trained.field.net().cast::<f64>()))?;
            dir.write("loss.csv", output::loss_csv(&provenance(cfg, "loss"), &trained.losses))?;
            LoadedField::Mlp(trained.field)
        }
    };

    let flower = &cfg.solver.flower;
    let n = cfg.solver.n_samples;
    let n_runs = n * flower.n_avg;
    progress(&format!("running {n_runs} solver runs of {} steps", flower.n_steps));
    let runs = run_flower_parallel(field.as_dyn(), obs, flower, n_runs, cfg.solver.trajectory_runs, worker_count())?;
    let samples = average_groups(&runs, flower.n_avg, d);
    dir.write("samples.csv", output::samples_csv(&provenance(cfg, "samples"), samples.view(), 0))?;
    for (i, r) in runs.iter().enumerate() {
        if let Some(traj) = &r.trajectory {
            dir.write(
                format!("trajectories/run_{i:05}.csv"),
                output::trajectory_csv(&provenance(cfg, "trajectory"), traj),
            )?;
        }
    }

    let residuals = residual_inf(obs, samples.view())?;
    let mut lines = vec![format!("wrote {n} samples")];
    let max_residual = residuals.iter().fold(0.0_f64, |m, v| m.max(*v));
    let mut metrics = json!({
        "config_hash": cfg.hash,
        "seed": cfg.seed,
        "field": field.kind(),
        "n_samples": n,
        "n_steps": flower.n_steps,
        "gamma": flower.gamma,
        "n_avg": flower.n_avg,
        "residual_inf": {
            "max": max_residual,
            "mean": residuals.mean().unwrap_or(f64::NAN),
        },
    });
    lines.push(format!("max |Hx - y|_inf = {max_residual:.3e}"));
    if n >= 2 {
        metrics["flower_moments"] = moments_json(samples.view())?.0;
    }

    if cfg.baselines.exact_posterior_samples {
        let posterior = cfg.prior.posterior_linear_gaussian(obs)?;
        let exact = posterior.sample(&mut stream_rng(cfg.seed, streams::EXACT_POSTERIOR), n);
        let floor_draw = posterior.sample(&mut stream_rng(cfg.seed, streams::NOISE_FLOOR), n);
        dir.write("posterior_exact.csv", output::samples_csv(&provenance(cfg, "posterior_exact"), exact.view(), 0))?;
        let sw = sliced_w2(samples.view(), exact.view(), DEFAULT_PROJECTIONS, &mut stream_rng(cfg.seed, streams::PROJECTIONS))?;
        let floor = sliced_w2(floor_draw.view(), exact.view(), DEFAULT_PROJECTIONS, &mut stream_rng(cfg.seed, streams::PROJECTIONS))?;
        metrics["sliced_w2"] = json!(MetricReport::sliced_w2(sw, n, n, DEFAULT_PROJECTIONS, cfg.seed));
        metrics["noise_floor"] = json!(MetricReport::sliced_w2(floor, n, n, DEFAULT_PROJECTIONS, cfg.seed));
        metrics["sliced_w2_over_floor"] = json!(sw / floor);
        lines.push(format!("sliced-W2 to exact posterior {sw:.5} (noise floor {floor:.5}, ratio {:.2})", sw / floor));
        if n >= 2 {
            let (flower_json, flower_det) = moments_json(samples.view())?;
            let (exact_json, exact_det) = moments_json(exact.view())?;
            let ratio = flower_det / exact_det;
            metrics["flower_moments"] = flower_json;
            metrics["exact_moments"] = exact_json;
            metrics["covariance_det"] = json!({
                "flower": flower_det,
                "exact": exact_det,
                "ratio": ratio,
                "threshold": TAIL_SHRINKAGE_RATIO,
                "tail_shrinkage": ratio < TAIL_SHRINKAGE_RATIO,
            });
            lines.push(format!(
                "covariance det ratio {ratio:.3}{}",
                if ratio < TAIL_SHRINKAGE_RATIO { " (tail shrinkage)" } else { "" }
            ));
        }
    }

    if cfg.baselines.unconditional_samples {
        let x0 = standard_normal_matrix(&mut stream_rng(cfg.seed, streams::EULER_SOURCE), n, d);
        let generated = euler_sample_batch(field.as_dyn(), x0.view(), flower.n_steps);
        let prior_draw = cfg.prior.sample(&mut stream_rng(cfg.seed, streams::PRIOR), n);
        dir.write("unconditional.csv", output::samples_csv(&provenance(cfg, "unconditional"), generated.view(), 0))?;
        dir.write("prior_samples.csv", output::samples_csv(&provenance(cfg, "prior_samples"), prior_draw.view(), 0))?;
        let sw = sliced_w2(generated.view(), prior_draw.view(), DEFAULT_PROJECTIONS, &mut stream_rng(cfg.seed, streams::PROJECTIONS))?;
        metrics["unconditional_sliced_w2"] = json!(MetricReport::sliced_w2(sw, n, n, DEFAULT_PROJECTIONS, cfg.seed));
        lines.push(format!("unconditional sliced-W2 to prior {sw:.5}"));
    }

    dir.write("metrics.json", serde_json::to_string_pretty(&metrics).expect("json") + "\n")?;
    let path = dir.commit()?;
    Ok(CommandSummary { output_dir: path, lines })
}

fn mixture_json(m: &GaussianMixture) -> serde_json::Value {
    json!({
        "weights": m.weights().to_vec(),
        "means": matrix_json(m.means()),
        "covariance": matrix_json(m.covariance()),
        "mean": m.mean().to_vec(),
    })
}

pub fn cmd_posterior_exact(cfg: &ExperimentConfig, out: &Path) -> Result<CommandSummary> {
    let obs = cfg.require_observation()?;
    let posterior = cfg.prior.posterior_linear_gaussian(obs)?;
    let n = cfg.solver.n_samples;
    let dir = AtomicDir::create(out)?;
    let samples = posterior.sample(&mut stream_rng(cfg.seed, streams::EXACT_POSTERIOR), n);
    dir.write("posterior_exact.csv", output::samples_csv(&provenance(cfg, "posterior_exact"), samples.view(), 0))?;
    let mut summary = mixture_json(&posterior);
    summary["config_hash"] = json!(cfg.hash);
    summary["seed"] = json!(cfg.seed);
    dir.write("posterior.json", serde_json::to_string_pretty(&summary).expect("json") + "\n")?;
    let path = dir.commit()?;
    Ok(CommandSummary {
        output_dir: path,
        lines: vec![format!("wrote {n} exact posterior samples")],
    })
}

pub fn cmd_sample_prior(cfg: &ExperimentConfig, out: &Path) -> Result<CommandSummary> {
    let n = cfg.solver.n_samples;
    let dir = AtomicDir::create(out)?;
    let samples = cfg.prior.sample(&mut stream_rng(cfg.seed, streams::PRIOR), n);
    dir.write("prior_samples.csv", output::samples_csv(&provenance(cfg, "prior_samples"), samples.view(), 0))?;
    let path = dir.commit()?;
    Ok(CommandSummary {
        output_dir: path,
        lines: vec![format!("wrote {n} prior samples")],
    })
}
