//! Distribution- and point-level comparisons between sample sets.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::coupling::{min_cost_assignment, squared_distance_matrix};
use crate::rng::standard_normal_vec;

pub const DEFAULT_PROJECTIONS: usize = 128;

/// Largest set size accepted by [`exact_w2`]; the assignment is `O(n³)`.
pub const EXACT_W2_MAX_POINTS: usize = 2048;

/// `n ≥ 1` points in ℝᵈ, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    points: Array2<f64>,
    pub label: Option<String>,
}

impl SampleSet {
    pub fn new(points: Array2<f64>) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(Error::InvalidParameter("a sample set needs at least one point".into()));
        }
        if points.ncols() == 0 {
            return Err(Error::InvalidParameter("sample points need at least one coordinate".into()));
        }
        Ok(Self { points, label: None })
    }

    pub fn from_rows(rows: &[Array1<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, |r| r.len());
        let mut points = Array2::<f64>::zeros((rows.len(), d));
        for (i, r) in rows.iter().enumerate() {
            if r.len() != d {
                return Err(Error::dim("sample point", d, r.len()));
            }
            points.row_mut(i).assign(r);
        }
        Self::new(points)
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn into_points(self) -> Array2<f64> {
        self.points
    }
}

/// W2 between two equal-size empirical measures on the line, given sorted
/// inputs: `sqrt(mean_i (a_(i) − b_(i))²)`.
pub fn wasserstein1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("wasserstein1d sample count", a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::InvalidParameter("wasserstein1d needs at least one point".into()));
    }
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((sq / a.len() as f64).sqrt())
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_unstable_by(f64::total_cmp);
    v
}

/// Uniform direction on the unit sphere in ℝᵈ.
pub fn random_direction<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Array1<f64> {
    loop {
        let g = standard_normal_vec(rng, d);
        let n = g.dot(&g).sqrt();
        if n > 1e-300 {
            return g / n;
        }
    }
}

fn check_pair(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<()> {
    if a.ncols() != b.ncols() {
        return Err(Error::dim("sample dimension", a.ncols(), b.ncols()));
    }
    if a.nrows() != b.nrows() {
        return Err(Error::dim("paired sample count", a.nrows(), b.nrows()));
    }
    if a.nrows() == 0 {
        return Err(Error::InvalidParameter("sample sets must be non-empty".into()));
    }
    Ok(())
}

/// Root-mean of the squared 1-D W2 distances of the projections onto
/// `n_projections` random unit directions drawn from `rng`.
pub fn sliced_w2<R: Rng + ?Sized>(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    n_projections: usize,
    rng: &mut R,
) -> Result<f64> {
    check_pair(a, b)?;
    if n_projections == 0 {
        return Err(Error::InvalidParameter("n_projections must be at least 1".into()));
    }
    let mut total = 0.0;
    for _ in 0..n_projections {
        let theta = random_direction(rng, a.ncols());
        let pa = sorted(a.dot(&theta).to_vec());
        let pb = sorted(b.dot(&theta).to_vec());
        total += wasserstein1d(&pa, &pb)?.powi(2);
    }
    Ok((total / n_projections as f64).sqrt())
}

/// Exact W2 between two equal-size empirical measures via optimal assignment.
pub fn exact_w2(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    check_pair(a, b)?;
    if a.nrows() > EXACT_W2_MAX_POINTS {
        return Err(Error::InvalidParameter(format!(
            "exact W2 is limited to {EXACT_W2_MAX_POINTS} points, got {}",
            a.nrows()
        )));
    }
    let cost = squared_distance_matrix(a, b);
    let assignment = min_cost_assignment(cost.view())?;
    let total: f64 = assignment.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
    Ok((total / a.nrows() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: Array1<f64>,
    /// Unbiased (`n − 1`) sample covariance.
    pub covariance: Array2<f64>,
}

pub fn empirical_mean(s: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    s.mean_axis(Axis(0))
        .ok_or_else(|| Error::InvalidParameter("mean of an empty sample set".into()))
}

pub fn empirical_moments(s: ArrayView2<'_, f64>) -> Result<Moments> {
    let n = s.nrows();
    if n < 2 {
        return Err(Error::InvalidParameter(format!("covariance needs at least 2 samples, got {n}")));
    }
    let mean = empirical_mean(s)?;
    let centered = &s - &mean;
    let covariance = centered.t().dot(&centered) / (n - 1) as f64;
    Ok(Moments { mean, covariance })
}

/// Mean squared Euclidean distance between row-aligned sets.
pub fn mean_squared_error(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    check_pair(a, b)?;
    Ok((&a - &b).mapv(|v| v * v).sum() / a.nrows() as f64)
}

/// Squared distance of each row to a fixed point.
pub fn squared_errors_to(s: ArrayView2<'_, f64>, target: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if s.ncols() != target.len() {
        return Err(Error::dim("squared error target", s.ncols(), target.len()));
    }
    Ok((&s - &target).mapv(|v| v * v).sum_axis(Axis(1)))
}

/// Serialized as `{metric, value, n_a, n_b, n_projections, seed}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub n_a: usize,
    pub n_b: usize,
    pub n_projections: Option<usize>,
    pub seed: Option<u64>,
}

impl MetricReport {
    pub fn sliced_w2(value: f64, n_a: usize, n_b: usize, n_projections: usize, seed: u64) -> Self {
        Self {
            metric: "sliced_w2".into(),
            value,
            n_a,
            n_b,
            n_projections: Some(n_projections),
            seed: Some(seed),
        }
    }
}
