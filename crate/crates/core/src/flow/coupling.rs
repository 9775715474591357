//! Source–target couplings for flow-matching minibatches.
//!
//! `MinibatchOt` pairs each source point with a distinct target point so that
//! the total squared Euclidean distance is minimal, solved exactly by the
//! shortest-augmenting-path Hungarian method in `O(n³)`.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    #[default]
    Independent,
    MinibatchOt,
}

/// Squared Euclidean cost matrix between the rows of `a` and `b`.
pub fn squared_distance_matrix(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| {
        a.row(i)
            .iter()
            .zip(b.row(j).iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum()
    })
}

/// Exact minimum-cost perfect matching on a square cost matrix; returns
/// `assignment[row] = column`.
pub fn min_cost_assignment(cost: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    let n = cost.nrows();
    if cost.ncols() != n {
        return Err(Error::dim("assignment (square cost)", n, cost.ncols()));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidParameter("assignment costs must be finite".into()));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    // 1-based rows/columns; column 0 is the virtual root of each search.
    let mut row_potential = vec![0.0_f64; n + 1];
    let mut col_potential = vec![0.0_f64; n + 1];
    let mut col_owner = vec![0_usize; n + 1];
    let mut parent = vec![0_usize; n + 1];
    let mut slack = vec![0.0_f64; n + 1];
    let mut visited = vec![false; n + 1];
    for row in 1..=n {
        col_owner[0] = row;
        let mut col = 0;
        slack.fill(f64::INFINITY);
        visited.fill(false);
        loop {
            visited[col] = true;
            let r = col_owner[col];
            let mut delta = f64::INFINITY;
            let mut next = 0;
            let cost_row = cost.row(r - 1);
            for j in 1..=n {
                if visited[j] {
                    continue;
                }
                let reduced = cost_row[j - 1] - row_potential[r] - col_potential[j];
                if reduced < slack[j] {
                    slack[j] = reduced;
                    parent[j] = col;
                }
                if slack[j] < delta {
                    delta = slack[j];
                    next = j;
                }
            }
            for j in 0..=n {
                if visited[j] {
                    row_potential[col_owner[j]] += delta;
                    col_potential[j] -= delta;
                } else {
                    slack[j] -= delta;
                }
            }
            col = next;
            if col_owner[col] == 0 {
                break;
            }
        }
        while col != 0 {
            let prev = parent[col];
            col_owner[col] = col_owner[prev];
            col = prev;
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[col_owner[j] - 1] = j - 1;
    }
    Ok(assignment)
}

/// Returns `pairing[i]`, the index of the target row paired with source row `i`.
pub fn pair_indices(coupling: Coupling, x0s: ArrayView2<'_, f64>, x1s: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    if x0s.nrows() != x1s.nrows() {
        return Err(Error::dim("coupling batch size", x0s.nrows(), x1s.nrows()));
    }
    if x0s.ncols() != x1s.ncols() {
        return Err(Error::dim("coupling point dimension", x0s.ncols(), x1s.ncols()));
    }
    match coupling {
        Coupling::Independent => Ok((0..x0s.nrows()).collect()),
        Coupling::MinibatchOt => min_cost_assignment(squared_distance_matrix(x0s, x1s).view()),
    }
}

/// Reorders the target batch so that row `i` of the result is paired with
/// source row `i`.
pub fn pair_batch(coupling: Coupling, x0s: ArrayView2<'_, f64>, x1s: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let pairing = pair_indices(coupling, x0s, x1s)?;
    Ok(x1s.select(ndarray::Axis(0), &pairing))
}

/// Total squared distance `Σ_i ‖x0_i − x1_i‖²` of a row-aligned pairing.
pub fn pairing_cost(x0s: ArrayView2<'_, f64>, x1s: ArrayView2<'_, f64>) -> f64 {
    (&x0s - &x1s).mapv(|v| v * v).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::rng::standard_normal_matrix;

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

    #[test]
    fn singleton_pairs_itself() {
        let a = array![[1.0, 2.0]];
        let b = array![[-3.0, 0.5]];
        for c in [Coupling::Independent, Coupling::MinibatchOt] {
            assert_eq!(pair_indices(c, a.view(), b.view()).unwrap(), vec![0]);
        }
    }

    #[test]
    fn identical_sets_match_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = standard_normal_matrix(&mut rng, 16, 2);
        let p = pair_indices(Coupling::MinibatchOt, a.view(), a.view()).unwrap();
        assert_eq!(p, (0..16).collect::<Vec<_>>());
        let paired = pair_batch(Coupling::MinibatchOt, a.view(), a.view()).unwrap();
        assert_eq!(pairing_cost(a.view(), paired.view()), 0.0);
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 1..=7 {
            let perms = permutations(n);
            for _ in 0..5 {
                let a = standard_normal_matrix(&mut rng, n, 2);
                let b = standard_normal_matrix(&mut rng, n, 2);
                let cost = squared_distance_matrix(a.view(), b.view());
                let best = perms
                    .iter()
                    .map(|p| p.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum::<f64>())
                    .fold(f64::INFINITY, f64::min);
                let got = min_cost_assignment(cost.view()).unwrap();
                let mut seen = got.clone();
                seen.sort_unstable();
                assert_eq!(seen, (0..n).collect::<Vec<_>>());
                let got_cost: f64 = got.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
                assert!((got_cost - best).abs() <= 1e-12 * best.max(1.0));
            }
        }
    }

    #[test]
    fn rejects_mismatched_batches() {
        let a = array![[0.0, 0.0], [1.0, 1.0]];
        let b = array![[0.0, 0.0]];
        assert!(pair_indices(Coupling::MinibatchOt, a.view(), b.view()).is_err());
        assert!(min_cost_assignment(Array2::<f64>::zeros((2, 3)).view()).is_err());
    }
}
