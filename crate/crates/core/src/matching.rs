//! Pairing predicted boxes with ground-truth boxes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{giou, Box3D};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Query `j` answers for block `j mod K`, the same tiling used to
    /// replicate block features over the queries.
    #[default]
    Assigned,
    /// Minimum-cost bijection under cost `1 - GIoU`.
    Hungarian,
}

/// `(prediction index, ground-truth index)` pairs, sorted by prediction.
pub type Pairing = Vec<(usize, usize)>;

pub fn tiled_pairing(num_queries: usize, num_gt: usize) -> Pairing {
    (0..num_queries).map(|j| (j, j % num_gt)).collect()
}

pub fn match_predictions(preds: &[Box3D], gts: &[Box3D], mode: MatchMode) -> Result<Pairing> {
    if preds.is_empty() || gts.is_empty() {
        return Err(Error::invalid("matching needs at least one prediction and one ground truth"));
    }
    Ok(match mode {
        MatchMode::Assigned => tiled_pairing(preds.len(), gts.len()),
        MatchMode::Hungarian => {
            let cost: Vec<Vec<f64>> = preds
                .iter()
                .map(|p| gts.iter().map(|g| 1.0 - giou(p, g)).collect())
                .collect();
            hungarian(&cost)
        }
    })
}

/// Checks that `pairing` is usable for `q` predictions and `k` ground truths.
pub fn validate_pairing(pairing: &Pairing, q: usize, k: usize) -> Result<()> {
    if pairing.is_empty() {
        return Err(Error::invalid("empty pairing"));
    }
    for &(p, g) in pairing {
        if p >= q || g >= k {
            return Err(Error::invalid(format!("pair ({p}, {g}) out of range for {q} predictions and {k} boxes")));
        }
    }
    Ok(())
}

/// Exact minimum-cost assignment for a rectangular cost matrix
/// (`rows × cols`). Returns `min(rows, cols)` pairs `(row, col)` sorted by row.
pub fn hungarian(cost: &[Vec<f64>]) -> Pairing {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    if rows > cols {
        let t: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| cost[i][j]).collect()).collect();
        let mut out: Pairing = hungarian(&t).into_iter().map(|(c, r)| (r, c)).collect();
        out.sort_unstable();
        return out;
    }
    // potentials method, 1-based with a virtual column 0
    let (n, m) = (rows, cols);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out: Pairing = (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect();
    out.sort_unstable();
    out
}

/// Sum of `cost[r][c]` over the pairs, in pairing order.
pub fn pairing_cost(cost: &[Vec<f64>], pairing: &Pairing) -> f64 {
    pairing.iter().map(|&(r, c)| cost[r][c]).sum()
}
