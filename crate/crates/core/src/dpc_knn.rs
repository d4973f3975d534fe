//! k-nearest-neighbour density-peaks clustering (DPC-KNN) over token features.
//!
//! Pipeline: KNN squared distances, local density
//! `rho_i = exp(-(1/k) * sum_{j in KNN(i)} |x_i - x_j|^2)`, distance indicator
//! `delta_i` (distance to the nearest denser token, or the largest distance
//! for the global density peak), score `rho * delta`, top-`M` centers, and
//! nearest-center assignment.
//!
//! Tie-breaks are fixed so results are deterministic on degenerate inputs:
//! neighbours and centers tie-break towards the lower token index, and token
//! `j` counts as denser than token `i` when `rho_j > rho_i`, or
//! `rho_j == rho_i` and `j < i`.
//!
//! When some density underflows `f64` (`exp` of a very negative mean), ranks
//! are taken from the log-density `-(mean squared distance)` instead, which
//! orders tokens identically wherever the plain densities are representable.

use std::cmp::Ordering;

use ndarray::{Array2, ArrayView2};

use crate::error::{invalid, Result};
use crate::exec::{map_indices, Exec};

/// Neighbourhood size used when none is configured.
pub const DEFAULT_K: usize = 5;

/// KNN table: row `i` holds the `k` nearest other tokens, nearest first.
#[derive(Debug, Clone, PartialEq)]
pub struct Knn {
    pub sq_distances: Array2<f64>,
    pub indices: Array2<usize>,
}

impl Knn {
    pub fn k(&self) -> usize {
        self.indices.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    /// Local density `rho`, in `(0, 1]` unless it underflows.
    pub density: Vec<f64>,
    /// Distance indicator `delta`.
    pub indicator: Vec<f64>,
    /// `rho * delta`.
    pub score: Vec<f64>,
    /// Center token indices in descending score order.
    pub centers: Vec<usize>,
    /// Per-token center rank in `0..centers.len()`.
    pub assignment: Vec<usize>,
}

impl ClusterResult {
    pub fn num_clusters(&self) -> usize {
        self.centers.len()
    }

    pub fn is_center(&self, token: usize) -> bool {
        self.centers.contains(&token)
    }
}

fn validate_features(features: ArrayView2<f64>) -> Result<()> {
    if features.nrows() < 2 {
        return invalid(format!("clustering needs at least 2 tokens, got {}", features.nrows()));
    }
    if let Some(((i, j), v)) = features.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return invalid(format!("non-finite feature {v} at token {i}, channel {j}"));
    }
    Ok(())
}

#[inline]
fn sq_dist(features: ArrayView2<f64>, i: usize, j: usize) -> f64 {
    features
        .row(i)
        .iter()
        .zip(features.row(j).iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

/// The `k` nearest other tokens of every token (clamped to `N - 1`).
pub fn knn_sq_distances(features: ArrayView2<f64>, k: usize) -> Result<Knn> {
    knn_sq_distances_with(features, k, Exec::default())
}

pub fn knn_sq_distances_with(features: ArrayView2<f64>, k: usize, exec: Exec) -> Result<Knn> {
    validate_features(features)?;
    if k == 0 {
        return invalid("k must be at least 1");
    }
    let n = features.nrows();
    let k = k.min(n - 1);
    let rows = map_indices(exec, n, |i| {
        let mut cand: Vec<(f64, usize)> =
            (0..n).filter(|&j| j != i).map(|j| (sq_dist(features, i, j), j)).collect();
        let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, by_dist);
            cand.truncate(k);
        }
        cand.sort_unstable_by(by_dist);
        cand
    });
    let mut sq_distances = Array2::zeros((n, k));
    let mut indices = Array2::zeros((n, k));
    for (i, row) in rows.into_iter().enumerate() {
        for (c, (d, j)) in row.into_iter().enumerate() {
            sq_distances[[i, c]] = d;
            indices[[i, c]] = j;
        }
    }
    Ok(Knn { sq_distances, indices })
}

/// Mean squared distance to the k nearest neighbours (`-ln rho`).
fn mean_knn_sq(knn: &Knn) -> Vec<f64> {
    let k = knn.k() as f64;
    knn.sq_distances.rows().into_iter().map(|r| r.iter().sum::<f64>() / k).collect()
}

pub fn local_density(features: ArrayView2<f64>, k: usize) -> Result<Vec<f64>> {
    let knn = knn_sq_distances(features, k)?;
    Ok(mean_knn_sq(&knn).into_iter().map(|m| (-m).exp()).collect())
}

/// Whether token `j` ranks above token `i` in density.
#[inline]
fn denser(key: &[f64], j: usize, i: usize) -> bool {
    match key[j].partial_cmp(&key[i]) {
        Some(Ordering::Greater) => true,
        Some(Ordering::Equal) => j < i,
        _ => false,
    }
}

/// Distance indicator and the denser neighbour realizing it (`None` for the
/// global density peak).
pub fn distance_indicator(features: ArrayView2<f64>, density: &[f64]) -> Result<(Vec<f64>, Vec<Option<usize>>)> {
    distance_indicator_with(features, density, Exec::default())
}

pub fn distance_indicator_with(
    features: ArrayView2<f64>,
    density_key: &[f64],
    exec: Exec,
) -> Result<(Vec<f64>, Vec<Option<usize>>)> {
    validate_features(features)?;
    let n = features.nrows();
    if density_key.len() != n {
        return invalid(format!("density has length {}, expected {n}", density_key.len()));
    }
    let rows = map_indices(exec, n, |i| {
        let mut best: Option<(f64, usize)> = None;
        let mut far = 0.0f64;
        for j in (0..n).filter(|&j| j != i) {
            let d = sq_dist(features, i, j);
            far = far.max(d);
            if denser(density_key, j, i) && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, j));
            }
        }
        match best {
            Some((d, j)) => (d.sqrt(), Some(j)),
            None => (far.sqrt(), None),
        }
    });
    Ok(rows.into_iter().unzip())
}

/// Indices of the `m` largest keys, ties towards the lower index, in
/// descending key order.
fn top_m(keys: &[f64], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b)));
    order.truncate(m);
    order
}

pub fn select_centers(density: &[f64], indicator: &[f64], m: usize) -> Result<Vec<usize>> {
    let n = density.len();
    if indicator.len() != n {
        return invalid("density and indicator lengths differ");
    }
    if m == 0 || m > n {
        return invalid(format!("center count {m} outside 1..={n}"));
    }
    let score: Vec<f64> = density.iter().zip(indicator).map(|(r, d)| r * d).collect();
    Ok(top_m(&score, m))
}

/// Top-`m` tokens by an arbitrary per-token key (the CTM-topk variant ranks
/// by importance score).
pub fn select_top(keys: &[f64], m: usize) -> Result<Vec<usize>> {
    if m == 0 || m > keys.len() {
        return invalid(format!("center count {m} outside 1..={}", keys.len()));
    }
    if keys.iter().any(|v| !v.is_finite()) {
        return invalid("non-finite ranking key");
    }
    Ok(top_m(keys, m))
}

pub fn assign_clusters(features: ArrayView2<f64>, centers: &[usize]) -> Result<Vec<usize>> {
    assign_clusters_with(features, centers, Exec::default())
}

pub fn assign_clusters_with(features: ArrayView2<f64>, centers: &[usize], exec: Exec) -> Result<Vec<usize>> {
    let n = features.nrows();
    if centers.is_empty() {
        return invalid("no cluster centers");
    }
    if let Some(&c) = centers.iter().find(|&&c| c >= n) {
        return invalid(format!("center index {c} out of range for {n} tokens"));
    }
    let mut rank_of = vec![usize::MAX; n];
    for (r, &c) in centers.iter().enumerate() {
        if rank_of[c] != usize::MAX {
            return invalid(format!("duplicate center {c}"));
        }
        rank_of[c] = r;
    }
    Ok(map_indices(exec, n, |i| {
        if rank_of[i] != usize::MAX {
            return rank_of[i];
        }
        let mut best = (f64::INFINITY, 0);
        for (r, &c) in centers.iter().enumerate() {
            let d = sq_dist(features, i, c);
            if d < best.0 {
                best = (d, r);
            }
        }
        best.1
    }))
}

/// Full DPC-KNN: `m` clusters with neighbourhood size `k`.
pub fn cluster(features: ArrayView2<f64>, m: usize, k: usize) -> Result<ClusterResult> {
    cluster_with(features, m, k, Exec::default())
}

pub fn cluster_with(features: ArrayView2<f64>, m: usize, k: usize, exec: Exec) -> Result<ClusterResult> {
    let n = features.nrows();
    validate_features(features)?;
    if m == 0 || m > n {
        return invalid(format!("center count {m} outside 1..={n}"));
    }
    let knn = knn_sq_distances_with(features, k, exec)?;
    let mean_sq = mean_knn_sq(&knn);
    let density: Vec<f64> = mean_sq.iter().map(|v| (-v).exp()).collect();
    let underflow = density.iter().any(|&r| r < f64::MIN_POSITIVE);
    let log_density: Vec<f64> = mean_sq.iter().map(|v| -v).collect();
    let key = if underflow { &log_density } else { &density };

    let (indicator, _) = distance_indicator_with(features, key, exec)?;
    let score: Vec<f64> = density.iter().zip(&indicator).map(|(r, d)| r * d).collect();
    let centers = if underflow {
        let log_score: Vec<f64> = log_density.iter().zip(&indicator).map(|(l, d)| l + d.ln()).collect();
        top_m(&log_score, m)
    } else {
        top_m(&score, m)
    };
    let assignment = assign_clusters_with(features, &centers, exec)?;
    Ok(ClusterResult { density, indicator, score, centers, assignment })
}
