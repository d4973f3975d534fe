//! Independent quadratic-time DPC-KNN reference.
//!
//! Written from the definitions, sharing no code with the library: a full
//! pairwise distance table, full sorts instead of selection, and explicit
//! "denser than" sets. Tie-breaks follow the documented rules: lower index
//! wins among equal distances, equal scores and equal center distances; a
//! token is denser than another with equal density when its index is lower.

#![allow(dead_code)]

pub struct OracleResult {
    pub density: Vec<f64>,
    pub indicator: Vec<f64>,
    pub score: Vec<f64>,
    pub centers: Vec<usize>,
    pub assignment: Vec<usize>,
}

pub fn pairwise(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for c in 0..points[i].len() {
                let t = points[i][c] - points[j][c];
                s += t * t;
            }
            d[i][j] = s;
        }
    }
    d
}

/// Returns `(nearest-first squared distances, indices)` of the `k` nearest
/// other points.
pub fn knn(d: &[Vec<f64>], i: usize, k: usize) -> (Vec<f64>, Vec<usize>) {
    let mut others: Vec<usize> = (0..d.len()).filter(|&j| j != i).collect();
    others.sort_by(|&a, &b| d[i][a].partial_cmp(&d[i][b]).unwrap().then(a.cmp(&b)));
    others.truncate(k.min(d.len() - 1));
    (others.iter().map(|&j| d[i][j]).collect(), others)
}

pub fn dpc(points: &[Vec<f64>], m: usize, k: usize) -> OracleResult {
    let n = points.len();
    let d = pairwise(points);
    let kk = k.min(n - 1);
    let mean_sq: Vec<f64> = (0..n)
        .map(|i| {
            let (ds, _) = knn(&d, i, k);
            let mut s = 0.0;
            for v in ds {
                s += v;
            }
            s / kk as f64
        })
        .collect();
    let density: Vec<f64> = mean_sq.iter().map(|v| (-v).exp()).collect();
    // rank densities in the log domain when any density is not a normal float
    let key: Vec<f64> = if density.iter().any(|&r| r < f64::MIN_POSITIVE) {
        mean_sq.iter().map(|v| -v).collect()
    } else {
        density.clone()
    };
    let is_denser = |j: usize, i: usize| key[j] > key[i] || (key[j] == key[i] && j < i);

    let mut indicator = vec![0.0; n];
    for i in 0..n {
        let mut denser: Vec<usize> = (0..n).filter(|&j| j != i && is_denser(j, i)).collect();
        if denser.is_empty() {
            let far = (0..n).filter(|&j| j != i).map(|j| d[i][j]).fold(0.0, f64::max);
            indicator[i] = far.sqrt();
        } else {
            denser.sort_by(|&a, &b| d[i][a].partial_cmp(&d[i][b]).unwrap().then(a.cmp(&b)));
            indicator[i] = d[i][denser[0]].sqrt();
        }
    }
    let score: Vec<f64> = (0..n).map(|i| density[i] * indicator[i]).collect();
    let rank_key: Vec<f64> = if key == density {
        score.clone()
    } else {
        (0..n).map(|i| key[i] + indicator[i].ln()).collect()
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| rank_key[b].partial_cmp(&rank_key[a]).unwrap().then(a.cmp(&b)));
    let centers: Vec<usize> = order[..m].to_vec();

    let assignment = (0..n)
        .map(|i| {
            if let Some(r) = centers.iter().position(|&c| c == i) {
                return r;
            }
            let mut ranks: Vec<usize> = (0..m).collect();
            ranks.sort_by(|&a, &b| d[i][centers[a]].partial_cmp(&d[i][centers[b]]).unwrap().then(a.cmp(&b)));
            ranks[0]
        })
        .collect();
    OracleResult { density, indicator, score, centers, assignment }
}
