//! Measurements shared by the acceptance report and the integration tests.
//! Each function returns raw numbers; callers apply the thresholds.

#![allow(dead_code)]

use std::sync::Arc;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tcformer::autograd::{Mat, Tape};
use tcformer::ctm::merge_features;
use tcformer::dpc_knn::cluster;
use tcformer::exec::Exec;
use tcformer::harness::dataset::{generate_dataset, held_out_seed, SyntheticSample};
use tcformer::harness::density::{token_density_report, DensityReport};
use tcformer::harness::pck::evaluate_pck;
use tcformer::harness::train::{train, TrainConfig};
use tcformer::model::{MergeKind, Model, ModelConfig};
use tcformer::mta_head::{mta_forward, upsample_tokens, MtaConfig, MtaHead};
use tcformer::params::ParamStore;
use tcformer::token_space::{map_to_tokens, tokens_to_map, MergeRecord, RegionMap, TapeTokens, TokenSet};
use tcformer::transformer_block::{BlockConfig, TransformerBlock};

use super::oracle;

pub fn rel_diff(a: &Mat, b: &Mat) -> f64 {
    let num = (a - b).iter().map(|v| v * v).sum::<f64>().sqrt();
    let den = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    num / den
}

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| scale * rng.random_range(-1.0..1.0))
}

/// Random surjective assignment of `n` tokens onto `m` clusters.
pub fn random_assignment(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<usize> {
    let mut a: Vec<usize> = (0..n).map(|i| if i < m { i } else { rng.random_range(0..m) }).collect();
    for i in (1..n).rev() {
        a.swap(i, rng.random_range(0..=i));
    }
    a
}

// ----- clustering oracle -------------------------------------------------

pub struct OracleSummary {
    pub instances: usize,
    pub mismatches: Vec<String>,
    pub elapsed: Duration,
}

pub fn oracle_equivalence(instances: usize, seed: u64) -> OracleSummary {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = Vec::new();
    for t in 0..instances {
        let n = rng.random_range(2..=64);
        let d = rng.random_range(1..=8);
        let m = rng.random_range(1..=(n / 2).max(1));
        let k = rng.random_range(1..=8);
        let lattice = t % 3 == 0;
        let points: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| if lattice { rng.random_range(0..3) as f64 } else { rng.random_range(-1.0..1.0) }).collect())
            .collect();
        let x = Array2::from_shape_fn((n, d), |(i, j)| points[i][j]);
        let got = cluster(x.view(), m, k).expect("valid instance");
        let want = oracle::dpc(&points, m, k);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        let same = bits(&got.density) == bits(&want.density)
            && bits(&got.indicator) == bits(&want.indicator)
            && bits(&got.score) == bits(&want.score)
            && got.centers == want.centers
            && got.assignment == want.assignment;
        if !same {
            mismatches.push(format!("instance {t} (N={n}, D={d}, M={m}, k={k})"));
        }
    }
    OracleSummary { instances, mismatches, elapsed: started.elapsed() }
}

// ----- algebraic invariants ---------------------------------------------

/// Largest relative change of the merged features under `p -> p + c`.
pub fn merge_shift_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(4..40);
        let m = rng.random_range(1..=n / 2);
        let regions = Arc::new(RegionMap::new(1, n, (0..n).collect(), n).unwrap());
        let tokens = TokenSet::new(random_mat(&mut rng, n, 6, 2.0), regions, 1).unwrap();
        let a = random_assignment(&mut rng, n, m);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let base = merge_features(&tokens, &a, &p).unwrap();
        for c in [-800.0, -3.0, 0.5, 40.0, 700.0] {
            let shifted: Vec<f64> = p.iter().map(|v| v + c).collect();
            worst = worst.max(rel_diff(&base, &merge_features(&tokens, &a, &shifted).unwrap()));
        }
    }
    worst
}

/// Largest relative change of the importance-biased attention block output
/// (merged queries attending to the pre-merge tokens) under `p -> p + c`,
/// for spatial-reduction ratios 1 and 2.
pub fn attention_shift_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for reduction in [1, 2] {
        let mut store = ParamStore::new(seed + reduction as u64);
        let block = TransformerBlock::new(&mut store, "blk", BlockConfig::new(reduction, 2, 2, 8)).unwrap();
        store.perturb(seed, 0.2);
        let fine = Arc::new(RegionMap::identity(4, 4));
        let a = random_assignment(&mut rng, 16, 5);
        let coarse = Arc::new(fine.merge(&a, 5).unwrap());
        let kv_feats = random_mat(&mut rng, 16, 8, 1.0);
        let q_feats = random_mat(&mut rng, 5, 8, 1.0);
        let p = random_mat(&mut rng, 16, 1, 3.0);
        let run = |shift: f64| {
            let mut tape = Tape::new();
            let kv = TapeTokens { features: tape.constant(kv_feats.clone()), regions: fine.clone() };
            let q = TapeTokens { features: tape.constant(q_feats.clone()), regions: coarse.clone() };
            let bias = tape.constant(p.mapv(|v| v + shift));
            let y = block.forward_cross(&mut tape, &store, &q, (2, 2), Some((&kv, (4, 4))), Some(bias)).unwrap();
            tape.value(y).clone()
        };
        let base = run(0.0);
        for c in [-50.0, 7.0, 300.0] {
            worst = worst.max(rel_diff(&base, &run(c)));
        }
    }
    worst
}

/// Relative change of a full model's heatmaps when every merge's importance
/// bias is shifted by a constant (the whole pipeline, clustering included).
pub fn model_shift_error(seed: u64) -> f64 {
    let mut store = ParamStore::new(seed);
    let model = Model::new(&mut store, ModelConfig::mini()).unwrap();
    store.perturb(seed, 0.1);
    let image = generate_dataset(seed, 1, (64, 64)).unwrap().remove(0).image;
    let base = model.heatmaps(&store, &image).unwrap().data;
    let id = store.find("merge1.score.bias").expect("merge1 importance bias");
    store.value_mut(id).mapv_inplace(|v| v + 11.0);
    rel_diff(&base, &model.heatmaps(&store, &image).unwrap().data)
}

/// Largest `|row sum - 1|` of the tape softmax over random (including very
/// large) logits.
pub fn softmax_row_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for scale in [1.0, 30.0, 700.0] {
        let mut tape = Tape::new();
        let x = tape.constant(random_mat(&mut rng, 20, 33, scale));
        let s = tape.softmax_rows(x);
        for row in tape.value(s).rows() {
            worst = worst.max((row.sum() - 1.0).abs());
        }
    }
    worst
}

/// Largest violation of the convex-hull property: each merged feature must
/// equal the positive, normalized combination of its cluster members
/// computed independently here, and stay within the members' per-channel
/// range.
pub fn convex_hull_violation(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(4..50);
        let m = rng.random_range(1..=n / 2);
        let c = 5;
        let regions = Arc::new(RegionMap::new(1, n, (0..n).collect(), n).unwrap());
        let x = random_mat(&mut rng, n, c, 3.0);
        let tokens = TokenSet::new(x.clone(), regions, 1).unwrap();
        let a = random_assignment(&mut rng, n, m);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let y = merge_features(&tokens, &a, &p).unwrap();
        for k in 0..m {
            let members: Vec<usize> = (0..n).filter(|&j| a[j] == k).collect();
            let max_p = members.iter().map(|&j| p[j]).fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = members.iter().map(|&j| (p[j] - max_p).exp()).collect();
            let total: f64 = w.iter().sum();
            for ch in 0..c {
                let combo: f64 = members.iter().zip(&w).map(|(&j, wj)| wj / total * x[[j, ch]]).sum();
                worst = worst.max((combo - y[[k, ch]]).abs());
                let lo = members.iter().map(|&j| x[[j, ch]]).fold(f64::INFINITY, f64::min);
                let hi = members.iter().map(|&j| x[[j, ch]]).fold(f64::NEG_INFINITY, f64::max);
                worst = worst.max(lo - y[[k, ch]]).max(y[[k, ch]] - hi);
            }
        }
    }
    worst
}

/// Largest error of tokens -> map -> tokens at the base resolution, over
/// random irregular region maps.
pub fn round_trip_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (h, w) = (8, 8);
        let m = rng.random_range(1..=h * w);
        let a = random_assignment(&mut rng, h * w, m);
        let regions = Arc::new(RegionMap::identity(h, w).merge(&a, m).unwrap());
        let x = random_mat(&mut rng, m, 4, 5.0);
        let tokens = TokenSet::new(x.clone(), regions, 2).unwrap();
        let map = tokens_to_map(&tokens, (h, w)).unwrap();
        let back = map_to_tokens(&map, &tokens).unwrap();
        worst = worst.max((&back - &x).iter().fold(0.0, |acc, v| acc.max(v.abs())));
    }
    worst
}

// ----- detail preservation ----------------------------------------------

pub struct DetailCase {
    /// Distance between the two tokens' features after MTA-style upsampling
    /// (gather from the coarser stage plus the tokens' own features).
    pub upsampled_gap: f64,
    /// Distance between the MTA head's outputs at the two tokens' cells.
    pub head_gap: f64,
    /// The same distance when the middle stage is replaced by its
    /// low-resolution feature map; nonzero only through the zero-padded
    /// convolutions, which see the two cells at different positions.
    pub map_head_gap: f64,
    /// Distance between the two cells read back from the low-resolution map.
    pub coarse_gap: f64,
}

/// A 4x4 base grid whose middle stage (nominal 2x2 grid) holds two tokens
/// with distinct features inside the top-left 2x2 pixel: token 0 is the
/// left column of that block, token 1 the right column. Base-cell features
/// are identical everywhere, so any difference between cells (0,0) and
/// (0,1) in the head output must come from the middle stage.
pub fn detail_case() -> DetailCase {
    let gap = |m: &Mat, a: usize, b: usize| (&m.row(a) - &m.row(b)).iter().map(|v| v * v).sum::<f64>().sqrt();
    let res = [(4, 4), (2, 2), (1, 1)];

    let base = Arc::new(RegionMap::identity(4, 4));
    let base_tokens = TokenSet::new(Mat::from_elem((16, 3), 0.25), base.clone(), 1).unwrap();
    let mid_cells: Vec<usize> = (0..16)
        .map(|c| match ((c / 4) / 2, (c % 4) / 2) {
            (0, 0) => c % 4,
            (0, 1) => 2,
            (1, 0) => 3,
            _ => 4,
        })
        .collect();
    let to_mid = MergeRecord::new(mid_cells.clone(), vec![0.0; 16], 5).unwrap();
    let mid_regions = Arc::new(base.merge(&mid_cells, 5).unwrap());
    let mid_feats = Mat::from_shape_fn((5, 3), |(i, j)| match i {
        0 => 1.0 + j as f64,
        1 => -2.0 - j as f64,
        _ => 0.3 * (i + j) as f64,
    });
    let mid = TokenSet::new(mid_feats.clone(), mid_regions.clone(), 2).unwrap();
    let to_top = MergeRecord::new(vec![0, 0, 0, 1, 1], vec![0.0; 5], 2).unwrap();
    let top_feats = merge_features(&mid, &to_top.assignment, &to_top.importance).unwrap();
    let top = TokenSet::new(top_feats.clone(), Arc::new(mid_regions.merge(&to_top.assignment, 2).unwrap()), 3).unwrap();

    let up = upsample_tokens(&top_feats, &to_top).unwrap() + &mid_feats;
    let upsampled_gap = gap(&up, 0, 1);

    let mut store = ParamStore::new(5);
    let head = MtaHead::new(&mut store, "head", &[3, 3, 3], MtaConfig::new(4, 2)).unwrap();
    store.perturb(1, 0.3);
    let heat = mta_forward(&head, &store, &[base_tokens.clone(), mid.clone(), top.clone()], &[to_mid, to_top], &res).unwrap();
    let head_gap = gap(&heat.data, 0, 1);

    // the middle stage as a 2x2 feature map: one token per pixel
    let low = tokens_to_map(&mid, (2, 2)).unwrap();
    let grid = Arc::new(RegionMap::grid(4, 4, 2).unwrap());
    let grid_tokens = TokenSet::new(low.data.clone(), grid.clone(), 2).unwrap();
    let to_grid = MergeRecord::new(grid.cells().to_vec(), vec![0.0; 16], 4).unwrap();
    let grid_to_top = MergeRecord::new(vec![0, 0, 1, 1], vec![0.0; 4], 2).unwrap();
    let top_on_grid = TokenSet::new(top_feats, Arc::new(grid.merge(&grid_to_top.assignment, 2).unwrap()), 3).unwrap();
    let map_heat = mta_forward(&head, &store, &[base_tokens, grid_tokens, top_on_grid], &[to_grid, grid_to_top], &res).unwrap();
    let map_head_gap = gap(&map_heat.data, 0, 1);

    let base_cells = TokenSet::new(Mat::zeros((16, 3)), base, 1).unwrap();
    let coarse_gap = gap(&map_to_tokens(&low, &base_cells).unwrap(), 0, 1);
    DetailCase { upsampled_gap, head_gap, map_head_gap, coarse_gap }
}

// ----- toy training -----------------------------------------------------

pub struct ToyRun {
    pub merge: MergeKind,
    pub pck: f64,
    pub density: DensityReport,
    pub losses: Vec<f64>,
    pub smoothed_violations: usize,
    /// Largest `(s[t] - s[t-1]) / s[t-1]` of the smoothed curve.
    pub max_smoothed_rise: f64,
    pub elapsed: Duration,
    pub steps: usize,
}

pub const TOY_TRAIN_SAMPLES: usize = 500;
pub const TOY_TEST_SAMPLES: usize = 100;
pub const TOY_SEED: u64 = 0;

pub fn toy_data() -> (Vec<SyntheticSample>, Vec<SyntheticSample>) {
    (
        generate_dataset(TOY_SEED, TOY_TRAIN_SAMPLES, (64, 64)).unwrap(),
        generate_dataset(held_out_seed(TOY_SEED), TOY_TEST_SAMPLES, (64, 64)).unwrap(),
    )
}

pub fn toy_run(merge: MergeKind, data: &[SyntheticSample], test: &[SyntheticSample]) -> ToyRun {
    let cfg = ModelConfig { merge, ..ModelConfig::mini() };
    let mut store = ParamStore::new(TOY_SEED);
    let model = Model::new(&mut store, cfg).unwrap();
    let tc = TrainConfig::default();
    let report = train(&model, &mut store, data, &tc, Exec::default(), |_, _| {}).unwrap();
    let smooth = report.smoothed(25);
    let smoothed_violations = smooth.windows(2).filter(|w| w[1] > w[0]).count();
    let max_smoothed_rise = smooth.windows(2).map(|w| (w[1] - w[0]) / w[0]).fold(0.0, f64::max);
    ToyRun {
        merge,
        pck: evaluate_pck(&model, &store, test, 0.1).unwrap(),
        density: token_density_report(&model, &store, test).unwrap(),
        smoothed_violations,
        max_smoothed_rise,
        elapsed: report.elapsed,
        steps: report.losses.len(),
        losses: report.losses,
    }
}
