//! Algebraic invariants and randomized properties.

#[path = "support/oracle.rs"]
mod oracle;
#[path = "support/checks.rs"]
mod checks;

use std::sync::Arc;

use ndarray::Array2;
use proptest::prelude::*;

use tcformer::ctm::merge_features;
use tcformer::dpc_knn::cluster_with;
use tcformer::exec::Exec;
use tcformer::model::{ModelConfig, Preset};
use tcformer::mta_head::upsample_tokens;
use tcformer::token_space::{MergeRecord, RegionMap, TokenSet};

#[test]
fn importance_shift_leaves_merge_unchanged() {
    let e = checks::merge_shift_error(1);
    assert!(e < 1e-6, "{e}");
}

#[test]
fn importance_shift_leaves_biased_attention_unchanged() {
    let e = checks::attention_shift_error(2);
    assert!(e < 1e-6, "{e}");
}

#[test]
fn importance_shift_leaves_the_model_unchanged() {
    let e = checks::model_shift_error(3);
    assert!(e < 1e-6, "{e}");
}

#[test]
fn softmax_rows_sum_to_one() {
    let e = checks::softmax_row_error(4);
    assert!(e < 1e-6, "{e}");
}

#[test]
fn merged_features_lie_in_cluster_hulls() {
    let e = checks::convex_hull_violation(5);
    assert!(e < 1e-12, "{e}");
}

#[test]
fn base_resolution_round_trip_is_identity() {
    let e = checks::round_trip_error(6);
    assert!(e < 1e-12, "{e}");
}

#[test]
fn quarter_rule_token_counts() {
    assert_eq!(ModelConfig::preset(Preset::Base).token_schedule(), vec![3136, 784, 196, 49]);
    assert_eq!(ModelConfig::preset(Preset::Light).token_schedule(), vec![3136, 784, 196, 49]);
}

fn surjective(n: usize, m: usize, seed: u64) -> Vec<usize> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    checks::random_assignment(&mut rng, n, m)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Merging keeps the region map a partition and each merged region is
    /// exactly the union of its members' regions.
    #[test]
    fn merge_is_union_of_regions(h in 1usize..7, w in 1usize..7, frac in 0.05f64..1.0, seed in any::<u64>()) {
        let n = h * w;
        let m = ((n as f64 * frac).ceil() as usize).clamp(1, n);
        let a = surjective(n, m, seed);
        let fine = RegionMap::identity(h, w);
        let merged = fine.merge(&a, m).unwrap();
        prop_assert_eq!(merged.num_tokens(), m);
        prop_assert_eq!(merged.areas().iter().sum::<usize>(), n);
        for (c, &t) in merged.cells().iter().enumerate() {
            prop_assert_eq!(t, a[fine.cells()[c]]);
        }
    }

    /// Uniform importance gives the plain cluster mean; merged features are
    /// finite even for extreme scores.
    #[test]
    fn merge_weights_are_normalized(n in 2usize..30, seed in any::<u64>(), big in -600.0f64..600.0) {
        let m = 1 + (seed as usize % n);
        let a = surjective(n, m, seed);
        let regions = Arc::new(RegionMap::new(1, n, (0..n).collect(), n).unwrap());
        let x = Array2::from_shape_fn((n, 3), |(i, j)| ((i * 7 + j * 3) as f64).sin());
        let tokens = TokenSet::new(x.clone(), regions, 1).unwrap();
        let uniform = merge_features(&tokens, &a, &vec![big; n]).unwrap();
        for k in 0..m {
            let members: Vec<usize> = (0..n).filter(|&j| a[j] == k).collect();
            for ch in 0..3 {
                let mean = members.iter().map(|&j| x[[j, ch]]).sum::<f64>() / members.len() as f64;
                prop_assert!((uniform[[k, ch]] - mean).abs() < 1e-12);
            }
        }
        let p: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { big } else { -big }).collect();
        prop_assert!(merge_features(&tokens, &a, &p).unwrap().iter().all(|v| v.is_finite()));
    }

    /// Every token receives exactly its cluster's merged row when upsampled.
    #[test]
    fn upsampling_is_a_gather(n in 1usize..40, seed in any::<u64>()) {
        let m = 1 + (seed as usize % n);
        let a = surjective(n, m, seed);
        let merged = Array2::from_shape_fn((m, 2), |(i, j)| (i * 2 + j) as f64);
        let up = upsample_tokens(&merged, &MergeRecord::new(a.clone(), vec![0.0; n], m).unwrap()).unwrap();
        for i in 0..n {
            prop_assert_eq!(up.row(i), merged.row(a[i]));
        }
    }

    /// Clustering is surjective onto `0..M`, centers own their clusters, and
    /// sequential and default execution agree.
    #[test]
    fn clustering_postconditions(n in 2usize..48, d in 1usize..5, k in 1usize..8, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let m = rng.random_range(1..=n);
        let x = Array2::from_shape_fn((n, d), |_| rng.random_range(-2.0..2.0));
        let r = cluster_with(x.view(), m, k, Exec::Sequential).unwrap();
        prop_assert_eq!(&r, &cluster_with(x.view(), m, k, Exec::default()).unwrap());
        let mut hit = vec![false; m];
        for &c in &r.assignment {
            hit[c] = true;
        }
        prop_assert!(hit.iter().all(|&h| h));
        for (rank, &c) in r.centers.iter().enumerate() {
            prop_assert_eq!(r.assignment[c], rank);
        }
        prop_assert!(r.density.iter().all(|&v| v > 0.0 && v <= 1.0));
    }
}
