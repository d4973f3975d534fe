//! DPC-KNN against the independent reference in `support/oracle.rs`.

#[path = "support/oracle.rs"]
mod oracle;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tcformer::dpc_knn::{assign_clusters, cluster, cluster_with, knn_sq_distances, local_density, select_centers};
use tcformer::exec::Exec;

fn to_array(points: &[Vec<f64>]) -> Array2<f64> {
    Array2::from_shape_fn((points.len(), points[0].len()), |(i, j)| points[i][j])
}

/// A random instance; every third one is drawn from a tiny integer lattice
/// so that equal distances, densities and scores are common.
fn instance(rng: &mut ChaCha8Rng, index: usize) -> (Vec<Vec<f64>>, usize, usize) {
    let n = rng.random_range(2..=64);
    let d = rng.random_range(1..=8);
    let m = rng.random_range(1..=(n / 2).max(1));
    let k = rng.random_range(1..=8);
    let points = (0..n)
        .map(|_| {
            (0..d)
                .map(|_| if index.is_multiple_of(3) { rng.random_range(0..3) as f64 } else { rng.random_range(-1.0..1.0) })
                .collect()
        })
        .collect();
    (points, m, k)
}

#[test]
fn two_hundred_random_instances_match_bit_for_bit() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for t in 0..200 {
        let (points, m, k) = instance(&mut rng, t);
        let x = to_array(&points);
        let got = cluster(x.view(), m, k).unwrap();
        let want = oracle::dpc(&points, m, k);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&got.density), bits(&want.density), "density, instance {t}");
        assert_eq!(bits(&got.indicator), bits(&want.indicator), "indicator, instance {t}");
        assert_eq!(bits(&got.score), bits(&want.score), "score, instance {t}");
        assert_eq!(got.centers, want.centers, "centers, instance {t}");
        assert_eq!(got.assignment, want.assignment, "assignment, instance {t}");
    }
}

#[test]
fn knn_matches_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let points: Vec<Vec<f64>> = (0..32).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let x = to_array(&points);
    let table = oracle::pairwise(&points);
    let knn = knn_sq_distances(x.view(), 5).unwrap();
    for i in 0..32 {
        let (d, idx) = oracle::knn(&table, i, 5);
        assert_eq!(knn.indices.row(i).to_vec(), idx);
        assert_eq!(knn.sq_distances.row(i).to_vec(), d);
    }
}

#[test]
fn density_and_centers_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let points: Vec<Vec<f64>> = (0..32).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let x = to_array(&points);
    let want = oracle::dpc(&points, 8, 5);
    assert_eq!(local_density(x.view(), 5).unwrap(), want.density);
    assert_eq!(select_centers(&want.density, &want.indicator, 8).unwrap(), want.centers);
}

#[test]
fn nearest_center_assignment_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let points: Vec<Vec<f64>> = (0..64).map(|_| (0..2).map(|_| rng.random_range(0..4) as f64).collect()).collect();
    let x = to_array(&points);
    let want = oracle::dpc(&points, 16, 4);
    assert_eq!(assign_clusters(x.view(), &want.centers).unwrap(), want.assignment);
}

#[test]
fn two_blobs_are_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut points = Vec::new();
    for center in [(-5.0, -5.0), (5.0, 5.0)] {
        for _ in 0..8 {
            points.push(vec![center.0 + rng.random_range(-0.5..0.5), center.1 + rng.random_range(-0.5..0.5)]);
        }
    }
    let r = cluster(to_array(&points).view(), 2, 3).unwrap();
    assert!(r.assignment[..8].iter().all(|&a| a == r.assignment[0]));
    assert!(r.assignment[8..].iter().all(|&a| a == r.assignment[8]));
    assert_ne!(r.assignment[0], r.assignment[8]);
}

#[test]
fn underflowing_densities_use_the_log_domain_like_the_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let points: Vec<Vec<f64>> = (0..40).map(|_| (0..4).map(|_| rng.random_range(-40.0..40.0)).collect()).collect();
    let x = to_array(&points);
    let got = cluster(x.view(), 6, 3).unwrap();
    assert!(got.density.iter().any(|&r| r < f64::MIN_POSITIVE), "instance should underflow");
    let want = oracle::dpc(&points, 6, 3);
    assert_eq!(got.centers, want.centers);
    assert_eq!(got.assignment, want.assignment);
    assert_eq!(got.indicator, want.indicator);
}

#[test]
fn sequential_and_default_execution_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for t in 0..20 {
        let (points, m, k) = instance(&mut rng, t);
        let x = to_array(&points);
        assert_eq!(cluster_with(x.view(), m, k, Exec::Sequential).unwrap(), cluster_with(x.view(), m, k, Exec::default()).unwrap());
    }
}

#[test]
fn all_points_as_centers() {
    let points: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64]).collect();
    let r = cluster(to_array(&points).view(), 6, 2).unwrap();
    let mut c = r.centers.clone();
    c.sort();
    assert_eq!(c, (0..6).collect::<Vec<_>>());
    for i in 0..6 {
        assert_eq!(r.centers[r.assignment[i]], i);
    }
}
