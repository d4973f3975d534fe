//! Synthetic keypoint images with small high-frequency detail parts.
//!
//! Every image shows one to three anti-aliased bright disks (the "body") on a
//! textured noise background. Each disk carries a small cluster of tiny
//! alternating black/white dots on its rim (the "detail part"). The first
//! disk is the largest and the only warm-colored one; its center is keypoint
//! 0 and the center of its dot cluster is keypoint 1. The other disks are
//! cool-colored distractors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Mat;
use crate::error::{invalid, Result};
use crate::exec::{map_indices, Exec};
use crate::model::STEM_STRIDE;
use crate::token_space::FeatureMap;

pub const NUM_KEYPOINTS: usize = 2;
/// Target Gaussian width in base-grid cells.
pub const HEATMAP_SIGMA: f64 = 2.0;

const DOT_RADIUS: f64 = 1.1;
const DOT_SPACING: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    /// `H x W x 3`, values in `[0, 1]`.
    pub image: FeatureMap,
    /// `(x, y)` in pixels, one per heatmap channel.
    pub keypoints: Vec<(f64, f64)>,
    /// Base-resolution Gaussian targets, one channel per keypoint.
    pub heatmaps: FeatureMap,
    /// Base cells touched by any dot cluster.
    pub detail_mask: Vec<bool>,
    /// Base cells touched by any disk and no dot cluster.
    pub body_mask: Vec<bool>,
}

impl SyntheticSample {
    pub fn base_resolution(&self) -> (usize, usize) {
        self.heatmaps.resolution()
    }
}

struct Disk {
    cx: f64,
    cy: f64,
    r: f64,
    color: [f64; 3],
    /// Dot-cluster center.
    dx: f64,
    dy: f64,
}

/// Pixel `(x, y)` in the grid's cell containing it.
pub fn keypoint_cell(kp: (f64, f64), resolution: (usize, usize)) -> (usize, usize) {
    let (h, w) = resolution;
    let cx = ((kp.0 / STEM_STRIDE as f64).floor().max(0.0) as usize).min(w - 1);
    let cy = ((kp.1 / STEM_STRIDE as f64).floor().max(0.0) as usize).min(h - 1);
    (cy, cx)
}

/// Gaussian heatmaps peaking at exactly 1 on each keypoint's base cell.
pub fn gaussian_heatmaps(keypoints: &[(f64, f64)], base: (usize, usize)) -> Result<FeatureMap> {
    let (h, w) = base;
    let centers: Vec<(usize, usize)> = keypoints.iter().map(|&k| keypoint_cell(k, base)).collect();
    let data = Mat::from_shape_fn((h * w, keypoints.len()), |(p, k)| {
        let (i, j) = ((p / w) as f64, (p % w) as f64);
        let (ci, cj) = (centers[k].0 as f64, centers[k].1 as f64);
        (-((i - ci).powi(2) + (j - cj).powi(2)) / (2.0 * HEATMAP_SIGMA * HEATMAP_SIGMA)).exp()
    });
    FeatureMap::new(data, h, w)
}

fn coverage(d: f64, r: f64) -> f64 {
    (r + 0.5 - d).clamp(0.0, 1.0)
}

pub fn generate_sample(seed: u64, index: usize, resolution: (usize, usize)) -> Result<SyntheticSample> {
    let (h, w) = resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let side = h.min(w) as f64;
    let n_disks = rng.random_range(1..=3usize);
    let mut disks: Vec<Disk> = Vec::with_capacity(n_disks);
    for d in 0..n_disks {
        let r = if d == 0 { side * rng.random_range(0.13..0.19) } else { side * rng.random_range(0.06..0.1) };
        let reach = r + DOT_SPACING * 2.0 + 2.0;
        let cx = rng.random_range(reach..w as f64 - reach);
        let cy = rng.random_range(reach..h as f64 - reach);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let out = r + DOT_SPACING;
        let color = if d == 0 {
            [rng.random_range(0.85..1.0), rng.random_range(0.55..0.7), rng.random_range(0.1..0.25)]
        } else {
            [rng.random_range(0.2..0.35), rng.random_range(0.6..0.8), rng.random_range(0.85..1.0)]
        };
        disks.push(Disk { cx, cy, r, color, dx: cx + out * angle.cos(), dy: cy + out * angle.sin() });
    }

    // textured background: per-pixel noise on a low-frequency ripple
    let (fx, fy, phase) = (rng.random_range(0.1..0.3), rng.random_range(0.1..0.3), rng.random_range(0.0..6.3));
    let mut data = Mat::zeros((h * w, 3));
    for y in 0..h {
        for x in 0..w {
            let ripple = 0.08 * ((x as f64 * fx + phase).sin() * (y as f64 * fy).cos());
            for c in 0..3 {
                data[[y * w + x, c]] = 0.2 + ripple + rng.random_range(-0.06..0.06);
            }
        }
    }
    let base = (h / STEM_STRIDE, w / STEM_STRIDE);
    let mut detail_mask = vec![false; base.0 * base.1];
    let mut body_mask = vec![false; base.0 * base.1];
    let cell = |x: usize, y: usize| (y / STEM_STRIDE) * base.1 + x / STEM_STRIDE;
    for disk in &disks {
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let a = coverage(((px - disk.cx).powi(2) + (py - disk.cy).powi(2)).sqrt(), disk.r);
                if a > 0.0 {
                    body_mask[cell(x, y)] = true;
                    for c in 0..3 {
                        let v = &mut data[[y * w + x, c]];
                        *v = (1.0 - a) * *v + a * disk.color[c];
                    }
                }
            }
        }
    }
    for disk in &disks {
        // 3x3 checker of dots: white on even parity, black on odd
        for (k, (ox, oy)) in (-1..=1).flat_map(|a| (-1..=1).map(move |b| (a, b))).enumerate() {
            let (dx, dy) = (disk.dx + ox as f64 * DOT_SPACING * 0.7, disk.dy + oy as f64 * DOT_SPACING * 0.7);
            let value = if k % 2 == 0 { 1.0 } else { 0.0 };
            let (x0, x1) = ((dx - 2.0).floor().max(0.0) as usize, ((dx + 2.0).ceil() as usize).min(w));
            let (y0, y1) = ((dy - 2.0).floor().max(0.0) as usize, ((dy + 2.0).ceil() as usize).min(h));
            for y in y0..y1 {
                for x in x0..x1 {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let a = coverage(((px - dx).powi(2) + (py - dy).powi(2)).sqrt(), DOT_RADIUS);
                    if a > 0.0 {
                        detail_mask[cell(x, y)] = true;
                        for c in 0..3 {
                            let v = &mut data[[y * w + x, c]];
                            *v = (1.0 - a) * *v + a * value;
                        }
                    }
                }
            }
        }
    }
    for (b, d) in body_mask.iter_mut().zip(&detail_mask) {
        *b &= !d;
    }
    data.mapv_inplace(|v| v.clamp(0.0, 1.0));
    let keypoints = vec![(disks[0].cx, disks[0].cy), (disks[0].dx, disks[0].dy)];
    let heatmaps = gaussian_heatmaps(&keypoints, base)?;
    Ok(SyntheticSample { image: FeatureMap::new(data, h, w)?, keypoints, heatmaps, detail_mask, body_mask })
}

/// Deterministic dataset: sample `i` depends only on `(seed, i)`.
pub fn generate_dataset(seed: u64, count: usize, resolution: (usize, usize)) -> Result<Vec<SyntheticSample>> {
    generate_dataset_with(seed, count, resolution, Exec::default())
}

pub fn generate_dataset_with(seed: u64, count: usize, resolution: (usize, usize), exec: Exec) -> Result<Vec<SyntheticSample>> {
    let (h, w) = resolution;
    if h < 32 || w < 32 || h % STEM_STRIDE != 0 || w % STEM_STRIDE != 0 {
        return invalid(format!("dataset resolution {h}x{w} must be at least 32 and a multiple of {STEM_STRIDE}"));
    }
    map_indices(exec, count, |i| generate_sample(seed, i, resolution)).into_iter().collect()
}

/// Seed of the held-out split derived from a training seed.
pub fn held_out_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}
