//! Percentage of correct keypoints.

use crate::error::{invalid, Result};
use crate::exec::{map_slice, Exec};
use crate::harness::dataset::SyntheticSample;
use crate::model::{Model, STEM_STRIDE};
use crate::params::ParamStore;
use crate::token_space::FeatureMap;

/// Keypoints decoded from heatmaps: the center (in pixels) of each channel's
/// argmax cell. Ties go to the first cell in row-major order.
pub fn decode_heatmaps(heatmaps: &FeatureMap) -> Vec<(f64, f64)> {
    let w = heatmaps.width;
    let s = STEM_STRIDE as f64;
    heatmaps
        .data
        .columns()
        .into_iter()
        .map(|col| {
            let mut best = 0;
            for (i, &v) in col.iter().enumerate() {
                if v > col[best] {
                    best = i;
                }
            }
            (((best % w) as f64 + 0.5) * s, ((best / w) as f64 + 0.5) * s)
        })
        .collect()
}

/// Number of correct keypoints: within `threshold_fraction * max(H, W)`
/// pixels of the ground truth.
pub fn correct_keypoints(predicted: &[(f64, f64)], truth: &[(f64, f64)], image_size: usize, threshold_fraction: f64) -> usize {
    let tol = threshold_fraction * image_size as f64;
    predicted
        .iter()
        .zip(truth)
        .filter(|(p, t)| ((p.0 - t.0).powi(2) + (p.1 - t.1).powi(2)).sqrt() <= tol)
        .count()
}

/// PCK of already-computed heatmaps against samples.
pub fn pck_from_heatmaps(heatmaps: &[FeatureMap], data: &[SyntheticSample], threshold_fraction: f64) -> Result<f64> {
    if heatmaps.len() != data.len() {
        return invalid("one heatmap set per sample is required");
    }
    let (mut hit, mut total) = (0, 0);
    for (hm, s) in heatmaps.iter().zip(data) {
        let size = s.image.height.max(s.image.width);
        hit += correct_keypoints(&decode_heatmaps(hm), &s.keypoints, size, threshold_fraction);
        total += s.keypoints.len();
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

pub fn evaluate_pck(model: &Model, store: &ParamStore, data: &[SyntheticSample], threshold_fraction: f64) -> Result<f64> {
    evaluate_pck_with(model, store, data, threshold_fraction, Exec::default())
}

pub fn evaluate_pck_with(
    model: &Model,
    store: &ParamStore,
    data: &[SyntheticSample],
    threshold_fraction: f64,
    exec: Exec,
) -> Result<f64> {
    let heatmaps: Vec<FeatureMap> =
        map_slice(exec, data, |s| model.heatmaps(store, &s.image)).into_iter().collect::<Result<_>>()?;
    pck_from_heatmaps(&heatmaps, data, threshold_fraction)
}
