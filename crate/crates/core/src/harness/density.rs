//! Where do the final-stage tokens go?
//!
//! Each base cell's token density is `1 / area` of the token covering it
//! (tokens per cell). Densities are averaged over the detail-part cells, the
//! body cells and the background cells of every sample.

use serde::Serialize;

use crate::error::{invalid, Result};
use crate::exec::{map_slice, Exec};
use crate::harness::dataset::SyntheticSample;
use crate::model::Model;
use crate::params::ParamStore;
use crate::token_space::RegionMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DensityReport {
    pub detail: f64,
    pub body: f64,
    pub background: f64,
    /// `detail / background`.
    pub ratio: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct Sums {
    detail: (f64, usize),
    body: (f64, usize),
    background: (f64, usize),
}

fn accumulate(regions: &RegionMap, sample: &SyntheticSample) -> Result<Sums> {
    let cells = regions.cells();
    if cells.len() != sample.detail_mask.len() {
        return invalid("token regions and sample masks cover different grids");
    }
    let areas = regions.areas();
    let mut s = Sums::default();
    for (c, &t) in cells.iter().enumerate() {
        let d = 1.0 / areas[t] as f64;
        let slot = if sample.detail_mask[c] {
            &mut s.detail
        } else if sample.body_mask[c] {
            &mut s.body
        } else {
            &mut s.background
        };
        slot.0 += d;
        slot.1 += 1;
    }
    Ok(s)
}

/// Density report from already-computed final-stage regions.
pub fn density_from_regions(regions: &[&RegionMap], data: &[SyntheticSample]) -> Result<DensityReport> {
    if regions.len() != data.len() {
        return invalid("one region map per sample is required");
    }
    let mut total = Sums::default();
    for (r, s) in regions.iter().zip(data) {
        let x = accumulate(r, s)?;
        for (a, b) in [(&mut total.detail, x.detail), (&mut total.body, x.body), (&mut total.background, x.background)] {
            a.0 += b.0;
            a.1 += b.1;
        }
    }
    let mean = |(s, n): (f64, usize)| if n == 0 { 0.0 } else { s / n as f64 };
    let (detail, body, background) = (mean(total.detail), mean(total.body), mean(total.background));
    Ok(DensityReport { detail, body, background, ratio: detail / background, samples: data.len() })
}

pub fn token_density_report(model: &Model, store: &ParamStore, data: &[SyntheticSample]) -> Result<DensityReport> {
    token_density_report_with(model, store, data, Exec::default())
}

pub fn token_density_report_with(model: &Model, store: &ParamStore, data: &[SyntheticSample], exec: Exec) -> Result<DensityReport> {
    let finals = map_slice(exec, data, |s| {
        let out = model.forward(store, &s.image)?;
        Ok(out.stages.last().expect("at least one stage").regions.clone())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&RegionMap> = finals.iter().map(|r| r.as_ref()).collect();
    density_from_regions(&refs, data)
}
