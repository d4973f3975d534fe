//! Multi-stage token aggregation head and the deconvolution baseline.
//!
//! The aggregation head walks the stages from coarsest to finest. At each
//! level the current tokens are copied back to the tokens they were merged
//! from (a pure gather through the stored [`MergeRecord`]), a pointwise
//! projection of that finer stage's own features is added, and one
//! transformer block refines the result. Finest-stage tokens are one per
//! base-grid cell, so the final tokens are reshaped directly into heatmaps
//! without any interpolation.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::nn::{ConvTranspose2d, LayerNorm, Linear};
use crate::params::ParamStore;
use crate::token_space::{FeatureMap, MergeRecord, TapeTokens, TokenSet};
use crate::transformer_block::{BlockConfig, TransformerBlock};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MtaConfig {
    pub agg_channels: usize,
    pub out_channels: usize,
    /// Block applied at every aggregation level; its width must equal
    /// `agg_channels`.
    pub per_level_block: BlockConfig,
}

impl MtaConfig {
    /// Aggregation at `agg_channels` with one head and no key reduction.
    pub fn new(agg_channels: usize, out_channels: usize) -> Self {
        Self { agg_channels, out_channels, per_level_block: BlockConfig::new(1, 1, 2, agg_channels) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.agg_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidConfig("aggregation and output widths must be positive".into()));
        }
        if self.per_level_block.channels != self.agg_channels {
            return Err(Error::InvalidConfig(format!(
                "aggregation block width {} differs from agg_channels {}",
                self.per_level_block.channels, self.agg_channels
            )));
        }
        self.per_level_block.validate()
    }
}

/// Copies every merged token's features back to the tokens it absorbed.
pub fn upsample_tokens(merged: &Mat, record: &MergeRecord) -> Result<Mat> {
    if merged.nrows() != record.num_merged {
        return invalid(format!("{} merged rows for a record of {} clusters", merged.nrows(), record.num_merged));
    }
    let mut tape = Tape::new();
    let x = tape.constant(merged.clone());
    let y = upsample_on_tape(&mut tape, x, record)?;
    Ok(tape.value(y).clone())
}

pub fn upsample_on_tape(tape: &mut Tape, merged: Var, record: &MergeRecord) -> Result<Var> {
    if tape.shape(merged).0 != record.num_merged {
        return invalid(format!("{} merged rows for a record of {} clusters", tape.shape(merged).0, record.num_merged));
    }
    if let Some(&bad) = record.assignment.iter().find(|&&a| a >= record.num_merged) {
        return Err(Error::Internal(format!("assignment index {bad} outside {} merged tokens", record.num_merged)));
    }
    Ok(tape.gather(merged, Arc::new(record.assignment.clone())))
}

#[derive(Debug, Clone)]
pub struct MtaHead {
    pub cfg: MtaConfig,
    pub stage_channels: Vec<usize>,
    /// Projection of the coarsest stage.
    pub top: Linear,
    /// Lateral projections of stages `0..L-1`.
    pub laterals: Vec<Linear>,
    /// Refinement blocks of stages `0..L-1`.
    pub blocks: Vec<TransformerBlock>,
    pub out: Linear,
}

impl MtaHead {
    pub fn new(store: &mut ParamStore, name: &str, stage_channels: &[usize], cfg: MtaConfig) -> Result<Self> {
        cfg.validate()?;
        let Some((&last, finer)) = stage_channels.split_last() else {
            return Err(Error::InvalidConfig("aggregation head needs at least one stage".into()));
        };
        let a = cfg.agg_channels;
        let laterals = finer
            .iter()
            .enumerate()
            .map(|(s, &c)| Linear::new(store, &format!("{name}.lateral{s}"), c, a, true))
            .collect();
        let blocks = (0..finer.len())
            .map(|s| TransformerBlock::new(store, &format!("{name}.block{s}"), cfg.per_level_block))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg,
            stage_channels: stage_channels.to_vec(),
            top: Linear::new(store, &format!("{name}.top"), last, a, true),
            laterals,
            blocks,
            out: Linear::new(store, &format!("{name}.out"), a, cfg.out_channels, true),
        })
    }

    /// Returns base-grid heatmaps as a `(H*W) x out_channels` node.
    ///
    /// `records[s]` maps stage-`s` tokens onto stage-`s+1` tokens and
    /// `resolutions[s]` is the nominal grid of stage `s`. The finest stage
    /// must hold exactly one token per base cell.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        stages: &[TapeTokens],
        records: &[MergeRecord],
        resolutions: &[(usize, usize)],
    ) -> Result<Var> {
        let levels = self.stage_channels.len();
        if stages.len() != levels || records.len() + 1 != levels || resolutions.len() != levels {
            return invalid(format!(
                "{} stages, {} records and {} resolutions for a {levels}-stage head",
                stages.len(),
                records.len(),
                resolutions.len()
            ));
        }
        for (s, (t, &c)) in stages.iter().zip(&self.stage_channels).enumerate() {
            if tape.shape(t.features) != (t.len(), c) {
                return invalid(format!("stage {s} features have shape {:?}, expected ({}, {c})", tape.shape(t.features), t.len()));
            }
        }
        for (s, r) in records.iter().enumerate() {
            if r.assignment.len() != stages[s].len() || r.num_merged != stages[s + 1].len() {
                return invalid(format!("record {s} does not link stage {s} to stage {}", s + 1));
            }
        }
        let finest = &stages[0].regions;
        if finest.num_tokens() != finest.height() * finest.width() || !finest.all_square() {
            return invalid("finest stage must hold one token per base cell");
        }

        let mut x = self.top.forward(tape, store, stages[levels - 1].features);
        for s in (0..levels - 1).rev() {
            let up = upsample_on_tape(tape, x, &records[s])?;
            let lateral = self.laterals[s].forward(tape, store, stages[s].features);
            let sum = tape.add(up, lateral);
            let tokens = TapeTokens { features: sum, regions: stages[s].regions.clone() };
            x = self.blocks[s].forward(tape, store, &tokens, resolutions[s])?;
        }
        let heat = self.out.forward(tape, store, x);
        let tokens = TapeTokens { features: heat, regions: finest.clone() };
        tokens.to_map(tape, finest.base_resolution())
    }

    pub fn macs(&self, token_counts: &[usize], resolutions: &[(usize, usize)]) -> u64 {
        let levels = self.stage_channels.len();
        let mut total = self.top.macs(token_counts[levels - 1]);
        for s in 0..levels - 1 {
            let n = token_counts[s];
            total += self.laterals[s].macs(n) + self.blocks[s].macs(n, resolutions[s], n, resolutions[s]);
        }
        total + self.out.macs(token_counts[0])
    }
}

/// Value-level aggregation over snapshot token sets.
pub fn mta_forward(
    head: &MtaHead,
    store: &ParamStore,
    stages: &[TokenSet],
    records: &[MergeRecord],
    resolutions: &[(usize, usize)],
) -> Result<FeatureMap> {
    let mut tape = Tape::new();
    let tokens: Vec<TapeTokens> = stages
        .iter()
        .map(|t| TapeTokens { features: tape.constant(t.features.clone()), regions: t.regions.clone() })
        .collect();
    let y = head.forward(&mut tape, store, &tokens, records, resolutions)?;
    let (h, w) = stages[0].regions.base_resolution();
    FeatureMap::new(tape.value(y).clone(), h, w)
}

/// Baseline head: rasterize the coarsest tokens and upsample with stride-2
/// transposed convolutions (each followed by layer norm and GELU), then a
/// pointwise heatmap projection.
#[derive(Debug, Clone)]
pub struct DeconvHead {
    pub cfg: MtaConfig,
    pub layers: Vec<(ConvTranspose2d, LayerNorm)>,
    pub out: Linear,
}

impl DeconvHead {
    /// `upsamplings` stride-2 layers take the coarsest grid to the base grid.
    pub fn new(store: &mut ParamStore, name: &str, in_channels: usize, upsamplings: usize, cfg: MtaConfig) -> Result<Self> {
        cfg.validate()?;
        let a = cfg.agg_channels;
        let layers = (0..upsamplings)
            .map(|i| {
                let cin = if i == 0 { in_channels } else { a };
                (
                    ConvTranspose2d::new(store, &format!("{name}.deconv{i}"), cin, a, 4, 2, 1, false),
                    LayerNorm::new(store, &format!("{name}.norm{i}"), a),
                )
            })
            .collect();
        let out_in = if upsamplings == 0 { in_channels } else { a };
        Ok(Self { cfg, layers, out: Linear::new(store, &format!("{name}.out"), out_in, cfg.out_channels, true) })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, last: &TapeTokens, res: (usize, usize)) -> Result<Var> {
        let mut x = last.to_map(tape, res)?;
        let mut hw = res;
        for (deconv, norm) in &self.layers {
            let (y, out_hw) = deconv.forward(tape, store, x, hw)?;
            let y = norm.forward(tape, store, y);
            x = tape.gelu(y);
            hw = out_hw;
        }
        if hw != last.regions.base_resolution() {
            return invalid(format!("deconvolution head ends at {hw:?}, base grid is {:?}", last.regions.base_resolution()));
        }
        Ok(self.out.forward(tape, store, x))
    }

    pub fn macs(&self, res: (usize, usize)) -> u64 {
        let mut hw = res;
        let mut total = 0;
        for (deconv, _) in &self.layers {
            total += deconv.macs(hw);
            hw = deconv.out_hw(hw);
        }
        total + self.out.macs(hw.0 * hw.1)
    }
}

/// Value-level baseline head on the coarsest snapshot.
pub fn deconv_head_forward(head: &DeconvHead, store: &ParamStore, last: &TokenSet, res: (usize, usize)) -> Result<FeatureMap> {
    let mut tape = Tape::new();
    let tokens = TapeTokens { features: tape.constant(last.features.clone()), regions: last.regions.clone() };
    let y = head.forward(&mut tape, store, &tokens, res)?;
    let (h, w) = last.regions.base_resolution();
    FeatureMap::new(tape.value(y).clone(), h, w)
}
