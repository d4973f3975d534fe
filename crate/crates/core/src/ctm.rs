//! Clustering-based token merge.
//!
//! Tokens are first lifted to the next stage's width by a token convolution
//! (3x3 stride-2 convolution on the rasterized tokens, plus a pointwise skip,
//! then layer norm). A linear head predicts a per-token importance score `p`.
//! The lifted features are clustered with DPC-KNN (or, in the top-k variant,
//! centers are the `M` highest-importance tokens), each cluster is merged by
//! the importance-weighted mean
//!
//! `y_i = sum_{j in C_i} exp(p_j) x_j / sum_{j in C_i} exp(p_j)`
//!
//! and the merged tokens are refined by one transformer block whose queries
//! are the merged tokens and whose keys/values are the pre-merge tokens, with
//! `p` added to the attention logits.
//!
//! Cluster membership is a hard decision: gradients flow through the features
//! and the importance scores, never through the assignment.

use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::dpc_knn;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, LayerNorm, Linear};
use crate::params::ParamStore;
use crate::token_space::{MergeRecord, TapeTokens, TokenSet};
use crate::transformer_block::{BlockConfig, TransformerBlock};

pub const DEFAULT_CLUSTER_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CtmConfig {
    pub cluster_fraction: f64,
    pub k: usize,
    /// Settings of the refinement block (those of the next stage).
    pub inner_block: BlockConfig,
    /// Pick centers by importance score instead of density peaks.
    pub use_topk_centers: bool,
}

impl CtmConfig {
    pub fn new(inner_block: BlockConfig) -> Self {
        Self { cluster_fraction: DEFAULT_CLUSTER_FRACTION, k: dpc_knn::DEFAULT_K, inner_block, use_topk_centers: false }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cluster_fraction > 0.0 && self.cluster_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!("cluster fraction {} outside (0, 1]", self.cluster_fraction)));
        }
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be positive".into()));
        }
        self.inner_block.validate()
    }

    /// `ceil(n * fraction)`.
    pub fn merged_count(&self, n: usize) -> usize {
        merged_count(n, self.cluster_fraction)
    }
}

pub fn merged_count(n: usize, fraction: f64) -> usize {
    // guard against 0.25 * 3136 landing a hair above an integer
    let m = n as f64 * fraction;
    let r = m.round();
    if (m - r).abs() < 1e-9 { r as usize } else { m.ceil() as usize }
}

/// Cluster decisions made during a forward pass, optionally replayed.
///
/// Finite-difference checks evaluate the network at perturbed parameters;
/// replaying keeps the piecewise-constant assignment fixed between those
/// evaluations.
#[derive(Debug, Clone, Default)]
pub struct AssignmentLog {
    entries: Vec<Vec<usize>>,
    replay: bool,
    cursor: usize,
}

impl AssignmentLog {
    pub fn recording() -> Self {
        Self::default()
    }

    /// Switches to replay mode, rewinding to the first recorded decision.
    pub fn freeze(&mut self) {
        self.replay = true;
        self.cursor = 0;
    }

    pub fn rewind(&mut self) {
        self.cursor = 0;
    }

    pub fn entries(&self) -> &[Vec<usize>] {
        &self.entries
    }

    fn decide(&mut self, compute: impl FnOnce() -> Result<Vec<usize>>) -> Result<Vec<usize>> {
        if self.replay {
            let a = self
                .entries
                .get(self.cursor)
                .cloned()
                .ok_or_else(|| Error::Internal("assignment replay ran past the recorded decisions".into()))?;
            self.cursor += 1;
            Ok(a)
        } else {
            let a = compute()?;
            self.entries.push(a.clone());
            Ok(a)
        }
    }
}

/// Result of one merge.
#[derive(Debug, Clone)]
pub struct CtmOutput {
    pub tokens: TapeTokens,
    pub record: MergeRecord,
    /// Lifted pre-merge features (`N x C_out`).
    pub lifted: Var,
    /// Importance column (`N x 1`).
    pub importance: Var,
    /// Merged features before refinement (`M x C_out`).
    pub merged: Var,
    /// Wall time spent in clustering and feature merging.
    pub cluster_merge_time: Duration,
}

#[derive(Debug, Clone)]
pub struct Ctm {
    pub cfg: CtmConfig,
    pub in_channels: usize,
    pub conv: Conv2d,
    pub skip: Linear,
    pub norm: LayerNorm,
    pub score: Linear,
    pub block: TransformerBlock,
}

impl Ctm {
    pub fn new(store: &mut ParamStore, name: &str, in_channels: usize, cfg: CtmConfig) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.inner_block.channels;
        Ok(Self {
            cfg,
            in_channels,
            conv: Conv2d::new(store, &format!("{name}.conv"), in_channels, out, 3, 2, 1, true),
            skip: Linear::new(store, &format!("{name}.skip"), in_channels, out, false),
            norm: LayerNorm::new(store, &format!("{name}.norm"), out),
            score: Linear::new(store, &format!("{name}.score"), out, 1, true),
            block: TransformerBlock::new(store, &format!("{name}.block"), cfg.inner_block)?,
        })
    }

    /// Token convolution: stride-2 conv on the `res` grid read back onto the
    /// same tokens, plus a pointwise skip, then layer norm.
    pub fn lift(&self, tape: &mut Tape, store: &ParamStore, x: &TapeTokens, res: (usize, usize)) -> Result<Var> {
        let map = x.to_map(tape, res)?;
        let (conv, out_res) = self.conv.forward(tape, store, map, res)?;
        let back = x.from_map(tape, conv, out_res)?;
        let skip = self.skip.forward(tape, store, x.features);
        let sum = tape.add(back, skip);
        Ok(self.norm.forward(tape, store, sum))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &TapeTokens,
        res: (usize, usize),
        log: &mut AssignmentLog,
    ) -> Result<CtmOutput> {
        let n = x.len();
        if n < 2 {
            return Err(Error::InvalidInput(format!("merging needs at least 2 tokens, got {n}")));
        }
        let m = self.cfg.merged_count(n);
        if m == 0 || m > n {
            return Err(Error::InvalidConfig(format!("{m} clusters for {n} tokens")));
        }
        let out_res = (res.0 / 2, res.1 / 2);
        let lifted = self.lift(tape, store, x, res)?;
        let importance = self.score.forward(tape, store, lifted);

        let started = Instant::now();
        let features = tape.value(lifted).clone();
        let p: Vec<f64> = tape.value(importance).column(0).to_vec();
        let (k, topk) = (self.cfg.k, self.cfg.use_topk_centers);
        let assignment = log.decide(|| {
            let centers = if topk {
                dpc_knn::select_top(&p, m)?
            } else {
                dpc_knn::cluster(features.view(), m, k)?.centers
            };
            dpc_knn::assign_clusters(features.view(), &centers)
        })?;
        let record = MergeRecord::new(assignment, p, m)?;
        let assignment = Arc::new(record.assignment.clone());
        let merged = merge_features_on_tape(tape, lifted, importance, &assignment, m)?;
        let regions = Arc::new(x.regions.merge(&record.assignment, m)?);
        let cluster_merge_time = started.elapsed();

        let queries = TapeTokens { features: merged, regions };
        let kv = TapeTokens { features: lifted, regions: x.regions.clone() };
        let refined = self.block.forward_cross(tape, store, &queries, out_res, Some((&kv, res)), Some(importance))?;
        Ok(CtmOutput {
            tokens: TapeTokens { features: refined, regions: queries.regions },
            record,
            lifted,
            importance,
            merged,
            cluster_merge_time,
        })
    }
}

/// Importance-weighted cluster means, differentiable in `features` and
/// `importance` (`N x 1`). The per-cluster max is subtracted before
/// exponentiating; the result does not depend on it.
pub fn merge_features_on_tape(
    tape: &mut Tape,
    features: Var,
    importance: Var,
    assignment: &Arc<Vec<usize>>,
    clusters: usize,
) -> Result<Var> {
    let p = tape.value(importance);
    if p.ncols() != 1 || p.nrows() != assignment.len() {
        return Err(Error::InvalidInput("importance must be one column per token".into()));
    }
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite importance score".into()));
    }
    let mut max = vec![f64::NEG_INFINITY; clusters];
    for (i, &a) in assignment.iter().enumerate() {
        if a >= clusters {
            return Err(Error::Internal(format!("assignment {a} outside {clusters} clusters")));
        }
        max[a] = max[a].max(p[[i, 0]]);
    }
    if max.contains(&f64::NEG_INFINITY) {
        return Err(Error::Internal("empty cluster in merge".into()));
    }
    let shift = Mat::from_shape_fn((assignment.len(), 1), |(i, _)| -max[assignment[i]]);
    let shifted = tape.add_const(importance, &shift);
    let w = tape.exp(shifted);
    let wx = tape.mul_col(features, w);
    let num = tape.segment_sum(wx, assignment.clone(), clusters);
    let den = tape.segment_sum(w, assignment.clone(), clusters);
    Ok(tape.div_col(num, den))
}

/// Value-level merge of a token set (`p` one score per token).
pub fn merge_features(tokens: &TokenSet, assignment: &[usize], p: &[f64]) -> Result<Mat> {
    if assignment.len() != tokens.len() || p.len() != tokens.len() {
        return Err(Error::InvalidInput("assignment/importance length mismatch".into()));
    }
    let clusters = assignment.iter().max().map_or(0, |m| m + 1);
    let mut tape = Tape::new();
    let x = tape.constant(tokens.features.clone());
    let pv = tape.constant(Mat::from_shape_vec((p.len(), 1), p.to_vec()).expect("column"));
    let y = merge_features_on_tape(&mut tape, x, pv, &Arc::new(assignment.to_vec()), clusters)?;
    Ok(tape.value(y).clone())
}

/// Importance scores of a token set under a score head.
pub fn importance_scores(tape: &mut Tape, store: &ParamStore, head: &Linear, tokens: Var) -> Var {
    head.forward(tape, store, tokens)
}
