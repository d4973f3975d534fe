//! Stage transformer block: pre-norm multi-head attention with spatial
//! reduction of keys/values, then a feed-forward network whose hidden layer
//! passes through a 3x3 depth-wise convolution on the stage grid.
//!
//! There is no positional embedding; position enters only through the
//! depth-wise convolution. Irregular tokens reach every convolution through
//! a tokens -> map -> tokens round trip at the stage's nominal resolution.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{ConvPlan, SparseRows, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, DwConv, LayerNorm, Linear};
use crate::params::ParamStore;
use crate::token_space::TapeTokens;

/// Depth-wise kernel size of the feed-forward network.
pub const DW_KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    /// Spatial reduction ratio `R` of keys/values.
    pub reduction: usize,
    pub heads: usize,
    /// Feed-forward expansion ratio `E`.
    pub expansion: usize,
    pub channels: usize,
}

impl BlockConfig {
    pub fn new(reduction: usize, heads: usize, expansion: usize, channels: usize) -> Self {
        Self { reduction, heads, expansion, channels }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reduction == 0 || !self.reduction.is_power_of_two() {
            return Err(Error::InvalidConfig(format!("reduction ratio {} is not a power of two", self.reduction)));
        }
        if self.heads == 0 || self.expansion == 0 || self.channels == 0 {
            return Err(Error::InvalidConfig("heads, expansion and channels must be positive".into()));
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.channels * self.expansion
    }
}

/// Strided convolution (kernel = stride = `R`) plus layer norm applied to the
/// rasterized key/value tokens.
#[derive(Debug, Clone)]
pub struct SpatialReduction {
    pub conv: Conv2d,
    pub norm: LayerNorm,
    pub ratio: usize,
}

impl SpatialReduction {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, ratio: usize) -> Self {
        let conv = Conv2d::new(store, &format!("{name}.conv"), channels, channels, ratio, ratio, 0, true);
        let norm = LayerNorm::new(store, &format!("{name}.norm"), channels);
        Self { conv, norm, ratio }
    }

    /// Reduced key/value features, one row per pixel of the reduced map.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, tokens: &TapeTokens, res: (usize, usize)) -> Result<Var> {
        check_divides(res, self.ratio)?;
        let map = tokens.to_map(tape, res)?;
        let (y, _) = self.conv.forward(tape, store, map, res)?;
        Ok(self.norm.forward(tape, store, y))
    }
}

fn check_divides(res: (usize, usize), r: usize) -> Result<()> {
    if !res.0.is_multiple_of(r) || !res.1.is_multiple_of(r) {
        return Err(Error::InvalidInput(format!(
            "reduction ratio {r} does not divide stage resolution {}x{}",
            res.0, res.1
        )));
    }
    Ok(())
}

/// `(res/r)^2 x res^2` average-pooling matrix over `r x r` blocks.
pub fn avg_pool_matrix(res: (usize, usize), r: usize) -> Result<SparseRows> {
    check_divides(res, r)?;
    let plan = ConvPlan::new(res.0, res.1, r, r, 0)?;
    let w = 1.0 / (r * r) as f64;
    let rows = (0..plan.out_pixels())
        .map(|p| {
            let (oy, ox) = (p / plan.out_w, p % plan.out_w);
            let mut row = Vec::with_capacity(r * r);
            for dy in 0..r {
                for dx in 0..r {
                    row.push(((oy * r + dy) * res.1 + ox * r + dx, w));
                }
            }
            row
        })
        .collect();
    Ok(SparseRows::from_rows(res.0 * res.1, rows))
}

/// Multi-head attention with optional per-key logit bias.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub kv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub channels: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), channels, channels, true),
            kv: Linear::new(store, &format!("{name}.kv"), channels, 2 * channels, true),
            proj: Linear::new(store, &format!("{name}.proj"), channels, channels, true),
            heads,
            channels,
        }
    }

    /// `softmax(Q K^T / sqrt(d) + P) V` per head, heads concatenated and
    /// projected. `bias` is a `1 x M` row with one entry per key.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, queries: Var, kv_source: Var, bias: Option<Var>) -> Result<Var> {
        let keys = tape.shape(kv_source).0;
        if tape.shape(queries).1 != self.channels || tape.shape(kv_source).1 != self.channels {
            return Err(Error::InvalidInput("attention channel mismatch".into()));
        }
        if let Some(b) = bias {
            if tape.shape(b) != (1, keys) {
                return Err(Error::InvalidInput(format!(
                    "attention bias has shape {:?}, expected (1, {keys})",
                    tape.shape(b)
                )));
            }
        }
        let q = self.q.forward(tape, store, queries);
        let kv = self.kv.forward(tape, store, kv_source);
        let d = self.channels / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.col_slice(q, h * d, d);
            let kh = tape.col_slice(kv, h * d, d);
            let vh = tape.col_slice(kv, self.channels + h * d, d);
            let logits = tape.matmul_bt(qh, kh);
            let mut logits = tape.scale(logits, scale);
            if let Some(b) = bias {
                logits = tape.add_row(logits, b);
            }
            let weights = tape.softmax_rows(logits);
            outs.push(tape.matmul(weights, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
        Ok(self.proj.forward(tape, store, cat))
    }
}

/// Feed-forward network with a depth-wise convolution on the stage grid.
#[derive(Debug, Clone)]
pub struct Ffn {
    pub fc1: Linear,
    pub dw: DwConv,
    pub fc2: Linear,
}

impl Ffn {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, expansion: usize) -> Self {
        let hidden = channels * expansion;
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), channels, hidden, true),
            dw: DwConv::new(store, &format!("{name}.dwconv"), hidden, DW_KERNEL),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, channels, true),
        }
    }

    /// Expand, rasterize at `res`, depth-wise conv, back to tokens, GELU,
    /// project. The residual is added by the caller.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, tokens: &TapeTokens, res: (usize, usize)) -> Result<Var> {
        let h = self.fc1.forward(tape, store, tokens.features);
        let hidden = TapeTokens { features: h, regions: tokens.regions.clone() };
        let map = hidden.to_map(tape, res)?;
        let conv = self.dw.forward(tape, store, map, res)?;
        let back = hidden.from_map(tape, conv, res)?;
        let act = tape.gelu(back);
        Ok(self.fc2.forward(tape, store, act))
    }
}

#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub cfg: BlockConfig,
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub sr: Option<SpatialReduction>,
    pub norm2: LayerNorm,
    pub ffn: Ffn,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: BlockConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        Ok(Self {
            cfg,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c),
            attn: Attention::new(store, &format!("{name}.attn"), c, cfg.heads),
            sr: (cfg.reduction > 1).then(|| SpatialReduction::new(store, &format!("{name}.attn.sr"), c, cfg.reduction)),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), c),
            ffn: Ffn::new(store, &format!("{name}.mlp"), c, cfg.expansion),
        })
    }

    /// Self-attention block; returns the updated features (same tokens,
    /// same regions).
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: &TapeTokens, res: (usize, usize)) -> Result<Var> {
        self.forward_cross(tape, store, x, res, None, None)
    }

    /// Block whose attention keys/values come from `kv` (tokens at `kv_res`)
    /// instead of the queries, with an optional per-token importance column
    /// `bias` (`kv.len() x 1`) added to the attention logits.
    ///
    /// With `R > 1` the bias is rasterized and average-pooled onto the
    /// reduced key grid the same way the key features are.
    pub fn forward_cross(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &TapeTokens,
        res: (usize, usize),
        kv: Option<(&TapeTokens, (usize, usize))>,
        bias: Option<Var>,
    ) -> Result<Var> {
        let xn = self.norm1.forward(tape, store, x.features);
        let (kv_tokens, kv_res) = match kv {
            Some((t, r)) => {
                let f = self.norm1.forward(tape, store, t.features);
                (TapeTokens { features: f, regions: t.regions.clone() }, r)
            }
            None => (TapeTokens { features: xn, regions: x.regions.clone() }, res),
        };
        if let Some(b) = bias {
            if tape.shape(b) != (kv_tokens.len(), 1) {
                return Err(Error::InvalidInput("importance bias must be one column per key token".into()));
            }
        }
        let (source, bias_row) = match &self.sr {
            Some(sr) => {
                let source = sr.forward(tape, store, &kv_tokens, kv_res)?;
                let bias_row = match bias {
                    Some(b) => {
                        let to_map = kv_tokens.regions.to_map_matrix(kv_res)?;
                        let m = tape.sparse(b, to_map);
                        let pooled = tape.sparse(m, Arc::new(avg_pool_matrix(kv_res, sr.ratio)?));
                        Some(tape.transpose(pooled))
                    }
                    None => None,
                };
                (source, bias_row)
            }
            None => (kv_tokens.features, bias.map(|b| tape.transpose(b))),
        };
        let a = self.attn.forward(tape, store, xn, source, bias_row)?;
        let x1 = tape.add(x.features, a);
        let x1n = self.norm2.forward(tape, store, x1);
        let f = self.ffn.forward(tape, store, &TapeTokens { features: x1n, regions: x.regions.clone() }, res)?;
        Ok(tape.add(x1, f))
    }

    /// Multiply-accumulate count for `queries` query tokens on a `res` grid
    /// attending to `kv_tokens` tokens rasterized at `kv_res`.
    pub fn macs(&self, queries: usize, res: (usize, usize), kv_tokens: usize, kv_res: (usize, usize)) -> u64 {
        let c = self.cfg.channels as u64;
        let n = queries as u64;
        let (keys, sr_macs) = match &self.sr {
            Some(sr) => {
                let r = sr.ratio;
                let keys = (kv_res.0 / r) * (kv_res.1 / r);
                (keys as u64, sr.conv.macs(kv_res))
            }
            None => (kv_tokens as u64, 0),
        };
        let attn = n * c * c // q
            + keys * 2 * c * c // kv
            + 2 * n * keys * c // logits and weighted sum
            + n * c * c; // proj
        let hidden = self.cfg.hidden() as u64;
        let ffn = 2 * n * c * hidden + self.ffn.dw.macs(res);
        sr_macs + attn + ffn
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Mat;
    use crate::token_space::RegionMap;
    use ndarray::array;

    fn tokens_on_grid(tape: &mut Tape, h: usize, w: usize, c: usize) -> TapeTokens {
        let x = Mat::from_shape_fn((h * w, c), |(i, j)| ((i * 13 + j * 5) as f64 * 0.31).sin());
        TapeTokens { features: tape.constant(x), regions: Arc::new(RegionMap::identity(h, w)) }
    }

    #[test]
    fn config_validation() {
        assert!(BlockConfig::new(8, 1, 8, 64).validate().is_ok());
        assert!(BlockConfig::new(3, 1, 8, 64).validate().is_err());
        assert!(BlockConfig::new(1, 5, 4, 64).validate().is_err());
        assert!(BlockConfig::new(1, 5, 4, 320).validate().is_ok());
    }

    #[test]
    fn spatial_reduction_counts() {
        let mut store = ParamStore::new(0);
        let sr1 = SpatialReduction::new(&mut store, "a", 4, 1);
        let sr2 = SpatialReduction::new(&mut store, "b", 4, 2);
        let mut tape = Tape::new();
        let t = tokens_on_grid(&mut tape, 4, 4, 4);
        let k1 = sr1.forward(&mut tape, &store, &t, (4, 4)).unwrap();
        assert_eq!(tape.shape(k1), (16, 4));
        let k2 = sr2.forward(&mut tape, &store, &t, (4, 4)).unwrap();
        assert_eq!(tape.shape(k2), (4, 4));
        assert!(sr2.forward(&mut tape, &store, &t, (4, 2)).is_ok());
        let sr3 = SpatialReduction::new(&mut store, "c", 4, 4);
        assert!(sr3.forward(&mut tape, &store, &t, (4, 2)).is_err());
    }

    #[test]
    fn spatial_reduction_of_constant_map_is_constant() {
        let mut store = ParamStore::new(3);
        let sr = SpatialReduction::new(&mut store, "sr", 3, 2);
        let mut tape = Tape::new();
        let t = TapeTokens { features: tape.constant(Mat::from_elem((16, 3), 0.7)), regions: Arc::new(RegionMap::identity(4, 4)) };
        let k = sr.forward(&mut tape, &store, &t, (4, 4)).unwrap();
        let v = tape.value(k);
        for row in v.rows() {
            assert_eq!(row, v.row(0));
        }
    }

    /// Attention with identity projections on a single head.
    fn identity_attention(dim: usize) -> (ParamStore, Attention) {
        let mut store = ParamStore::new(0);
        let attn = Attention::new(&mut store, "attn", dim, 1);
        for lin in [&attn.q, &attn.proj] {
            *store.value_mut(lin.weight) = Mat::eye(dim);
        }
        let mut kv = Mat::zeros((dim, 2 * dim));
        for i in 0..dim {
            kv[[i, i]] = 1.0;
            kv[[i, dim + i]] = 1.0;
        }
        *store.value_mut(attn.kv.weight) = kv;
        (store, attn)
    }

    #[test]
    fn biased_attention_hand_example() {
        // equal logits, bias [ln 3, 0], values [4, 0]: weights 3/4, 1/4
        let (store, attn) = identity_attention(1);
        let mut tape = Tape::new();
        let q = tape.constant(array![[0.0]]);
        let kv = tape.constant(array![[4.0], [0.0]]);
        let b = tape.constant(array![[3.0f64.ln(), 0.0]]);
        let out = attn.forward(&mut tape, &store, q, kv, Some(b)).unwrap();
        assert!((tape.value(out)[[0, 0]] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn single_key_returns_its_value() {
        let (store, attn) = identity_attention(2);
        let mut tape = Tape::new();
        let q = tape.constant(array![[1.0, -3.0], [0.2, 9.0]]);
        let kv = tape.constant(array![[0.5, 1.5]]);
        let b = tape.constant(array![[17.0]]);
        let out = attn.forward(&mut tape, &store, q, kv, Some(b)).unwrap();
        assert_eq!(tape.value(out), &array![[0.5, 1.5], [0.5, 1.5]]);
        let bad = tape.constant(array![[1.0, 2.0]]);
        assert!(attn.forward(&mut tape, &store, q, kv, Some(bad)).is_err());
    }

    #[test]
    fn zero_output_projections_make_block_identity() {
        let mut store = ParamStore::new(5);
        let block = TransformerBlock::new(&mut store, "b", BlockConfig::new(2, 2, 2, 4)).unwrap();
        store.fill_matching("attn.proj", 0.0);
        store.fill_matching("mlp.fc2", 0.0);
        let mut tape = Tape::new();
        let t = tokens_on_grid(&mut tape, 4, 4, 4);
        let y = block.forward(&mut tape, &store, &t, (4, 4)).unwrap();
        assert_eq!(tape.value(y), tape.value(t.features));
    }

    #[test]
    fn block_preserves_token_count_on_irregular_tokens() {
        let mut store = ParamStore::new(5);
        let block = TransformerBlock::new(&mut store, "b", BlockConfig::new(2, 1, 2, 4)).unwrap();
        let regions = Arc::new(RegionMap::new(4, 4, (0..16).map(|c| (c * 7) % 5).collect(), 5).unwrap());
        let mut tape = Tape::new();
        let x = tape.constant(Mat::from_shape_fn((5, 4), |(i, j)| (i + 2 * j) as f64 * 0.1));
        let t = TapeTokens { features: x, regions };
        let y = block.forward(&mut tape, &store, &t, (2, 2)).unwrap();
        assert_eq!(tape.shape(y), (5, 4));
    }

    #[test]
    fn avg_pool_matrix_averages_blocks() {
        let m = avg_pool_matrix((2, 4), 2).unwrap();
        let x = array![[1.0], [2.0], [3.0], [4.0], [5.0], [6.0], [7.0], [8.0]];
        assert_eq!(m.apply(x.view()), array![[3.5], [5.5]]);
    }
}
