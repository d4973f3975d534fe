//! Full network: convolutional stem, hierarchical token stages joined by
//! merge blocks, and a dense or classification head.
//!
//! Stage `s` (0-based) runs on a nominal `H/4/2^s x W/4/2^s` grid. Between
//! stages the tokens are merged either by clustering ([`Ctm`]) or, for the
//! ablation baseline, by a stride-2 convolution onto a fixed grid.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::ctm::{merged_count, AssignmentLog, Ctm, CtmConfig, DEFAULT_CLUSTER_FRACTION};
use crate::dpc_knn::DEFAULT_K;
use crate::error::{invalid, Error, Result};
use crate::mta_head::{DeconvHead, MtaConfig, MtaHead};
use crate::nn::{Conv2d, LayerNorm, Linear};
use crate::params::ParamStore;
use crate::token_space::{FeatureMap, MergeRecord, RegionMap, TapeTokens, TokenSet};
use crate::transformer_block::{BlockConfig, TransformerBlock};

/// Stem downsampling factor: stage-0 tokens are one per `4 x 4` pixel block.
pub const STEM_STRIDE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Mta,
    Deconv,
    #[serde(alias = "cls")]
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeKind {
    /// Density-peak clustering merge.
    Dpcknn,
    /// Clustering with the highest-importance tokens as centers.
    Topk,
    /// Ablation: stride-2 convolution onto a fixed grid.
    Strided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Light,
    Base,
    Large,
}

macro_rules! impl_from_str {
    ($t:ty, $($name:literal => $v:expr),+) => {
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($v),)+
                    _ => Err(Error::InvalidConfig(format!("unknown {} '{s}'", stringify!($t)))),
                }
            }
        }
    };
}

impl_from_str!(HeadKind, "mta" => HeadKind::Mta, "deconv" => HeadKind::Deconv, "cls" => HeadKind::Classification, "classification" => HeadKind::Classification);
impl_from_str!(MergeKind, "dpcknn" => MergeKind::Dpcknn, "topk" => MergeKind::Topk, "strided" => MergeKind::Strided);
impl_from_str!(Preset, "light" => Preset::Light, "base" => Preset::Base, "large" => Preset::Large);

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Light => "light",
            Preset::Base => "base",
            Preset::Large => "large",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    /// Blocks run after the stage's merge block (the merge block itself
    /// contains one more).
    pub depth: usize,
    pub block: BlockConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    pub stages: Vec<StageConfig>,
    pub merge: MergeKind,
    pub cluster_fraction: f64,
    pub k: usize,
    pub head: HeadKind,
    pub input_height: usize,
    pub input_width: usize,
    pub stem_kernel: usize,
    /// Aggregation width of the dense heads.
    pub agg_channels: usize,
    /// Heatmap count of the dense heads.
    pub out_channels: usize,
    pub num_classes: usize,
}

const PRESET_BLOCKS: [(usize, usize, usize, usize); 4] = [(8, 1, 8, 64), (4, 2, 8, 128), (2, 5, 4, 320), (1, 8, 4, 512)];

impl ModelConfig {
    pub fn preset(preset: Preset) -> Self {
        let depths = match preset {
            Preset::Light => [2, 1, 1, 1],
            Preset::Base => [3, 2, 5, 2],
            Preset::Large => [3, 7, 26, 2],
        };
        let stages = depths
            .iter()
            .zip(PRESET_BLOCKS)
            .map(|(&depth, (r, n, e, c))| StageConfig { depth, block: BlockConfig::new(r, n, e, c) })
            .collect();
        Self {
            preset: Some(preset),
            stages,
            merge: MergeKind::Dpcknn,
            cluster_fraction: DEFAULT_CLUSTER_FRACTION,
            k: DEFAULT_K,
            head: HeadKind::Mta,
            input_height: 224,
            input_width: 224,
            stem_kernel: 7,
            agg_channels: 128,
            out_channels: 17,
            num_classes: 1000,
        }
    }

    /// Two-stage network used for the synthetic keypoint task (64x64 input,
    /// 16x16 base grid, widths 32 and 64).
    pub fn mini() -> Self {
        Self {
            preset: None,
            stages: vec![
                StageConfig { depth: 1, block: BlockConfig::new(4, 1, 4, 32) },
                StageConfig { depth: 1, block: BlockConfig::new(1, 2, 4, 64) },
            ],
            merge: MergeKind::Dpcknn,
            cluster_fraction: DEFAULT_CLUSTER_FRACTION,
            k: DEFAULT_K,
            head: HeadKind::Mta,
            input_height: 64,
            input_width: 64,
            stem_kernel: 7,
            agg_channels: 32,
            out_channels: 2,
            num_classes: 2,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn base_resolution(&self) -> (usize, usize) {
        (self.input_height / STEM_STRIDE, self.input_width / STEM_STRIDE)
    }

    pub fn stage_resolution(&self, s: usize) -> (usize, usize) {
        let (h, w) = self.base_resolution();
        (h >> s, w >> s)
    }

    pub fn stage_resolutions(&self) -> Vec<(usize, usize)> {
        (0..self.num_stages()).map(|s| self.stage_resolution(s)).collect()
    }

    pub fn stage_channels(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.block.channels).collect()
    }

    /// Input side lengths must be multiples of this.
    pub fn input_multiple(&self) -> usize {
        STEM_STRIDE << self.num_stages().saturating_sub(1)
    }

    /// Merge settings of the block entering stage `s + 1`.
    pub fn ctm_config(&self, s: usize) -> CtmConfig {
        CtmConfig {
            cluster_fraction: self.cluster_fraction,
            k: self.k,
            inner_block: self.stages[s + 1].block,
            use_topk_centers: self.merge == MergeKind::Topk,
        }
    }

    pub fn ctm_configs(&self) -> Vec<CtmConfig> {
        (0..self.num_stages().saturating_sub(1)).map(|s| self.ctm_config(s)).collect()
    }

    pub fn mta_config(&self) -> MtaConfig {
        MtaConfig::new(self.agg_channels, self.out_channels)
    }

    /// Token count of every stage.
    pub fn token_schedule(&self) -> Vec<usize> {
        let (h, w) = self.base_resolution();
        let mut counts = vec![h * w];
        for s in 1..self.num_stages() {
            let next = match self.merge {
                MergeKind::Strided => {
                    let (h, w) = self.stage_resolution(s);
                    h * w
                }
                _ => merged_count(counts[s - 1], self.cluster_fraction),
            };
            counts.push(next);
        }
        counts
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidConfig("at least one stage is required".into()));
        }
        for s in &self.stages {
            s.block.validate()?;
        }
        let m = self.input_multiple();
        if self.input_height == 0 || self.input_width == 0 || !self.input_height.is_multiple_of(m) || !self.input_width.is_multiple_of(m) {
            return Err(Error::InvalidConfig(format!(
                "input {}x{} is not a positive multiple of {m}",
                self.input_height, self.input_width
            )));
        }
        for (s, (h, w)) in self.stage_resolutions().into_iter().enumerate() {
            let r = self.stages[s].block.reduction;
            if h % r != 0 || w % r != 0 {
                return Err(Error::InvalidConfig(format!("stage {s} grid {h}x{w} not divisible by reduction {r}")));
            }
        }
        if self.stem_kernel.is_multiple_of(2) || self.stem_kernel < 3 {
            return Err(Error::InvalidConfig(format!("stem kernel {} must be odd and at least 3", self.stem_kernel)));
        }
        if self.merge != MergeKind::Strided {
            for c in self.ctm_configs() {
                c.validate()?;
            }
        }
        match self.head {
            HeadKind::Mta | HeadKind::Deconv => self.mta_config().validate(),
            HeadKind::Classification if self.num_classes == 0 => {
                Err(Error::InvalidConfig("class count must be positive".into()))
            }
            HeadKind::Classification => Ok(()),
        }
    }
}

/// Merge block between two stages.
#[derive(Debug, Clone)]
pub enum Merge {
    Cluster(Ctm),
    Strided { conv: Conv2d, norm: LayerNorm, block: TransformerBlock },
}

#[derive(Debug, Clone)]
pub enum Head {
    Mta(MtaHead),
    Deconv(DeconvHead),
    Classification { norm: LayerNorm, fc: Linear },
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub stem: Conv2d,
    pub stem_norm: LayerNorm,
    pub stages: Vec<Vec<TransformerBlock>>,
    pub merges: Vec<Merge>,
    pub head: Head,
}

/// Forward pass with every intermediate still on the tape.
#[derive(Debug, Clone)]
pub struct TapeForward {
    /// Output tokens of every stage.
    pub stages: Vec<TapeTokens>,
    pub records: Vec<MergeRecord>,
    /// Dense heads: `(H/4 * W/4) x out_channels`; classification: `1 x classes`.
    pub output: Var,
    pub cluster_merge_time: Duration,
}

/// Value-level forward result.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub stages: Vec<TokenSet>,
    pub records: Vec<MergeRecord>,
    pub output: Mat,
}

impl Model {
    pub fn new(store: &mut ParamStore, cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let channels = cfg.stage_channels();
        let k = cfg.stem_kernel;
        let stem = Conv2d::new(store, "stem.conv", 3, channels[0], k, STEM_STRIDE, k / 2, true);
        let stem_norm = LayerNorm::new(store, "stem.norm", channels[0]);
        let mut stages = Vec::with_capacity(cfg.num_stages());
        let mut merges = Vec::new();
        for (s, stage) in cfg.stages.iter().enumerate() {
            if s > 0 {
                let name = format!("merge{s}");
                merges.push(match cfg.merge {
                    MergeKind::Strided => Merge::Strided {
                        conv: Conv2d::new(store, &format!("{name}.conv"), channels[s - 1], channels[s], 3, 2, 1, true),
                        norm: LayerNorm::new(store, &format!("{name}.norm"), channels[s]),
                        block: TransformerBlock::new(store, &format!("{name}.block"), stage.block)?,
                    },
                    _ => Merge::Cluster(Ctm::new(store, &name, channels[s - 1], cfg.ctm_config(s - 1))?),
                });
            }
            let blocks = (0..stage.depth)
                .map(|i| TransformerBlock::new(store, &format!("stage{s}.block{i}"), stage.block))
                .collect::<Result<_>>()?;
            stages.push(blocks);
        }
        let last = *channels.last().expect("validated non-empty");
        let head = match cfg.head {
            HeadKind::Mta => Head::Mta(MtaHead::new(store, "head", &channels, cfg.mta_config())?),
            HeadKind::Deconv => {
                Head::Deconv(DeconvHead::new(store, "head", last, cfg.num_stages() - 1, cfg.mta_config())?)
            }
            HeadKind::Classification => Head::Classification {
                norm: LayerNorm::new(store, "head.norm", last),
                fc: Linear::new(store, "head.fc", last, cfg.num_classes, true),
            },
        };
        Ok(Self { cfg, stem, stem_norm, stages, merges, head })
    }

    /// Stem: one stride-4 convolution followed by layer norm. `image` is
    /// `(H*W) x 3`.
    pub fn stem_forward(&self, tape: &mut Tape, store: &ParamStore, image: Var) -> Result<(Var, (usize, usize))> {
        let (h, w) = (self.cfg.input_height, self.cfg.input_width);
        if tape.shape(image) != (h * w, 3) {
            return invalid(format!("image has shape {:?}, expected ({}, 3)", tape.shape(image), h * w));
        }
        let (map, hw) = self.stem.forward(tape, store, image, (h, w))?;
        Ok((self.stem_norm.forward(tape, store, map), hw))
    }

    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        image: Var,
        log: &mut AssignmentLog,
    ) -> Result<TapeForward> {
        let (map, base) = self.stem_forward(tape, store, image)?;
        let mut tokens = TapeTokens { features: map, regions: Arc::new(RegionMap::identity(base.0, base.1)) };
        let resolutions = self.cfg.stage_resolutions();
        let mut stages = Vec::with_capacity(self.stages.len());
        let mut records = Vec::with_capacity(self.merges.len());
        let mut cluster_merge_time = Duration::ZERO;
        for (s, blocks) in self.stages.iter().enumerate() {
            if s > 0 {
                let (next, record) = match &self.merges[s - 1] {
                    Merge::Cluster(ctm) => {
                        let out = ctm.forward(tape, store, &tokens, resolutions[s - 1], log)?;
                        cluster_merge_time += out.cluster_merge_time;
                        (out.tokens, out.record)
                    }
                    Merge::Strided { conv, norm, block } => {
                        strided_merge(tape, store, conv, norm, block, &tokens, resolutions[s - 1])?
                    }
                };
                tokens = next;
                records.push(record);
            }
            for block in blocks {
                tokens.features = block.forward(tape, store, &tokens, resolutions[s])?;
            }
            stages.push(tokens.clone());
        }
        let output = match &self.head {
            Head::Mta(head) => head.forward(tape, store, &stages, &records, &resolutions)?,
            Head::Deconv(head) => head.forward(tape, store, &tokens, resolutions[resolutions.len() - 1])?,
            Head::Classification { norm, fc } => {
                let x = norm.forward(tape, store, tokens.features);
                let pooled = tape.mean_rows(x);
                fc.forward(tape, store, pooled)
            }
        };
        if tape.value(output).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite model output".into()));
        }
        Ok(TapeForward { stages, records, output, cluster_merge_time })
    }

    /// Runs the network on `image` (`H x W x 3`, stored `(H*W) x 3`).
    pub fn forward(&self, store: &ParamStore, image: &FeatureMap) -> Result<ForwardOutput> {
        if image.resolution() != (self.cfg.input_height, self.cfg.input_width) || image.channels() != 3 {
            return invalid(format!(
                "image is {}x{}x{}, model expects {}x{}x3",
                image.height,
                image.width,
                image.channels(),
                self.cfg.input_height,
                self.cfg.input_width
            ));
        }
        let mut tape = Tape::new();
        let x = tape.constant(image.data.clone());
        let out = self.forward_tape(&mut tape, store, x, &mut AssignmentLog::recording())?;
        Ok(ForwardOutput {
            stages: out.stages.iter().enumerate().map(|(s, t)| t.snapshot(&tape, s + 1)).collect(),
            records: out.records,
            output: tape.value(out.output).clone(),
        })
    }

    /// Heatmaps of a dense-head model as a base-resolution map.
    pub fn heatmaps(&self, store: &ParamStore, image: &FeatureMap) -> Result<FeatureMap> {
        if self.cfg.head == HeadKind::Classification {
            return Err(Error::InvalidConfig("classification model has no heatmap output".into()));
        }
        let out = self.forward(store, image)?;
        let (h, w) = self.cfg.base_resolution();
        FeatureMap::new(out.output, h, w)
    }

    pub fn mac_breakdown(&self) -> Vec<(String, u64)> {
        let cfg = &self.cfg;
        let res = cfg.stage_resolutions();
        let counts = cfg.token_schedule();
        let mut out = vec![("stem".to_string(), self.stem.macs((cfg.input_height, cfg.input_width)))];
        for (s, blocks) in self.stages.iter().enumerate() {
            if s > 0 {
                let (n, m) = (counts[s - 1], counts[s]);
                let macs = match &self.merges[s - 1] {
                    Merge::Cluster(ctm) => {
                        let c = ctm.cfg.inner_block.channels as u64;
                        let clustering = if ctm.cfg.use_topk_centers {
                            (n * m) as u64 * c
                        } else {
                            (n * n) as u64 * c
                        };
                        ctm.conv.macs(res[s - 1])
                            + ctm.skip.macs(n)
                            + ctm.score.macs(n)
                            + clustering
                            + n as u64 * c
                            + ctm.block.macs(m, res[s], n, res[s - 1])
                    }
                    Merge::Strided { conv, block, .. } => conv.macs(res[s - 1]) + block.macs(m, res[s], m, res[s]),
                };
                out.push((format!("merge{s}"), macs));
            }
            let stage: u64 = blocks.iter().map(|b| b.macs(counts[s], res[s], counts[s], res[s])).sum();
            out.push((format!("stage{s}"), stage));
        }
        let head = match &self.head {
            Head::Mta(h) => h.macs(&counts, &res),
            Head::Deconv(h) => h.macs(res[res.len() - 1]),
            Head::Classification { fc, .. } => fc.macs(1),
        };
        out.push(("head".to_string(), head));
        out
    }
}

/// Ablation merge: rasterize, stride-2 convolution, layer norm, then one
/// block on the fixed coarser grid. Each fine token is recorded as merged
/// into the coarse pixel holding its region.
fn strided_merge(
    tape: &mut Tape,
    store: &ParamStore,
    conv: &Conv2d,
    norm: &LayerNorm,
    block: &TransformerBlock,
    tokens: &TapeTokens,
    res: (usize, usize),
) -> Result<(TapeTokens, MergeRecord)> {
    let map = tokens.to_map(tape, res)?;
    let (y, out_res) = conv.forward(tape, store, map, res)?;
    let y = norm.forward(tape, store, y);
    let (bh, bw) = tokens.regions.base_resolution();
    if bh % out_res.0 != 0 || bw % out_res.1 != 0 || bh / out_res.0 != bw / out_res.1 {
        return invalid(format!("grid {out_res:?} does not tile the base grid {bh}x{bw}"));
    }
    let cell = bh / out_res.0;
    let regions = Arc::new(RegionMap::grid(bh, bw, cell)?);
    let mut assignment = vec![usize::MAX; tokens.len()];
    for (c, &t) in tokens.regions.cells().iter().enumerate() {
        assignment[t] = regions.cells()[c];
    }
    let record = MergeRecord::new(assignment, vec![0.0; tokens.len()], regions.num_tokens())?;
    let next = TapeTokens { features: y, regions };
    let features = block.forward(tape, store, &next, out_res)?;
    Ok((TapeTokens { features, regions: next.regions }, record))
}

/// Exact parameter total of a configuration (no values are allocated).
pub fn param_count(cfg: &ModelConfig) -> Result<usize> {
    let mut store = ParamStore::shapes_only();
    Model::new(&mut store, cfg.clone())?;
    Ok(store.count())
}

/// Parameter totals per top-level module (`stem`, `stage0`, `merge1`, ...).
pub fn param_breakdown(cfg: &ModelConfig) -> Result<Vec<(String, usize)>> {
    let mut store = ParamStore::shapes_only();
    Model::new(&mut store, cfg.clone())?;
    let mut out: Vec<(String, usize)> = Vec::new();
    for e in store.entries() {
        let module = e.name.split('.').next().unwrap_or_default();
        let n = e.shape.0 * e.shape.1;
        match out.last_mut() {
            Some((m, total)) if m == module => *total += n,
            _ => out.push((module.to_string(), n)),
        }
    }
    Ok(out)
}

/// Compute cost in multiply-accumulates (one fused multiply-add counts once),
/// the convention used by common FLOP counters.
///
/// Counted: every convolution, linear layer and attention product, and the
/// pairwise-distance work of clustering (`N^2 C`, or `N M C` for the top-k
/// variant). Not counted: normalizations, activations, softmax.
pub fn flop_count(cfg: &ModelConfig) -> Result<u64> {
    let mut store = ParamStore::shapes_only();
    let model = Model::new(&mut store, cfg.clone())?;
    Ok(model.mac_breakdown().iter().map(|(_, m)| m).sum())
}

/// Logits of a classification-head model.
pub fn classification_forward(model: &Model, store: &ParamStore, image: &FeatureMap) -> Result<Vec<f64>> {
    if model.cfg.head != HeadKind::Classification {
        return Err(Error::InvalidConfig("model does not have a classification head".into()));
    }
    Ok(model.forward(store, image)?.output.row(0).to_vec())
}

/// Runs the strided-merge baseline of `cfg` with the given parameters.
pub fn ablation_forward_strided(cfg: &ModelConfig, store: &mut ParamStore, image: &FeatureMap) -> Result<ForwardOutput> {
    let cfg = ModelConfig { merge: MergeKind::Strided, ..cfg.clone() };
    let model = Model::new(store, cfg)?;
    model.forward(store, image)
}
