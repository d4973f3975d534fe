//! Central finite-difference check of analytic parameter gradients.
//!
//! The checked quantity is a fixed random projection of a module's output,
//! so every output element contributes. Per parameter tensor the error is
//! `||g_analytic - g_numeric|| / max(||g_analytic||, ||g_numeric||, floor)`
//! where `floor` is [`RELATIVE_FLOOR`] times the largest gradient-tensor norm
//! of the check: tensors whose true gradient vanishes (e.g. the importance
//! bias, to which every downstream use is shift-invariant) are then judged
//! against the check's gradient scale instead of against finite-difference
//! round-off. The report's headline number is the maximum over tensors. Merge
//! assignments are recorded on the analytic pass and replayed for every
//! perturbed evaluation.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Mat, Tape, Var};
use crate::ctm::{AssignmentLog, Ctm, CtmConfig};
use crate::error::{Error, Result};
use crate::model::{HeadKind, MergeKind, Model, ModelConfig, StageConfig, STEM_STRIDE};
use crate::mta_head::{DeconvHead, MtaConfig, MtaHead};
use crate::nn::{Conv2d, LayerNorm, Linear};
use crate::params::ParamStore;
use crate::token_space::{MergeRecord, RegionMap, TapeTokens};
use crate::transformer_block::{BlockConfig, TransformerBlock};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;
/// Fraction of the largest gradient-tensor norm below which a tensor is
/// compared on that absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-4;
/// Absolute floor for checks whose gradients all vanish.
pub const NORM_FLOOR: f64 = 1e-12;

/// Names accepted by [`check_module`].
pub const MODULES: [&str; 9] =
    ["linear", "transformer_block", "ctm", "ctm_topk", "mta_head", "deconv_head", "stem", "classifier", "model"];

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub module: String,
    /// Relative error of every parameter tensor.
    pub per_param: Vec<(String, f64)>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Builds the scalar under test on a fresh tape.
pub type LossFn<'a> = dyn FnMut(&mut Tape, &ParamStore, &mut AssignmentLog) -> Result<Var> + 'a;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tolerance: f64,
    /// Negative control: scale the first analytic gradient tensor by 1.1.
    pub corrupt: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: DEFAULT_EPS, tolerance: DEFAULT_TOLERANCE, corrupt: false }
    }
}

pub fn grad_check(module: &str, store: &mut ParamStore, loss: &mut LossFn<'_>, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let mut log = AssignmentLog::recording();
    let mut tape = Tape::new();
    let out = loss(&mut tape, store, &mut log)?;
    let grads = tape.backward(out);
    let mut analytic: Vec<Option<Mat>> = vec![None; store.len()];
    for (id, g) in tape.param_grads(&grads) {
        analytic[id.index()] = Some(g);
    }
    if opts.corrupt {
        if let Some(g) = analytic.iter_mut().flatten().next() {
            g.mapv_inplace(|v| v * 1.1);
        }
    }
    log.freeze();

    let ids: Vec<_> = store.ids().collect();
    let norm = |m: &Mat| m.mapv(|v| v * v).sum().sqrt();
    let mut pairs = Vec::with_capacity(ids.len());
    for id in ids {
        let shape = store.value(id).dim();
        let mut numeric = Mat::zeros(shape);
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let orig = store.value(id)[[r, c]];
                let mut eval = |v: f64, store: &mut ParamStore| -> Result<f64> {
                    store.value_mut(id)[[r, c]] = v;
                    log.rewind();
                    let mut tape = Tape::new();
                    let out = loss(&mut tape, store, &mut log)?;
                    Ok(tape.scalar(out))
                };
                let plus = eval(orig + opts.eps, store)?;
                let minus = eval(orig - opts.eps, store)?;
                store.value_mut(id)[[r, c]] = orig;
                numeric[[r, c]] = (plus - minus) / (2.0 * opts.eps);
            }
        }
        let a = analytic[id.index()].take().unwrap_or_else(|| Mat::zeros(shape));
        pairs.push((id, a, numeric));
    }
    let scale = pairs.iter().map(|(_, a, n)| norm(a).max(norm(n))).fold(0.0, f64::max);
    let floor = (RELATIVE_FLOOR * scale).max(NORM_FLOOR);
    let mut per_param = Vec::with_capacity(pairs.len());
    for (id, a, n) in pairs {
        let rel = norm(&(&a - &n)) / norm(&a).max(norm(&n)).max(floor);
        if !rel.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient error for {}", store.name(id))));
        }
        per_param.push((store.name(id).to_string(), rel));
    }
    let max_rel_error = per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(GradCheckReport { module: module.to_string(), per_param, max_rel_error, tolerance: opts.tolerance })
}

fn random_mat(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Mat {
    Mat::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
}

/// Moves every parameter off its structured initialization (unit norm
/// scales, zero biases) so that no gradient path is trivially inactive.
fn jitter(store: &mut ParamStore, seed: u64) {
    store.perturb(seed, 0.4);
}

fn tiny_model(merge: MergeKind) -> ModelConfig {
    ModelConfig {
        preset: None,
        stages: vec![
            StageConfig { depth: 1, block: BlockConfig::new(2, 1, 2, 4) },
            StageConfig { depth: 1, block: BlockConfig::new(1, 2, 2, 6) },
        ],
        merge,
        head: HeadKind::Mta,
        input_height: 16,
        input_width: 16,
        agg_channels: 4,
        out_channels: 2,
        num_classes: 2,
        ..ModelConfig::mini()
    }
}

/// Runs the check for one named module on a small seeded instance.
pub fn check_module(name: &str, seed: u64, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new(seed);
    match name {
        "linear" => {
            let lin = Linear::new(&mut store, "linear", 5, 3, true);
            jitter(&mut store, seed);
            let x = random_mat(&mut rng, (4, 5));
            let w = random_mat(&mut rng, (4, 3));
            grad_check(name, &mut store, &mut |tape, store, _| {
                let x = tape.constant(x.clone());
                let y = lin.forward(tape, store, x);
                Ok(tape.weighted_sum(y, w.clone()))
            }, opts)
        }
        "transformer_block" => {
            let block = TransformerBlock::new(&mut store, "block", BlockConfig::new(2, 2, 2, 8))?;
            jitter(&mut store, seed);
            let x = random_mat(&mut rng, (16, 8));
            let w = random_mat(&mut rng, (16, 8));
            grad_check(name, &mut store, &mut |tape, store, _| {
                let t = TapeTokens { features: tape.constant(x.clone()), regions: Arc::new(RegionMap::identity(4, 4)) };
                let y = block.forward(tape, store, &t, (4, 4))?;
                Ok(tape.weighted_sum(y, w.clone()))
            }, opts)
        }
        "ctm" | "ctm_topk" => {
            let mut cfg = CtmConfig::new(BlockConfig::new(2, 2, 2, 8));
            cfg.use_topk_centers = name == "ctm_topk";
            let ctm = Ctm::new(&mut store, "ctm", 8, cfg)?;
            jitter(&mut store, seed);
            let x = random_mat(&mut rng, (16, 8));
            let w = random_mat(&mut rng, (4, 8));
            grad_check(name, &mut store, &mut |tape, store, log| {
                let t = TapeTokens { features: tape.constant(x.clone()), regions: Arc::new(RegionMap::identity(4, 4)) };
                let out = ctm.forward(tape, store, &t, (4, 4), log)?;
                Ok(tape.weighted_sum(out.tokens.features, w.clone()))
            }, opts)
        }
        "mta_head" => {
            let head = MtaHead::new(&mut store, "head", &[3, 5], MtaConfig::new(4, 2))?;
            jitter(&mut store, seed);
            let fine = RegionMap::identity(4, 4);
            // first four tokens seed the four clusters; the rest join at random
            let assignment: Vec<usize> = (0..16).map(|i| if i < 4 { i } else { rng.random_range(0..4) }).collect();
            let record = MergeRecord::new(assignment.clone(), vec![0.0; 16], 4)?;
            let coarse = Arc::new(fine.merge(&assignment, 4)?);
            let fine = Arc::new(fine);
            let f0 = random_mat(&mut rng, (16, 3));
            let f1 = random_mat(&mut rng, (4, 5));
            let w = random_mat(&mut rng, (16, 2));
            grad_check(name, &mut store, &mut |tape, store, _| {
                let stages = [
                    TapeTokens { features: tape.constant(f0.clone()), regions: fine.clone() },
                    TapeTokens { features: tape.constant(f1.clone()), regions: coarse.clone() },
                ];
                let y = head.forward(tape, store, &stages, std::slice::from_ref(&record), &[(4, 4), (2, 2)])?;
                Ok(tape.weighted_sum(y, w.clone()))
            }, opts)
        }
        "deconv_head" => {
            let head = DeconvHead::new(&mut store, "head", 5, 1, MtaConfig::new(4, 2))?;
            jitter(&mut store, seed);
            let f = random_mat(&mut rng, (4, 5));
            let w = random_mat(&mut rng, (16, 2));
            grad_check(name, &mut store, &mut |tape, store, _| {
                let t = TapeTokens { features: tape.constant(f.clone()), regions: Arc::new(RegionMap::grid(4, 4, 2)?) };
                let y = head.forward(tape, store, &t, (2, 2))?;
                Ok(tape.weighted_sum(y, w.clone()))
            }, opts)
        }
        "stem" => {
            let k = ModelConfig::mini().stem_kernel;
            let stem = Conv2d::new(&mut store, "stem.conv", 3, 4, k, STEM_STRIDE, k / 2, true);
            let norm = LayerNorm::new(&mut store, "stem.norm", 4);
            jitter(&mut store, seed);
            let x = Mat::from_shape_simple_fn((32 * 32, 3), || rng.random_range(0.0..1.0));
            let w = random_mat(&mut rng, (64, 4));
            grad_check(name, &mut store, &mut |tape, store, _| {
                let xi = tape.constant(x.clone());
                let (y, _) = stem.forward(tape, store, xi, (32, 32))?;
                let y = norm.forward(tape, store, y);
                Ok(tape.weighted_sum(y, w.clone()))
            }, opts)
        }
        "classifier" => {
            let norm = LayerNorm::new(&mut store, "head.norm", 6);
            let fc = Linear::new(&mut store, "head.fc", 6, 2, true);
            jitter(&mut store, seed);
            let x = random_mat(&mut rng, (16, 6));
            let w = random_mat(&mut rng, (1, 2));
            grad_check(name, &mut store, &mut |tape, store, _| {
                let xi = tape.constant(x.clone());
                let y = norm.forward(tape, store, xi);
                let pooled = tape.mean_rows(y);
                let logits = fc.forward(tape, store, pooled);
                Ok(tape.weighted_sum(logits, w.clone()))
            }, opts)
        }
        "model" => {
            let model = Model::new(&mut store, tiny_model(MergeKind::Dpcknn))?;
            jitter(&mut store, seed);
            let x = Mat::from_shape_simple_fn((16 * 16, 3), || rng.random_range(0.0..1.0));
            let w = random_mat(&mut rng, (16, 2));
            grad_check(name, &mut store, &mut |tape, store, log| {
                let xi = tape.constant(x.clone());
                let out = model.forward_tape(tape, store, xi, log)?;
                Ok(tape.weighted_sum(out.output, w.clone()))
            }, opts)
        }
        other => Err(Error::InvalidInput(format!("unknown module '{other}'; expected one of {}", MODULES.join(", ")))),
    }
}
