//! Heatmap regression training with AdamW.
//!
//! Each step averages per-sample gradients over a batch. Per-sample forward
//! and backward passes run data-parallel on their own tapes; gradients are
//! summed in sample order, so the trajectory is bitwise reproducible for any
//! thread count. Batches walk the dataset in a fixed order.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape};
use crate::ctm::AssignmentLog;
use crate::error::{Error, Result};
use crate::exec::{map_slice, Exec};
use crate::harness::dataset::SyntheticSample;
use crate::model::{HeadKind, Model};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub warmup_steps: usize,
    /// Final learning rate as a fraction of the peak.
    pub min_lr_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 2e-3,
            weight_decay: 0.05,
            batch_size: 20,
            warmup_steps: 25,
            min_lr_fraction: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.weight_decay >= 0.0 && self.eps > 0.0) {
            return Err(Error::InvalidConfig("learning rate, weight decay and eps must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Linear warmup, then cosine decay to `min_lr_fraction` of the peak.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let t = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let floor = self.learning_rate * self.min_lr_fraction;
        floor + (self.learning_rate - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Decoupled-weight-decay Adam state.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: i32,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.entries().iter().map(|e| Mat::zeros(e.value.dim())).collect();
        Self { m: zeros(), v: zeros(), t: 0 }
    }

    /// One update. Weight decay applies to matrices only (not to norm
    /// scales or biases, which are stored as single rows).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Mat)], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for (id, g) in grads {
            let i = id.index();
            let decay = store.entries()[i].shape.0 > 1;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            ndarray::Zip::from(&mut *m).and(&mut *v).and(g).for_each(|m, v, &g| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            });
            let p = store.value_mut(*id);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                if decay {
                    *p -= lr * cfg.weight_decay * *p;
                }
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
            });
        }
    }
}

/// Loss and parameter gradients of one sample.
pub fn sample_gradient(model: &Model, store: &ParamStore, sample: &SyntheticSample) -> Result<(f64, Vec<(ParamId, Mat)>)> {
    let mut tape = Tape::new();
    let x = tape.constant(sample.image.data.clone());
    let out = model.forward_tape(&mut tape, store, x, &mut AssignmentLog::recording())?;
    let loss = tape.mse(out.output, sample.heatmaps.data.clone());
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }
    let grads = tape.backward(loss);
    Ok((value, tape.param_grads(&grads)))
}

/// Mean loss and summed-then-averaged gradients over a batch.
pub fn batch_gradient(
    model: &Model,
    store: &ParamStore,
    batch: &[SyntheticSample],
    exec: Exec,
) -> Result<(f64, Vec<(ParamId, Mat)>)> {
    let per_sample = map_slice(exec, batch, |s| sample_gradient(model, store, s));
    let mut total = 0.0;
    let mut acc: Vec<Option<Mat>> = vec![None; store.len()];
    for r in per_sample {
        let (loss, grads) = r?;
        total += loss;
        for (id, g) in grads {
            match &mut acc[id.index()] {
                Some(a) => *a += &g,
                slot => *slot = Some(g),
            }
        }
    }
    let n = batch.len() as f64;
    let grads = store.ids().zip(acc).filter_map(|(id, g)| g.map(|g| (id, g / n))).collect();
    Ok((total / n, grads))
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean batch loss of every step.
    pub losses: Vec<f64>,
    pub elapsed: Duration,
}

impl TrainReport {
    /// Trailing moving average over `window` steps (defined once `window`
    /// losses exist).
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        moving_average(&self.losses, window)
    }
}

pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(values.len() - window + 1);
    let mut sum: f64 = values[..window].iter().sum();
    out.push(sum / window as f64);
    for i in window..values.len() {
        sum += values[i] - values[i - window];
        out.push(sum / window as f64);
    }
    out
}

/// Trains `store` in place. `on_step(step, loss)` is called after every
/// update. With gradients disabled on the store, parameters never change.
pub fn train(
    model: &Model,
    store: &mut ParamStore,
    data: &[SyntheticSample],
    cfg: &TrainConfig,
    exec: Exec,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    cfg.validate()?;
    if model.cfg.head == HeadKind::Classification {
        return Err(Error::InvalidConfig("heatmap training needs a dense head".into()));
    }
    if data.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let started = Instant::now();
    let mut opt = AdamW::new(store);
    let mut losses = Vec::with_capacity(cfg.steps);
    let b = cfg.batch_size.min(data.len());
    let mut cursor = 0;
    let mut batch = Vec::with_capacity(b);
    for step in 0..cfg.steps {
        batch.clear();
        for _ in 0..b {
            batch.push(data[cursor].clone());
            cursor = (cursor + 1) % data.len();
        }
        let (loss, grads) = batch_gradient(model, store, &batch, exec).map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("step {step}: {msg} (last loss {:?})", losses.last())),
            e => e,
        })?;
        if store.is_trainable() {
            opt.step(store, &grads, cfg.learning_rate_at(step), cfg);
        }
        losses.push(loss);
        on_step(step, loss);
    }
    Ok(TrainReport { losses, elapsed: started.elapsed() })
}
