//! Layer primitives recorded on an autograd [`Tape`].

use std::sync::Arc;

use crate::autograd::{ConvPlan, Tape, Var};
use crate::error::Result;
use crate::params::{Init, ParamId, ParamStore};

/// Standard deviation used for linear-layer weights.
pub const LINEAR_INIT_STD: f64 = 0.02;

/// Affine map `x W + b`, with `W` stored `in x out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let weight = store.declare(format!("{name}.weight"), (in_dim, out_dim), Init::TruncNormal(LINEAR_INIT_STD));
        let bias = bias.then(|| store.declare(format!("{name}.bias"), (1, out_dim), Init::Zeros));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn macs(&self, rows: usize) -> u64 {
        (rows * self.in_dim * self.out_dim) as u64
    }
}

/// Row-wise layer normalization with learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.declare(format!("{name}.weight"), (1, dim), Init::Ones);
        let beta = store.declare(format!("{name}.bias"), (1, dim), Init::Zeros);
        Self { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let z = tape.standardize(x);
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        let z = tape.mul_row(z, g);
        tape.add_row(z, b)
    }
}

/// Dense 2-D convolution over a row-major `(H*W) x C_in` map.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let fan_out = kernel * kernel * out_ch;
        let weight = store.declare(format!("{name}.weight"), (kernel * kernel * in_ch, out_ch), Init::FanOut(fan_out));
        let bias = bias.then(|| store.declare(format!("{name}.bias"), (1, out_ch), Init::Zeros));
        Self { weight, bias, in_ch, out_ch, kernel, stride, pad }
    }

    pub fn plan(&self, in_h: usize, in_w: usize) -> Result<ConvPlan> {
        ConvPlan::new(in_h, in_w, self.kernel, self.stride, self.pad)
    }

    /// Returns the output map and its `(height, width)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        in_hw: (usize, usize),
    ) -> Result<(Var, (usize, usize))> {
        let plan = Arc::new(self.plan(in_hw.0, in_hw.1)?);
        let out_hw = (plan.out_h, plan.out_w);
        let cols = tape.im2col(x, plan);
        let w = tape.param(store, self.weight);
        let mut y = tape.matmul(cols, w);
        if let Some(b) = self.bias {
            let b = tape.param(store, b);
            y = tape.add_row(y, b);
        }
        Ok((y, out_hw))
    }

    pub fn out_hw(&self, in_hw: (usize, usize)) -> (usize, usize) {
        let f = |n: usize| (n + 2 * self.pad - self.kernel) / self.stride + 1;
        (f(in_hw.0), f(in_hw.1))
    }

    pub fn macs(&self, in_hw: (usize, usize)) -> u64 {
        let (h, w) = self.out_hw(in_hw);
        (h * w * self.kernel * self.kernel * self.in_ch * self.out_ch) as u64
    }
}

/// Transposed convolution implemented as the adjoint of [`Conv2d`]'s gather.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let fan_out = kernel * kernel * out_ch;
        let weight = store.declare(format!("{name}.weight"), (in_ch, kernel * kernel * out_ch), Init::FanOut(fan_out));
        let bias = bias.then(|| store.declare(format!("{name}.bias"), (1, out_ch), Init::Zeros));
        Self { weight, bias, in_ch, out_ch, kernel, stride, pad }
    }

    pub fn out_hw(&self, in_hw: (usize, usize)) -> (usize, usize) {
        let f = |n: usize| (n - 1) * self.stride + self.kernel - 2 * self.pad;
        (f(in_hw.0), f(in_hw.1))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        in_hw: (usize, usize),
    ) -> Result<(Var, (usize, usize))> {
        let out_hw = self.out_hw(in_hw);
        // The forward convolution this layer is the transpose of.
        let plan = Arc::new(ConvPlan::new(out_hw.0, out_hw.1, self.kernel, self.stride, self.pad)?);
        debug_assert_eq!((plan.out_h, plan.out_w), in_hw);
        let w = tape.param(store, self.weight);
        let cols = tape.matmul(x, w);
        let mut y = tape.col2im(cols, plan);
        if let Some(b) = self.bias {
            let b = tape.param(store, b);
            y = tape.add_row(y, b);
        }
        Ok((y, out_hw))
    }

    pub fn macs(&self, in_hw: (usize, usize)) -> u64 {
        (in_hw.0 * in_hw.1 * self.in_ch * self.kernel * self.kernel * self.out_ch) as u64
    }
}

/// Depth-wise convolution with a per-channel bias.
#[derive(Debug, Clone)]
pub struct DwConv {
    pub kernel_weights: ParamId,
    pub bias: ParamId,
    pub channels: usize,
    pub kernel: usize,
}

impl DwConv {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, kernel: usize) -> Self {
        // groups == channels, so fan-out is k*k per filter.
        let kernel_weights = store.declare(format!("{name}.weight"), (kernel * kernel, channels), Init::FanOut(kernel * kernel));
        let bias = store.declare(format!("{name}.bias"), (1, channels), Init::Zeros);
        Self { kernel_weights, bias, channels, kernel }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, hw: (usize, usize)) -> Result<Var> {
        let plan = Arc::new(ConvPlan::new(hw.0, hw.1, self.kernel, 1, self.kernel / 2)?);
        let k = tape.param(store, self.kernel_weights);
        let y = tape.dwconv(x, k, plan);
        let b = tape.param(store, self.bias);
        Ok(tape.add_row(y, b))
    }

    pub fn macs(&self, hw: (usize, usize)) -> u64 {
        (hw.0 * hw.1 * self.kernel * self.kernel * self.channels) as u64
    }
}
