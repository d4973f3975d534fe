//! A small reverse-mode automatic differentiation tape over `f64` matrices.
//!
//! Every value on the tape is a 2-D matrix. Token sets are `N x C`, dense
//! feature maps are stored row-major as `(H*W) x C`. Operations are evaluated
//! eagerly when they are recorded; [`Tape::backward`] walks the record in
//! reverse and accumulates gradients for every node that depends on a
//! trainable leaf.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::error::{invalid, Result};
use crate::params::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const NO_TAP: u32 = u32::MAX;

/// Precomputed gather table for a 2-D convolution over a row-major map.
#[derive(Debug, Clone)]
pub struct ConvPlan {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    taps: Vec<u32>,
}

impl ConvPlan {
    pub fn new(in_h: usize, in_w: usize, kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return invalid("convolution kernel and stride must be positive");
        }
        if in_h + 2 * pad < kernel || in_w + 2 * pad < kernel {
            return invalid(format!(
                "kernel {kernel} larger than padded input {in_h}x{in_w} (pad {pad})"
            ));
        }
        let out_h = (in_h + 2 * pad - kernel) / stride + 1;
        let out_w = (in_w + 2 * pad - kernel) / stride + 1;
        let mut taps = Vec::with_capacity(out_h * out_w * kernel * kernel);
        for oy in 0..out_h {
            for ox in 0..out_w {
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let y = (oy * stride + ky) as isize - pad as isize;
                        let x = (ox * stride + kx) as isize - pad as isize;
                        if y < 0 || x < 0 || y >= in_h as isize || x >= in_w as isize {
                            taps.push(NO_TAP);
                        } else {
                            taps.push((y as usize * in_w + x as usize) as u32);
                        }
                    }
                }
            }
        }
        Ok(Self { in_h, in_w, out_h, out_w, kernel, stride, pad, taps })
    }

    pub fn in_pixels(&self) -> usize {
        self.in_h * self.in_w
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn taps_per_pixel(&self) -> usize {
        self.kernel * self.kernel
    }

    #[inline]
    fn taps_of(&self, p: usize) -> &[u32] {
        let k2 = self.taps_per_pixel();
        &self.taps[p * k2..(p + 1) * k2]
    }
}

/// Constant sparse matrix applied on the left of a dense matrix (`S * X`).
#[derive(Debug, Clone)]
pub struct SparseRows {
    n_cols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
}

impl SparseRows {
    /// Builds from per-row `(column, weight)` lists.
    pub fn from_rows(n_cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        row_ptr.push(0);
        for row in rows {
            for (c, w) in row {
                debug_assert!(c < n_cols);
                cols.push(c);
                weights.push(w);
            }
            row_ptr.push(cols.len());
        }
        Self { n_cols, row_ptr, cols, weights }
    }

    pub fn n_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[r]..self.row_ptr[r + 1];
        self.cols[range.clone()].iter().copied().zip(self.weights[range].iter().copied())
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Mat {
        let mut out = Mat::zeros((self.n_rows(), x.ncols()));
        for r in 0..self.n_rows() {
            let mut dst = out.row_mut(r);
            for (c, w) in self.row(r) {
                dst.scaled_add(w, &x.row(c));
            }
        }
        out
    }

    fn apply_transpose_into(&self, g: ArrayView2<f64>, out: &mut Mat) {
        for r in 0..self.n_rows() {
            let src = g.row(r);
            for (c, w) in self.row(r) {
                out.row_mut(c).scaled_add(w, &src);
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Transpose(Var),
    /// `a + r` with `r` a `1 x C` row broadcast over rows.
    AddRow(Var, Var),
    /// `a * r` with `r` a `1 x C` row broadcast over rows.
    MulRow(Var, Var),
    /// `a * c` with `c` an `N x 1` column broadcast over columns.
    MulCol(Var, Var),
    /// `a / c` with `c` an `N x 1` column broadcast over columns.
    DivCol(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `a + K` for a constant matrix `K`.
    AddConst(Var),
    Gelu(Var),
    Exp(Var),
    Ln(Var),
    /// Row-wise standardization; stores the reciprocal standard deviations.
    Standardize(Var, Vec<f64>),
    SoftmaxRows(Var),
    ColSlice(Var, usize),
    ConcatCols(Vec<Var>),
    Sparse(Var, Arc<SparseRows>),
    Im2Col(Var, Arc<ConvPlan>),
    Col2Im(Var, Arc<ConvPlan>),
    /// Depth-wise convolution: input map and `k*k x C` kernel.
    DwConv(Var, Var, Arc<ConvPlan>),
    Gather(Var, Arc<Vec<usize>>),
    SegmentSum(Var, Arc<Vec<usize>>),
    MeanRows(Var),
    /// `sum(a * W)` for a constant weight matrix `W`.
    WeightedSum(Var, Mat),
    /// `mean((a - T)^2)` for a constant target `T`.
    Mse(Var, Mat),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

const LN_EPS: f64 = 1e-5;

fn check_same(a: &Mat, b: &Mat, what: &str) {
    assert_eq!(a.dim(), b.dim(), "{what}: shape mismatch");
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (used for input-gradient checks).
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// The leaf for a trainable parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let trainable = store.is_trainable();
        let v = self.push(store.value(id).clone(), Op::Leaf, trainable);
        self.params.insert(id, v);
        v
    }

    /// Detaches a value: same numbers, no gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulBt(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        check_same(self.value(a), self.value(b), "add");
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        check_same(self.value(a), self.value(b), "sub");
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(row);
        assert!(r == 1 && c == self.shape(a).1, "add_row: expected 1x{}", self.shape(a).1);
        let value = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(row);
        assert!(r == 1 && c == self.shape(a).1, "mul_row: expected 1x{}", self.shape(a).1);
        let value = self.value(a) * self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::MulRow(a, row), rg)
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (r, c) = self.shape(col);
        assert!(c == 1 && r == self.shape(a).0, "mul_col: expected {}x1", self.shape(a).0);
        let value = self.value(a) * self.value(col);
        let rg = self.rg(a) || self.rg(col);
        self.push(value, Op::MulCol(a, col), rg)
    }

    pub fn div_col(&mut self, a: Var, col: Var) -> Var {
        let (r, c) = self.shape(col);
        assert!(c == 1 && r == self.shape(a).0, "div_col: expected {}x1", self.shape(a).0);
        let value = self.value(a) / self.value(col);
        let rg = self.rg(a) || self.rg(col);
        self.push(value, Op::DivCol(a, col), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        check_same(self.value(a), self.value(b), "mul");
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) * s;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn add_const(&mut self, a: Var, k: &Mat) -> Var {
        check_same(self.value(a), k, "add_const");
        let value = self.value(a) + k;
        let rg = self.rg(a);
        self.push(value, Op::AddConst(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        let rg = self.rg(a);
        self.push(value, Op::Ln(a), rg)
    }

    /// Zero-mean, unit-variance rows (the non-affine part of layer norm).
    pub fn standardize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = x.ncols() as f64;
        let mut out = x.clone();
        let mut rstd = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / c;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / c;
            let r = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| v * r);
            rstd.push(r);
        }
        let rg = self.rg(a);
        self.push(out, Op::Standardize(a, rstd), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    pub fn col_slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::ColSlice(a, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn sparse(&mut self, a: Var, m: Arc<SparseRows>) -> Var {
        assert_eq!(m.n_cols(), self.shape(a).0, "sparse: column/row mismatch");
        let value = m.apply(self.value(a).view());
        let rg = self.rg(a);
        self.push(value, Op::Sparse(a, m), rg)
    }

    /// `(in_pixels x C)` to `(out_pixels x k*k*C)`, tap-major columns.
    pub fn im2col(&mut self, a: Var, plan: Arc<ConvPlan>) -> Var {
        let x = self.value(a);
        assert_eq!(x.nrows(), plan.in_pixels(), "im2col: pixel count mismatch");
        let c = x.ncols();
        let k2 = plan.taps_per_pixel();
        let mut out = Mat::zeros((plan.out_pixels(), k2 * c));
        for p in 0..plan.out_pixels() {
            let mut row = out.row_mut(p);
            let dst = row.as_slice_mut().expect("contiguous");
            for (t, &src) in plan.taps_of(p).iter().enumerate() {
                if src != NO_TAP {
                    let s = x.row(src as usize);
                    dst[t * c..(t + 1) * c].copy_from_slice(s.as_slice().expect("contiguous"));
                }
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::Im2Col(a, plan), rg)
    }

    /// Adjoint of [`Tape::im2col`]: scatters `(out_pixels x k*k*C)` columns
    /// back onto the `(in_pixels x C)` grid, summing overlaps.
    pub fn col2im(&mut self, a: Var, plan: Arc<ConvPlan>) -> Var {
        let x = self.value(a);
        let k2 = plan.taps_per_pixel();
        assert_eq!(x.nrows(), plan.out_pixels(), "col2im: pixel count mismatch");
        assert_eq!(x.ncols() % k2, 0, "col2im: column count not a multiple of taps");
        let c = x.ncols() / k2;
        let out = col2im_raw(x.view(), &plan, c);
        let rg = self.rg(a);
        self.push(out, Op::Col2Im(a, plan), rg)
    }

    pub fn dwconv(&mut self, a: Var, kernel: Var, plan: Arc<ConvPlan>) -> Var {
        let x = self.value(a);
        let k = self.value(kernel);
        assert_eq!(x.nrows(), plan.in_pixels(), "dwconv: pixel count mismatch");
        assert_eq!(k.dim(), (plan.taps_per_pixel(), x.ncols()), "dwconv: kernel shape");
        let mut out = Mat::zeros((plan.out_pixels(), x.ncols()));
        for p in 0..plan.out_pixels() {
            let mut dst = out.row_mut(p);
            for (t, &src) in plan.taps_of(p).iter().enumerate() {
                if src != NO_TAP {
                    Zip::from(&mut dst)
                        .and(&x.row(src as usize))
                        .and(&k.row(t))
                        .for_each(|d, &xv, &kv| *d += xv * kv);
                }
            }
        }
        let rg = self.rg(a) || self.rg(kernel);
        self.push(out, Op::DwConv(a, kernel, plan), rg)
    }

    /// `out[i] = a[index[i]]`
    pub fn gather(&mut self, a: Var, index: Arc<Vec<usize>>) -> Var {
        let x = self.value(a);
        let mut out = Mat::zeros((index.len(), x.ncols()));
        for (i, &j) in index.iter().enumerate() {
            out.row_mut(i).assign(&x.row(j));
        }
        let rg = self.rg(a);
        self.push(out, Op::Gather(a, index), rg)
    }

    /// `out[segment[i]] += a[i]`, producing `segments` rows.
    pub fn segment_sum(&mut self, a: Var, segment: Arc<Vec<usize>>, segments: usize) -> Var {
        let x = self.value(a);
        assert_eq!(segment.len(), x.nrows(), "segment_sum: length mismatch");
        let mut out = Mat::zeros((segments, x.ncols()));
        for (i, &s) in segment.iter().enumerate() {
            let mut dst = out.row_mut(s);
            dst += &x.row(i);
        }
        let rg = self.rg(a);
        self.push(out, Op::SegmentSum(a, segment), rg)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).mean_axis(Axis(0)).expect("mean of empty").insert_axis(Axis(0));
        let rg = self.rg(a);
        self.push(value, Op::MeanRows(a), rg)
    }

    pub fn weighted_sum(&mut self, a: Var, weights: Mat) -> Var {
        check_same(self.value(a), &weights, "weighted_sum");
        let s = (self.value(a) * &weights).sum();
        let rg = self.rg(a);
        self.push(Mat::from_elem((1, 1), s), Op::WeightedSum(a, weights), rg)
    }

    pub fn mse(&mut self, a: Var, target: Mat) -> Var {
        check_same(self.value(a), &target, "mse");
        let x = self.value(a);
        let n = x.len().max(1) as f64;
        let s = Zip::from(x).and(&target).fold(0.0, |acc, &p, &t| acc + (p - t) * (p - t)) / n;
        let rg = self.rg(a);
        self.push(Mat::from_elem((1, 1), s), Op::Mse(a, target), rg)
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar: not a 1x1 node");
        m[[0, 0]]
    }

    /// Reverse pass from a `1 x 1` output.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.shape(out), (1, 1), "backward expects a scalar output");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Mat::from_elem((1, 1), 1.0));
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    /// Collects the gradient of every parameter leaf that received one.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Mat)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| grads.get(v).map(|g| (id, g.clone())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn backprop_node(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if want(*a) {
                    let ga = slot(grads, *a, val(*a).dim());
                    general_mat_mul(1.0, g, &val(*b).t(), 1.0, ga);
                }
                if want(*b) {
                    let gb = slot(grads, *b, val(*b).dim());
                    general_mat_mul(1.0, &val(*a).t(), g, 1.0, gb);
                }
            }
            Op::MatMulBt(a, b) => {
                if want(*a) {
                    let ga = slot(grads, *a, val(*a).dim());
                    general_mat_mul(1.0, g, val(*b), 1.0, ga);
                }
                if want(*b) {
                    let gb = slot(grads, *b, val(*b).dim());
                    general_mat_mul(1.0, &g.t(), val(*a), 1.0, gb);
                }
            }
            Op::Add(a, b) => {
                if want(*a) {
                    *slot(grads, *a, g.dim()) += g;
                }
                if want(*b) {
                    *slot(grads, *b, g.dim()) += g;
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    *slot(grads, *a, g.dim()) += g;
                }
                if want(*b) {
                    *slot(grads, *b, g.dim()) -= g;
                }
            }
            Op::Transpose(a) => {
                *slot(grads, *a, (g.ncols(), g.nrows())) += &g.t();
            }
            Op::AddRow(a, r) => {
                if want(*a) {
                    *slot(grads, *a, g.dim()) += g;
                }
                if want(*r) {
                    let s = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    *slot(grads, *r, s.dim()) += &s;
                }
            }
            Op::MulRow(a, r) => {
                if want(*a) {
                    *slot(grads, *a, g.dim()) += &(g * val(*r));
                }
                if want(*r) {
                    let s = (g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    *slot(grads, *r, s.dim()) += &s;
                }
            }
            Op::MulCol(a, c) => {
                if want(*a) {
                    *slot(grads, *a, g.dim()) += &(g * val(*c));
                }
                if want(*c) {
                    let s = (g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    *slot(grads, *c, s.dim()) += &s;
                }
            }
            Op::DivCol(a, c) => {
                let cv = val(*c);
                if want(*a) {
                    *slot(grads, *a, g.dim()) += &(g / cv);
                }
                if want(*c) {
                    // d(a/c)/dc = -a/c^2 = -out/c
                    let s = (g * &node.value).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let s = -(s / cv);
                    *slot(grads, *c, s.dim()) += &s;
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    *slot(grads, *a, g.dim()) += &(g * val(*b));
                }
                if want(*b) {
                    *slot(grads, *b, g.dim()) += &(g * val(*a));
                }
            }
            Op::Scale(a, s) => {
                slot(grads, *a, g.dim()).scaled_add(*s, g);
            }
            Op::AddConst(a) => {
                *slot(grads, *a, g.dim()) += g;
            }
            Op::Gelu(a) => {
                let d = Zip::from(g).and(val(*a)).map_collect(|&gv, &x| gv * gelu_grad(x));
                *slot(grads, *a, g.dim()) += &d;
            }
            Op::Exp(a) => {
                *slot(grads, *a, g.dim()) += &(g * &node.value);
            }
            Op::Ln(a) => {
                *slot(grads, *a, g.dim()) += &(g / val(*a));
            }
            Op::Standardize(a, rstd) => {
                let xhat = &node.value;
                let c = xhat.ncols() as f64;
                let ga = slot(grads, *a, g.dim());
                for (i, &r) in rstd.iter().enumerate() {
                    let gr = g.row(i);
                    let xr = xhat.row(i);
                    let mean_g = gr.sum() / c;
                    let mean_gx = gr.dot(&xr) / c;
                    Zip::from(ga.row_mut(i)).and(&gr).and(&xr).for_each(|d, &gv, &xv| {
                        *d += r * (gv - mean_g - xv * mean_gx);
                    });
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let ga = slot(grads, *a, g.dim());
                for i in 0..y.nrows() {
                    let dot = g.row(i).dot(&y.row(i));
                    Zip::from(ga.row_mut(i)).and(&g.row(i)).and(&y.row(i)).for_each(
                        |d, &gv, &yv| *d += yv * (gv - dot),
                    );
                }
            }
            Op::ColSlice(a, start) => {
                let dim = val(*a).dim();
                let ga = slot(grads, *a, dim);
                let mut view = ga.slice_mut(s![.., *start..*start + g.ncols()]);
                view += g;
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = val(p).ncols();
                    if want(p) {
                        let dim = val(p).dim();
                        *slot(grads, p, dim) += &g.slice(s![.., off..off + w]);
                    }
                    off += w;
                }
            }
            Op::Sparse(a, m) => {
                let dim = val(*a).dim();
                m.apply_transpose_into(g.view(), slot(grads, *a, dim));
            }
            Op::Im2Col(a, plan) => {
                let dim = val(*a).dim();
                let back = col2im_raw(g.view(), plan, dim.1);
                *slot(grads, *a, dim) += &back;
            }
            Op::Col2Im(a, plan) => {
                let dim = val(*a).dim();
                let c = g.ncols();
                let ga = slot(grads, *a, dim);
                for p in 0..plan.out_pixels() {
                    let mut row = ga.row_mut(p);
                    let dst = row.as_slice_mut().expect("contiguous");
                    for (t, &src) in plan.taps_of(p).iter().enumerate() {
                        if src != NO_TAP {
                            let s = g.row(src as usize);
                            for (d, v) in dst[t * c..(t + 1) * c].iter_mut().zip(s.iter()) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::DwConv(a, k, plan) => {
                let x = val(*a);
                let kv = val(*k);
                if want(*a) {
                    let ga = slot(grads, *a, x.dim());
                    for p in 0..plan.out_pixels() {
                        for (t, &src) in plan.taps_of(p).iter().enumerate() {
                            if src != NO_TAP {
                                Zip::from(ga.row_mut(src as usize))
                                    .and(&g.row(p))
                                    .and(&kv.row(t))
                                    .for_each(|d, &gv, &kk| *d += gv * kk);
                            }
                        }
                    }
                }
                if want(*k) {
                    let gk = slot(grads, *k, kv.dim());
                    for p in 0..plan.out_pixels() {
                        for (t, &src) in plan.taps_of(p).iter().enumerate() {
                            if src != NO_TAP {
                                Zip::from(gk.row_mut(t))
                                    .and(&g.row(p))
                                    .and(&x.row(src as usize))
                                    .for_each(|d, &gv, &xv| *d += gv * xv);
                            }
                        }
                    }
                }
            }
            Op::Gather(a, index) => {
                let dim = val(*a).dim();
                let ga = slot(grads, *a, dim);
                for (i, &j) in index.iter().enumerate() {
                    let mut dst = ga.row_mut(j);
                    dst += &g.row(i);
                }
            }
            Op::SegmentSum(a, segment) => {
                let dim = val(*a).dim();
                let ga = slot(grads, *a, dim);
                for (i, &sgm) in segment.iter().enumerate() {
                    let mut dst = ga.row_mut(i);
                    dst += &g.row(sgm);
                }
            }
            Op::MeanRows(a) => {
                let dim = val(*a).dim();
                let n = dim.0 as f64;
                let ga = slot(grads, *a, dim);
                let row = g.row(0).mapv(|v| v / n);
                for mut r in ga.rows_mut() {
                    r += &row;
                }
            }
            Op::WeightedSum(a, w) => {
                slot(grads, *a, w.dim()).scaled_add(g[[0, 0]], w);
            }
            Op::Mse(a, target) => {
                let x = val(*a);
                let scale = 2.0 * g[[0, 0]] / x.len().max(1) as f64;
                let ga = slot(grads, *a, x.dim());
                Zip::from(ga).and(x).and(target).for_each(|d, &p, &t| *d += scale * (p - t));
            }
        }
    }
}

fn slot(grads: &mut [Option<Mat>], v: Var, dim: (usize, usize)) -> &mut Mat {
    grads[v.0].get_or_insert_with(|| Mat::zeros(dim))
}

fn col2im_raw(x: ArrayView2<f64>, plan: &ConvPlan, c: usize) -> Mat {
    let mut out = Mat::zeros((plan.in_pixels(), c));
    for p in 0..plan.out_pixels() {
        let row = x.row(p);
        for (t, &src) in plan.taps_of(p).iter().enumerate() {
            if src != NO_TAP {
                let mut dst = out.row_mut(src as usize);
                dst += &row.slice(s![t * c..(t + 1) * c]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central-difference gradient of `f` with respect to every entry of `x`.
    fn numeric(x: &Mat, f: impl Fn(&Mat) -> f64) -> Mat {
        let eps = 1e-6;
        let mut g = Mat::zeros(x.dim());
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let mut p = x.clone();
                p[[i, j]] += eps;
                let mut m = x.clone();
                m[[i, j]] -= eps;
                g[[i, j]] = (f(&p) - f(&m)) / (2.0 * eps);
            }
        }
        g
    }

    fn assert_close(a: &Mat, b: &Mat, tol: f64) {
        let diff = (a - b).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        let scale = a.mapv(f64::abs).fold(1e-8f64, |m, &v| m.max(v));
        assert!(diff / scale < tol, "gradient mismatch: {diff} vs scale {scale}\n{a}\n{b}");
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Mat {
        Mat::from_shape_fn((rows, cols), |(i, j)| {
            let h = (i * 31 + j * 17 + seed as usize * 7) as f64;
            (h * 0.618).sin() + 0.1 * (h * 1.7).cos()
        })
    }

    /// Checks the gradient of `sum(W * build(x))` with respect to `x`.
    fn check_unary(x: Mat, build: impl Fn(&mut Tape, Var) -> Var) {
        let probe = {
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let o = build(&mut t, v);
            t.value(o).dim()
        };
        let w = sample(probe.0, probe.1, 99);
        let f = |m: &Mat| {
            let mut t = Tape::new();
            let v = t.constant(m.clone());
            let o = build(&mut t, v);
            (t.value(o) * &w).sum()
        };
        let mut t = Tape::new();
        let v = t.input(x.clone());
        let o = build(&mut t, v);
        let loss = t.weighted_sum(o, w.clone());
        let g = t.backward(loss);
        assert_close(g.get(v).unwrap(), &numeric(&x, f), 1e-6);
    }

    #[test]
    fn matmul_and_transposed_matmul() {
        let b = sample(4, 3, 2);
        check_unary(sample(5, 4, 1), |t, v| {
            let c = t.constant(b.clone());
            t.matmul(v, c)
        });
        let b2 = sample(6, 4, 3);
        check_unary(sample(5, 4, 1), |t, v| {
            let c = t.constant(b2.clone());
            t.matmul_bt(v, c)
        });
        check_unary(sample(6, 4, 1), |t, v| {
            let c = t.constant(sample(5, 4, 8));
            t.matmul_bt(c, v)
        });
    }

    #[test]
    fn pointwise_ops() {
        check_unary(sample(3, 5, 1), |t, v| t.gelu(v));
        check_unary(sample(3, 5, 1), |t, v| t.exp(v));
        check_unary(sample(3, 5, 1).mapv(|v| v.abs() + 0.5), |t, v| t.ln(v));
        check_unary(sample(3, 5, 1), |t, v| t.scale(v, -2.5));
        check_unary(sample(3, 5, 1), |t, v| t.mul(v, v));
    }

    #[test]
    fn normalization_and_softmax() {
        check_unary(sample(4, 6, 1), |t, v| t.standardize(v));
        check_unary(sample(4, 6, 1), |t, v| t.softmax_rows(v));
    }

    #[test]
    fn broadcast_ops() {
        check_unary(sample(1, 4, 1), |t, r| {
            let a = t.constant(sample(3, 4, 2));
            let x = t.add_row(a, r);
            t.mul_row(x, r)
        });
        check_unary(sample(3, 1, 1).mapv(|v| v + 2.0), |t, c| {
            let a = t.constant(sample(3, 4, 2));
            let x = t.mul_col(a, c);
            t.div_col(x, c)
        });
        check_unary(sample(3, 1, 1).mapv(|v| v + 2.0), |t, c| {
            let a = t.constant(sample(3, 4, 2));
            t.div_col(a, c)
        });
    }

    #[test]
    fn structural_ops() {
        check_unary(sample(3, 6, 1), |t, v| {
            let a = t.col_slice(v, 1, 3);
            let b = t.col_slice(v, 4, 2);
            t.concat_cols(&[b, a, b])
        });
        let idx = Arc::new(vec![2, 0, 0, 1, 2]);
        check_unary(sample(3, 2, 1), |t, v| t.gather(v, idx.clone()));
        let seg = Arc::new(vec![1, 0, 1, 1]);
        check_unary(sample(4, 2, 1), |t, v| t.segment_sum(v, seg.clone(), 2));
        check_unary(sample(4, 2, 1), |t, v| t.mean_rows(v));
        check_unary(sample(4, 3, 1), |t, v| t.transpose(v));
        let sp = Arc::new(SparseRows::from_rows(3, vec![vec![(0, 0.5), (2, 0.5)], vec![(1, 2.0)]]));
        check_unary(sample(3, 2, 1), |t, v| t.sparse(v, sp.clone()));
    }

    #[test]
    fn convolution_ops() {
        let plan = Arc::new(ConvPlan::new(5, 4, 3, 2, 1).unwrap());
        check_unary(sample(20, 2, 1), |t, v| t.im2col(v, plan.clone()));
        check_unary(sample(plan.out_pixels(), 18, 1), |t, v| t.col2im(v, plan.clone()));
        let plan1 = Arc::new(ConvPlan::new(4, 4, 3, 1, 1).unwrap());
        let k = sample(9, 3, 5);
        check_unary(sample(16, 3, 1), |t, v| {
            let kk = t.constant(k.clone());
            t.dwconv(v, kk, plan1.clone())
        });
        check_unary(k.clone(), |t, kk| {
            let x = t.constant(sample(16, 3, 1));
            t.dwconv(x, kk, plan1.clone())
        });
    }

    #[test]
    fn mse_gradient() {
        let target = sample(3, 3, 4);
        check_unary(sample(3, 3, 1), |t, v| t.mse(v, target.clone()));
    }

    #[test]
    fn conv_plan_geometry() {
        let p = ConvPlan::new(64, 64, 7, 4, 3).unwrap();
        assert_eq!((p.out_h, p.out_w), (16, 16));
        let p = ConvPlan::new(16, 16, 4, 4, 0).unwrap();
        assert_eq!((p.out_h, p.out_w), (4, 4));
        assert!(ConvPlan::new(2, 2, 5, 1, 0).is_err());
    }

    #[test]
    fn im2col_matches_direct_convolution() {
        // 1-channel 3x3 map, 2x2 kernel, stride 1, no padding.
        let x = array![[1.0], [2.0], [3.0], [4.0], [5.0], [6.0], [7.0], [8.0], [9.0]];
        let plan = Arc::new(ConvPlan::new(3, 3, 2, 1, 0).unwrap());
        let mut t = Tape::new();
        let v = t.constant(x);
        let cols = t.im2col(v, plan);
        let w = t.constant(array![[1.0], [0.0], [0.0], [-1.0]]);
        let out = t.matmul(cols, w);
        // x[y][x] - x[y+1][x+1] = -4 everywhere
        assert_eq!(t.value(out), &array![[-4.0], [-4.0], [-4.0], [-4.0]]);
    }

    #[test]
    fn constants_do_not_collect_gradients() {
        let mut t = Tape::new();
        let a = t.constant(sample(2, 2, 1));
        let b = t.input(sample(2, 2, 2));
        let c = t.mul(a, b);
        let s = t.weighted_sum(c, Mat::ones((2, 2)));
        let g = t.backward(s);
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap(), t.value(a));
    }
}
