//! Reverse-mode differentiation on an operation tape.
//!
//! A [`Graph`] is a define-by-run tape: every op executes eagerly, records its
//! parents, and keeps its output buffer. [`Graph::backward`] replays the tape
//! once in reverse topological order (node ids are creation-ordered, so the
//! reverse id scan is a valid topological order) and accumulates leaf
//! gradients into a [`ParamSet`]. A graph lives on one logical thread;
//! parallelism exists only inside the convolution kernels, split so results
//! are bitwise independent of worker count.
//!
//! Conventions: row-major layout, volumes `[channels, depth, height, width]`,
//! broadcasting only between a tensor and a one-element scalar node (wider
//! broadcasts are explicit ops such as [`Graph::add_channel_bias`]).

mod conv;
pub mod check;

pub(crate) use conv::ConvDims;

use crate::error::{shape_err, CloeError, Result};
use crate::param::{ParamId, ParamSet};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Deliberate gradient corruption for negative-control tests of the
/// finite-difference checker. [`GradBug::ConvKernelScale`] multiplies every
/// convolution kernel gradient by the given factor during backward.
#[derive(Clone, Copy, Debug)]
pub enum GradBug {
    ConvKernelScale(f64),
}

enum Op {
    Const,
    Leaf(ParamId),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Abs(usize),
    Softplus(usize),
    ClampMin(usize, f64),
    SumAll(usize),
    ReduceSum { x: usize, axes: Vec<usize> },
    ChannelSoftmax(usize),
    Conv3 { x: usize, k: usize, dims: ConvDims },
    AddChannelBias { x: usize, b: usize },
    MulChannelBroadcast { x: usize, r: usize },
    UpsampleNearest2(usize),
    ConcatChannels(usize, usize),
    ChannelSlice { x: usize, c0: usize, len: usize },
    SelectClass { p: usize, labels: Vec<u32> },
    Linear { x: usize, w: usize, b: usize },
    BoxFilter3(usize),
    Reshape(usize),
}

struct Node<T> {
    data: Vec<T>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grad_bug: Option<GradBug>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grad_bug: None }
    }

    /// Graph whose backward pass applies the given corruption.
    pub fn with_grad_bug(bug: GradBug) -> Self {
        Graph { nodes: Vec::new(), grad_bug: Some(bug) }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, data: Vec<T>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { data, shape, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn wants(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    // ── node access ─────────────────────────────────────────────────────

    pub fn data(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].data.len()
    }

    /// Value of a one-element node.
    pub fn value(&self, v: Var) -> T {
        debug_assert_eq!(self.numel(v), 1, "value() requires a scalar node");
        self.nodes[v.0].data[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(&self.nodes[v.0].shape, self.nodes[v.0].data.clone()).expect("node invariant")
    }

    // ── leaves ──────────────────────────────────────────────────────────

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let (shape, data) = t.into_parts();
        self.push(data, shape, Op::Const, false)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        Ok(self.constant(Tensor::new(shape, data)?))
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(vec![T::from_f64(v)], vec![1], Op::Const, false)
    }

    /// Trainable leaf: copies the parameter's current data onto the tape.
    pub fn leaf(&mut self, params: &ParamSet<T>, id: ParamId) -> Var {
        let e = params.get(id);
        self.push(e.data.clone(), e.shape.clone(), Op::Leaf(id), true)
    }

    // ── elementwise ─────────────────────────────────────────────────────

    fn binary_shapes(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb && self.numel(b) != 1 {
            return Err(shape_err(format!("{op}: shapes {sa:?} vs {sb:?} (b must match or be scalar)")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = if self.numel(a) == 1 && self.numel(b) != 1 { (b, a) } else { (a, b) };
        self.binary_shapes(a, b, "add")?;
        let data = if self.numel(b) == 1 {
            let s = self.nodes[b.0].data[0];
            self.nodes[a.0].data.iter().map(|&x| x + s).collect()
        } else {
            zip(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x + y)
        };
        let ng = self.wants(a.0) || self.wants(b.0);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(data, shape, Op::Add(a.0, b.0), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes(a, b, "sub")?;
        let data = if self.numel(b) == 1 {
            let s = self.nodes[b.0].data[0];
            self.nodes[a.0].data.iter().map(|&x| x - s).collect()
        } else {
            zip(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x - y)
        };
        let ng = self.wants(a.0) || self.wants(b.0);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(data, shape, Op::Sub(a.0, b.0), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = if self.numel(a) == 1 && self.numel(b) != 1 { (b, a) } else { (a, b) };
        self.binary_shapes(a, b, "mul")?;
        let data = if self.numel(b) == 1 {
            let s = self.nodes[b.0].data[0];
            self.nodes[a.0].data.iter().map(|&x| x * s).collect()
        } else {
            zip(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x * y)
        };
        let ng = self.wants(a.0) || self.wants(b.0);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(data, shape, Op::Mul(a.0, b.0), ng))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes(a, b, "div")?;
        let data = if self.numel(b) == 1 {
            let s = self.nodes[b.0].data[0];
            self.nodes[a.0].data.iter().map(|&x| x / s).collect()
        } else {
            zip(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x / y)
        };
        let ng = self.wants(a.0) || self.wants(b.0);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(data, shape, Op::Div(a.0, b.0), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cc = T::from_f64(c);
        let data = self.nodes[a.0].data.iter().map(|&x| x * cc).collect();
        let ng = self.wants(a.0);
        let shape = self.nodes[a.0].shape.clone();
        self.push(data, shape, Op::Scale(a.0, c), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let cc = T::from_f64(c);
        let data = self.nodes[a.0].data.iter().map(|&x| x + cc).collect();
        let ng = self.wants(a.0);
        let shape = self.nodes[a.0].shape.clone();
        self.push(data, shape, Op::AddConst(a.0), ng)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(T) -> T) -> Var {
        let data = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        let ng = self.wants(a.0);
        let shape = self.nodes[a.0].shape.clone();
        self.push(data, shape, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a.0), |x| x.maxv(T::ZERO))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a.0), |x| x.sigmoid())
    }

    /// exp with inputs clamped to ±30 (saturation exact in f32 at that range).
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a.0), |x| x.exp_clamped())
    }

    /// Natural log; callers clamp inputs away from zero first.
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a.0), |x| x.ln())
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a.0), |x| x.sqrt())
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a.0), |x| x.abs())
    }

    /// ln(1 + e^x), evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a.0), |x| {
            x.maxv(T::ZERO) + (T::ONE + (-x.abs()).exp()).ln()
        })
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let l = T::from_f64(lo);
        self.unary(a, Op::ClampMin(a.0, lo), |x| x.maxv(l))
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: T = self.nodes[a.0].data.iter().copied().sum();
        let ng = self.wants(a.0);
        self.push(vec![s], vec![1], Op::SumAll(a.0), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.numel(a);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over the given axes; reduced axes are dropped from the shape
    /// (a full reduction yields shape `[1]`).
    pub fn reduce_sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let rank = shape.len();
        let mut ax: Vec<usize> = axes.to_vec();
        ax.sort_unstable();
        ax.dedup();
        if ax.iter().any(|&x| x >= rank) {
            return Err(shape_err(format!("reduce_sum: axes {ax:?} out of range for rank {rank}")));
        }
        if ax.len() == rank {
            return Ok(self.sum_all(a));
        }
        let out_shape: Vec<usize> =
            (0..rank).filter(|i| !ax.contains(i)).map(|i| shape[i]).collect();
        let out_numel: usize = out_shape.iter().product();
        let mut out = vec![T::ZERO; out_numel];
        let map = ReduceMap::new(&shape, &ax);
        for (i, &v) in self.nodes[a.0].data.iter().enumerate() {
            out[map.out_index(i)] += v;
        }
        let ng = self.wants(a.0);
        Ok(self.push(out, out_shape, Op::ReduceSum { x: a.0, axes: ax }, ng))
    }

    pub fn reduce_mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let mut count = 1usize;
        for &ax in axes {
            count *= shape.get(ax).copied().unwrap_or(1);
        }
        let s = self.reduce_sum(a, axes)?;
        Ok(self.scale(s, 1.0 / count.max(1) as f64))
    }

    /// Euclidean norm of the flattened tensor: sqrt(sum(a*a)). Zero input
    /// yields zero with a zero (not NaN) gradient.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let sq = self.mul(a, a)?;
        let s = self.sum_all(sq);
        Ok(self.sqrt(s))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("dot: shape mismatch"));
        }
        let m = self.mul(a, b)?;
        Ok(self.sum_all(m))
    }

    // ── structured ops ──────────────────────────────────────────────────

    /// Softmax over axis 0 at every trailing position (the class axis of a
    /// `[C, D, H, W]` probability volume). Max-subtracted before exp.
    pub fn channel_softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        if shape.is_empty() || shape[0] == 0 {
            return Err(shape_err("channel_softmax: needs a class axis"));
        }
        let c = shape[0];
        let spatial = self.numel(a) / c;
        let x = &self.nodes[a.0].data;
        let mut out = vec![T::ZERO; x.len()];
        for v in 0..spatial {
            let mut m = x[v];
            for ch in 1..c {
                m = m.maxv(x[ch * spatial + v]);
            }
            let mut denom = T::ZERO;
            for ch in 0..c {
                let e = (x[ch * spatial + v] - m).exp_clamped();
                out[ch * spatial + v] = e;
                denom += e;
            }
            for ch in 0..c {
                out[ch * spatial + v] /= denom;
            }
        }
        let ng = self.wants(a.0);
        Ok(self.push(out, shape, Op::ChannelSoftmax(a.0), ng))
    }

    /// 3-D cross-correlation: input `[C_in, D, H, W]`, kernel
    /// `[C_out, C_in, k, k, k]`, zero padding. Bias is a separate op.
    pub fn conv3(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let dims = ConvDims::infer(self.shape(x), self.shape(k), stride, pad)?;
        let out = conv::forward(&self.nodes[x.0].data, &self.nodes[k.0].data, &dims);
        let shape = vec![dims.c_out, dims.od, dims.oh, dims.ow];
        let ng = self.wants(x.0) || self.wants(k.0);
        Ok(self.push(out, shape, Op::Conv3 { x: x.0, k: k.0, dims }, ng))
    }

    /// `x[c, ...] + b[c]` for `x: [C, ...]`, `b: [C]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let c = *shape.first().ok_or_else(|| shape_err("add_channel_bias: rank 0"))?;
        if self.shape(b) != [c] {
            return Err(shape_err(format!(
                "add_channel_bias: bias {:?} does not match channels {c}",
                self.shape(b)
            )));
        }
        let spatial = self.numel(x) / c;
        let mut out = self.nodes[x.0].data.clone();
        for ch in 0..c {
            let bv = self.nodes[b.0].data[ch];
            for v in &mut out[ch * spatial..(ch + 1) * spatial] {
                *v += bv;
            }
        }
        let ng = self.wants(x.0) || self.wants(b.0);
        Ok(self.push(out, shape, Op::AddChannelBias { x: x.0, b: b.0 }, ng))
    }

    /// `x[c, v] * r[v]` for `x: [C, D, H, W]` and a single-channel map `r`
    /// broadcast across the class axis.
    pub fn mul_channel_broadcast(&mut self, x: Var, r: Var) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let c = *shape.first().ok_or_else(|| shape_err("mul_channel_broadcast: rank 0"))?;
        let spatial = self.numel(x) / c;
        if self.numel(r) != spatial {
            return Err(shape_err(format!(
                "mul_channel_broadcast: map has {} elements, spatial size is {spatial}",
                self.numel(r)
            )));
        }
        let mut out = vec![T::ZERO; self.numel(x)];
        for ch in 0..c {
            let xs = &self.nodes[x.0].data[ch * spatial..(ch + 1) * spatial];
            let rs = &self.nodes[r.0].data;
            for ((o, &xv), &rv) in out[ch * spatial..(ch + 1) * spatial].iter_mut().zip(xs).zip(rs)
            {
                *o = xv * rv;
            }
        }
        let ng = self.wants(x.0) || self.wants(r.0);
        Ok(self.push(out, shape, Op::MulChannelBroadcast { x: x.0, r: r.0 }, ng))
    }

    /// Nearest-neighbour 2x upsampling of every spatial axis.
    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].shape.clone();
        if s.len() != 4 {
            return Err(shape_err("upsample_nearest2: expected [C, D, H, W]"));
        }
        let out = conv::upsample2_forward(&self.nodes[x.0].data, &s);
        let shape = vec![s[0], s[1] * 2, s[2] * 2, s[3] * 2];
        let ng = self.wants(x.0);
        Ok(self.push(out, shape, Op::UpsampleNearest2(x.0), ng))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.nodes[a.0].shape.clone(), self.nodes[b.0].shape.clone());
        if sa.len() != sb.len() || sa.is_empty() || sa[1..] != sb[1..] {
            return Err(shape_err(format!("concat_channels: {sa:?} vs {sb:?}")));
        }
        let mut data = Vec::with_capacity(self.numel(a) + self.numel(b));
        data.extend_from_slice(&self.nodes[a.0].data);
        data.extend_from_slice(&self.nodes[b.0].data);
        let mut shape = sa.clone();
        shape[0] = sa[0] + sb[0];
        let ng = self.wants(a.0) || self.wants(b.0);
        Ok(self.push(data, shape, Op::ConcatChannels(a.0, b.0), ng))
    }

    pub fn channel_slice(&mut self, x: Var, c0: usize, len: usize) -> Result<Var> {
        let s = self.nodes[x.0].shape.clone();
        let c = *s.first().ok_or_else(|| shape_err("channel_slice: rank 0"))?;
        if c0 + len > c {
            return Err(shape_err(format!("channel_slice: [{c0}, {}) out of {c}", c0 + len)));
        }
        let spatial = self.numel(x) / c;
        let data = self.nodes[x.0].data[c0 * spatial..(c0 + len) * spatial].to_vec();
        let mut shape = s.clone();
        shape[0] = len;
        let ng = self.wants(x.0);
        Ok(self.push(data, shape, Op::ChannelSlice { x: x.0, c0, len }, ng))
    }

    /// Per-voxel gather of the probability assigned to the true class:
    /// `out[v] = p[labels[v], v]` for `p: [C, D, H, W]`.
    pub fn select_class(&mut self, p: Var, labels: &[u8]) -> Result<Var> {
        let s = self.nodes[p.0].shape.clone();
        let c = *s.first().ok_or_else(|| shape_err("select_class: rank 0"))?;
        let spatial = self.numel(p) / c;
        if labels.len() != spatial {
            return Err(shape_err(format!(
                "select_class: {} labels for {spatial} voxels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
            return Err(shape_err(format!("select_class: label {bad} >= classes {c}")));
        }
        let mut out = vec![T::ZERO; spatial];
        for (v, (&l, o)) in labels.iter().zip(out.iter_mut()).enumerate() {
            *o = self.nodes[p.0].data[l as usize * spatial + v];
        }
        let shape = s[1..].to_vec();
        let ng = self.wants(p.0);
        Ok(self.push(
            out,
            shape,
            Op::SelectClass { p: p.0, labels: labels.iter().map(|&l| l as u32).collect() },
            ng,
        ))
    }

    /// Dense affine map `w x + b` with `x: [d_in]`, `w: [d_out, d_in]`, `b: [d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 1 || sw.len() != 2 || sb.len() != 1 || sw[1] != sx[0] || sw[0] != sb[0] {
            return Err(shape_err(format!("linear: x {sx:?}, w {sw:?}, b {sb:?}")));
        }
        let (d_out, d_in) = (sw[0], sw[1]);
        let mut out = vec![T::ZERO; d_out];
        for o in 0..d_out {
            let row = &self.nodes[w.0].data[o * d_in..(o + 1) * d_in];
            let mut acc = self.nodes[b.0].data[o];
            for (wv, xv) in row.iter().zip(&self.nodes[x.0].data) {
                acc += *wv * *xv;
            }
            out[o] = acc;
        }
        let ng = self.wants(x.0) || self.wants(w.0) || self.wants(b.0);
        Ok(self.push(out, vec![d_out], Op::Linear { x: x.0, w: w.0, b: b.0 }, ng))
    }

    /// Mean over 3x3x3 windows, valid positions only: `[C, D, H, W]` →
    /// `[C, D-2, H-2, W-2]`.
    pub fn box_filter3(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].shape.clone();
        if s.len() != 4 || s[1] < 3 || s[2] < 3 || s[3] < 3 {
            return Err(shape_err(format!("box_filter3: shape {s:?} too small")));
        }
        let out = conv::box3_forward(&self.nodes[x.0].data, &s);
        let shape = vec![s[0], s[1] - 2, s[2] - 2, s[3] - 2];
        let ng = self.wants(x.0);
        Ok(self.push(out, shape, Op::BoxFilter3(x.0), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.numel(x) {
            return Err(shape_err(format!(
                "reshape: {} elements into {shape:?}",
                self.numel(x)
            )));
        }
        let data = self.nodes[x.0].data.clone();
        let ng = self.wants(x.0);
        Ok(self.push(data, shape.to_vec(), Op::Reshape(x.0), ng))
    }

    pub fn flatten(&mut self, x: Var) -> Var {
        let n = self.numel(x);
        self.reshape(x, &[n]).expect("flatten preserves element count")
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Visits each tape entry once and adds
    /// leaf gradients into `params` (accumulating across repeated calls).
    pub fn backward(&mut self, loss: Var, params: &mut ParamSet<T>) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(CloeError::Numerical(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf(pid) = self.nodes[id].op {
                params.accumulate_grad(pid, &g);
                continue;
            }
            self.backward_op(id, &g, &mut grads);
        }
        Ok(())
    }

    fn backward_op(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &self.nodes[id].op {
            Op::Const | Op::Leaf(_) => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accum(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    if self.nodes[*b].data.len() == 1 {
                        accum(grads, *b, vec![g.iter().copied().sum()]);
                    } else {
                        accum(grads, *b, g.to_vec());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accum(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    if self.nodes[*b].data.len() == 1 {
                        accum(grads, *b, vec![-g.iter().copied().sum::<T>()]);
                    } else {
                        accum(grads, *b, g.iter().map(|&v| -v).collect());
                    }
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (&self.nodes[*a].data, &self.nodes[*b].data);
                if self.wants(*a) {
                    let ga = if db.len() == 1 {
                        let s = db[0];
                        g.iter().map(|&v| v * s).collect()
                    } else {
                        zip(g, db, |x, y| x * y)
                    };
                    accum(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = if db.len() == 1 {
                        vec![g.iter().zip(da).map(|(&gv, &av)| gv * av).sum()]
                    } else {
                        zip(g, da, |x, y| x * y)
                    };
                    accum(grads, *b, gb);
                }
            }
            Op::Div(a, b) => {
                let (da, db) = (&self.nodes[*a].data, &self.nodes[*b].data);
                if self.wants(*a) {
                    let ga = if db.len() == 1 {
                        let inv = T::ONE / db[0];
                        g.iter().map(|&v| v * inv).collect()
                    } else {
                        zip(g, db, |x, y| x / y)
                    };
                    accum(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = if db.len() == 1 {
                        let inv2 = T::ONE / (db[0] * db[0]);
                        vec![-g.iter().zip(da).map(|(&gv, &av)| gv * av).sum::<T>() * inv2]
                    } else {
                        let mut out = vec![T::ZERO; db.len()];
                        for i in 0..db.len() {
                            out[i] = -g[i] * da[i] / (db[i] * db[i]);
                        }
                        out
                    };
                    accum(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    let cc = T::from_f64(*c);
                    accum(grads, *a, g.iter().map(|&v| v * cc).collect());
                }
            }
            Op::AddConst(a) => {
                if self.wants(*a) {
                    accum(grads, *a, g.to_vec());
                }
            }
            Op::Relu(a) => {
                if self.wants(*a) {
                    let x = &self.nodes[*a].data;
                    accum(
                        grads,
                        *a,
                        g.iter()
                            .zip(x)
                            .map(|(&gv, &xv)| if xv > T::ZERO { gv } else { T::ZERO })
                            .collect(),
                    );
                }
            }
            Op::Sigmoid(a) => {
                if self.wants(*a) {
                    let y = &self.nodes[id].data;
                    accum(grads, *a, g.iter().zip(y).map(|(&gv, &yv)| gv * yv * (T::ONE - yv)).collect());
                }
            }
            Op::Exp(a) => {
                if self.wants(*a) {
                    let y = &self.nodes[id].data;
                    accum(grads, *a, zip(g, y, |x, y| x * y));
                }
            }
            Op::Log(a) => {
                if self.wants(*a) {
                    let x = &self.nodes[*a].data;
                    accum(grads, *a, zip(g, x, |gv, xv| gv / xv));
                }
            }
            Op::Sqrt(a) => {
                if self.wants(*a) {
                    let y = &self.nodes[id].data;
                    let half = T::from_f64(0.5);
                    accum(
                        grads,
                        *a,
                        g.iter()
                            .zip(y)
                            .map(|(&gv, &yv)| if yv > T::ZERO { gv * half / yv } else { T::ZERO })
                            .collect(),
                    );
                }
            }
            Op::Abs(a) => {
                if self.wants(*a) {
                    let x = &self.nodes[*a].data;
                    accum(
                        grads,
                        *a,
                        g.iter()
                            .zip(x)
                            .map(|(&gv, &xv)| {
                                if xv > T::ZERO {
                                    gv
                                } else if xv < T::ZERO {
                                    -gv
                                } else {
                                    T::ZERO
                                }
                            })
                            .collect(),
                    );
                }
            }
            Op::Softplus(a) => {
                if self.wants(*a) {
                    let x = &self.nodes[*a].data;
                    accum(grads, *a, g.iter().zip(x).map(|(&gv, &xv)| gv * xv.sigmoid()).collect());
                }
            }
            Op::ClampMin(a, lo) => {
                if self.wants(*a) {
                    let l = T::from_f64(*lo);
                    let x = &self.nodes[*a].data;
                    accum(
                        grads,
                        *a,
                        g.iter()
                            .zip(x)
                            .map(|(&gv, &xv)| if xv > l { gv } else { T::ZERO })
                            .collect(),
                    );
                }
            }
            Op::SumAll(a) => {
                if self.wants(*a) {
                    accum(grads, *a, vec![g[0]; self.nodes[*a].data.len()]);
                }
            }
            Op::ReduceSum { x, axes } => {
                if self.wants(*x) {
                    let shape = &self.nodes[*x].shape;
                    let map = ReduceMap::new(shape, axes);
                    let mut out = vec![T::ZERO; self.nodes[*x].data.len()];
                    for (i, o) in out.iter_mut().enumerate() {
                        *o = g[map.out_index(i)];
                    }
                    accum(grads, *x, out);
                }
            }
            Op::ChannelSoftmax(a) => {
                if self.wants(*a) {
                    let y = &self.nodes[id].data;
                    let c = self.nodes[id].shape[0];
                    let spatial = y.len() / c;
                    let mut out = vec![T::ZERO; y.len()];
                    for v in 0..spatial {
                        let mut dot = T::ZERO;
                        for ch in 0..c {
                            dot += g[ch * spatial + v] * y[ch * spatial + v];
                        }
                        for ch in 0..c {
                            let i = ch * spatial + v;
                            out[i] = y[i] * (g[i] - dot);
                        }
                    }
                    accum(grads, *a, out);
                }
            }
            Op::Conv3 { x, k, dims } => {
                if self.wants(*x) {
                    accum(grads, *x, conv::backward_input(g, &self.nodes[*k].data, dims));
                }
                if self.wants(*k) {
                    let mut dk = conv::backward_kernel(g, &self.nodes[*x].data, dims);
                    if let Some(GradBug::ConvKernelScale(f)) = self.grad_bug {
                        let fc = T::from_f64(f);
                        for v in &mut dk {
                            *v *= fc;
                        }
                    }
                    accum(grads, *k, dk);
                }
            }
            Op::AddChannelBias { x, b } => {
                let c = self.nodes[*b].data.len();
                let spatial = g.len() / c;
                if self.wants(*x) {
                    accum(grads, *x, g.to_vec());
                }
                if self.wants(*b) {
                    let mut db = vec![T::ZERO; c];
                    for ch in 0..c {
                        db[ch] = g[ch * spatial..(ch + 1) * spatial].iter().copied().sum();
                    }
                    accum(grads, *b, db);
                }
            }
            Op::MulChannelBroadcast { x, r } => {
                let spatial = self.nodes[*r].data.len();
                let c = g.len() / spatial;
                if self.wants(*x) {
                    let rv = &self.nodes[*r].data;
                    let mut dx = vec![T::ZERO; g.len()];
                    for ch in 0..c {
                        for v in 0..spatial {
                            dx[ch * spatial + v] = g[ch * spatial + v] * rv[v];
                        }
                    }
                    accum(grads, *x, dx);
                }
                if self.wants(*r) {
                    let xv = &self.nodes[*x].data;
                    let mut dr = vec![T::ZERO; spatial];
                    for ch in 0..c {
                        for v in 0..spatial {
                            dr[v] += g[ch * spatial + v] * xv[ch * spatial + v];
                        }
                    }
                    accum(grads, *r, dr);
                }
            }
            Op::UpsampleNearest2(x) => {
                if self.wants(*x) {
                    accum(grads, *x, conv::upsample2_backward(g, &self.nodes[*x].shape));
                }
            }
            Op::ConcatChannels(a, b) => {
                let na = self.nodes[*a].data.len();
                if self.wants(*a) {
                    accum(grads, *a, g[..na].to_vec());
                }
                if self.wants(*b) {
                    accum(grads, *b, g[na..].to_vec());
                }
            }
            Op::ChannelSlice { x, c0, len } => {
                if self.wants(*x) {
                    let spatial = g.len() / len;
                    let mut dx = vec![T::ZERO; self.nodes[*x].data.len()];
                    dx[c0 * spatial..(c0 + len) * spatial].copy_from_slice(g);
                    accum(grads, *x, dx);
                }
            }
            Op::SelectClass { p, labels } => {
                if self.wants(*p) {
                    let spatial = labels.len();
                    let mut dp = vec![T::ZERO; self.nodes[*p].data.len()];
                    for (v, &l) in labels.iter().enumerate() {
                        dp[l as usize * spatial + v] += g[v];
                    }
                    accum(grads, *p, dp);
                }
            }
            Op::Linear { x, w, b } => {
                let (d_out, d_in) = (self.nodes[*b].data.len(), self.nodes[*x].data.len());
                let wd = &self.nodes[*w].data;
                if self.wants(*x) {
                    let mut dx = vec![T::ZERO; d_in];
                    for o in 0..d_out {
                        for i in 0..d_in {
                            dx[i] += g[o] * wd[o * d_in + i];
                        }
                    }
                    accum(grads, *x, dx);
                }
                if self.wants(*w) {
                    let xd = &self.nodes[*x].data;
                    let mut dw = vec![T::ZERO; d_out * d_in];
                    for o in 0..d_out {
                        for i in 0..d_in {
                            dw[o * d_in + i] = g[o] * xd[i];
                        }
                    }
                    accum(grads, *w, dw);
                }
                if self.wants(*b) {
                    accum(grads, *b, g.to_vec());
                }
            }
            Op::BoxFilter3(x) => {
                if self.wants(*x) {
                    accum(grads, *x, conv::box3_backward(g, &self.nodes[*x].shape));
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    accum(grads, *x, g.to_vec());
                }
            }
        }
    }
}

fn zip<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn accum<T: Real>(grads: &mut [Option<Vec<T>>], id: usize, contribution: Vec<T>) {
    match &mut grads[id] {
        Some(existing) => {
            debug_assert_eq!(existing.len(), contribution.len());
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

/// Maps flat input indices to flat output indices for an axis reduction.
struct ReduceMap {
    in_strides: Vec<usize>,
    out_strides: Vec<usize>, // 0 for reduced axes
    dims: Vec<usize>,
}

impl ReduceMap {
    fn new(shape: &[usize], axes: &[usize]) -> Self {
        let rank = shape.len();
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        let mut out_strides = vec![0usize; rank];
        let mut acc = 1usize;
        for i in (0..rank).rev() {
            if !axes.contains(&i) {
                out_strides[i] = acc;
                acc *= shape[i];
            }
        }
        ReduceMap { in_strides, out_strides, dims: shape.to_vec() }
    }

    #[inline]
    fn out_index(&self, flat_in: usize) -> usize {
        let mut rem = flat_in;
        let mut out = 0usize;
        for i in 0..self.dims.len() {
            let coord = rem / self.in_strides[i];
            rem %= self.in_strides[i];
            out += coord * self.out_strides[i];
        }
        out
    }
}
