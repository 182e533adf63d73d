//! Record-on-execute tape for reverse-mode differentiation.
//!
//! Every op appends one [`Node`] holding its output value and whatever it
//! needs for the backward pass. [`Tape::backward`] walks the nodes in
//! reverse insertion order exactly once, summing gradient contributions
//! where a value fans out to several consumers.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, ScanDims};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary op is expanded to the left operand's shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    Scalar,
    /// Right operand matches the trailing dimensions of the left one.
    Trailing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Silu,
    Softplus,
    Exp,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Mean,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    /// Output of an op recorded with gradients disabled.
    Detached,
    MatMul(Var, Var),
    Add(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, f64),
    Unary(Var, Unary),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    MeanPool {
        x: Var,
        in_hw: (usize, usize),
        out_hw: (usize, usize),
    },
    Reshape(Var),
    Transpose(Var),
    SliceCols {
        a: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    GatherRows {
        a: Var,
        index: Vec<usize>,
    },
    MeanRows(Var),
    SumAll(Var),
    NormalizeRows {
        a: Var,
        norms: Vec<f64>,
    },
    CausalConv1d {
        x: Var,
        w: Var,
        b: Var,
    },
    Scan {
        inputs: [Var; 5],
        dims: ScanDims,
        states: Vec<f64>,
    },
    SoftmaxRows(Var),
    CrossEntropyRows {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// The compute graph of one forward pass. Confined to a single thread.
#[derive(Debug)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only: no op saves backward state and
    /// [`Tape::backward`] is unavailable.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input: gradients are reported for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.push_raw(value, Op::Leaf, rg)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record an op result. `inputs` decide whether the node needs a gradient;
    /// when it does not, the op's saved state is dropped.
    pub(crate) fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if rg { op } else { Op::Detached };
        self.push_raw(value, op, rg)
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients of every leaf that requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.grad_enabled {
            return Err(Error::Contract("backward on an inference tape".into()));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves: Vec<Option<Tensor>> = Vec::new();
        leaves.resize_with(loss.0 + 1, || None);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { leaves })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, d: Vec<f64>| accumulate(grads, v, d);
        match &node.op {
            Op::Leaf | Op::Detached => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.needs(*a) {
                    // dA = dY * B^T
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, (n as isize, 1), bv.data(), (1, n as isize), &mut da, false);
                    acc(*a, da);
                }
                if self.needs(*b) {
                    // dB = A^T * dY
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, av.data(), (1, k as isize), g, (n as isize, 1), &mut db, false);
                    acc(*b, db);
                }
            }
            Op::Add(a, b, bc) => {
                if self.needs(*a) {
                    acc(*a, g.to_vec());
                }
                if self.needs(*b) {
                    let nb = self.value(*b).len();
                    acc(*b, reduce_broadcast(g.iter().copied(), g.len(), nb, *bc));
                }
            }
            Op::Mul(a, b, bc) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let nb = bv.len();
                if self.needs(*a) {
                    let da = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| gi * bv[broadcast_index(i, nb, *bc)])
                        .collect();
                    acc(*a, da);
                }
                if self.needs(*b) {
                    let prod = g.iter().zip(av).map(|(gi, ai)| gi * ai);
                    acc(*b, reduce_broadcast(prod, g.len(), nb, *bc));
                }
            }
            Op::Scale(a, f) => acc(*a, g.iter().map(|x| x * f).collect()),
            Op::Unary(a, kind) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                let d = match kind {
                    Unary::Silu => g.iter().zip(x).map(|(gi, xi)| gi * kernels::silu_grad(*xi)).collect(),
                    Unary::Softplus => g.iter().zip(x).map(|(gi, xi)| gi * kernels::sigmoid(*xi)).collect(),
                    Unary::Exp => g.iter().zip(y).map(|(gi, yi)| gi * yi).collect(),
                    Unary::Log => g.iter().zip(x).map(|(gi, xi)| gi / xi).collect(),
                };
                acc(*a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = node.value.last_dim();
                let rows = xhat.len() / c;
                let gam = self.value(*gamma).data();
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for r in 0..rows {
                        for j in 0..c {
                            dg[j] += g[r * c + j] * xhat[r * c + j];
                            db[j] += g[r * c + j];
                        }
                    }
                    if self.needs(*gamma) {
                        acc(*gamma, dg);
                    }
                    if self.needs(*beta) {
                        acc(*beta, db);
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; rows * c];
                    let cf = c as f64;
                    for r in 0..rows {
                        let inv = inv_std[r];
                        if inv == 0.0 {
                            continue;
                        }
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..c {
                            let dh = g[r * c + j] * gam[j];
                            sum_d += dh;
                            sum_dx += dh * xhat[r * c + j];
                        }
                        for j in 0..c {
                            let dh = g[r * c + j] * gam[j];
                            dx[r * c + j] = inv * (dh - sum_d / cf - xhat[r * c + j] * sum_dx / cf);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = kernels::conv2d_backward(geom, self.value(*x).data(), self.value(*w).data(), g);
                if self.needs(*x) {
                    acc(*x, dx);
                }
                if self.needs(*w) {
                    acc(*w, dw);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (gi, &src) in g.iter().zip(argmax) {
                    dx[src] += gi;
                }
                acc(*x, dx);
            }
            Op::MeanPool { x, in_hw, out_hw } => {
                let xs = self.value(*x).shape();
                let (t, c) = (xs[0], xs[3]);
                let mut dx = vec![0.0; self.value(*x).len()];
                for_each_pool_window(t, *in_hw, *out_hw, |out_cell, cells| {
                    let inv = 1.0 / cells.len() as f64;
                    for &cell in cells {
                        for ch in 0..c {
                            dx[cell * c + ch] += g[out_cell * c + ch] * inv;
                        }
                    }
                });
                acc(*x, dx);
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Transpose(a) => {
                let s = self.value(*a).shape();
                let (r, c) = (s[0], s[1]);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = g[j * r + i];
                    }
                }
                acc(*a, d);
            }
            Op::SliceCols { a, start } => {
                let s = self.value(*a).shape();
                let (rows, cols) = (s[0], s[1]);
                let w = node.value.shape()[1];
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                acc(*a, d);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if self.needs(*p) {
                        acc(*p, g[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
            Op::GatherRows { a, index } => {
                let c = node.value.last_dim();
                let mut d = vec![0.0; self.value(*a).len()];
                for (dst, &src) in index.iter().enumerate() {
                    for j in 0..c {
                        d[src * c + j] += g[dst * c + j];
                    }
                }
                acc(*a, d);
            }
            Op::MeanRows(a) => {
                let av = self.value(*a);
                let c = av.last_dim();
                let rows = av.rows();
                let inv = 1.0 / rows as f64;
                let mut d = vec![0.0; rows * c];
                for r in 0..rows {
                    for j in 0..c {
                        d[r * c + j] = g[j] * inv;
                    }
                }
                acc(*a, d);
            }
            Op::SumAll(a) => acc(*a, vec![g[0]; self.value(*a).len()]),
            Op::NormalizeRows { a, norms } => {
                let y = node.value.data();
                let c = node.value.last_dim();
                let mut d = vec![0.0; y.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let yr = &y[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    if norm < crate::ops::NORM_FLOOR {
                        for j in 0..c {
                            d[r * c + j] = gr[j] / crate::ops::NORM_FLOOR;
                        }
                        continue;
                    }
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[r * c + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                acc(*a, d);
            }
            Op::CausalConv1d { x, w, b } => {
                let xv = self.value(*x);
                let e = xv.last_dim();
                let k = self.value(*w).shape()[0];
                let (dx, dw, db) = kernels::causal_conv1d_backward(xv.data(), self.value(*w).data(), g, e, k);
                if self.needs(*x) {
                    acc(*x, dx);
                }
                if self.needs(*w) {
                    acc(*w, dw);
                }
                if self.needs(*b) {
                    acc(*b, db);
                }
            }
            Op::Scan { inputs, dims, states } => {
                let [u, dl, a, b, c] = *inputs;
                let ds = kernels::scan_backward(
                    *dims,
                    self.value(u).data(),
                    self.value(dl).data(),
                    self.value(a).data(),
                    self.value(b).data(),
                    self.value(c).data(),
                    states,
                    g,
                );
                for (v, d) in inputs.iter().zip(ds) {
                    if self.needs(*v) {
                        acc(*v, d);
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let c = node.value.last_dim();
                let mut d = vec![0.0; y.len()];
                for r in 0..y.len() / c {
                    let yr = &y[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[r * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*a, d);
            }
            Op::CrossEntropyRows { logits, targets, probs } => {
                let rows = targets.len();
                let c = probs.len() / rows;
                let scale = g[0] / rows as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * c + t] -= scale;
                }
                acc(*logits, d);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, d: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(d) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

#[inline]
pub(crate) fn broadcast_index(i: usize, nb: usize, bc: Broadcast) -> usize {
    match bc {
        Broadcast::Same => i,
        Broadcast::Scalar => 0,
        Broadcast::Trailing => i % nb,
    }
}

fn reduce_broadcast(g: impl Iterator<Item = f64>, n: usize, nb: usize, bc: Broadcast) -> Vec<f64> {
    match bc {
        Broadcast::Same => g.collect(),
        Broadcast::Scalar => vec![g.sum()],
        Broadcast::Trailing => {
            let mut d = vec![0.0; nb];
            for (i, x) in g.enumerate().take(n) {
                d[i % nb] += x;
            }
            d
        }
    }
}

/// Calls `f(out_cell, in_cells)` for every adaptive pooling window of a
/// `[t x h x w]` grid pooled to `[t x oh x ow]`. Cells are flat spatial indices.
pub(crate) fn for_each_pool_window(
    t: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    mut f: impl FnMut(usize, &[usize]),
) {
    let mut cells = Vec::new();
    for f_idx in 0..t {
        for oy in 0..oh {
            let (y0, y1) = kernels::adaptive_window(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = kernels::adaptive_window(ox, w, ow);
                cells.clear();
                for y in y0..y1 {
                    for x in x0..x1 {
                        cells.push((f_idx * h + y) * w + x);
                    }
                }
                f((f_idx * oh + oy) * ow + ox, &cells);
            }
        }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to leaf `v`; `None` when the loss
    /// does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.leaves.get_mut(v.0).and_then(Option::take)
    }
}
