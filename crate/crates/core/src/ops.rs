//! Differentiable ops recorded on a [`Tape`].

use crate::autograd::{broadcast_index, for_each_pool_window, Broadcast, Op, PoolKind, Tape, Unary, Var};
use crate::error::{dim_err, Error, Result};
use crate::kernels::{self, ConvGeom, ScanDims};
use crate::tensor::Tensor;

pub const NORM_FLOOR: f64 = 1e-12;

/// Elementwise op selector for [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Silu,
    Softplus,
    Exp,
    Log,
}

impl Tape {
    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => dim_err(op, format!("expected a matrix, got shape {s:?}")),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return dim_err(
                "matmul",
                format!("inner dims differ: {:?} x {:?}", self.shape(a), self.shape(b)),
            );
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::from_parts(vec![m, n], out);
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Generic entry point; binary kinds require `b`, unary kinds ignore it.
    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = |b: Option<Var>| {
            b.ok_or_else(|| Error::Contract(format!("{op:?} needs a second operand")))
        };
        match op {
            Elementwise::Add => self.add(a, need_b(b)?),
            Elementwise::Mul => self.mul(a, need_b(b)?),
            Elementwise::Silu => Ok(self.silu(a)),
            Elementwise::Softplus => Ok(self.softplus(a)),
            Elementwise::Exp => Ok(self.exp(a)),
            Elementwise::Log => self.log(a),
        }
    }

    fn broadcast_kind(&self, a: Var, b: Var, op: &'static str) -> Result<Broadcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Broadcast::Same)
        } else if self.value(b).len() == 1 {
            Ok(Broadcast::Scalar)
        } else if sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb {
            Ok(Broadcast::Trailing)
        } else {
            dim_err(op, format!("cannot broadcast {sb:?} onto {sa:?}"))
        }
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, Broadcast)> {
        let bc = self.broadcast_kind(a, b, name)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let nb = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[broadcast_index(i, nb, bc)]))
            .collect();
        Ok((Tensor::from_parts(av.shape().to_vec(), data), bc))
    }

    /// `a + b`, with `b` a same-shape, scalar or trailing-dims operand.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, bc) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b, bc), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, bc) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b, bc), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).map(|x| x * factor);
        self.push(v, Op::Scale(a, factor), &[a])
    }

    fn unary(&mut self, a: Var, kind: Unary, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(a).map(f);
        self.push(v, Op::Unary(a, kind), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu, kernels::silu)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus, kernels::softplus)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp, f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(a, Unary::Log, f64::ln))
    }

    /// Normalise every row over the last dimension, then apply `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps >= 0.0) {
            return Err(Error::Domain {
                op: "layer_norm",
                detail: format!("eps must be non-negative, got {eps}"),
            });
        }
        let c = self.value(x).last_dim();
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return dim_err(
                    "layer_norm",
                    format!("affine parameter {:?} does not match last dim {c}", self.shape(p)),
                );
            }
        }
        let (y, xhat, inv_std) = kernels::layer_norm_forward(
            self.value(x).data(),
            c,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let value = Tensor::from_parts(self.shape(x).to_vec(), y);
        let op = if self.grad_enabled() {
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            }
        } else {
            Op::Detached
        };
        Ok(self.push(value, op, &[x, gamma, beta]))
    }

    /// Per-frame cross-correlation of `x[T x H x W x Cin]` with `w[k x k x Cin x Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (&[t, h, wd, cin], &[k, k2, wcin, cout]) = (xs.as_slice(), ws.as_slice()) else {
            return dim_err("conv2d", format!("expected rank-4 input and kernel, got {xs:?} and {ws:?}"));
        };
        if k != k2 || wcin != cin {
            return dim_err("conv2d", format!("kernel {ws:?} incompatible with input {xs:?}"));
        }
        if stride == 0 {
            return dim_err("conv2d", "stride must be positive");
        }
        if k > h + 2 * pad || k > wd + 2 * pad {
            return dim_err(
                "conv2d",
                format!("kernel {k}x{k} larger than padded input {}x{}", h + 2 * pad, wd + 2 * pad),
            );
        }
        let geom = ConvGeom {
            t,
            h,
            w: wd,
            cin,
            cout,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (wd + 2 * pad - k) / stride + 1,
        };
        let y = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data());
        let value = Tensor::from_parts(vec![t, geom.oh, geom.ow, cout], y);
        Ok(self.push(value, Op::Conv2d { x, w, geom }, &[x, w]))
    }

    /// Adaptive max or mean pooling of `x[T x H x W x C]` to `[T x h x w x C]`.
    pub fn pool2d(&mut self, x: Var, kind: PoolKind, (oh, ow): (usize, usize)) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let &[t, h, w, c] = xs.as_slice() else {
            return dim_err("pool2d", format!("expected rank-4 input, got {xs:?}"));
        };
        if oh == 0 || ow == 0 || oh > h || ow > w {
            return dim_err("pool2d", format!("cannot pool {h}x{w} to {oh}x{ow}"));
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; t * oh * ow * c];
        let mut argmax = Vec::new();
        if kind == PoolKind::Max {
            argmax = vec![0; out.len()];
        }
        for_each_pool_window(t, (h, w), (oh, ow), |cell, cells| {
            for ch in 0..c {
                let o = cell * c + ch;
                match kind {
                    PoolKind::Max => {
                        let mut best = cells[0] * c + ch;
                        for &s in &cells[1..] {
                            // strict comparison keeps the first maximum in row-major order
                            if xv[s * c + ch] > xv[best] {
                                best = s * c + ch;
                            }
                        }
                        out[o] = xv[best];
                        argmax[o] = best;
                    }
                    PoolKind::Mean => {
                        let sum: f64 = cells.iter().map(|&s| xv[s * c + ch]).sum();
                        out[o] = sum / cells.len() as f64;
                    }
                }
            }
        });
        let value = Tensor::from_parts(vec![t, oh, ow, c], out);
        let op = match kind {
            PoolKind::Max => Op::MaxPool { x, argmax },
            PoolKind::Mean => Op::MeanPool {
                x,
                in_hw: (h, w),
                out_hw: (oh, ow),
            },
        };
        Ok(self.push(value, op, &[x]))
    }

    /// Nearest-neighbour resize of `x[T x H x W x C]` to `[T x oh x ow x C]`.
    pub fn upsample_nearest(&mut self, x: Var, (oh, ow): (usize, usize)) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let &[t, h, w, c] = xs.as_slice() else {
            return dim_err("upsample_nearest", format!("expected rank-4 input, got {xs:?}"));
        };
        let mut index = Vec::with_capacity(t * oh * ow);
        for f in 0..t {
            for y in 0..oh {
                for xx in 0..ow {
                    index.push((f * h + y * h / oh) * w + xx * w / ow);
                }
            }
        }
        let rows = self.gather_rows(x, index)?;
        self.reshape(rows, [t, oh, ow, c])
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let av = self.value(a).data();
        let mut d = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                d[j * r + i] = av[i * c + j];
            }
        }
        let v = Tensor::from_parts(vec![c, r], d);
        Ok(self.push(v, Op::Transpose(a), &[a]))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "slice_cols")?;
        if start >= end || end > cols {
            return dim_err("slice_cols", format!("range {start}..{end} outside {cols} columns"));
        }
        let w = end - start;
        let av = self.value(a).data();
        let mut d = Vec::with_capacity(rows * w);
        for r in 0..rows {
            d.extend_from_slice(&av[r * cols + start..r * cols + end]);
        }
        let v = Tensor::from_parts(vec![rows, w], d);
        Ok(self.push(v, Op::SliceCols { a, start }, &[a]))
    }

    /// Stack the rows of several tensors sharing their last dimension into `[rows x C]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat_rows", "no inputs");
        };
        let c = self.value(first).last_dim();
        let mut d = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.last_dim() != c {
                return dim_err("concat_rows", format!("last dims differ: {c} vs {}", pv.last_dim()));
            }
            d.extend_from_slice(pv.data());
        }
        let rows = d.len() / c;
        let v = Tensor::from_parts(vec![rows, c], d);
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Row gather over `a` viewed as `[rows x last_dim]`; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Result<Var> {
        let av = self.value(a);
        let (rows, c) = (av.rows(), av.last_dim());
        if index.is_empty() {
            return dim_err("gather_rows", "empty index");
        }
        if let Some(bad) = index.iter().find(|&&i| i >= rows) {
            return dim_err("gather_rows", format!("row {bad} out of range for {rows} rows"));
        }
        let mut d = Vec::with_capacity(index.len() * c);
        for &i in &index {
            d.extend_from_slice(&av.data()[i * c..(i + 1) * c]);
        }
        let v = Tensor::from_parts(vec![index.len(), c], d);
        Ok(self.push(v, Op::GatherRows { a, index }, &[a]))
    }

    /// Reverse the row order of a matrix.
    pub fn reverse_rows(&mut self, a: Var) -> Result<Var> {
        let rows = self.value(a).rows();
        self.gather_rows(a, (0..rows).rev().collect())
    }

    /// Mean over rows of `[rows x C]`, giving shape `[C]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (rows, c) = (av.rows(), av.last_dim());
        let mut d = vec![0.0; c];
        for r in 0..rows {
            for (acc, x) in d.iter_mut().zip(av.row(r)) {
                *acc += x;
            }
        }
        let inv = 1.0 / rows as f64;
        d.iter_mut().for_each(|x| *x *= inv);
        let v = Tensor::from_parts(vec![c], d);
        self.push(v, Op::MeanRows(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    /// L2-normalise each row over the last dimension. Rows with norm below
    /// [`NORM_FLOOR`] are divided by the floor instead, so a zero row stays zero.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let c = av.last_dim();
        let mut norms = Vec::with_capacity(av.rows());
        let mut d = Vec::with_capacity(av.len());
        for r in 0..av.rows() {
            let row = av.row(r);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            norms.push(norm);
            let div = if norm < NORM_FLOOR { NORM_FLOOR } else { norm };
            d.extend(row.iter().map(|x| x / div));
        }
        let v = Tensor::from_parts(av.shape().to_vec(), d);
        debug_assert_eq!(v.last_dim(), c);
        Ok(self.push(v, Op::NormalizeRows { a, norms }, &[a]))
    }

    /// Depthwise causal convolution of `x[L x E]` with per-channel taps `w[k x E]` and bias `b[E]`.
    pub fn causal_conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (_, e) = self.dims2(x, "causal_conv1d")?;
        let (k, we) = self.dims2(w, "causal_conv1d")?;
        if we != e || self.shape(b) != [e] {
            return dim_err(
                "causal_conv1d",
                format!("taps {:?} / bias {:?} do not match {e} channels", self.shape(w), self.shape(b)),
            );
        }
        let y = kernels::causal_conv1d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            e,
            k,
        );
        let v = Tensor::from_parts(self.shape(x).to_vec(), y);
        Ok(self.push(v, Op::CausalConv1d { x, w, b }, &[x, w, b]))
    }

    /// Sequential selective scan with diagonal state matrix.
    ///
    /// Per channel `e` the state `h` starts at zero and for every step `t`
    /// `h <- exp(delta[t,e] * a[e,:]) * h + delta[t,e] * b[t,:] * u[t,e]`,
    /// emitting `y[t,e] = <c[t,:], h>`. Shapes: `u, delta: [L x E]`,
    /// `a: [E x N]`, `b, c: [L x N]`.
    pub fn selective_scan(&mut self, u: Var, delta: Var, a: Var, b: Var, c: Var) -> Result<Var> {
        let (l, e) = self.dims2(u, "selective_scan")?;
        let (ae, n) = self.dims2(a, "selective_scan")?;
        let ok = self.shape(delta) == [l, e] && ae == e && self.shape(b) == [l, n] && self.shape(c) == [l, n];
        if !ok {
            return dim_err(
                "selective_scan",
                format!(
                    "u {:?}, delta {:?}, A {:?}, B {:?}, C {:?}",
                    self.shape(u),
                    self.shape(delta),
                    self.shape(a),
                    self.shape(b),
                    self.shape(c)
                ),
            );
        }
        if let Some(bad) = self.value(delta).data().iter().find(|&&d| d <= 0.0) {
            return Err(Error::Domain {
                op: "selective_scan",
                detail: format!("step size must be positive, got {bad}"),
            });
        }
        let dims = ScanDims { l, e, n };
        let inputs = [u, delta, a, b, c];
        let track = self.grad_enabled() && inputs.iter().any(|&v| self.requires_grad(v));
        let mut states = Vec::new();
        let y = kernels::scan_forward(
            dims,
            self.value(u).data(),
            self.value(delta).data(),
            self.value(a).data(),
            self.value(b).data(),
            self.value(c).data(),
            track.then_some(&mut states),
        );
        let v = Tensor::from_parts(vec![l, e], y);
        Ok(self.push(v, Op::Scan { inputs, dims, states }, &inputs))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut d = Vec::with_capacity(av.len());
        for r in 0..av.rows() {
            d.extend(softmax(av.row(r)));
        }
        let v = Tensor::from_parts(av.shape().to_vec(), d);
        self.push(v, Op::SoftmaxRows(a), &[a])
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, c) = self.dims2(logits, "cross_entropy_rows")?;
        if targets.len() != rows || targets.iter().any(|&t| t >= c) {
            return dim_err(
                "cross_entropy_rows",
                format!("{} targets for a {rows}x{c} logit matrix", targets.len()),
            );
        }
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(rows * c);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            probs.extend(row.iter().map(|x| (x - lse).exp()));
        }
        let v = Tensor::scalar(loss / rows as f64);
        let op = Op::CrossEntropyRows {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(v, op, &[logits]))
    }
}

pub(crate) fn softmax(row: &[f64]) -> impl Iterator<Item = f64> + '_ {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
    row.iter().map(move |x| (x - max).exp() / z)
}
