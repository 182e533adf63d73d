//! Raw slice kernels shared by the tape ops. Every routine here is
//! deterministic: loops run in a fixed order and nothing is parallel.

use crate::instrument::count_madds;

/// `c (+)= op(a) * op(b)` for row-major `m x k` and `k x n` operands given by strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(c.len(), m * n);
    count_madds((m * k * n) as u64);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: strides describe in-bounds views of `a` (m x k) and `b` (k x n);
    // `c` is a dense m x n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain `a[m x k] * b[k x n]`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1), &mut c, false);
    c
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Geometry of a 2-D convolution over `[T x H x W x Cin]` with a `[k x k x Cin x Cout]` kernel.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Visits `(out_index, in_index, kernel_row_offset)` for every valid tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for t in 0..self.t {
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let out = ((t * self.oh + oy) * self.ow + ox) * self.cout;
                    for ky in 0..self.k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let inp = ((t * self.h + iy as usize) * self.w + ix as usize) * self.cin;
                            let kernel = (ky * self.k + kx) * self.cin * self.cout;
                            f(out, inp, kernel);
                        }
                    }
                }
            }
        }
    }

    fn madds(&self) -> u64 {
        (self.t * self.oh * self.ow * self.k * self.k * self.cin * self.cout) as u64
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    count_madds(g.madds());
    let mut y = vec![0.0; g.t * g.oh * g.ow * g.cout];
    let (cin, cout) = (g.cin, g.cout);
    g.for_each_tap(|out, inp, kernel| {
        let yrow = &mut y[out..out + cout];
        for ci in 0..cin {
            let xv = x[inp + ci];
            let wrow = &w[kernel + ci * cout..kernel + (ci + 1) * cout];
            for (yo, wv) in yrow.iter_mut().zip(wrow) {
                *yo += xv * wv;
            }
        }
    });
    y
}

pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    count_madds(2 * g.madds());
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let (cin, cout) = (g.cin, g.cout);
    g.for_each_tap(|out, inp, kernel| {
        let dyrow = &dy[out..out + cout];
        for ci in 0..cin {
            let wrow = &w[kernel + ci * cout..kernel + (ci + 1) * cout];
            let mut acc = 0.0;
            for (d, wv) in dyrow.iter().zip(wrow) {
                acc += d * wv;
            }
            dx[inp + ci] += acc;
            let xv = x[inp + ci];
            let dwrow = &mut dw[kernel + ci * cout..kernel + (ci + 1) * cout];
            for (dwv, d) in dwrow.iter_mut().zip(dyrow) {
                *dwv += xv * d;
            }
        }
    });
    (dx, dw)
}

/// Adaptive window `[floor(i*n/m), ceil((i+1)*n/m))` for output cell `i` of `m`.
#[inline]
pub(crate) fn adaptive_window(i: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let start = i * n_in / n_out;
    let end = ((i + 1) * n_in).div_ceil(n_out);
    (start, end)
}

/// Per-token layer normalisation over rows of width `c`; returns `(y, xhat, inv_std)`.
pub(crate) fn layer_norm_forward(
    x: &[f64],
    c: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / c;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let denom = var + eps;
        // A constant row with eps == 0 has no scale; it normalises to zero.
        let inv = if denom > 0.0 { 1.0 / denom.sqrt() } else { 0.0 };
        inv_std[r] = inv;
        for j in 0..c {
            let h = (row[j] - mean) * inv;
            xhat[r * c + j] = h;
            y[r * c + j] = gamma[j] * h + beta[j];
        }
    }
    (y, xhat, inv_std)
}

/// Depthwise causal 1-D convolution: `y[t,e] = b[e] + sum_j w[j,e] * x[t-(k-1)+j, e]`.
pub(crate) fn causal_conv1d_forward(x: &[f64], w: &[f64], b: &[f64], e: usize, k: usize) -> Vec<f64> {
    let l = x.len() / e;
    count_madds((l * e * k) as u64);
    let mut y = vec![0.0; x.len()];
    for t in 0..l {
        let yrow = &mut y[t * e..(t + 1) * e];
        yrow.copy_from_slice(b);
        for j in 0..k {
            let src = t as isize - (k - 1) as isize + j as isize;
            if src < 0 {
                continue;
            }
            let xrow = &x[src as usize * e..(src as usize + 1) * e];
            let wrow = &w[j * e..(j + 1) * e];
            for ((yo, xv), wv) in yrow.iter_mut().zip(xrow).zip(wrow) {
                *yo += xv * wv;
            }
        }
    }
    y
}

pub(crate) fn causal_conv1d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    e: usize,
    k: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let l = x.len() / e;
    count_madds((2 * l * e * k) as u64);
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; e];
    for t in 0..l {
        let dyrow = &dy[t * e..(t + 1) * e];
        for (d, g) in db.iter_mut().zip(dyrow) {
            *d += g;
        }
        for j in 0..k {
            let src = t as isize - (k - 1) as isize + j as isize;
            if src < 0 {
                continue;
            }
            let s = src as usize;
            for c in 0..e {
                dx[s * e + c] += dyrow[c] * w[j * e + c];
                dw[j * e + c] += dyrow[c] * x[s * e + c];
            }
        }
    }
    (dx, dw, db)
}

/// Shapes of one selective scan: sequence length, channels, state size.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ScanDims {
    pub l: usize,
    pub e: usize,
    pub n: usize,
}

/// Sequential selective scan. When `states` is given it receives every
/// hidden state `h_t` (`l x e x n`, row-major) followed by the matching
/// decay factors, both reused by the backward pass.
pub(crate) fn scan_forward(
    d: ScanDims,
    u: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    mut states: Option<&mut Vec<f64>>,
) -> Vec<f64> {
    let ScanDims { l, e, n } = d;
    count_madds((4 * l * e * n) as u64);
    let mut h = vec![0.0; e * n];
    let mut y = vec![0.0; l * e];
    let mut decays = Vec::new();
    if let Some(s) = states.as_deref_mut() {
        s.clear();
        s.reserve(2 * l * e * n);
        decays.reserve(l * e * n);
    }
    let track = states.is_some();
    let mut drow = vec![0.0; n];
    for t in 0..l {
        let brow = &b[t * n..(t + 1) * n];
        let crow = &c[t * n..(t + 1) * n];
        for ch in 0..e {
            let dt = delta[t * e + ch];
            let du = dt * u[t * e + ch];
            let arow = &a[ch * n..(ch + 1) * n];
            let hrow = &mut h[ch * n..(ch + 1) * n];
            for (dv, av) in drow.iter_mut().zip(arow) {
                *dv = (dt * av).exp();
            }
            let mut acc = 0.0;
            for j in 0..n {
                let hv = drow[j] * hrow[j] + du * brow[j];
                hrow[j] = hv;
                acc += crow[j] * hv;
            }
            y[t * e + ch] = acc;
            if track {
                decays.extend_from_slice(&drow);
            }
        }
        if let Some(s) = states.as_deref_mut() {
            s.extend_from_slice(&h);
        }
    }
    if let Some(s) = states {
        s.extend_from_slice(&decays);
    }
    y
}

/// Gradients of the scan with respect to `(u, delta, a, b, c)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_backward(
    d: ScanDims,
    u: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    states: &[f64],
    dy: &[f64],
) -> [Vec<f64>; 5] {
    let ScanDims { l, e, n } = d;
    count_madds((8 * l * e * n) as u64);
    let mut du = vec![0.0; l * e];
    let mut ddelta = vec![0.0; l * e];
    let mut da = vec![0.0; e * n];
    let mut db = vec![0.0; l * n];
    let mut dc = vec![0.0; l * n];
    let mut dh = vec![0.0; e * n];
    let zeros = vec![0.0; e * n];
    let (states, decays) = states.split_at(l * e * n);
    for t in (0..l).rev() {
        let h_t = &states[t * e * n..(t + 1) * e * n];
        let h_prev = if t == 0 {
            &zeros[..]
        } else {
            &states[(t - 1) * e * n..t * e * n]
        };
        let brow = &b[t * n..(t + 1) * n];
        let crow = &c[t * n..(t + 1) * n];
        for ch in 0..e {
            let g = dy[t * e + ch];
            let dt = delta[t * e + ch];
            let ut = u[t * e + ch];
            let arow = &a[ch * n..(ch + 1) * n];
            let drow = &decays[(t * e + ch) * n..(t * e + ch + 1) * n];
            let mut du_acc = 0.0;
            let mut ddt_acc = 0.0;
            for j in 0..n {
                let idx = ch * n + j;
                dc[t * n + j] += g * h_t[idx];
                let gh = dh[idx] + g * crow[j];
                let decay = drow[j];
                let hp = h_prev[idx];
                // h_t = decay * h_prev + dt * b * u
                ddt_acc += gh * (hp * arow[j] * decay + brow[j] * ut);
                da[idx] += gh * hp * decay * dt;
                db[t * n + j] += gh * dt * ut;
                du_acc += gh * dt * brow[j];
                dh[idx] = gh * decay;
            }
            du[t * e + ch] += du_acc;
            ddelta[t * e + ch] += ddt_acc;
        }
    }
    [du, ddelta, da, db, dc]
}
