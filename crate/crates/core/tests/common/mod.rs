#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scalescan::autograd::{PoolKind, Tape, Var};
use scalescan::gradcheck::{grad_check, GradCheckReport};
use scalescan::params::{Bindings, ParamStore};
use scalescan::retrieval::info_nce_on_tape;
use scalescan::ssm::{res_mamba_layer, BlockKind, ScanVariant, SsmConfig, SsmLayerParams};
use scalescan::{Result, Tensor};

pub type LossFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct Case {
    pub params: Vec<Tensor>,
    pub f: LossFn,
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, r)
}

/// Contract `y` with a fixed random tensor so every output coordinate matters.
fn readout(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = Tensor::randn(tape.shape(y).to_vec(), 1.0, &mut rng(seed ^ 0x5eed));
    let wv = tape.constant(w);
    let p = tape.mul(y, wv)?;
    Ok(tape.sum(p))
}

pub const OPS: &[&str] = &[
    "matmul",
    "add",
    "add_scalar",
    "add_trailing",
    "mul",
    "mul_trailing",
    "silu",
    "softplus",
    "exp",
    "log",
    "layer_norm",
    "conv2d",
    "conv2d_stride2",
    "max_pool",
    "mean_pool",
    "upsample_nearest",
    "reshape_transpose",
    "slice_cols",
    "concat_rows",
    "gather_rows",
    "reverse_rows",
    "mean_rows",
    "normalize_rows",
    "causal_conv1d",
    "selective_scan",
    "softmax_rows",
    "cross_entropy_rows",
    "info_nce",
];

pub fn op_case(name: &str, seed: u64) -> Case {
    let mut r = rng(seed);
    let s = seed;
    let (params, f): (Vec<Tensor>, LossFn) = match name {
        "matmul" => (
            vec![randn(&[3, 4], &mut r), randn(&[4, 2], &mut r)],
            Box::new(move |t, p| {
                let y = t.matmul(p[0], p[1])?;
                readout(t, y, s)
            }),
        ),
        "add" | "mul" => {
            let mul = name == "mul";
            (
                vec![randn(&[3, 4], &mut r), randn(&[3, 4], &mut r)],
                Box::new(move |t, p| {
                    let y = if mul { t.mul(p[0], p[1])? } else { t.add(p[0], p[1])? };
                    readout(t, y, s)
                }),
            )
        }
        "add_scalar" => (
            vec![randn(&[3, 4], &mut r), randn(&[1], &mut r)],
            Box::new(move |t, p| {
                let y = t.add(p[0], p[1])?;
                readout(t, y, s)
            }),
        ),
        "add_trailing" | "mul_trailing" => {
            let mul = name == "mul_trailing";
            (
                vec![randn(&[2, 3, 4], &mut r), randn(&[4], &mut r)],
                Box::new(move |t, p| {
                    let y = if mul { t.mul(p[0], p[1])? } else { t.add(p[0], p[1])? };
                    readout(t, y, s)
                }),
            )
        }
        "silu" | "softplus" | "exp" => {
            let kind = name.to_string();
            (
                vec![randn(&[3, 5], &mut r)],
                Box::new(move |t, p| {
                    let y = match kind.as_str() {
                        "silu" => t.silu(p[0]),
                        "softplus" => t.softplus(p[0]),
                        _ => t.exp(p[0]),
                    };
                    readout(t, y, s)
                }),
            )
        }
        "log" => (
            vec![randn(&[3, 5], &mut r).map(|x| 0.5 + x.abs())],
            Box::new(move |t, p| {
                let y = t.log(p[0])?;
                readout(t, y, s)
            }),
        ),
        "layer_norm" => (
            vec![randn(&[4, 8], &mut r), randn(&[8], &mut r), randn(&[8], &mut r)],
            Box::new(move |t, p| {
                let y = t.layer_norm(p[0], p[1], p[2], 1e-5)?;
                readout(t, y, s)
            }),
        ),
        "conv2d" => (
            vec![randn(&[1, 5, 5, 2], &mut r), randn(&[3, 3, 2, 2], &mut r)],
            Box::new(move |t, p| {
                let y = t.conv2d(p[0], p[1], 1, 1)?;
                readout(t, y, s)
            }),
        ),
        "conv2d_stride2" => (
            vec![randn(&[2, 6, 5, 2], &mut r), randn(&[3, 3, 2, 3], &mut r)],
            Box::new(move |t, p| {
                let y = t.conv2d(p[0], p[1], 2, 0)?;
                readout(t, y, s)
            }),
        ),
        "max_pool" | "mean_pool" => {
            let kind = if name == "max_pool" { PoolKind::Max } else { PoolKind::Mean };
            (
                vec![randn(&[2, 7, 6, 2], &mut r)],
                Box::new(move |t, p| {
                    let y = t.pool2d(p[0], kind, (3, 4))?;
                    readout(t, y, s)
                }),
            )
        }
        "upsample_nearest" => (
            vec![randn(&[2, 3, 3, 2], &mut r)],
            Box::new(move |t, p| {
                let y = t.upsample_nearest(p[0], (7, 5))?;
                readout(t, y, s)
            }),
        ),
        "reshape_transpose" => (
            vec![randn(&[2, 3, 4], &mut r)],
            Box::new(move |t, p| {
                let y = t.reshape(p[0], [6, 4])?;
                let y = t.transpose(y)?;
                readout(t, y, s)
            }),
        ),
        "slice_cols" => (
            vec![randn(&[3, 6], &mut r)],
            Box::new(move |t, p| {
                let y = t.slice_cols(p[0], 1, 4)?;
                readout(t, y, s)
            }),
        ),
        "concat_rows" => (
            vec![randn(&[2, 3], &mut r), randn(&[4, 3], &mut r)],
            Box::new(move |t, p| {
                let y = t.concat_rows(&[p[0], p[1], p[0]])?;
                readout(t, y, s)
            }),
        ),
        "gather_rows" => (
            vec![randn(&[4, 3], &mut r)],
            Box::new(move |t, p| {
                let y = t.gather_rows(p[0], vec![3, 0, 0, 2, 3])?;
                readout(t, y, s)
            }),
        ),
        "reverse_rows" => (
            vec![randn(&[5, 3], &mut r)],
            Box::new(move |t, p| {
                let y = t.reverse_rows(p[0])?;
                readout(t, y, s)
            }),
        ),
        "mean_rows" => (
            vec![randn(&[5, 3], &mut r)],
            Box::new(move |t, p| {
                let y = t.mean_rows(p[0]);
                readout(t, y, s)
            }),
        ),
        "normalize_rows" => (
            vec![randn(&[4, 5], &mut r)],
            Box::new(move |t, p| {
                let y = t.normalize_rows(p[0])?;
                readout(t, y, s)
            }),
        ),
        "causal_conv1d" => (
            vec![randn(&[7, 3], &mut r), randn(&[4, 3], &mut r), randn(&[3], &mut r)],
            Box::new(move |t, p| {
                let y = t.causal_conv1d(p[0], p[1], p[2])?;
                readout(t, y, s)
            }),
        ),
        "selective_scan" => {
            let (l, e, n) = (6, 3, 4);
            (
                vec![
                    randn(&[l, e], &mut r),
                    Tensor::randn([l, e], 0.5, &mut r).map(f64::exp),
                    Tensor::randn([e, n], 0.5, &mut r).map(|x| -x.exp()),
                    randn(&[l, n], &mut r),
                    randn(&[l, n], &mut r),
                ],
                Box::new(move |t, p| {
                    let y = t.selective_scan(p[0], p[1], p[2], p[3], p[4])?;
                    readout(t, y, s)
                }),
            )
        }
        "softmax_rows" => (
            vec![randn(&[3, 5], &mut r)],
            Box::new(move |t, p| {
                let y = t.softmax_rows(p[0]);
                readout(t, y, s)
            }),
        ),
        "cross_entropy_rows" => (
            vec![randn(&[4, 5], &mut r)],
            Box::new(move |t, p| t.cross_entropy_rows(p[0], &[1, 4, 0, 1])),
        ),
        "info_nce" => (
            vec![Tensor::randn([5, 5], 0.4, &mut r), Tensor::scalar(2.0 + seed as f64 % 5.0)],
            Box::new(move |t, p| info_nce_on_tape(t, p[0], &[0, 1, 2, 3, 4], p[1], true)),
        ),
        other => panic!("unknown op case {other}"),
    };
    Case { params, f }
}

pub fn check_op(name: &str, seed: u64) -> GradCheckReport {
    let c = op_case(name, seed);
    grad_check(c.f, &c.params, 1e-5, 1e-5).expect("gradient check runs")
}

pub const LAYER_SHAPES: &[(BlockKind, ScanVariant)] = &[
    (BlockKind::Mamba, ScanVariant::None),
    (BlockKind::Mamba, ScanVariant::V1),
    (BlockKind::Mamba, ScanVariant::V2),
    (BlockKind::MambaOut, ScanVariant::V2),
    (BlockKind::Attention, ScanVariant::None),
];

/// One residual layer on an 8-token input with every parameter (gate
/// included) drawn at random, so that every gradient path is live.
pub fn layer_case(block: BlockKind, variant: ScanVariant, residual: bool, seed: u64) -> Case {
    let cfg = SsmConfig {
        channels: 3,
        expand: 2,
        d_state: 2,
        conv_kernel: 3,
        variant,
        block,
        residual,
    };
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let layer = SsmLayerParams::init(&mut store, "l", cfg, &mut r).unwrap();
    let mut params: Vec<Tensor> = store
        .iter()
        .map(|(_, t)| Tensor::randn(t.shape().to_vec(), 0.5, &mut r))
        .collect();
    let n = params.len();
    params.push(randn(&[8, 3], &mut r));
    let f: LossFn = Box::new(move |t, p| {
        let binds = Bindings::from_vars(p[..n].to_vec());
        let y = res_mamba_layer(t, &binds, p[n], &layer)?;
        readout(t, y, seed)
    });
    Case { params, f }
}

pub fn check_layer(block: BlockKind, variant: ScanVariant, residual: bool, seed: u64) -> GradCheckReport {
    let c = layer_case(block, variant, residual, seed);
    grad_check(c.f, &c.params, 1e-5, 1e-4).expect("gradient check runs")
}
