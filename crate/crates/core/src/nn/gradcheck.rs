//! Central-difference gradient checks at 64-bit precision.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::layers::{self, ConvGeom, DenseBlockGeom, Dims};
use super::model::Model;
use super::NnError;
use crate::seed::rng_from_seed;

pub const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Max relative error between backprop and central differences of
/// `½ (model(x) − target)²` over every parameter.
pub fn grad_check(model: &Model<f64>, x: &[f32], target: f64, h: f64) -> Result<f64, NnError> {
    let mut ws = model.workspace();
    let out = model.forward(x, &mut ws)?;
    let mut grad = vec![0.0; model.param_count()];
    model.backward(&mut ws, out - target, &mut grad)?;
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for i in 0..grad.len() {
        let p0 = probe.params[i];
        probe.params[i] = p0 + h;
        let fp = probe.forward(x, &mut ws)?;
        probe.params[i] = p0 - h;
        let fm = probe.forward(x, &mut ws)?;
        probe.params[i] = p0;
        // L(+) − L(−) = ½ (f₊ − f₋)(f₊ + f₋ − 2y), differenced before multiplying.
        let numeric = 0.5 * (fp - fm) * (fp + fm - 2.0 * target) / (2.0 * h);
        worst = worst.max(relative_error(grad[i], numeric));
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Relu,
    AvgPool,
    GlobalAvgPool,
    DenseBlock,
    FullyConnected,
}

impl LayerKind {
    pub const ALL: [LayerKind; 6] = [
        LayerKind::Conv,
        LayerKind::Relu,
        LayerKind::AvgPool,
        LayerKind::GlobalAvgPool,
        LayerKind::DenseBlock,
        LayerKind::FullyConnected,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv => "conv_st",
            LayerKind::Relu => "relu",
            LayerKind::AvgPool => "avg_pool",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::DenseBlock => "dense_block",
            LayerKind::FullyConnected => "fully_connected",
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Values bounded away from zero so that no ReLU kink lies within ±h.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// A layer as a function of (input, params) into an output buffer, plus its
/// backward pass returning (d input, d params) for a given output gradient.
struct Case {
    x: Vec<f64>,
    p: Vec<f64>,
    out_len: usize,
    fwd: Box<dyn Fn(&[f64], &[f64], &mut [f64])>,
    bwd: Box<dyn Fn(&[f64], &[f64], &[f64]) -> (Vec<f64>, Vec<f64>)>,
}

fn random_case(kind: LayerKind, rng: &mut ChaCha8Rng) -> Case {
    match kind {
        LayerKind::Conv => {
            let kernel = [rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..6)];
            let stride = [rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..5)];
            let pad = kernel.map(|k| rng.random_range(0..k));
            let g = ConvGeom {
                cin: rng.random_range(1..4),
                cout: rng.random_range(1..4),
                kernel,
                stride,
                pad,
            };
            let s = [0, 1, 2].map(|a| kernel[a] + rng.random_range(0..4));
            let xd = Dims::new(g.cin, s);
            let od = g.out_dims(xd).expect("kernel fits");
            let wl = g.weight_len();
            Case {
                x: uniform(rng, xd.len()),
                p: uniform(rng, wl + g.cout),
                out_len: od.len(),
                fwd: Box::new(move |x, p, y| {
                    layers::conv_forward(&g, xd, x, &p[..wl], &p[wl..], y).unwrap();
                }),
                bwd: Box::new(move |x, p, dy| {
                    let mut dx = vec![0.0; x.len()];
                    let mut dp = vec![0.0; p.len()];
                    let (dw, db) = dp.split_at_mut(wl);
                    layers::conv_backward(&g, xd, x, &p[..wl], dy, Some(&mut dx), dw, db).unwrap();
                    (dx, dp)
                }),
            }
        }
        LayerKind::Relu => {
            let n = rng.random_range(1..60);
            Case {
                x: away_from_zero(rng, n),
                p: vec![],
                out_len: n,
                fwd: Box::new(|x, _, y| layers::relu_forward(x, y)),
                bwd: Box::new(|x, _, dy| {
                    let mut dx = vec![0.0; x.len()];
                    layers::relu_backward(x, dy, &mut dx);
                    (dx, vec![])
                }),
            }
        }
        LayerKind::AvgPool => {
            let xd = Dims::new(rng.random_range(1..4), [rng.random_range(1..6), rng.random_range(1..6), rng.random_range(2..9)]);
            Case {
                x: uniform(rng, xd.len()),
                p: vec![],
                out_len: layers::pool_dims(xd).len(),
                fwd: Box::new(move |x, _, y| {
                    layers::avg_pool_forward(xd, x, y);
                }),
                bwd: Box::new(move |x, _, dy| {
                    let mut dx = vec![0.0; x.len()];
                    layers::avg_pool_backward(xd, dy, &mut dx);
                    (dx, vec![])
                }),
            }
        }
        LayerKind::GlobalAvgPool => {
            let xd = Dims::new(rng.random_range(1..5), [rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..9)]);
            Case {
                x: uniform(rng, xd.len()),
                p: vec![],
                out_len: xd.c,
                fwd: Box::new(move |x, _, y| layers::global_avg_pool_forward(xd, x, y)),
                bwd: Box::new(move |x, _, dy| {
                    let mut dx = vec![0.0; x.len()];
                    layers::global_avg_pool_backward(xd, dy, &mut dx);
                    (dx, vec![])
                }),
            }
        }
        LayerKind::DenseBlock => {
            let g = DenseBlockGeom {
                cin: rng.random_range(1..4),
                layers: rng.random_range(1..4),
                growth: rng.random_range(1..4),
                kernel: [1 + 2 * rng.random_range(0..2), 1 + 2 * rng.random_range(0..2), 3],
            };
            let s = [rng.random_range(1..4), rng.random_range(1..4), rng.random_range(2..7)];
            let plane: usize = s.iter().product();
            let nin = g.cin * plane;
            let nout = g.cout() * plane;
            Case {
                x: away_from_zero(rng, nin),
                p: uniform(rng, g.param_len()),
                out_len: nout,
                fwd: Box::new(move |x, p, y| {
                    y[..nin].copy_from_slice(x);
                    let mut col = vec![0.0; g.col_len(s)];
                    layers::dense_block_forward(&g, s, p, y, &mut col).unwrap();
                }),
                bwd: Box::new(move |x, p, dy| {
                    let mut buf = vec![0.0; nout];
                    buf[..nin].copy_from_slice(x);
                    let mut col = vec![0.0; g.col_len(s)];
                    layers::dense_block_forward(&g, s, p, &mut buf, &mut col).unwrap();
                    let mut dbuf = dy.to_vec();
                    let mut dp = vec![0.0; p.len()];
                    let mut dcol = vec![0.0; col.len()];
                    layers::dense_block_backward(&g, s, p, &buf, &col, &mut dbuf, &mut dp, &mut dcol).unwrap();
                    (dbuf[..nin].to_vec(), dp)
                }),
            }
        }
        LayerKind::FullyConnected => {
            let (nin, nout) = (rng.random_range(1..12), rng.random_range(1..6));
            Case {
                x: uniform(rng, nin),
                p: uniform(rng, nin * nout + nout),
                out_len: nout,
                fwd: Box::new(move |x, p, y| layers::fc_forward(nin, nout, x, &p[..nin * nout], &p[nin * nout..], y)),
                bwd: Box::new(move |x, p, dy| {
                    let mut dx = vec![0.0; nin];
                    let mut dp = vec![0.0; p.len()];
                    let (dw, db) = dp.split_at_mut(nin * nout);
                    layers::fc_backward(nin, nout, x, &p[..nin * nout], dy, Some(&mut dx), dw, db);
                    (dx, dp)
                }),
            }
        }
    }
}

/// Max relative error over `cases` random shapes of one layer kind, for the
/// scalar `Σ r ⊙ layer(x; p)` with random weights `r`, w.r.t. both the input
/// and the parameters.
pub fn check_layer_kind(kind: LayerKind, cases: usize, seed: u64) -> f64 {
    let mut rng = rng_from_seed(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let c = random_case(kind, &mut rng);
        let r = uniform(&mut rng, c.out_len);
        let (mut yp, mut ym) = (vec![0.0; c.out_len], vec![0.0; c.out_len]);
        // Σ r ⊙ (y₊ − y₋) / 2h, differenced per element to avoid cancellation.
        let slope = |yp: &[f64], ym: &[f64]| {
            yp.iter().zip(ym).zip(&r).map(|((a, b), w)| (a - b) * w).sum::<f64>() / (2.0 * STEP)
        };
        let (dx, dp) = (c.bwd)(&c.x, &c.p, &r);
        let mut x = c.x.clone();
        for i in 0..x.len() {
            let v = x[i];
            x[i] = v + STEP;
            (c.fwd)(&x, &c.p, &mut yp);
            x[i] = v - STEP;
            (c.fwd)(&x, &c.p, &mut ym);
            x[i] = v;
            worst = worst.max(relative_error(dx[i], slope(&yp, &ym)));
        }
        let mut p = c.p.clone();
        for i in 0..p.len() {
            let v = p[i];
            p[i] = v + STEP;
            (c.fwd)(&c.x, &p, &mut yp);
            p[i] = v - STEP;
            (c.fwd)(&c.x, &p, &mut ym);
            p[i] = v;
            worst = worst.max(relative_error(dp[i], slope(&yp, &ym)));
        }
    }
    worst
}
