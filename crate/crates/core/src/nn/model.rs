//! Network specifications, parameter layout, forward and backward passes.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, ConvGeom, DenseBlockGeom, Dims};
use super::{NnError, Real};
use crate::seed::rng_from_seed;
use crate::tensor::{read_tensor, write_tensor, Axis, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputRank {
    OneDt,
    TwoDt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnArch {
    pub rank: InputRank,
    /// Input extents `(y, z, t)`; `z = 1` for 1D+t.
    pub input: [usize; 3],
    pub k0: usize,
    pub blocks: usize,
    pub layers_per_block: usize,
    pub growth: usize,
    pub stem_kernel: [usize; 3],
    pub stem_stride: [usize; 3],
    pub block_kernel: [usize; 3],
}

impl CnnArch {
    /// Temporal kernel 5 with stride 4 in the first layer, spatial kernel 3,
    /// four dense blocks of four layers with growth 5.
    pub fn one_dt(k0: usize, y: usize, t: usize) -> Self {
        Self {
            rank: InputRank::OneDt,
            input: [y, 1, t],
            k0,
            blocks: 4,
            layers_per_block: 4,
            growth: 5,
            stem_kernel: [3, 1, 5],
            stem_stride: [1, 1, 4],
            block_kernel: [3, 1, 3],
        }
    }

    pub fn two_dt(k0: usize, y: usize, z: usize, t: usize) -> Self {
        Self {
            rank: InputRank::TwoDt,
            input: [y, z, t],
            k0,
            blocks: 4,
            layers_per_block: 4,
            growth: 5,
            stem_kernel: [3, 3, 5],
            stem_stride: [1, 1, 4],
            block_kernel: [3, 3, 3],
        }
    }

    pub fn stem(&self) -> ConvGeom {
        ConvGeom {
            cin: 1,
            cout: self.k0,
            kernel: self.stem_kernel,
            stride: self.stem_stride,
            pad: self.stem_kernel.map(|k| k / 2),
        }
    }

    pub fn head_channels(&self) -> usize {
        self.k0 + self.blocks * self.layers_per_block * self.growth
    }

    /// Shape propagation: `(block geometry, block extents)` per block.
    pub fn propagate(&self) -> Result<Vec<(DenseBlockGeom, [usize; 3])>, NnError> {
        if self.k0 == 0 || self.blocks == 0 || self.layers_per_block == 0 || self.growth == 0 {
            return Err(NnError::InvalidSpec("k0, blocks, layers and growth must be >= 1".into()));
        }
        if self.block_kernel.iter().any(|k| k % 2 == 0) {
            return Err(NnError::InvalidSpec("block kernels must be odd".into()));
        }
        let mut d = self.stem().out_dims(Dims::new(1, self.input))?;
        let mut out = Vec::with_capacity(self.blocks);
        for b in 0..self.blocks {
            if b > 0 {
                d = layers::pool_dims(d);
            }
            let g = DenseBlockGeom {
                cin: d.c,
                layers: self.layers_per_block,
                growth: self.growth,
                kernel: self.block_kernel,
            };
            out.push((g, d.s));
            d = Dims::new(g.cout(), d.s);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchSpec {
    /// Fully connected with ReLU after every hidden layer and a scalar output.
    Mlp { input: usize, hidden: Vec<usize> },
    Cnn(CnnArch),
    /// A single fully connected layer to one output.
    Linear { input: usize },
}

#[derive(Debug, Clone)]
enum Plan {
    Mlp {
        sizes: Vec<usize>,
        /// `(weight, bias)` offsets per layer.
        offsets: Vec<(usize, usize)>,
    },
    Cnn {
        input: Dims,
        stem: ConvGeom,
        blocks: Vec<(DenseBlockGeom, [usize; 3])>,
        block_offsets: Vec<usize>,
        head_in: usize,
        head_w: usize,
    },
}

impl Plan {
    fn build(spec: &ArchSpec) -> Result<(Plan, usize), NnError> {
        match spec {
            ArchSpec::Mlp { input, hidden } => Self::mlp(*input, hidden),
            ArchSpec::Linear { input } => Self::mlp(*input, &[]),
            ArchSpec::Cnn(a) => {
                let stem = a.stem();
                let blocks = a.propagate()?;
                let mut off = stem.weight_len() + stem.cout;
                let mut block_offsets = Vec::new();
                for (g, _) in &blocks {
                    block_offsets.push(off);
                    off += g.param_len();
                }
                let head_in = blocks.last().map(|(g, _)| g.cout()).unwrap_or(a.k0);
                let head_w = off;
                off += head_in + 1;
                Ok((
                    Plan::Cnn {
                        input: Dims::new(1, a.input),
                        stem,
                        blocks,
                        block_offsets,
                        head_in,
                        head_w,
                    },
                    off,
                ))
            }
        }
    }

    fn mlp(input: usize, hidden: &[usize]) -> Result<(Plan, usize), NnError> {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        if sizes.contains(&0) {
            return Err(NnError::InvalidSpec("layer widths must be >= 1".into()));
        }
        let mut offsets = Vec::new();
        let mut off = 0;
        for w in sizes.windows(2) {
            offsets.push((off, off + w[0] * w[1]));
            off += w[0] * w[1] + w[1];
        }
        Ok((Plan::Mlp { sizes, offsets }, off))
    }
}

/// Per-thread activation cache and scratch space for one model.
#[derive(Debug, Clone, Default)]
pub struct Workspace<F> {
    x: Vec<F>,
    acts: Vec<Vec<F>>,
    grads: Vec<Vec<F>>,
    cols: Vec<Vec<F>>,
    dcol: Vec<F>,
    out: F,
}

#[derive(Debug, Clone)]
pub struct Model<F> {
    spec: ArchSpec,
    plan: Plan,
    pub params: Vec<F>,
}

impl<F: Real> Model<F> {
    /// He-uniform weights (bound `√(6 / fan_in)`), zero biases.
    pub fn new(spec: ArchSpec, seed: u64) -> Result<Self, NnError> {
        let (plan, n) = Plan::build(&spec)?;
        let mut params = vec![F::zero(); n];
        let mut rng = rng_from_seed(seed);
        let mut fill = |dst: &mut [F], fan_in: usize| {
            let bound = (6.0 / fan_in as f64).sqrt();
            for v in dst {
                *v = F::of(rng.random_range(-bound..bound));
            }
        };
        match &plan {
            Plan::Mlp { sizes, offsets } => {
                for (l, &(w, b)) in offsets.iter().enumerate() {
                    fill(&mut params[w..b], sizes[l]);
                }
            }
            Plan::Cnn {
                stem,
                blocks,
                block_offsets,
                head_in,
                head_w,
                ..
            } => {
                fill(&mut params[..stem.weight_len()], stem.fan_in());
                for ((g, _), &off) in blocks.iter().zip(block_offsets) {
                    let mut o = off;
                    for l in 0..g.layers {
                        let cg = g.layer(l);
                        fill(&mut params[o..o + cg.weight_len()], cg.fan_in());
                        o += cg.weight_len() + cg.cout;
                    }
                }
                fill(&mut params[*head_w..*head_w + *head_in], *head_in);
            }
        }
        Ok(Self { spec, plan, params })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn input_len(&self) -> usize {
        match &self.plan {
            Plan::Mlp { sizes, .. } => sizes[0],
            Plan::Cnn { input, .. } => input.len(),
        }
    }

    /// Index of the scalar output bias.
    pub fn head_bias_index(&self) -> usize {
        self.params.len() - 1
    }

    /// Channels entering the regression head (GAP width for CNNs).
    pub fn head_input(&self) -> usize {
        match &self.plan {
            Plan::Mlp { sizes, .. } => sizes[sizes.len() - 2],
            Plan::Cnn { head_in, .. } => *head_in,
        }
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            spec: self.spec.clone(),
            plan: self.plan.clone(),
            params: self.params.iter().map(|&v| G::of(v.to_f64())).collect(),
        }
    }

    pub fn workspace(&self) -> Workspace<F> {
        let mut ws = Workspace {
            x: vec![F::zero(); self.input_len()],
            ..Default::default()
        };
        match &self.plan {
            Plan::Mlp { sizes, .. } => {
                // acts[2l] = pre-activation, acts[2l + 1] = post-activation of layer l.
                for &s in &sizes[1..] {
                    ws.acts.push(vec![F::zero(); s]);
                    ws.acts.push(vec![F::zero(); s]);
                    ws.grads.push(vec![F::zero(); s]);
                }
                ws.grads.push(vec![F::zero(); sizes[0]]);
            }
            Plan::Cnn {
                input,
                stem,
                blocks,
                head_in,
                ..
            } => {
                // cols[0] is the stem patch matrix, cols[i + 1] that of block i.
                let stem_col = stem.col_len(*input).expect("plan validated at construction");
                ws.cols.push(vec![F::zero(); stem_col]);
                let mut biggest = 0;
                for (g, s) in blocks {
                    let n = g.cout() * s.iter().product::<usize>();
                    ws.acts.push(vec![F::zero(); n]);
                    ws.grads.push(vec![F::zero(); n]);
                    let c = g.col_len(*s);
                    biggest = biggest.max(c);
                    ws.cols.push(vec![F::zero(); c]);
                }
                let last = ws.acts.last().map(Vec::len).unwrap_or(0);
                ws.acts.push(vec![F::zero(); last]);
                ws.acts.push(vec![F::zero(); *head_in]);
                ws.dcol = vec![F::zero(); biggest];
            }
        }
        ws
    }

    /// Forward pass caching activations in `ws`.
    pub fn forward(&self, x: &[f32], ws: &mut Workspace<F>) -> Result<F, NnError> {
        if x.len() != self.input_len() {
            return Err(NnError::ShapeMismatch(format!(
                "model input expects {} values, got {}",
                self.input_len(),
                x.len()
            )));
        }
        for (d, &v) in ws.x.iter_mut().zip(x) {
            *d = F::of(v as f64);
        }
        let p = &self.params;
        let out = match &self.plan {
            Plan::Mlp { sizes, offsets } => {
                let nl = offsets.len();
                for l in 0..nl {
                    let (w, b) = offsets[l];
                    let (nin, nout) = (sizes[l], sizes[l + 1]);
                    let (before, after) = ws.acts.split_at_mut(2 * l);
                    let input: &[F] = if l == 0 { &ws.x } else { &before[2 * l - 1] };
                    let (pre, post) = after.split_at_mut(1);
                    layers::fc_forward(nin, nout, input, &p[w..b], &p[b..b + nout], &mut pre[0]);
                    if l + 1 < nl {
                        layers::relu_forward(&pre[0], &mut post[0]);
                    } else {
                        post[0].copy_from_slice(&pre[0]);
                    }
                }
                ws.acts[2 * nl - 1][0]
            }
            Plan::Cnn {
                input,
                stem,
                blocks,
                block_offsets,
                head_in,
                head_w,
            } => {
                let nb = blocks.len();
                let stem_n = stem.weight_len();
                let plane0 = blocks[0].1.iter().product::<usize>();
                layers::conv_forward_with(
                    stem,
                    *input,
                    &ws.x,
                    &p[..stem_n],
                    &p[stem_n..stem_n + stem.cout],
                    &mut ws.acts[0][..stem.cout * plane0],
                    &mut ws.cols[0],
                )?;
                for i in 0..nb {
                    let (g, s) = &blocks[i];
                    let off = block_offsets[i];
                    layers::dense_block_forward(g, *s, &p[off..off + g.param_len()], &mut ws.acts[i], &mut ws.cols[i + 1])?;
                    if i + 1 < nb {
                        let (a, b) = ws.acts.split_at_mut(i + 1);
                        let n_next = blocks[i + 1].0.cin * blocks[i + 1].1.iter().product::<usize>();
                        layers::avg_pool_forward(Dims::new(g.cout(), *s), &a[i], &mut b[0][..n_next]);
                    }
                }
                let (g, s) = &blocks[nb - 1];
                let d_last = Dims::new(g.cout(), *s);
                let (a, b) = ws.acts.split_at_mut(nb);
                layers::relu_forward(&a[nb - 1], &mut b[0]);
                let (r, gap) = b.split_at_mut(1);
                layers::global_avg_pool_forward(d_last, &r[0], &mut gap[0]);
                let mut out = [F::zero()];
                layers::fc_forward(*head_in, 1, &gap[0], &p[*head_w..*head_w + head_in], &p[head_w + head_in..], &mut out);
                out[0]
            }
        };
        ws.out = out;
        Ok(out)
    }

    pub fn predict(&self, x: &[f32], ws: &mut Workspace<F>) -> Result<F, NnError> {
        self.forward(x, ws)
    }

    /// Accumulates `dout · ∂output/∂params` into `grad`; call after `forward`.
    pub fn backward(&self, ws: &mut Workspace<F>, dout: F, grad: &mut [F]) -> Result<(), NnError> {
        if grad.len() != self.params.len() {
            return Err(NnError::ShapeMismatch("gradient buffer length".into()));
        }
        let p = &self.params;
        match &self.plan {
            Plan::Mlp { sizes, offsets } => {
                let nl = offsets.len();
                ws.grads[nl - 1][0] = dout;
                for l in (0..nl).rev() {
                    let (w, b) = offsets[l];
                    let (nin, nout) = (sizes[l], sizes[l + 1]);
                    let input: &[F] = if l == 0 { &ws.x } else { &ws.acts[2 * l - 1] };
                    // grads[l] holds d/d(pre-activation of layer l).
                    let (lower, upper) = ws.grads.split_at_mut(l);
                    let dpre = &upper[0];
                    let (gw, gb) = grad[w..b + nout].split_at_mut(b - w);
                    if l == 0 {
                        layers::fc_backward(nin, nout, input, &p[w..b], dpre, None, gw, gb);
                    } else {
                        let dpost = &mut lower[l - 1];
                        let mut tmp = vec![F::zero(); nin];
                        layers::fc_backward(nin, nout, input, &p[w..b], dpre, Some(&mut tmp), gw, gb);
                        dpost.fill(F::zero());
                        layers::relu_backward(&ws.acts[2 * (l - 1)], &tmp, dpost);
                    }
                }
            }
            Plan::Cnn {
                input,
                stem,
                blocks,
                block_offsets,
                head_in,
                head_w,
            } => {
                let nb = blocks.len();
                let (g, s) = &blocks[nb - 1];
                let d_last = Dims::new(g.cout(), *s);
                let gap = &ws.acts[nb + 1];
                let mut dgap = vec![F::zero(); *head_in];
                {
                    let (gw, gb) = grad[*head_w..].split_at_mut(*head_in);
                    layers::fc_backward(*head_in, 1, gap, &p[*head_w..*head_w + head_in], &[dout], Some(&mut dgap), gw, gb);
                }
                let mut drelu = vec![F::zero(); d_last.len()];
                layers::global_avg_pool_backward(d_last, &dgap, &mut drelu);
                ws.grads[nb - 1].fill(F::zero());
                layers::relu_backward(&ws.acts[nb - 1], &drelu, &mut ws.grads[nb - 1]);
                for i in (0..nb).rev() {
                    let (g, s) = &blocks[i];
                    let off = block_offsets[i];
                    layers::dense_block_backward(
                        g,
                        *s,
                        &p[off..off + g.param_len()],
                        &ws.acts[i],
                        &ws.cols[i + 1],
                        &mut ws.grads[i],
                        &mut grad[off..off + g.param_len()],
                        &mut ws.dcol[..g.col_len(*s)],
                    )?;
                    let n_in = g.cin * s.iter().product::<usize>();
                    if i > 0 {
                        let (pg, ps) = &blocks[i - 1];
                        let (lo, hi) = ws.grads.split_at_mut(i);
                        lo[i - 1].fill(F::zero());
                        layers::avg_pool_backward(Dims::new(pg.cout(), *ps), &hi[0][..n_in], &mut lo[i - 1]);
                    } else {
                        let stem_n = stem.weight_len();
                        let (gw, gb) = grad[..stem_n + stem.cout].split_at_mut(stem_n);
                        layers::conv_backward_with(stem, *input, &ws.cols[0], &p[..stem_n], &ws.grads[0][..n_in], None, gw, gb, &mut [])?;
                    }
                }
            }
        }
        Ok(())
    }
}

const CHECKPOINT_FORMAT: &str = "oce-model-v1";

/// Parameters as a 1-D tensor; the architecture rides in the header metadata.
pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<(), NnError> {
    let arch = serde_json::to_value(model.spec()).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    let t = Tensor::new(vec![model.param_count()], vec![Axis::C], model.params.clone())?
        .with_meta("format", CHECKPOINT_FORMAT)
        .with_meta("arch", arch);
    write_tensor(&t, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>, NnError> {
    let t = read_tensor(path)?;
    if t.meta().get("format").and_then(|v| v.as_str()) != Some(CHECKPOINT_FORMAT) {
        return Err(NnError::Checkpoint(format!("{}: not a model checkpoint", path.display())));
    }
    let arch = t
        .meta()
        .get("arch")
        .cloned()
        .ok_or_else(|| NnError::Checkpoint("missing architecture".into()))?;
    let spec: ArchSpec = serde_json::from_value(arch).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    let mut m = Model::<f32>::new(spec, 0)?;
    if t.len() != m.param_count() {
        return Err(NnError::Checkpoint(format!(
            "architecture has {} parameters, file has {}",
            m.param_count(),
            t.len()
        )));
    }
    m.params = t.into_data();
    Ok(m)
}
