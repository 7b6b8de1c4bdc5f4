//! Layer primitives on channels-first buffers `(c, y, z, t)`.
//!
//! Forward passes overwrite their output; backward passes accumulate into
//! the gradient buffers they are given.

use serde::{Deserialize, Serialize};

use super::{NnError, Real};

/// Channel count plus three spatial/temporal extents `(y, z, t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub c: usize,
    pub s: [usize; 3],
}

impl Dims {
    pub fn new(c: usize, s: [usize; 3]) -> Self {
        Self { c, s }
    }

    pub fn plane(&self) -> usize {
        self.s[0] * self.s[1] * self.s[2]
    }

    pub fn len(&self) -> usize {
        self.c * self.plane()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_c(&self, c: usize) -> Self {
        Self { c, s: self.s }
    }
}

/// Cross-correlation geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    /// Unit stride with "same" padding; kernels must be odd.
    pub fn same(cin: usize, cout: usize, kernel: [usize; 3]) -> Self {
        Self {
            cin,
            cout,
            kernel,
            stride: [1; 3],
            pad: kernel.map(|k| k / 2),
        }
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.kernel.iter().product::<usize>()
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.cin == 0 || self.cout == 0 {
            return Err(NnError::InvalidSpec("conv channels must be >= 1".into()));
        }
        if self.kernel.contains(&0) || self.stride.contains(&0) {
            return Err(NnError::InvalidSpec("kernel extents and strides must be >= 1".into()));
        }
        Ok(())
    }

    pub fn out_dims(&self, input: Dims) -> Result<Dims, NnError> {
        self.validate()?;
        if input.c != self.cin {
            return Err(NnError::ShapeMismatch(format!(
                "conv expects {} input channels, got {}",
                self.cin, input.c
            )));
        }
        let mut s = [0; 3];
        for a in 0..3 {
            let padded = input.s[a] + 2 * self.pad[a];
            if padded < self.kernel[a] {
                return Err(NnError::ShapeMismatch(format!(
                    "kernel {} does not fit padded extent {padded} on axis {a}",
                    self.kernel[a]
                )));
            }
            s[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(Dims::new(self.cout, s))
    }
}

/// Output indices `o` with `o·stride + k − pad` inside `[0, len)`.
fn valid_range(len: usize, out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if len + pad > k {
        ((len + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

#[inline]
fn axpy<F: Real>(y: &mut [F], a: F, x: &[F]) {
    for (u, &v) in y.iter_mut().zip(x) {
        *u += a * v;
    }
}

#[inline]
fn dot<F: Real>(x: &[F], y: &[F]) -> F {
    // Eight independent partial sums let the compiler vectorize.
    let mut acc = [F::zero(); 8];
    let n = x.len().min(y.len());
    let chunks = n / 8;
    for i in 0..chunks {
        for l in 0..8 {
            acc[l] += x[8 * i + l] * y[8 * i + l];
        }
    }
    let mut s = F::zero();
    for i in chunks * 8..n {
        s += x[i] * y[i];
    }
    acc.iter().fold(s, |a, &b| a + b)
}

/// Row-major `C (m×n) ← A·B + beta·C`; `a_t`/`b_t` read `A`/`B` transposed
/// from row-major storage of `Aᵀ`/`Bᵀ`.
#[allow(clippy::too_many_arguments)]
fn gemm<F: Real>(m: usize, k: usize, n: usize, a: &[F], a_t: bool, b: &[F], b_t: bool, beta: F, c: &mut [F]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the length checks above cover every strided index.
    unsafe {
        F::gemm_raw(m, k, n, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

/// Patch matrix of one input channel: `taps` rows of `od.plane()` columns,
/// optionally of `relu(x)`.
fn im2col_channel<F: Real>(g: &ConvGeom, s_in: [usize; 3], s_out: [usize; 3], x: &[F], relu: bool, dst: &mut [F]) {
    let p = s_out[0] * s_out[1] * s_out[2];
    let st = g.stride[2];
    let mut tap = 0;
    for ky in 0..g.kernel[0] {
        let (ylo, yhi) = valid_range(s_in[0], s_out[0], ky, g.stride[0], g.pad[0]);
        for kz in 0..g.kernel[1] {
            let (zlo, zhi) = valid_range(s_in[1], s_out[1], kz, g.stride[1], g.pad[1]);
            for kt in 0..g.kernel[2] {
                let (tlo, thi) = valid_range(s_in[2], s_out[2], kt, st, g.pad[2]);
                let row = &mut dst[tap * p..(tap + 1) * p];
                row.fill(F::zero());
                for oy in ylo..yhi {
                    let iy = oy * g.stride[0] + ky - g.pad[0];
                    for oz in zlo..zhi {
                        let iz = oz * g.stride[1] + kz - g.pad[1];
                        let o = (oy * s_out[1] + oz) * s_out[2];
                        let i = (iy * s_in[1] + iz) * s_in[2] + kt + tlo * st - g.pad[2];
                        let out = &mut row[o + tlo..o + thi];
                        if st == 1 {
                            let src = &x[i..i + (thi - tlo)];
                            if relu {
                                for (d, &v) in out.iter_mut().zip(src) {
                                    *d = if v > F::zero() { v } else { F::zero() };
                                }
                            } else {
                                out.copy_from_slice(src);
                            }
                        } else {
                            for (j, d) in out.iter_mut().enumerate() {
                                let v = x[i + j * st];
                                *d = if relu && !(v > F::zero()) { F::zero() } else { v };
                            }
                        }
                    }
                }
                tap += 1;
            }
        }
    }
}

/// Adjoint of [`im2col_channel`] without the ReLU: scatter-adds patch
/// gradients back onto the channel plane.
fn col2im_channel<F: Real>(g: &ConvGeom, s_in: [usize; 3], s_out: [usize; 3], dcol: &[F], dx: &mut [F]) {
    let p = s_out[0] * s_out[1] * s_out[2];
    let st = g.stride[2];
    let mut tap = 0;
    for ky in 0..g.kernel[0] {
        let (ylo, yhi) = valid_range(s_in[0], s_out[0], ky, g.stride[0], g.pad[0]);
        for kz in 0..g.kernel[1] {
            let (zlo, zhi) = valid_range(s_in[1], s_out[1], kz, g.stride[1], g.pad[1]);
            for kt in 0..g.kernel[2] {
                let (tlo, thi) = valid_range(s_in[2], s_out[2], kt, st, g.pad[2]);
                let row = &dcol[tap * p..(tap + 1) * p];
                for oy in ylo..yhi {
                    let iy = oy * g.stride[0] + ky - g.pad[0];
                    for oz in zlo..zhi {
                        let iz = oz * g.stride[1] + kz - g.pad[1];
                        let o = (oy * s_out[1] + oz) * s_out[2];
                        let i = (iy * s_in[1] + iz) * s_in[2] + kt + tlo * st - g.pad[2];
                        let src = &row[o + tlo..o + thi];
                        if st == 1 {
                            for (d, &v) in dx[i..i + (thi - tlo)].iter_mut().zip(src) {
                                *d += v;
                            }
                        } else {
                            for (j, &v) in src.iter().enumerate() {
                                dx[i + j * st] += v;
                            }
                        }
                    }
                }
                tap += 1;
            }
        }
    }
}

impl ConvGeom {
    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Scratch length needed by the `_with` conv variants.
    pub fn col_len(&self, input: Dims) -> Result<usize, NnError> {
        Ok(self.cin * self.taps() * self.out_dims(input)?.plane())
    }
}

/// `y[co] = b[co] + Σ_ci w[co, ci] ⋆ x[ci]`. Weight layout `(cout, cin, ky, kz, kt)`.
pub fn conv_forward<F: Real>(g: &ConvGeom, xd: Dims, x: &[F], w: &[F], b: &[F], y: &mut [F]) -> Result<Dims, NnError> {
    let mut col = vec![F::zero(); g.col_len(xd)?];
    conv_forward_with(g, xd, x, w, b, y, &mut col)
}

/// As [`conv_forward`], leaving the patch matrix in `col` for the backward pass.
pub fn conv_forward_with<F: Real>(
    g: &ConvGeom,
    xd: Dims,
    x: &[F],
    w: &[F],
    b: &[F],
    y: &mut [F],
    col: &mut [F],
) -> Result<Dims, NnError> {
    let od = g.out_dims(xd)?;
    check_len("conv input", x.len(), xd.len())?;
    check_len("conv weight", w.len(), g.weight_len())?;
    check_len("conv bias", b.len(), g.cout)?;
    check_len("conv output", y.len(), od.len())?;
    let (xp, op, kt) = (xd.plane(), od.plane(), g.taps());
    check_len("conv scratch", col.len(), g.cin * kt * op)?;
    for ci in 0..g.cin {
        im2col_channel(g, xd.s, od.s, &x[ci * xp..(ci + 1) * xp], false, &mut col[ci * kt * op..(ci + 1) * kt * op]);
    }
    for co in 0..g.cout {
        y[co * op..(co + 1) * op].fill(b[co]);
    }
    gemm(g.cout, g.cin * kt, op, w, false, col, false, F::one(), y);
    Ok(od)
}

/// Accumulates `dw`, `db` and, when given, `dx` from the output gradient `dy`.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<F: Real>(
    g: &ConvGeom,
    xd: Dims,
    x: &[F],
    w: &[F],
    dy: &[F],
    dx: Option<&mut [F]>,
    dw: &mut [F],
    db: &mut [F],
) -> Result<(), NnError> {
    let od = g.out_dims(xd)?;
    check_len("conv input", x.len(), xd.len())?;
    let n = g.col_len(xd)?;
    let mut col = vec![F::zero(); n];
    let (xp, op, kt) = (xd.plane(), od.plane(), g.taps());
    for ci in 0..g.cin {
        im2col_channel(g, xd.s, od.s, &x[ci * xp..(ci + 1) * xp], false, &mut col[ci * kt * op..(ci + 1) * kt * op]);
    }
    let mut dcol = vec![F::zero(); if dx.is_some() { n } else { 0 }];
    conv_backward_with(g, xd, &col, w, dy, dx, dw, db, &mut dcol)
}

/// Backward pass reusing the patch matrix left by [`conv_forward_with`];
/// `dcol` is scratch of the same length, unused when `dx` is `None`.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward_with<F: Real>(
    g: &ConvGeom,
    xd: Dims,
    col: &[F],
    w: &[F],
    dy: &[F],
    dx: Option<&mut [F]>,
    dw: &mut [F],
    db: &mut [F],
    dcol: &mut [F],
) -> Result<(), NnError> {
    let od = g.out_dims(xd)?;
    let (xp, op, kt) = (xd.plane(), od.plane(), g.taps());
    check_len("conv output gradient", dy.len(), od.len())?;
    check_len("conv weight gradient", dw.len(), g.weight_len())?;
    check_len("conv bias gradient", db.len(), g.cout)?;
    check_len("conv scratch", col.len(), g.cin * kt * op)?;
    for co in 0..g.cout {
        db[co] += dy[co * op..(co + 1) * op].iter().fold(F::zero(), |a, &v| a + v);
    }
    gemm(g.cout, op, g.cin * kt, dy, false, col, true, F::one(), dw);
    if let Some(dx) = dx {
        check_len("conv input gradient", dx.len(), xd.len())?;
        check_len("conv gradient scratch", dcol.len(), col.len())?;
        gemm(g.cin * kt, g.cout, op, w, true, dy, false, F::zero(), dcol);
        for ci in 0..g.cin {
            col2im_channel(g, xd.s, od.s, &dcol[ci * kt * op..(ci + 1) * kt * op], &mut dx[ci * xp..(ci + 1) * xp]);
        }
    }
    Ok(())
}

pub fn relu_forward<F: Real>(x: &[F], y: &mut [F]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o = if v > F::zero() { v } else { F::zero() };
    }
}

/// `dx += dy · 1[x > 0]`.
pub fn relu_backward<F: Real>(x: &[F], dy: &[F], dx: &mut [F]) {
    for ((d, &g), &v) in dx.iter_mut().zip(dy).zip(x) {
        if v > F::zero() {
            *d += g;
        }
    }
}

/// Axes with extent >= 2 are pooled by a window of 2 (odd remainder dropped);
/// singleton axes pass through.
pub fn pool_dims(d: Dims) -> Dims {
    Dims::new(d.c, d.s.map(|e| if e >= 2 { e / 2 } else { e }))
}

fn pool_windows(d: Dims) -> [usize; 3] {
    d.s.map(|e| if e >= 2 { 2 } else { 1 })
}

pub fn avg_pool_forward<F: Real>(xd: Dims, x: &[F], y: &mut [F]) -> Dims {
    let od = pool_dims(xd);
    let win = pool_windows(xd);
    let scale = F::one() / F::from(win.iter().product::<usize>()).unwrap();
    for c in 0..xd.c {
        for oy in 0..od.s[0] {
            for oz in 0..od.s[1] {
                let orow = ((c * od.s[0] + oy) * od.s[1] + oz) * od.s[2];
                for ot in 0..od.s[2] {
                    let mut acc = F::zero();
                    for a in 0..win[0] {
                        for b in 0..win[1] {
                            let irow = ((c * xd.s[0] + oy * win[0] + a) * xd.s[1] + oz * win[1] + b) * xd.s[2];
                            for e in 0..win[2] {
                                acc += x[irow + ot * win[2] + e];
                            }
                        }
                    }
                    y[orow + ot] = acc * scale;
                }
            }
        }
    }
    od
}

pub fn avg_pool_backward<F: Real>(xd: Dims, dy: &[F], dx: &mut [F]) {
    let od = pool_dims(xd);
    let win = pool_windows(xd);
    let scale = F::one() / F::from(win.iter().product::<usize>()).unwrap();
    for c in 0..xd.c {
        for oy in 0..od.s[0] {
            for oz in 0..od.s[1] {
                let orow = ((c * od.s[0] + oy) * od.s[1] + oz) * od.s[2];
                for ot in 0..od.s[2] {
                    let g = dy[orow + ot] * scale;
                    for a in 0..win[0] {
                        for b in 0..win[1] {
                            let irow = ((c * xd.s[0] + oy * win[0] + a) * xd.s[1] + oz * win[1] + b) * xd.s[2];
                            for e in 0..win[2] {
                                dx[irow + ot * win[2] + e] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn global_avg_pool_forward<F: Real>(xd: Dims, x: &[F], y: &mut [F]) {
    let p = xd.plane();
    let inv = F::one() / F::from(p).unwrap();
    for c in 0..xd.c {
        y[c] = x[c * p..(c + 1) * p].iter().fold(F::zero(), |a, &v| a + v) * inv;
    }
}

pub fn global_avg_pool_backward<F: Real>(xd: Dims, dy: &[F], dx: &mut [F]) {
    let p = xd.plane();
    let inv = F::one() / F::from(p).unwrap();
    for c in 0..xd.c {
        let g = dy[c] * inv;
        for v in &mut dx[c * p..(c + 1) * p] {
            *v += g;
        }
    }
}

/// `y = W x + b` with `W` stored `(nout, nin)`.
pub fn fc_forward<F: Real>(nin: usize, nout: usize, x: &[F], w: &[F], b: &[F], y: &mut [F]) {
    for o in 0..nout {
        y[o] = b[o] + dot(&w[o * nin..(o + 1) * nin], x);
    }
}

#[allow(clippy::too_many_arguments)]
pub fn fc_backward<F: Real>(
    nin: usize,
    nout: usize,
    x: &[F],
    w: &[F],
    dy: &[F],
    dx: Option<&mut [F]>,
    dw: &mut [F],
    db: &mut [F],
) {
    for o in 0..nout {
        db[o] += dy[o];
        axpy(&mut dw[o * nin..(o + 1) * nin], dy[o], x);
    }
    if let Some(dx) = dx {
        for o in 0..nout {
            axpy(dx, dy[o], &w[o * nin..(o + 1) * nin]);
        }
    }
}

/// One dense block operating in place on `buf`, whose first `cin` channels
/// hold the block input; layer `l` writes channels `cin + l·growth ..`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseBlockGeom {
    pub cin: usize,
    pub layers: usize,
    pub growth: usize,
    pub kernel: [usize; 3],
}

impl DenseBlockGeom {
    pub fn cout(&self) -> usize {
        self.cin + self.layers * self.growth
    }

    pub fn layer(&self, l: usize) -> ConvGeom {
        ConvGeom::same(self.cin + l * self.growth, self.growth, self.kernel)
    }

    pub fn param_len(&self) -> usize {
        (0..self.layers)
            .map(|l| self.layer(l).weight_len() + self.growth)
            .sum()
    }

    /// Patch rows are kept for every channel read by some layer.
    pub fn col_len(&self, s: [usize; 3]) -> usize {
        let taps: usize = self.kernel.iter().product();
        self.layer(self.layers - 1).cin * taps * s.iter().product::<usize>()
    }
}

/// Offsets `(weight, bias)` of layer `l` inside the block's parameter slice.
fn block_offsets(g: &DenseBlockGeom, l: usize) -> (usize, usize) {
    let off: usize = (0..l).map(|i| g.layer(i).weight_len() + g.growth).sum();
    (off, off + g.layer(l).weight_len())
}

/// Each channel's ReLU patch rows are built once, when the channel first
/// becomes a layer input, and shared by all later layers. `col` must hold
/// [`DenseBlockGeom::col_len`] values and is needed by the backward pass.
pub fn dense_block_forward<F: Real>(
    g: &DenseBlockGeom,
    s: [usize; 3],
    params: &[F],
    buf: &mut [F],
    col: &mut [F],
) -> Result<(), NnError> {
    let plane = s[0] * s[1] * s[2];
    check_len("dense block buffer", buf.len(), g.cout() * plane)?;
    check_len("dense block parameters", params.len(), g.param_len())?;
    check_len("dense block scratch", col.len(), g.col_len(s))?;
    let taps: usize = g.kernel.iter().product();
    let rows = taps * plane;
    let mut ready = 0;
    for l in 0..g.layers {
        let cg = g.layer(l);
        for c in ready..cg.cin {
            im2col_channel(&cg, s, s, &buf[c * plane..(c + 1) * plane], true, &mut col[c * rows..(c + 1) * rows]);
        }
        ready = cg.cin;
        let (wo, bo) = block_offsets(g, l);
        let out = &mut buf[cg.cin * plane..(cg.cin + g.growth) * plane];
        for co in 0..g.growth {
            out[co * plane..(co + 1) * plane].fill(params[bo + co]);
        }
        gemm(g.growth, cg.cin * taps, plane, &params[wo..bo], false, &col[..cg.cin * rows], false, F::one(), out);
    }
    Ok(())
}

/// `dbuf` holds the gradient w.r.t. the whole block output on entry; on
/// return its first `cin` channels hold the gradient w.r.t. the block input.
/// `col` is the patch matrix left by the forward pass; `dcol` is scratch of
/// the same length.
#[allow(clippy::too_many_arguments)]
pub fn dense_block_backward<F: Real>(
    g: &DenseBlockGeom,
    s: [usize; 3],
    params: &[F],
    buf: &[F],
    col: &[F],
    dbuf: &mut [F],
    dparams: &mut [F],
    dcol: &mut [F],
) -> Result<(), NnError> {
    let plane = s[0] * s[1] * s[2];
    check_len("dense block gradient", dbuf.len(), g.cout() * plane)?;
    check_len("dense block parameter gradient", dparams.len(), g.param_len())?;
    check_len("dense block scratch", dcol.len(), g.col_len(s))?;
    let taps: usize = g.kernel.iter().product();
    let rows = taps * plane;
    let mut tmp = vec![F::zero(); plane];
    let mut finalize = |cg: &ConvGeom, c: usize, dcol: &[F], dbuf: &mut [F]| {
        tmp.fill(F::zero());
        col2im_channel(cg, s, s, &dcol[c * rows..(c + 1) * rows], &mut tmp);
        relu_backward(&buf[c * plane..(c + 1) * plane], &tmp, &mut dbuf[c * plane..(c + 1) * plane]);
    };
    for l in (0..g.layers).rev() {
        let cg = g.layer(l);
        // Channels written by layer l are complete once all later layers ran.
        if l + 1 < g.layers {
            for c in cg.cin..cg.cin + g.growth {
                finalize(&cg, c, dcol, dbuf);
            }
        }
        let (wo, bo) = block_offsets(g, l);
        let dy = &dbuf[cg.cin * plane..(cg.cin + g.growth) * plane];
        for co in 0..g.growth {
            dparams[bo + co] += dy[co * plane..(co + 1) * plane].iter().fold(F::zero(), |a, &v| a + v);
        }
        gemm(g.growth, plane, cg.cin * taps, dy, false, &col[..cg.cin * rows], true, F::one(), &mut dparams[wo..bo]);
        let beta = if l + 1 == g.layers { F::zero() } else { F::one() };
        gemm(cg.cin * taps, g.growth, plane, &params[wo..bo], true, dy, false, beta, &mut dcol[..cg.cin * rows]);
    }
    let cg = g.layer(0);
    for c in 0..g.cin {
        finalize(&cg, c, dcol, dbuf);
    }
    Ok(())
}

fn check_len(what: &str, got: usize, want: usize) -> Result<(), NnError> {
    if got != want {
        return Err(NnError::ShapeMismatch(format!("{what}: expected {want} values, got {got}")));
    }
    Ok(())
}
