//! Preprocessing from raw wrapped phase to the cropped 2D+t phase-difference
//! volume and the depth-averaged 1D+t spatio-temporal map.
//!
//! Order: surface crop → temporal unwrap → frame-to-frame difference → frame
//! crop → row quality mask → 3×3×3 median → masked axial mean.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Axis, Tensor, TensorError};
use crate::wavesim::RawMeasurement;

#[derive(Debug, Error)]
pub enum PipeError {
    #[error("need at least {needed} frames, got {got}")]
    TooFewFrames { needed: usize, got: usize },
    #[error("index {index} out of range for extent {extent}")]
    IndexOutOfRange { index: usize, extent: usize },
    #[error("no depth rows left after masking")]
    AllRowsMasked,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

const YZT: [Axis; 3] = [Axis::Y, Axis::Z, Axis::T];

/// Frame-to-frame phase differences with the depth-row keep mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseDiffVolume {
    /// Axes (y, z, t), rad/frame.
    pub values: Tensor,
    /// One flag per depth row; `false` rows are excluded from reductions.
    pub row_mask: Vec<bool>,
    pub surface_index: usize,
}

/// Depth-averaged lateral × time representation.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatioTemporalMap {
    /// Axes (y, t).
    pub values: Tensor,
    pub frame_interval_s: f64,
    pub pixel_pitch_m: f64,
}

impl SpatioTemporalMap {
    pub fn lateral(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn row(&self, y: usize) -> &[f32] {
        let nt = self.frames();
        &self.values.data()[y * nt..(y + 1) * nt]
    }

    /// The map as a tensor carrying its sampling metadata.
    pub fn to_tensor(&self) -> Tensor {
        self.values
            .clone()
            .with_meta("frame_interval_s", self.frame_interval_s)
            .with_meta("pixel_pitch_m", self.pixel_pitch_m)
    }

    pub fn from_tensor(t: Tensor) -> Result<Self, PipeError> {
        t.expect_axes(&[Axis::Y, Axis::T])?;
        let frame_interval_s = t.meta_f64("frame_interval_s").ok_or_else(|| {
            PipeError::InvalidArgument("map tensor lacks frame_interval_s".into())
        })?;
        let pixel_pitch_m = t
            .meta_f64("pixel_pitch_m")
            .ok_or_else(|| PipeError::InvalidArgument("map tensor lacks pixel_pitch_m".into()))?;
        Ok(Self {
            values: t,
            frame_interval_s,
            pixel_pitch_m,
        })
    }
}

fn dims3(vol: &Tensor) -> Result<(usize, usize, usize), PipeError> {
    vol.expect_axes(&YZT)?;
    let s = vol.shape();
    Ok((s[0], s[1], s[2]))
}

/// Maps a phase step into `(-π, π]`.
fn principal_step(d: f64) -> f64 {
    let w = d - 2.0 * PI * ((d + PI) / (2.0 * PI)).floor();
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// Removes 2π jumps along a series, anchored at the first sample.
pub fn unwrap_temporal(series: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(series.len());
    let Some(&first) = series.first() else {
        return out;
    };
    out.push(first);
    let mut acc = first;
    for w in series.windows(2) {
        acc += principal_step(w[1] - w[0]);
        out.push(acc);
    }
    out
}

/// [`unwrap_temporal`] applied independently to every (y, z) pixel.
pub fn unwrap_volume(vol: &Tensor) -> Result<Tensor, PipeError> {
    let (_, _, nt) = dims3(vol)?;
    let mut out = vol.clone();
    for px in out.data_mut().chunks_exact_mut(nt) {
        let mut prev = px[0] as f64;
        let mut acc = prev;
        for v in px.iter_mut().skip(1) {
            let cur = *v as f64;
            acc += principal_step(cur - prev);
            prev = cur;
            *v = acc as f32;
        }
    }
    Ok(out)
}

/// `out[.., k] = in[.., k + 1] - in[.., k]`.
pub fn temporal_phase_difference(vol: &Tensor) -> Result<Tensor, PipeError> {
    let (ny, nz, nt) = dims3(vol)?;
    if nt < 2 {
        return Err(PipeError::TooFewFrames { needed: 2, got: nt });
    }
    let mut data = Vec::with_capacity(ny * nz * (nt - 1));
    for px in vol.data().chunks_exact(nt) {
        data.extend(px.windows(2).map(|w| w[1] - w[0]));
    }
    let mut out = Tensor::new(vec![ny, nz, nt - 1], YZT.to_vec(), data)?;
    *out.meta_mut() = vol.meta().clone();
    Ok(out)
}

/// Linear-interpolation quantile (numpy's default) of unsorted values.
fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Keeps depth rows whose lateral-mean intensity reaches the given quantile of
/// all row means. At least one row is always kept.
pub fn row_quality_mask(intensity: &Tensor, threshold_quantile: f64) -> Result<Vec<bool>, PipeError> {
    intensity.expect_axes(&[Axis::Y, Axis::Z])?;
    if !(0.0..1.0).contains(&threshold_quantile) {
        return Err(PipeError::InvalidArgument(format!(
            "threshold quantile must lie in [0, 1), got {threshold_quantile}"
        )));
    }
    let (ny, nz) = (intensity.shape()[0], intensity.shape()[1]);
    let means: Vec<f64> = (0..nz)
        .map(|z| (0..ny).map(|y| intensity.get(&[y, z]) as f64).sum::<f64>() / ny as f64)
        .collect();
    let threshold = quantile(&means, threshold_quantile);
    let mut mask: Vec<bool> = means.iter().map(|&m| m >= threshold).collect();
    if !mask.iter().any(|&k| k) {
        let best = (0..nz).max_by(|&a, &b| means[a].total_cmp(&means[b])).unwrap();
        mask[best] = true;
    }
    Ok(mask)
}

/// Median of each voxel's 3×3×3 neighbourhood, borders by edge replication.
pub fn median_filter_3(vol: &Tensor) -> Result<Tensor, PipeError> {
    let (ny, nz, nt) = dims3(vol)?;
    let src = vol.data();
    let mut out = vec![0.0f32; src.len()];
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    // Each (y, z) line padded by one replicated frame at both ends.
    let padded: Vec<f32> = src
        .chunks_exact(nt)
        .flat_map(|px| {
            std::iter::once(px[0])
                .chain(px.iter().copied())
                .chain(std::iter::once(px[nt - 1]))
        })
        .collect();
    let np = nt + 2;
    let mut work = vec![0.0f32; 15 * nt];
    for y in 0..ny {
        for z in 0..nz {
            let mut inputs = [0usize; 27];
            let mut k = 0;
            for dy in -1..=1isize {
                for dz in -1..=1isize {
                    let yy = clamp(y as isize + dy, ny);
                    let zz = clamp(z as isize + dz, nz);
                    for d in 0..3 {
                        inputs[k] = (yy * nz + zz) * np + d;
                        k += 1;
                    }
                }
            }
            let line = |i: usize| &padded[inputs[i]..inputs[i] + nt];
            let dst = &mut out[(y * nz + z) * nt..(y * nz + z + 1) * nt];
            forgetful_median27(line, &mut work, nt, dst);
        }
    }
    let mut t = Tensor::new(vol.shape().to_vec(), YZT.to_vec(), out)?;
    *t.meta_mut() = vol.meta().clone();
    Ok(t)
}

/// Orders buffers `i` and `j` element-wise so that `i` holds the minima.
#[inline(always)]
fn cmp_swap(work: &mut [f32], n: usize, i: usize, j: usize) {
    let (lo, hi) = if i < j {
        let (a, b) = work.split_at_mut(j * n);
        (&mut a[i * n..(i + 1) * n], &mut b[..n])
    } else {
        let (a, b) = work.split_at_mut(i * n);
        (&mut b[..n], &mut a[j * n..(j + 1) * n])
    };
    for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
        let (x, y) = (*a, *b);
        *a = x.min(y);
        *b = x.max(y);
    }
}

/// Element-wise 14th order statistic of 27 equally long lines by forgetful
/// selection: hold 15 candidates, drop the minimum and maximum, admit the
/// next line, repeat until one candidate remains.
fn forgetful_median27<'a>(
    line: impl Fn(usize) -> &'a [f32],
    work: &mut [f32],
    n: usize,
    dst: &mut [f32],
) {
    for i in 0..15 {
        work[i * n..(i + 1) * n].copy_from_slice(line(i));
    }
    let mut live: Vec<usize> = (0..15).collect();
    let mut next = 15;
    loop {
        let k = live.len();
        for i in 1..k {
            cmp_swap(work, n, live[0], live[i]);
        }
        for i in 1..k - 1 {
            cmp_swap(work, n, live[i], live[k - 1]);
        }
        let freed = live.pop().expect("non-empty");
        live.remove(0);
        if next == 27 {
            debug_assert_eq!(live.len(), 1);
            dst.copy_from_slice(&work[live[0] * n..(live[0] + 1) * n]);
            return;
        }
        work[freed * n..(freed + 1) * n].copy_from_slice(line(next));
        live.push(freed);
        next += 1;
    }
}

/// Drops depth rows above the surface so that output row 0 is the surface.
/// Accepts (y, z, t) volumes and (y, z) images.
pub fn crop_above_surface(vol: &Tensor, surface_index: usize) -> Result<Tensor, PipeError> {
    let axes = vol.axes().to_vec();
    let (ny, nz, inner) = match axes.as_slice() {
        [Axis::Y, Axis::Z, Axis::T] => (vol.shape()[0], vol.shape()[1], vol.shape()[2]),
        [Axis::Y, Axis::Z] => (vol.shape()[0], vol.shape()[1], 1),
        _ => {
            return Err(TensorError::ShapeMismatch(format!(
                "expected (y,z,t) or (y,z) axes, found {axes:?}"
            ))
            .into())
        }
    };
    if surface_index >= nz {
        return Err(PipeError::IndexOutOfRange {
            index: surface_index,
            extent: nz,
        });
    }
    let keep = nz - surface_index;
    let mut data = Vec::with_capacity(ny * keep * inner);
    for y in 0..ny {
        let start = (y * nz + surface_index) * inner;
        data.extend_from_slice(&vol.data()[start..start + keep * inner]);
    }
    let mut shape = vol.shape().to_vec();
    shape[1] = keep;
    let mut t = Tensor::new(shape, axes, data)?;
    *t.meta_mut() = vol.meta().clone();
    Ok(t)
}

/// Keeps the first `frames_kept` frames.
pub fn crop_frames(vol: &Tensor, frames_kept: usize) -> Result<Tensor, PipeError> {
    let (ny, nz, nt) = dims3(vol)?;
    if frames_kept == 0 || nt < frames_kept {
        return Err(PipeError::TooFewFrames {
            needed: frames_kept.max(1),
            got: nt,
        });
    }
    let mut data = Vec::with_capacity(ny * nz * frames_kept);
    for px in vol.data().chunks_exact(nt) {
        data.extend_from_slice(&px[..frames_kept]);
    }
    let mut t = Tensor::new(vec![ny, nz, frames_kept], YZT.to_vec(), data)?;
    *t.meta_mut() = vol.meta().clone();
    Ok(t)
}

/// Mean over unmasked depth rows.
pub fn axial_mean(
    vol: &Tensor,
    row_mask: &[bool],
    frame_interval_s: f64,
    pixel_pitch_m: f64,
) -> Result<SpatioTemporalMap, PipeError> {
    let (ny, nz, nt) = dims3(vol)?;
    if row_mask.len() != nz {
        return Err(TensorError::ShapeMismatch(format!(
            "row mask has {} flags for {} rows",
            row_mask.len(),
            nz
        ))
        .into());
    }
    let kept: Vec<usize> = (0..nz).filter(|&z| row_mask[z]).collect();
    if kept.is_empty() {
        return Err(PipeError::AllRowsMasked);
    }
    let mut acc = vec![0.0f64; ny * nt];
    for y in 0..ny {
        let dst = &mut acc[y * nt..(y + 1) * nt];
        for &z in &kept {
            let src = &vol.data()[(y * nz + z) * nt..(y * nz + z + 1) * nt];
            for (a, &s) in dst.iter_mut().zip(src) {
                *a += s as f64;
            }
        }
    }
    let n = kept.len() as f64;
    let data = acc.into_iter().map(|a| (a / n) as f32).collect();
    Ok(SpatioTemporalMap {
        values: Tensor::new(vec![ny, nt], vec![Axis::Y, Axis::T], data)?,
        frame_interval_s,
        pixel_pitch_m,
    })
}

/// Replaces every masked row with its nearest kept row (ties go to the
/// shallower one) so that neighbourhood filters never read masked data.
fn fill_masked_rows(vol: &mut Tensor, row_mask: &[bool]) {
    let (ny, nz, nt) = (vol.shape()[0], vol.shape()[1], vol.shape()[2]);
    let kept: Vec<usize> = (0..nz).filter(|&z| row_mask[z]).collect();
    let source: Vec<usize> = (0..nz)
        .map(|z| {
            *kept
                .iter()
                .min_by_key(|&&k| (k.abs_diff(z), k))
                .expect("at least one kept row")
        })
        .collect();
    let data = vol.data_mut();
    for y in 0..ny {
        for z in (0..nz).filter(|&z| !row_mask[z]) {
            let from = (y * nz + source[z]) * nt;
            let to = (y * nz + z) * nt;
            data.copy_within(from..from + nt, to);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub threshold_quantile: f64,
    pub frames_kept: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            threshold_quantile: 0.1,
            frames_kept: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    /// Filtered 2D+t difference volume; masked rows hold copies of their nearest kept row.
    pub volume: PhaseDiffVolume,
    pub map: SpatioTemporalMap,
}

pub fn preprocess(raw: &RawMeasurement, cfg: &PreprocessConfig) -> Result<Preprocessed, PipeError> {
    preprocess_tensors(&raw.phase, &raw.intensity, raw.surface_index, cfg)
}

/// [`preprocess`] on tensors read back from disk.
pub fn preprocess_tensors(
    phase: &Tensor,
    intensity: &Tensor,
    surface_index: usize,
    cfg: &PreprocessConfig,
) -> Result<Preprocessed, PipeError> {
    let frame_interval_s = phase
        .meta_f64("frame_interval_s")
        .ok_or_else(|| PipeError::InvalidArgument("phase tensor lacks frame_interval_s".into()))?;
    let pixel_pitch_m = phase
        .meta_f64("pixel_pitch_m")
        .ok_or_else(|| PipeError::InvalidArgument("phase tensor lacks pixel_pitch_m".into()))?;

    let phase = crop_above_surface(phase, surface_index)?;
    let intensity = crop_above_surface(intensity, surface_index)?;
    let unwrapped = unwrap_volume(&phase)?;
    let diff = temporal_phase_difference(&unwrapped)?;
    let mut diff = crop_frames(&diff, cfg.frames_kept)?;
    let row_mask = row_quality_mask(&intensity, cfg.threshold_quantile)?;
    fill_masked_rows(&mut diff, &row_mask);
    let filtered = median_filter_3(&diff)?;
    let map = axial_mean(&filtered, &row_mask, frame_interval_s, pixel_pitch_m)?;
    Ok(Preprocessed {
        volume: PhaseDiffVolume {
            values: filtered,
            row_mask,
            surface_index,
        },
        map,
    })
}
