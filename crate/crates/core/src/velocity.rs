//! Wavefront arrival detection on the 1D+t map and the least-squares
//! velocity fit `v = Δy/Δt`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phasepipe::SpatioTemporalMap;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VelocityError {
    #[error("no wavefront: {valid} lateral pixels with a qualifying peak")]
    NoWavefront { valid: usize },
    #[error("need at least 2 valid arrival points, got {0}")]
    TooFewPoints(usize),
    #[error("degenerate track: {0}")]
    DegenerateTrack(String),
    #[error("poor fit: {n_points} points, r² = {r_squared:.3}")]
    PoorFit { n_points: usize, r_squared: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VelocityConfig {
    /// Peak must exceed `threshold_k · σ_noise + noise_floor`.
    pub threshold_k: f64,
    pub noise_floor: f64,
    /// Leading frames used to estimate the per-pixel noise level.
    pub noise_window: usize,
    /// Shortest run of consecutive supra-threshold frames accepted as a wave lobe.
    pub min_run_frames: usize,
    /// Estimates from fewer valid pixels or a lower r² are rejected.
    pub min_points: usize,
    pub min_r_squared: f64,
}

impl Default for VelocityConfig {
    fn default() -> Self {
        Self {
            threshold_k: 4.0,
            noise_floor: 1e-4,
            noise_window: 10,
            min_run_frames: 5,
            min_points: 8,
            min_r_squared: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WavefrontTrack {
    /// Sub-frame arrival per lateral pixel; meaningful only where `valid`.
    pub arrival_frame: Vec<f64>,
    /// Peak height above the detection threshold.
    pub confidence: Vec<f64>,
    pub valid: Vec<bool>,
}

impl WavefrontTrack {
    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VelocityEstimate {
    pub v_px_per_frame: f64,
    pub v_mps: f64,
    pub r_squared: f64,
    pub n_points: usize,
}

/// Vertex offset of the parabola through `(-1, a)`, `(0, b)`, `(1, c)`.
pub fn parabolic_offset(a: f64, b: f64, c: f64) -> f64 {
    let denom = a - 2.0 * b + c;
    if denom == 0.0 {
        return 0.0;
    }
    (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
}

fn noise_sigma(row: &[f32], window: usize) -> f64 {
    let w = &row[..window.min(row.len())];
    let n = w.len() as f64;
    let mean = w.iter().map(|&v| v as f64).sum::<f64>() / n;
    (w.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Argmax of `|row|` over the first run of at least `min_run` consecutive
/// same-signed frames above `threshold`. `None` when that run starts before
/// `earliest` (the wave was already passing during the noise window) or
/// reaches the last frame (lobe cut off).
fn first_lobe_peak(row: &[f32], threshold: f64, min_run: usize, earliest: usize) -> Option<usize> {
    let nt = row.len();
    let mag = |t: usize| (row[t] as f64).abs();
    let mut t = 0;
    while t < nt {
        if mag(t) <= threshold {
            t += 1;
            continue;
        }
        let start = t;
        let positive = row[t] > 0.0;
        let mut best = t;
        while t < nt && mag(t) > threshold && (row[t] > 0.0) == positive {
            if mag(t) > mag(best) {
                best = t;
            }
            t += 1;
        }
        if t - start >= min_run {
            return (start >= earliest.max(1) && t < nt).then_some(best);
        }
    }
    None
}

/// Arrival per lateral pixel: the peak of the first wave lobe in `|map[y, ·]|`,
/// a lobe being a run of `min_run_frames` or more frames above
/// `threshold_k · σ + noise_floor`, σ the standard deviation of the pixel's
/// first `noise_window` frames.
pub fn detect_arrival_times(
    map: &SpatioTemporalMap,
    cfg: &VelocityConfig,
) -> Result<WavefrontTrack, VelocityError> {
    let ny = map.lateral();
    let nt = map.frames();
    let mut arrival_frame = vec![f64::NAN; ny];
    let mut confidence = vec![0.0; ny];
    let mut valid = vec![false; ny];
    for y in 0..ny {
        let row = map.row(y);
        if nt < 3 {
            continue;
        }
        let threshold = cfg.threshold_k * noise_sigma(row, cfg.noise_window) + cfg.noise_floor;
        let mag = |t: usize| (row[t] as f64).abs();
        let peak = first_lobe_peak(row, threshold, cfg.min_run_frames.max(1), cfg.noise_window);
        if let Some(t) = peak {
            let off = if t > 0 && t + 1 < nt {
                parabolic_offset(mag(t - 1), mag(t), mag(t + 1))
            } else {
                0.0
            };
            arrival_frame[y] = t as f64 + off;
            confidence[y] = mag(t) - threshold;
            valid[y] = true;
        }
    }
    let track = WavefrontTrack {
        arrival_frame,
        confidence,
        valid,
    };
    let n = track.n_valid();
    if n < 2 {
        return Err(VelocityError::NoWavefront { valid: n });
    }
    Ok(track)
}

/// Least-squares line `t(y) = a + b·y` over valid points; velocity is `1/b`.
pub fn fit_velocity(
    track: &WavefrontTrack,
    pixel_pitch_m: f64,
    frame_interval_s: f64,
) -> Result<VelocityEstimate, VelocityError> {
    let pts: Vec<(f64, f64)> = track
        .valid
        .iter()
        .enumerate()
        .filter(|(_, &v)| v)
        .map(|(y, _)| (y as f64, track.arrival_frame[y]))
        .collect();
    let n = pts.len();
    if n < 2 {
        return Err(VelocityError::TooFewPoints(n));
    }
    let nf = n as f64;
    let my = pts.iter().map(|p| p.0).sum::<f64>() / nf;
    let mt = pts.iter().map(|p| p.1).sum::<f64>() / nf;
    let syy: f64 = pts.iter().map(|p| (p.0 - my).powi(2)).sum();
    let syt: f64 = pts.iter().map(|p| (p.0 - my) * (p.1 - mt)).sum();
    let stt: f64 = pts.iter().map(|p| (p.1 - mt).powi(2)).sum();
    if stt == 0.0 {
        return Err(VelocityError::DegenerateTrack("all arrival times equal".into()));
    }
    let slope = syt / syy;
    if !(slope > 0.0) {
        return Err(VelocityError::DegenerateTrack(format!(
            "non-positive arrival slope {slope:.4} frames/px"
        )));
    }
    let intercept = mt - slope * my;
    let ss_res: f64 = pts
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).powi(2))
        .sum();
    let r_squared = (1.0 - ss_res / stt).clamp(0.0, 1.0);
    let v_px_per_frame = 1.0 / slope;
    Ok(VelocityEstimate {
        v_px_per_frame,
        v_mps: v_px_per_frame * pixel_pitch_m / frame_interval_s,
        r_squared,
        n_points: n,
    })
}

pub fn estimate_velocity(
    map: &SpatioTemporalMap,
    cfg: &VelocityConfig,
) -> Result<VelocityEstimate, VelocityError> {
    let track = detect_arrival_times(map, cfg)?;
    let est = fit_velocity(&track, map.pixel_pitch_m, map.frame_interval_s)?;
    if est.n_points < cfg.min_points || est.r_squared < cfg.min_r_squared {
        return Err(VelocityError::PoorFit {
            n_points: est.n_points,
            r_squared: est.r_squared,
        });
    }
    Ok(est)
}
