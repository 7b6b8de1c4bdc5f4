//! Synthetic wrapped-phase OCE measurements of a needle-excited burst shear wave.
//!
//! The wave travels along +y from a needle placed `needle_distance` before the
//! first lateral pixel. Axial displacement is uniform in depth below the
//! phantom surface and converted to optical phase with the round-trip factor
//! `4π/λ`.

use std::f64::consts::PI;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::AcquisitionConfig;
use crate::seed::rng_from_seed;
use crate::tensor::{Axis, Tensor};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("concentration must be > 0, got {0}")]
    NonPositiveConcentration(f64),
    #[error("invalid simulation config: {0}")]
    ConfigInvalid(String),
}

/// Power-law map from gelatin concentration to shear wave speed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VelocityModel {
    pub v_ref_mps: f64,
    pub c_ref_pct: f64,
    pub gamma: f64,
}

impl Default for VelocityModel {
    fn default() -> Self {
        Self {
            v_ref_mps: 2.5,
            c_ref_pct: 8.3,
            gamma: 1.25,
        }
    }
}

/// `v = v_ref · (c / c_ref)^gamma`.
pub fn concentration_to_velocity(c_pct: f64, m: &VelocityModel) -> Result<f64, SimError> {
    if !(c_pct > 0.0) {
        return Err(SimError::NonPositiveConcentration(c_pct));
    }
    Ok(m.v_ref_mps * (c_pct / m.c_ref_pct).powf(m.gamma))
}

/// Hann-windowed sinusoid of `cycles` periods starting at `t = 0`, zero elsewhere.
pub fn burst_waveform(t: f64, f: f64, cycles: usize, amplitude: f64) -> f64 {
    let duration = cycles as f64 / f;
    if !(0.0..=duration).contains(&t) {
        return 0.0;
    }
    let window = 0.5 * (1.0 - (2.0 * PI * t / duration).cos());
    amplitude * (2.0 * PI * f * t).sin() * window
}

/// Wraps a phase into `(-π, π]`.
pub fn wrap_phase(x: f64) -> f64 {
    let w = x - 2.0 * PI * ((x + PI) / (2.0 * PI)).floor();
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// Wraps and narrows to `f32`, keeping the result inside `(-π, π]` in `f32` arithmetic.
pub fn wrap_phase_f32(x: f64) -> f32 {
    let w = wrap_phase(x) as f32;
    if w <= -std::f32::consts::PI {
        std::f32::consts::PI
    } else if w > std::f32::consts::PI {
        std::f32::consts::PI
    } else {
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub concentration_pct: f64,
    pub velocity_model: VelocityModel,
    /// Depth index of the phantom surface; rows above it are air.
    pub surface_index: usize,
    /// Peak axial displacement at `reference_distance_m`.
    pub amplitude_at_fov_m: f64,
    /// Amplitude falls off as `r^-decay_exponent`.
    pub decay_exponent: f64,
    /// Distance at which the amplitude equals `amplitude_at_fov_m`.
    pub reference_distance_m: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            concentration_pct: 8.3,
            velocity_model: VelocityModel::default(),
            surface_index: 50,
            amplitude_at_fov_m: 150e-9,
            decay_exponent: 0.5,
            reference_distance_m: 5e-3,
        }
    }
}

impl PhantomSpec {
    pub fn velocity_mps(&self) -> Result<f64, SimError> {
        concentration_to_velocity(self.concentration_pct, &self.velocity_model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Additive Gaussian phase noise on every speckle pixel.
    pub phase_noise_sigma_rad: f64,
    /// Fraction of below-surface depth rows with decorrelated speckle.
    pub dead_row_fraction: f64,
    /// Phase noise on dead rows and above the surface.
    pub dead_row_noise_sigma_rad: f64,
    /// Per-lateral-line timing jitter of the wave arrival.
    pub jitter_sigma_frames: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            phase_noise_sigma_rad: 0.01,
            dead_row_fraction: 0.08,
            dead_row_noise_sigma_rad: 1.5,
            jitter_sigma_frames: 0.3,
        }
    }
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self {
            phase_noise_sigma_rad: 0.0,
            dead_row_fraction: 0.0,
            dead_row_noise_sigma_rad: 0.0,
            jitter_sigma_frames: 0.0,
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        let fields = [
            ("phase_noise_sigma_rad", self.phase_noise_sigma_rad),
            ("dead_row_noise_sigma_rad", self.dead_row_noise_sigma_rad),
            ("jitter_sigma_frames", self.jitter_sigma_frames),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(SimError::ConfigInvalid(format!("{name} must be >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.dead_row_fraction) {
            return Err(SimError::ConfigInvalid(
                "dead_row_fraction must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// One simulated acquisition.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMeasurement {
    /// Wrapped phase, axes (y, z, t), values in (-π, π].
    pub phase: Tensor,
    /// Speckle quality proxy, axes (y, z), values >= 0.
    pub intensity: Tensor,
    pub acquisition_delay_s: f64,
    /// Ground-truth wave speed used by the simulator.
    pub velocity_mps: f64,
    pub surface_index: usize,
}

const SPECKLE_LOG_SIGMA: f64 = 0.25;
const DEAD_INTENSITY: f64 = 0.02;

/// Simulates one measurement; the excitation delay is drawn uniformly from
/// `[0, 1/excitation_freq)` with the sample's generator.
pub fn simulate_measurement(
    phantom: &PhantomSpec,
    acq: &AcquisitionConfig,
    noise: &NoiseSpec,
    needle_distance_m: f64,
    seed: u64,
) -> Result<RawMeasurement, SimError> {
    let mut rng = rng_from_seed(seed);
    let delay = rng.random::<f64>() / acq.excitation_freq_hz;
    simulate_inner(phantom, acq, noise, needle_distance_m, delay, &mut rng)
}

/// As [`simulate_measurement`] with a caller-chosen excitation delay.
pub fn simulate_with_delay(
    phantom: &PhantomSpec,
    acq: &AcquisitionConfig,
    noise: &NoiseSpec,
    needle_distance_m: f64,
    delay_s: f64,
    seed: u64,
) -> Result<RawMeasurement, SimError> {
    let mut rng = rng_from_seed(seed);
    let _ = rng.random::<f64>();
    simulate_inner(phantom, acq, noise, needle_distance_m, delay_s, &mut rng)
}

fn simulate_inner<R: Rng>(
    phantom: &PhantomSpec,
    acq: &AcquisitionConfig,
    noise: &NoiseSpec,
    needle_distance_m: f64,
    delay_s: f64,
    rng: &mut R,
) -> Result<RawMeasurement, SimError> {
    acq.validate()
        .map_err(|e| SimError::ConfigInvalid(e.to_string()))?;
    noise.validate()?;
    if !(needle_distance_m > 0.0) {
        return Err(SimError::ConfigInvalid(format!(
            "needle distance must be > 0, got {needle_distance_m}"
        )));
    }
    if phantom.surface_index >= acq.depth_pixels {
        return Err(SimError::ConfigInvalid(format!(
            "surface index {} outside depth extent {}",
            phantom.surface_index, acq.depth_pixels
        )));
    }
    if !(phantom.amplitude_at_fov_m >= 0.0) || !(phantom.reference_distance_m > 0.0) {
        return Err(SimError::ConfigInvalid(
            "amplitude must be >= 0 and reference distance > 0".into(),
        ));
    }
    let v = phantom.velocity_mps()?;
    if !(v > 0.0 && v.is_finite()) {
        return Err(SimError::ConfigInvalid(format!("velocity {v} is not positive")));
    }

    let ny = acq.lateral_pixels;
    let nz = acq.depth_pixels;
    let nt = acq.simulated_frames();
    let dt = acq.frame_interval_s();
    let pitch = acq.pixel_pitch_m();
    let k_phase = 4.0 * PI / acq.wavelength_m;

    let jitter: Vec<f64> = (0..ny)
        .map(|_| {
            let g: f64 = StandardNormal.sample(rng);
            g * noise.jitter_sigma_frames * dt
        })
        .collect();

    // Cumulative optical phase of the wave per lateral line.
    let mut signal = vec![0.0f64; ny * nt];
    for (y, row) in signal.chunks_exact_mut(nt).enumerate() {
        let r = needle_distance_m + y as f64 * pitch;
        let amp =
            phantom.amplitude_at_fov_m * (phantom.reference_distance_m / r).powf(phantom.decay_exponent);
        let lag = r / v - delay_s + jitter[y];
        for (t, s) in row.iter_mut().enumerate() {
            let u = burst_waveform(
                t as f64 * dt - lag,
                acq.excitation_freq_hz,
                acq.burst_cycles,
                amp,
            );
            *s = k_phase * u;
        }
    }

    let below = nz - phantom.surface_index;
    let n_dead = (noise.dead_row_fraction * below as f64).round() as usize;
    let mut dead = vec![false; nz];
    for i in sample_indices(rng, below, n_dead.min(below)).into_iter() {
        dead[phantom.surface_index + i] = true;
    }
    let speckle = |z: usize| z >= phantom.surface_index && !dead[z];

    let mut intensity = Vec::with_capacity(ny * nz);
    for _y in 0..ny {
        for z in 0..nz {
            let g: f64 = StandardNormal.sample(rng);
            let base = if speckle(z) { 1.0 } else { DEAD_INTENSITY };
            intensity.push((base * (SPECKLE_LOG_SIGMA * g).exp()) as f32);
        }
    }

    let good_noise = Normal::new(0.0, noise.phase_noise_sigma_rad).expect("sigma >= 0");
    let bad_noise = Normal::new(0.0, noise.dead_row_noise_sigma_rad).expect("sigma >= 0");
    let mut phase = Vec::with_capacity(ny * nz * nt);
    for y in 0..ny {
        let row = &signal[y * nt..(y + 1) * nt];
        for z in 0..nz {
            if speckle(z) {
                for &s in row {
                    let n = if noise.phase_noise_sigma_rad > 0.0 {
                        good_noise.sample(rng)
                    } else {
                        0.0
                    };
                    phase.push(wrap_phase_f32(s + n));
                }
            } else {
                for _ in 0..nt {
                    let n = if noise.dead_row_noise_sigma_rad > 0.0 {
                        bad_noise.sample(rng)
                    } else {
                        0.0
                    };
                    phase.push(wrap_phase_f32(n));
                }
            }
        }
    }

    let phase = Tensor::new(vec![ny, nz, nt], vec![Axis::Y, Axis::Z, Axis::T], phase)
        .expect("consistent shape")
        .with_meta("frame_interval_s", dt)
        .with_meta("pixel_pitch_m", pitch)
        .with_meta("acquisition_delay_s", delay_s)
        .with_meta("surface_index", phantom.surface_index as u64);
    let intensity = Tensor::new(vec![ny, nz], vec![Axis::Y, Axis::Z], intensity)
        .expect("consistent shape");
    Ok(RawMeasurement {
        phase,
        intensity,
        acquisition_delay_s: delay_s,
        velocity_mps: v,
        surface_index: phantom.surface_index,
    })
}
