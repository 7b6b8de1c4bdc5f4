//! Acquisition geometry/timing and the dataset manifest records.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// Scan geometry and timing of the OCT system and the needle excitation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcquisitionConfig {
    /// B-scan rate.
    pub frame_rate_hz: f64,
    pub ascan_rate_hz: f64,
    pub wavelength_m: f64,
    pub lateral_pixels: usize,
    pub depth_pixels: usize,
    pub fov_lateral_m: f64,
    pub fov_depth_m: f64,
    pub frames_kept: usize,
    /// Frames simulated beyond `frames_kept`; cropped during preprocessing.
    pub extra_frames: usize,
    pub excitation_freq_hz: f64,
    pub burst_cycles: usize,
    pub needle_amplitude_m: f64,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self {
            frame_rate_hz: 30_000.0,
            ascan_rate_hz: 1.59e6,
            wavelength_m: 1315e-9,
            lateral_pixels: 32,
            depth_pixels: 250,
            fov_lateral_m: 3e-3,
            fov_depth_m: 2e-3,
            frames_kept: 400,
            extra_frames: 112,
            excitation_freq_hz: 100.0,
            burst_cycles: 1,
            needle_amplitude_m: 50e-6,
        }
    }
}

impl AcquisitionConfig {
    pub fn pixel_pitch_m(&self) -> f64 {
        self.fov_lateral_m / self.lateral_pixels as f64
    }

    pub fn frame_interval_s(&self) -> f64 {
        1.0 / self.frame_rate_hz
    }

    pub fn simulated_frames(&self) -> usize {
        self.frames_kept + self.extra_frames
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("frame_rate_hz", self.frame_rate_hz),
            ("ascan_rate_hz", self.ascan_rate_hz),
            ("wavelength_m", self.wavelength_m),
            ("fov_lateral_m", self.fov_lateral_m),
            ("fov_depth_m", self.fov_depth_m),
            ("excitation_freq_hz", self.excitation_freq_hz),
            ("needle_amplitude_m", self.needle_amplitude_m),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(ConfigError::Invalid(format!("{name} must be > 0, got {v}")));
            }
        }
        let counts = [
            ("lateral_pixels", self.lateral_pixels),
            ("depth_pixels", self.depth_pixels),
            ("frames_kept", self.frames_kept),
            ("burst_cycles", self.burst_cycles),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(ConfigError::Invalid(format!("{name} must be >= 1")));
            }
        }
        // Phase differencing drops one frame; keep `frames_kept` differences.
        if self.extra_frames < 1 {
            return Err(ConfigError::Invalid(
                "extra_frames must be >= 1 so that frames_kept differences remain".into(),
            ));
        }
        Ok(())
    }
}

/// One acquisition in the dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: String,
    pub concentration_pct: f64,
    pub needle_distance_m: f64,
    /// Physical phantom instance (two per concentration by default).
    pub instance_id: u32,
    pub orientation_id: u32,
    pub repetition_id: u32,
    pub seed: u64,
    /// Wrapped phase tensor (y, z, t), relative to the manifest directory.
    pub tensor_path: String,
    /// Per-pixel intensity proxy (y, z), relative to the manifest directory.
    pub intensity_path: String,
}

pub fn read_manifest(path: &Path) -> Result<Vec<Sample>, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| ConfigError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_manifest(samples: &[Sample], path: &Path) -> Result<(), ConfigError> {
    let mut text = serde_json::to_string_pretty(samples).expect("manifest serializes");
    text.push('\n');
    write_text(path, &text)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<(), ConfigError> {
    let io = |source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(io)?;
        }
    }
    fs::write(path, text).map_err(io)
}

/// Reads a JSON config file; missing fields take their defaults, unknown keys are rejected.
pub fn read_json_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| ConfigError::Json {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let a = AcquisitionConfig::default();
        a.validate().unwrap();
        assert_eq!(a.simulated_frames(), 512);
        assert!((a.pixel_pitch_m() - 93.75e-6).abs() < 1e-15);
    }

    #[test]
    fn four_hundred_frames_span_13_3_ms() {
        let a = AcquisitionConfig::default();
        let span = a.frames_kept as f64 * a.frame_interval_s();
        assert!((span * 1e3 - 13.333).abs() < 1e-3);
    }

    #[test]
    fn unknown_keys_rejected() {
        let r: Result<AcquisitionConfig, _> = serde_json::from_str(r#"{"frame_rate":1}"#);
        assert!(r.is_err());
        let a: AcquisitionConfig = serde_json::from_str(r#"{"frames_kept":64}"#).unwrap();
        assert_eq!(a.frames_kept, 64);
        assert_eq!(a.lateral_pixels, 32);
    }

    #[test]
    fn non_positive_rejected() {
        let a = AcquisitionConfig {
            frame_rate_hz: 0.0,
            ..Default::default()
        };
        assert!(a.validate().is_err());
    }
}
