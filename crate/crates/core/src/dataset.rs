//! Dataset enumeration: concentrations × needle distances × phantom instances ×
//! orientations × repetitions, with per-sample seeds.

use std::path::Path;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{write_manifest, AcquisitionConfig, ConfigError, Sample};
use crate::seed::{derive_sample_seed, rng_from_seed};
use crate::tensor::{write_tensor, TensorError};
use crate::wavesim::{simulate_measurement, NoiseSpec, PhantomSpec, RawMeasurement, SimError};

/// Gelatin concentrations (percent) of the 1:8 … 1:23 gelatin/water mixtures.
pub const DEFAULT_CONCENTRATIONS: [f64; 6] = [11.1, 8.3, 6.7, 5.6, 4.8, 4.2];
pub const DEFAULT_NEEDLE_DISTANCES_M: [f64; 4] = [5e-3, 10e-3, 15e-3, 20e-3];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid dataset config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub concentrations_pct: Vec<f64>,
    pub needle_distances_m: Vec<f64>,
    pub instances: u32,
    pub orientations: u32,
    pub repetitions: u32,
    /// Std of the per-(concentration, instance) velocity multiplier around 1.
    pub instance_velocity_sigma: f64,
    pub acquisition: AcquisitionConfig,
    pub noise: NoiseSpec,
    /// Template phantom; `concentration_pct` is overwritten per sample.
    pub phantom: PhantomSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            concentrations_pct: DEFAULT_CONCENTRATIONS.to_vec(),
            needle_distances_m: DEFAULT_NEEDLE_DISTANCES_M.to_vec(),
            instances: 2,
            orientations: 2,
            repetitions: 4,
            instance_velocity_sigma: 0.03,
            acquisition: AcquisitionConfig::default(),
            noise: NoiseSpec::default(),
            phantom: PhantomSpec::default(),
        }
    }
}

/// Everything needed to simulate one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePlan {
    pub sample: Sample,
    pub phantom: PhantomSpec,
}

pub fn sample_id(c_pct: f64, distance_m: f64, instance: u32, orientation: u32, rep: u32) -> String {
    format!(
        "c{:04.1}_d{:02}_s{}_o{}_r{}",
        c_pct,
        (distance_m * 1e3).round() as u64,
        instance,
        orientation,
        rep
    )
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.concentrations_pct.is_empty() {
            return Err(DatasetError::Invalid("at least one concentration required".into()));
        }
        if self.concentrations_pct.iter().any(|&c| !(c > 0.0 && c < 100.0)) {
            return Err(DatasetError::Invalid("concentrations must lie in (0, 100)".into()));
        }
        if self.needle_distances_m.is_empty() || self.needle_distances_m.iter().any(|&d| !(d > 0.0)) {
            return Err(DatasetError::Invalid("needle distances must be > 0".into()));
        }
        if self.instances == 0 || self.orientations == 0 || self.repetitions == 0 {
            return Err(DatasetError::Invalid(
                "instances, orientations and repetitions must be >= 1".into(),
            ));
        }
        if !(self.instance_velocity_sigma >= 0.0) {
            return Err(DatasetError::Invalid("instance_velocity_sigma must be >= 0".into()));
        }
        self.acquisition.validate()?;
        Ok(())
    }

    pub fn samples_per_concentration(&self) -> usize {
        self.needle_distances_m.len()
            * (self.instances * self.orientations * self.repetitions) as usize
    }

    /// Enumerates every sample in manifest order: concentration, distance,
    /// instance, orientation, repetition.
    pub fn plan(&self, master_seed: u64) -> Result<Vec<SamplePlan>, DatasetError> {
        self.validate()?;
        let mut out = Vec::new();
        for &c in &self.concentrations_pct {
            let multipliers: Vec<f64> = (0..self.instances)
                .map(|i| {
                    let key = format!("instance:c{c:.3}:s{i}");
                    let mut rng = rng_from_seed(derive_sample_seed(master_seed, &key));
                    let n = Normal::new(1.0, self.instance_velocity_sigma).expect("sigma >= 0");
                    n.sample(&mut rng).max(0.5)
                })
                .collect();
            for &d in &self.needle_distances_m {
                for (inst, &mult) in (0..self.instances).zip(&multipliers) {
                    for o in 0..self.orientations {
                        for r in 0..self.repetitions {
                            let id = sample_id(c, d, inst, o, r);
                            let mut phantom = self.phantom.clone();
                            phantom.concentration_pct = c;
                            phantom.velocity_model.v_ref_mps *= mult;
                            let sample = Sample {
                                seed: derive_sample_seed(master_seed, &id),
                                tensor_path: format!("tensors/{id}.phase.oct"),
                                intensity_path: format!("tensors/{id}.intensity.oct"),
                                id,
                                concentration_pct: c,
                                needle_distance_m: d,
                                instance_id: inst,
                                orientation_id: o,
                                repetition_id: r,
                            };
                            out.push(SamplePlan { sample, phantom });
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn simulate(&self, plan: &SamplePlan) -> Result<RawMeasurement, SimError> {
        simulate_measurement(
            &plan.phantom,
            &self.acquisition,
            &self.noise,
            plan.sample.needle_distance_m,
            plan.sample.seed,
        )
    }
}

/// Simulates every sample and writes tensors plus `manifest.json` under `out_dir`.
pub fn generate_dataset(
    cfg: &DatasetConfig,
    master_seed: u64,
    out_dir: &Path,
) -> Result<Vec<Sample>, DatasetError> {
    let plans = cfg.plan(master_seed)?;
    plans.par_iter().try_for_each(|p| -> Result<(), DatasetError> {
        let m = cfg.simulate(p)?;
        write_tensor(&m.phase, &out_dir.join(&p.sample.tensor_path))?;
        write_tensor(&m.intensity, &out_dir.join(&p.sample.intensity_path))?;
        Ok(())
    })?;
    let samples: Vec<Sample> = plans.into_iter().map(|p| p.sample).collect();
    write_manifest(&samples, &out_dir.join("manifest.json"))?;
    Ok(samples)
}
