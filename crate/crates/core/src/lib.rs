//! Shear wave elastography on synthetic OCE phase data: simulation,
//! preprocessing, explicit velocity estimation, shallow regressors,
//! spatio-temporal CNNs and the leave-one-concentration-out protocol.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dataset;
pub mod eval;
pub mod nn;
pub mod phasepipe;
pub mod seed;
pub mod shallow;
pub mod tensor;
pub mod velocity;
pub mod wavesim;

pub use config::{AcquisitionConfig, ConfigError, Sample};
pub use dataset::{generate_dataset, DatasetConfig};
pub use eval::{EvalError, FeatureSet, Fold, MetricsReport, ModelKind, ProtocolConfig};
pub use phasepipe::{PhaseDiffVolume, PreprocessConfig, Preprocessed, SpatioTemporalMap};
pub use tensor::{Axis, Tensor, TensorError};
pub use velocity::{VelocityConfig, VelocityEstimate};
pub use wavesim::{NoiseSpec, PhantomSpec, RawMeasurement};
