//! Leave-one-concentration-out protocol, metrics and report rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, Sample};
use crate::nn::{self, ArchSpec, CnnArch, EpochRecord, Example, Model, TrainConfig};
use crate::phasepipe::{preprocess_tensors, PipeError, PreprocessConfig};
use crate::seed::{derive_sample_seed, rng_from_seed};
use crate::shallow::{fit_linreg, fit_svr, FeatureScaler, Kernel, SvrParams};
use crate::tensor::{read_tensor, Axis, Tensor, TensorError};
use crate::velocity::{estimate_velocity, VelocityConfig, VelocityEstimate};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("bad sample counts: {0}")]
    BadCounts(String),
    #[error("correlation undefined for a constant series")]
    UndefinedCorrelation,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown model '{0}'")]
    UnknownModel(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("sample {id}: {source}")]
    Pipe { id: String, source: PipeError },
    #[error("report: {0}")]
    Report(String),
}

/// The seven compared regressors, in reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "LR")]
    Lr,
    #[serde(rename = "SVR-lin")]
    SvrLinear,
    #[serde(rename = "SVR-RBF")]
    SvrRbf,
    #[serde(rename = "MLP50")]
    Mlp50,
    #[serde(rename = "MLP100")]
    Mlp100,
    #[serde(rename = "CNN-1Dt")]
    Cnn1Dt,
    #[serde(rename = "CNN-2Dt")]
    Cnn2Dt,
}

impl ModelKind {
    pub const ALL: [ModelKind; 7] = [
        ModelKind::Lr,
        ModelKind::SvrLinear,
        ModelKind::SvrRbf,
        ModelKind::Mlp50,
        ModelKind::Mlp100,
        ModelKind::Cnn1Dt,
        ModelKind::Cnn2Dt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Lr => "LR",
            ModelKind::SvrLinear => "SVR-lin",
            ModelKind::SvrRbf => "SVR-RBF",
            ModelKind::Mlp50 => "MLP50",
            ModelKind::Mlp100 => "MLP100",
            ModelKind::Cnn1Dt => "CNN-1Dt",
            ModelKind::Cnn2Dt => "CNN-2Dt",
        }
    }

    pub fn parse(s: &str) -> Result<Self, EvalError> {
        Self::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| EvalError::UnknownModel(s.to_string()))
    }

    /// Comma-separated names or `all`; result in reporting order without duplicates.
    pub fn parse_list(s: &str) -> Result<Vec<Self>, EvalError> {
        if s.trim().eq_ignore_ascii_case("all") {
            return Ok(Self::ALL.to_vec());
        }
        let mut out = s
            .split(',')
            .map(|p| Self::parse(p.trim()))
            .collect::<Result<Vec<_>, _>>()?;
        out.sort();
        out.dedup();
        if out.is_empty() {
            return Err(EvalError::InvalidArgument("empty model list".into()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub held_out_pct: f64,
    pub test: Vec<String>,
    pub validation: Vec<String>,
    pub optimization: Vec<String>,
}

fn conc_key(c: f64) -> String {
    format!("{c:.6}")
}

/// One fold per concentration. The held-out samples are split in half per
/// needle distance by a seeded shuffle; ids within each subset are sorted.
pub fn make_fold_plan(samples: &[Sample], seed: u64) -> Result<Vec<Fold>, EvalError> {
    let mut by_conc: BTreeMap<String, (f64, BTreeMap<String, Vec<String>>)> = BTreeMap::new();
    for s in samples {
        let e = by_conc
            .entry(conc_key(s.concentration_pct))
            .or_insert_with(|| (s.concentration_pct, BTreeMap::new()));
        e.1.entry(conc_key(s.needle_distance_m)).or_default().push(s.id.clone());
    }
    if by_conc.len() < 2 {
        return Err(EvalError::BadCounts(format!("need >= 2 concentrations, got {}", by_conc.len())));
    }
    let mut folds = Vec::with_capacity(by_conc.len());
    for (key, (c, strata)) in &by_conc {
        let mut test = Vec::new();
        let mut validation = Vec::new();
        for (dkey, ids) in strata {
            if ids.len() % 2 != 0 {
                return Err(EvalError::BadCounts(format!(
                    "concentration {c} distance {dkey}: {} samples, need an even count",
                    ids.len()
                )));
            }
            let mut ids = ids.clone();
            ids.sort();
            let mut rng = rng_from_seed(derive_sample_seed(seed, &format!("fold:{key}:{dkey}")));
            ids.shuffle(&mut rng);
            let (a, b) = ids.split_at(ids.len() / 2);
            test.extend_from_slice(a);
            validation.extend_from_slice(b);
        }
        test.sort();
        validation.sort();
        let mut optimization: Vec<String> = samples
            .iter()
            .filter(|s| conc_key(s.concentration_pct) != *key)
            .map(|s| s.id.clone())
            .collect();
        optimization.sort();
        folds.push(Fold {
            held_out_pct: *c,
            test,
            validation,
            optimization,
        });
    }
    // Highest concentration first, like the dataset ordering.
    folds.sort_by(|a, b| b.held_out_pct.total_cmp(&a.held_out_pct));
    Ok(folds)
}

/// [`make_fold_plan`] restricted to six concentrations of 64 samples each.
pub fn make_sixfold_plan(samples: &[Sample], seed: u64) -> Result<Vec<Fold>, EvalError> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for s in samples {
        *counts.entry(conc_key(s.concentration_pct)).or_default() += 1;
    }
    if counts.len() != 6 {
        return Err(EvalError::BadCounts(format!("expected 6 concentrations, got {}", counts.len())));
    }
    if let Some((c, n)) = counts.iter().find(|(_, &n)| n != 64) {
        return Err(EvalError::BadCounts(format!("concentration {c}: {n} samples, expected 64")));
    }
    make_fold_plan(samples, seed)
}

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<(), EvalError> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(EvalError::InvalidArgument(format!(
            "need equal non-empty lengths, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64, EvalError> {
    check_pair(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn rmae(mae: f64, sigma: f64) -> f64 {
    mae / sigma
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn population_std(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64).sqrt()
}

/// Pearson correlation.
pub fn acc(pred: &[f64], truth: &[f64]) -> Result<f64, EvalError> {
    check_pair(pred, truth)?;
    let (mp, mt) = (mean(pred), mean(truth));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        sxy += (p - mp) * (t - mt);
        sxx += (p - mp).powi(2);
        syy += (t - mt).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::UndefinedCorrelation);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, EvalError> {
    acc(&ranks(x), &ranks(y))
}

/// Target extents for the CNN inputs; `0` keeps the native extent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NnSettings {
    pub k0: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Phase differences are multiplied by this before entering a CNN.
    pub input_scale: f64,
    /// `(y, t)`.
    pub input_1dt: [usize; 2],
    /// `(y, z, t)`.
    pub input_2dt: [usize; 3],
}

impl Default for NnSettings {
    fn default() -> Self {
        Self {
            k0: 8,
            max_epochs: 60,
            patience: 30,
            learning_rate: 1e-3,
            batch_size: 10,
            input_scale: 10.0,
            input_1dt: [16, 100],
            input_2dt: [4, 4, 100],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvrGrid {
    pub c: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl Default for SvrGrid {
    fn default() -> Self {
        Self {
            c: vec![1.0, 10.0, 100.0],
            epsilon: vec![0.05, 0.1, 0.5],
            gamma: vec![0.1, 1.0, 10.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub preset: String,
    pub preprocess: PreprocessConfig,
    pub velocity: VelocityConfig,
    pub svr_grid: SvrGrid,
    pub nn: NnSettings,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ProtocolConfig {
    pub fn desk() -> Self {
        Self {
            preset: "desk".into(),
            preprocess: PreprocessConfig::default(),
            velocity: VelocityConfig::default(),
            svr_grid: SvrGrid::default(),
            nn: NnSettings::default(),
        }
    }

    pub fn paper() -> Self {
        Self {
            preset: "paper".into(),
            nn: NnSettings {
                k0: 16,
                max_epochs: 300,
                input_1dt: [0, 0],
                input_2dt: [0, 0, 0],
                ..NnSettings::default()
            },
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self, EvalError> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(EvalError::InvalidArgument(format!("unknown preset '{other}' (expected desk or paper)"))),
        }
    }
}

/// Average pooling of `data` (row-major, `shape`) onto `target`; output bin
/// `i` of an axis averages inputs `⌊i·n/m⌋ .. ⌊(i+1)·n/m⌋`. Requires `target ≤ shape`.
pub fn resample_mean(data: &[f32], shape: &[usize], target: &[usize]) -> Vec<f32> {
    assert_eq!(shape.len(), target.len());
    assert_eq!(data.len(), shape.iter().product::<usize>());
    let mut cur = data.to_vec();
    let mut cur_shape = shape.to_vec();
    for a in 0..shape.len() {
        let (n, m) = (cur_shape[a], target[a]);
        assert!(m >= 1 && m <= n, "cannot resample extent {n} to {m}");
        if n == m {
            continue;
        }
        let outer: usize = cur_shape[..a].iter().product();
        let inner: usize = cur_shape[a + 1..].iter().product();
        let mut out = vec![0.0f32; outer * m * inner];
        for o in 0..outer {
            for i in 0..m {
                let (lo, hi) = (i * n / m, (i + 1) * n / m);
                let dst = &mut out[(o * m + i) * inner..(o * m + i + 1) * inner];
                for k in lo..hi {
                    for (d, &v) in dst.iter_mut().zip(&cur[(o * n + k) * inner..(o * n + k + 1) * inner]) {
                        *d += v;
                    }
                }
                let w = 1.0 / (hi - lo) as f32;
                dst.iter_mut().for_each(|d| *d *= w);
            }
        }
        cur = out;
        cur_shape[a] = m;
    }
    cur
}

fn resolve(target: &[usize], native: &[usize]) -> Vec<usize> {
    target.iter().zip(native).map(|(&t, &n)| if t == 0 { n } else { t }).collect()
}

/// Everything the models consume from one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleFeatures {
    pub id: String,
    pub concentration_pct: f64,
    pub needle_distance_m: f64,
    pub velocity: Option<VelocityEstimate>,
    pub velocity_error: Option<String>,
    /// Scaled, resampled 1D+t map; empty unless requested.
    pub map_1dt: Vec<f32>,
    /// Scaled, resampled 2D+t volume; empty unless requested.
    pub volume_2dt: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub samples: Vec<SampleFeatures>,
    pub shape_1dt: [usize; 2],
    pub shape_2dt: [usize; 3],
}

impl FeatureSet {
    pub fn velocity_failures(&self) -> usize {
        self.samples.iter().filter(|s| s.velocity.is_none()).count()
    }
}

/// Features of one measurement.
pub fn sample_features(
    sample: &Sample,
    phase: &Tensor,
    intensity: &Tensor,
    cfg: &ProtocolConfig,
    want_1dt: bool,
    want_2dt: bool,
) -> Result<(SampleFeatures, [usize; 2], [usize; 3]), EvalError> {
    let surface_index = phase.meta_f64("surface_index").ok_or_else(|| EvalError::Pipe {
        id: sample.id.clone(),
        source: PipeError::InvalidArgument("phase tensor lacks surface_index".into()),
    })? as usize;
    let pre = preprocess_tensors(phase, intensity, surface_index, &cfg.preprocess).map_err(|source| EvalError::Pipe {
        id: sample.id.clone(),
        source,
    })?;
    let (velocity, velocity_error) = match estimate_velocity(&pre.map, &cfg.velocity) {
        Ok(v) => (Some(v), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let scale = cfg.nn.input_scale as f32;
    let mut s1 = [0; 2];
    let mut s2 = [0; 3];
    let mut map_1dt = Vec::new();
    let mut volume_2dt = Vec::new();
    if want_1dt {
        let native = pre.map.values.shape().to_vec();
        let t = resolve(&cfg.nn.input_1dt, &native);
        map_1dt = resample_mean(pre.map.values.data(), &native, &t);
        map_1dt.iter_mut().for_each(|v| *v *= scale);
        s1 = [t[0], t[1]];
    }
    if want_2dt {
        let native = pre.volume.values.shape().to_vec();
        let t = resolve(&cfg.nn.input_2dt, &native);
        volume_2dt = resample_mean(pre.volume.values.data(), &native, &t);
        volume_2dt.iter_mut().for_each(|v| *v *= scale);
        s2 = [t[0], t[1], t[2]];
    }
    Ok((
        SampleFeatures {
            id: sample.id.clone(),
            concentration_pct: sample.concentration_pct,
            needle_distance_m: sample.needle_distance_m,
            velocity,
            velocity_error,
            map_1dt,
            volume_2dt,
        },
        s1,
        s2,
    ))
}

/// Loads, preprocesses and featurizes every manifest sample (in parallel,
/// output in manifest order). Paths are relative to `root`.
pub fn extract_features(
    samples: &[Sample],
    root: &Path,
    cfg: &ProtocolConfig,
    models: &[ModelKind],
) -> Result<FeatureSet, EvalError> {
    let want_1dt = models.contains(&ModelKind::Cnn1Dt);
    let want_2dt = models.contains(&ModelKind::Cnn2Dt);
    let out = samples
        .par_iter()
        .map(|s| {
            let phase = read_tensor(&root.join(&s.tensor_path))?;
            let intensity = read_tensor(&root.join(&s.intensity_path))?;
            phase.expect_axes(&[Axis::Y, Axis::Z, Axis::T])?;
            sample_features(s, &phase, &intensity, cfg, want_1dt, want_2dt)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut shape_1dt = [0; 2];
    let mut shape_2dt = [0; 3];
    for (_, a, b) in &out {
        if shape_1dt == [0; 2] {
            shape_1dt = *a;
        }
        if shape_2dt == [0; 3] {
            shape_2dt = *b;
        }
        if *a != shape_1dt || *b != shape_2dt {
            return Err(EvalError::InvalidArgument("samples have differing extents".into()));
        }
    }
    Ok(FeatureSet {
        samples: out.into_iter().map(|(f, _, _)| f).collect(),
        shape_1dt,
        shape_2dt,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub fold: usize,
    pub true_pct: f64,
    pub predicted_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub held_out_pct: f64,
    /// Selected hyperparameters or training summary.
    pub selection: serde_json::Value,
    /// Velocity features imputed with the training mean (train + val + test).
    pub imputed: usize,
    pub test_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResult {
    pub model: ModelKind,
    pub error: Option<String>,
    pub mae: Option<f64>,
    pub mae_std: Option<f64>,
    pub rmae: Option<f64>,
    pub rmae_std: Option<f64>,
    pub acc: Option<f64>,
    pub folds: Vec<FoldSummary>,
    pub predictions: Vec<Prediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityStat {
    pub concentration_pct: f64,
    pub n: usize,
    pub failures: usize,
    pub mean_mps: f64,
    pub std_mps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub preset: String,
    pub seed: u64,
    pub n_samples: usize,
    /// Population std of the distinct concentrations.
    pub sigma_pct: f64,
    pub velocity_failures: usize,
    pub velocity_by_concentration: Vec<VelocityStat>,
    /// Rank correlation of mean velocity against concentration.
    pub velocity_spearman: Option<f64>,
    pub models: Vec<ModelResult>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self, EvalError> {
        serde_json::from_str(s).map_err(|e| EvalError::Report(e.to_string()))
    }

    pub fn model(&self, kind: ModelKind) -> Option<&ModelResult> {
        self.models.iter().find(|m| m.model == kind)
    }
}

pub fn velocity_stats(features: &FeatureSet) -> Vec<VelocityStat> {
    let mut by: BTreeMap<String, (f64, Vec<f64>, usize)> = BTreeMap::new();
    for s in &features.samples {
        let e = by
            .entry(conc_key(s.concentration_pct))
            .or_insert((s.concentration_pct, Vec::new(), 0));
        match &s.velocity {
            Some(v) => e.1.push(v.v_mps),
            None => e.2 += 1,
        }
    }
    let mut out: Vec<VelocityStat> = by
        .into_values()
        .map(|(c, v, failures)| VelocityStat {
            concentration_pct: c,
            n: v.len(),
            failures,
            mean_mps: if v.is_empty() { f64::NAN } else { mean(&v) },
            std_mps: if v.is_empty() { f64::NAN } else { population_std(&v) },
        })
        .collect();
    out.sort_by(|a, b| a.concentration_pct.total_cmp(&b.concentration_pct));
    out
}

struct FoldData<'a> {
    train: Vec<&'a SampleFeatures>,
    val: Vec<&'a SampleFeatures>,
    test: Vec<&'a SampleFeatures>,
}

struct FoldFit {
    predictions: Vec<f64>,
    selection: serde_json::Value,
    imputed: usize,
    artifact: Artifact,
}

/// A fitted fold model.
#[derive(Debug, Clone)]
pub struct Artifact {
    /// Shallow models: every parameter, the scaler and the hyperparameters.
    /// Networks: architecture, scaler and training summary.
    pub description: serde_json::Value,
    pub network: Option<Model<f32>>,
    pub history: Vec<EpochRecord>,
}

impl Artifact {
    fn shallow(description: serde_json::Value) -> Self {
        Self {
            description,
            network: None,
            history: Vec::new(),
        }
    }
}

fn velocities(set: &[&SampleFeatures], fill: f64) -> (Vec<f64>, usize) {
    let mut imputed = 0;
    let v = set
        .iter()
        .map(|s| match &s.velocity {
            Some(e) => e.v_mps,
            None => {
                imputed += 1;
                fill
            }
        })
        .collect();
    (v, imputed)
}

fn targets(set: &[&SampleFeatures]) -> Vec<f64> {
    set.iter().map(|s| s.concentration_pct).collect()
}

struct VelocityInputs {
    train: Vec<f64>,
    val: Vec<f64>,
    test: Vec<f64>,
    imputed: usize,
}

fn velocity_inputs(d: &FoldData) -> Result<VelocityInputs, String> {
    let ok: Vec<f64> = d.train.iter().filter_map(|s| s.velocity.map(|v| v.v_mps)).collect();
    if ok.is_empty() {
        return Err("no training sample has a velocity estimate".into());
    }
    let fill = mean(&ok);
    let (train, a) = velocities(&d.train, fill);
    let (val, b) = velocities(&d.val, fill);
    let (test, c) = velocities(&d.test, fill);
    Ok(VelocityInputs {
        train,
        val,
        test,
        imputed: a + b + c,
    })
}

fn fit_svr_grid(kind: ModelKind, d: &FoldData, grid: &SvrGrid) -> Result<FoldFit, String> {
    let v = velocity_inputs(d)?;
    let scaler = FeatureScaler::fit(&v.train);
    let z = |x: &[f64]| x.iter().map(|&u| scaler.transform(u)).collect::<Vec<_>>();
    let (xt, xv, xs) = (z(&v.train), z(&v.val), z(&v.test));
    let (yt, yv) = (targets(&d.train), targets(&d.val));
    let kernels: Vec<Kernel> = match kind {
        ModelKind::SvrLinear => vec![Kernel::Linear],
        _ => grid.gamma.iter().map(|&gamma| Kernel::Rbf { gamma }).collect(),
    };
    let mut best: Option<(f64, crate::shallow::SvrModel)> = None;
    let mut failures = 0;
    for k in &kernels {
        for &c in &grid.c {
            for &eps in &grid.epsilon {
                let model = match fit_svr(&xt, &yt, &SvrParams::new(*k, c, eps)) {
                    Ok(m) => m,
                    Err(_) => {
                        failures += 1;
                        continue;
                    }
                };
                let pv: Vec<f64> = xv.iter().map(|&x| model.predict(x)).collect();
                let score = mae(&pv, &yv).map_err(|e| e.to_string())?;
                if best.as_ref().is_none_or(|(b, _)| score < *b) {
                    best = Some((score, model));
                }
            }
        }
    }
    let (val_mae, model) = best.ok_or("no SVR grid point converged")?;
    let selection = serde_json::json!({
        "kernel": model.params.kernel,
        "c": model.params.c,
        "epsilon": model.params.epsilon,
        "val_mae": val_mae,
        "grid_failures": failures,
        "scaler": scaler,
    });
    let mut description = selection.clone();
    description["svr"] = serde_json::to_value(&model).expect("model serializes");
    Ok(FoldFit {
        predictions: xs.iter().map(|&x| model.predict(x)).collect(),
        selection,
        imputed: v.imputed,
        artifact: Artifact::shallow(description),
    })
}

fn train_nn(
    spec: ArchSpec,
    inputs: [Vec<&[f32]>; 3],
    d: &FoldData,
    nn: &NnSettings,
    seed: u64,
) -> Result<(Vec<f64>, serde_json::Value, Artifact), String> {
    let model = Model::<f32>::new(spec.clone(), seed).map_err(|e| e.to_string())?;
    let ex = |xs: &[&'_ [f32]], set: &[&SampleFeatures]| -> Vec<(Vec<f32>, f64)> {
        xs.iter().zip(set).map(|(x, s)| (x.to_vec(), s.concentration_pct)).collect()
    };
    let [xt, xv, xs] = inputs;
    let (train, val) = (ex(&xt, &d.train), ex(&xv, &d.val));
    let train: Vec<Example> = train.iter().map(|(x, y)| Example { x, y: *y }).collect();
    let val: Vec<Example> = val.iter().map(|(x, y)| Example { x, y: *y }).collect();
    let cfg = TrainConfig {
        adam: nn::AdamConfig {
            lr: nn.learning_rate,
            ..Default::default()
        },
        batch_size: nn.batch_size,
        max_epochs: nn.max_epochs,
        patience: nn.patience,
        seed: seed ^ 0x5eed,
        init_bias_to_mean: true,
    };
    let out = nn::train_model(model, &train, &val, &cfg).map_err(|e| e.to_string())?;
    let mut ws = out.model.workspace();
    let preds = xs
        .iter()
        .map(|x| out.model.predict(x, &mut ws).map(|p| p as f64))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let best_val = out.history.iter().find(|h| h.epoch == out.best_epoch).map(|h| h.val_mae);
    let selection = serde_json::json!({
        "params": out.model.param_count(),
        "epochs_run": out.history.len().saturating_sub(1),
        "best_epoch": out.best_epoch,
        "best_val_mae": best_val,
        "initial_train_mse": out.initial_train_mse,
        "final_train_mse": out.final_train_mse,
        "last_epoch_train_mse": out.history.last().map(|h| h.train_mse),
    });
    let mut description = selection.clone();
    description["arch"] = serde_json::to_value(&spec).expect("arch serializes");
    let artifact = Artifact {
        description,
        network: Some(out.model),
        history: out.history,
    };
    Ok((preds, selection, artifact))
}

fn slices(a: &[[f32; 1]]) -> Vec<&[f32]> {
    a.iter().map(|x| &x[..]).collect()
}

fn fit_fold<'a>(kind: ModelKind, d: &FoldData<'a>, fs: &FeatureSet, cfg: &ProtocolConfig, seed: u64) -> Result<FoldFit, String> {
    match kind {
        ModelKind::Lr => {
            let v = velocity_inputs(d)?;
            let m = fit_linreg(&v.train, &targets(&d.train)).map_err(|e| e.to_string())?;
            let selection = serde_json::json!({ "slope": m.slope, "intercept": m.intercept });
            Ok(FoldFit {
                predictions: v.test.iter().map(|&x| m.predict(x)).collect(),
                artifact: Artifact::shallow(selection.clone()),
                selection,
                imputed: v.imputed,
            })
        }
        ModelKind::SvrLinear | ModelKind::SvrRbf => fit_svr_grid(kind, d, &cfg.svr_grid),
        ModelKind::Mlp50 | ModelKind::Mlp100 => {
            let v = velocity_inputs(d)?;
            let scaler = FeatureScaler::fit(&v.train);
            let z = |x: &[f64]| x.iter().map(|&u| [scaler.transform(u) as f32]).collect::<Vec<_>>();
            let (zt, zv, zs) = (z(&v.train), z(&v.val), z(&v.test));
            let h = if kind == ModelKind::Mlp50 { 50 } else { 100 };
            let spec = ArchSpec::Mlp {
                input: 1,
                hidden: vec![h, h],
            };
            let (preds, mut sel, mut artifact) = train_nn(spec, [slices(&zt), slices(&zv), slices(&zs)], d, &cfg.nn, seed)?;
            let sc = serde_json::to_value(scaler).expect("scaler serializes");
            sel["scaler"] = sc.clone();
            artifact.description["scaler"] = sc;
            Ok(FoldFit {
                predictions: preds,
                selection: sel,
                imputed: v.imputed,
                artifact,
            })
        }
        ModelKind::Cnn1Dt | ModelKind::Cnn2Dt => {
            let (spec, get): (ArchSpec, fn(&SampleFeatures) -> &[f32]) = if kind == ModelKind::Cnn1Dt {
                let [y, t] = fs.shape_1dt;
                (ArchSpec::Cnn(CnnArch::one_dt(cfg.nn.k0, y, t)), |s| &s.map_1dt)
            } else {
                let [y, z, t] = fs.shape_2dt;
                (ArchSpec::Cnn(CnnArch::two_dt(cfg.nn.k0, y, z, t)), |s| &s.volume_2dt)
            };
            let r = |set: &[&'a SampleFeatures]| -> Vec<&'a [f32]> { set.iter().map(|s| get(s)).collect() };
            let (preds, sel, artifact) = train_nn(spec, [r(&d.train), r(&d.val), r(&d.test)], d, &cfg.nn, seed)?;
            Ok(FoldFit {
                predictions: preds,
                selection: sel,
                imputed: 0,
                artifact,
            })
        }
    }
}

fn fold_data<'a>(features: &'a FeatureSet, folds: &[Fold]) -> Result<Vec<FoldData<'a>>, EvalError> {
    let index: BTreeMap<&str, &SampleFeatures> = features.samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let pick = |ids: &[String]| -> Result<Vec<&'a SampleFeatures>, EvalError> {
        ids.iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| EvalError::InvalidArgument(format!("fold references unknown sample {id}")))
            })
            .collect()
    };
    folds
        .iter()
        .map(|f| {
            Ok(FoldData {
                train: pick(&f.optimization)?,
                val: pick(&f.validation)?,
                test: pick(&f.test)?,
            })
        })
        .collect()
}

/// One model on one fold, exactly as [`run_protocol`] fits it.
#[derive(Debug, Clone)]
pub struct FoldRun {
    pub summary: FoldSummary,
    pub predictions: Vec<Prediction>,
    pub artifact: Artifact,
}

pub fn train_fold(
    features: &FeatureSet,
    folds: &[Fold],
    fold: usize,
    kind: ModelKind,
    cfg: &ProtocolConfig,
    seed: u64,
) -> Result<FoldRun, EvalError> {
    if fold >= folds.len() {
        return Err(EvalError::InvalidArgument(format!("fold {fold} out of range (0..{})", folds.len())));
    }
    let data = fold_data(features, &folds[fold..=fold])?;
    let d = &data[0];
    let fit = fit_fold(kind, d, features, cfg, job_seed(seed, kind, fold))
        .map_err(|e| EvalError::InvalidArgument(format!("{} fold {fold}: {e}", kind.name())))?;
    let predictions: Vec<Prediction> = d
        .test
        .iter()
        .zip(&fit.predictions)
        .map(|(s, &p)| Prediction {
            sample_id: s.id.clone(),
            fold,
            true_pct: s.concentration_pct,
            predicted_pct: p,
        })
        .collect();
    let truth = targets(&d.test);
    Ok(FoldRun {
        summary: FoldSummary {
            fold,
            held_out_pct: folds[fold].held_out_pct,
            selection: fit.selection,
            imputed: fit.imputed,
            test_mae: mae(&fit.predictions, &truth)?,
        },
        predictions,
        artifact: fit.artifact,
    })
}

fn job_seed(seed: u64, kind: ModelKind, fold: usize) -> u64 {
    derive_sample_seed(seed, &format!("model:{}:fold:{fold}", kind.name()))
}

/// Runs every requested model through every fold. Per-(model, fold) jobs run
/// in parallel; each job's seed depends only on the master seed, the model
/// and the fold, so results do not depend on which other models run.
pub fn run_protocol(
    features: &FeatureSet,
    folds: &[Fold],
    models: &[ModelKind],
    cfg: &ProtocolConfig,
    seed: u64,
) -> Result<MetricsReport, EvalError> {
    let data = fold_data(features, folds)?;
    let mut models = models.to_vec();
    models.sort();
    models.dedup();
    let jobs: Vec<(ModelKind, usize)> = models.iter().flat_map(|&m| (0..folds.len()).map(move |f| (m, f))).collect();
    let fits: Vec<Result<FoldFit, String>> = jobs
        .par_iter()
        .map(|&(m, f)| fit_fold(m, &data[f], features, cfg, job_seed(seed, m, f)))
        .collect();

    let concentrations: Vec<f64> = folds.iter().map(|f| f.held_out_pct).collect();
    let sigma = population_std(&concentrations);
    let mut results = Vec::with_capacity(models.len());
    let mut it = fits.into_iter();
    for &kind in &models {
        let per_fold: Vec<Result<FoldFit, String>> = it.by_ref().take(folds.len()).collect();
        results.push(assemble(kind, per_fold, &data, folds, sigma));
    }

    let velocity_by_concentration = velocity_stats(features);
    let (cs, ms): (Vec<f64>, Vec<f64>) = velocity_by_concentration
        .iter()
        .map(|v| (v.concentration_pct, v.mean_mps))
        .unzip();
    let velocity_spearman = if ms.iter().all(|m| m.is_finite()) {
        spearman(&cs, &ms).ok()
    } else {
        None
    };
    Ok(MetricsReport {
        preset: cfg.preset.clone(),
        seed,
        n_samples: features.samples.len(),
        sigma_pct: sigma,
        velocity_failures: features.velocity_failures(),
        velocity_by_concentration,
        velocity_spearman,
        models: results,
    })
}

fn assemble(
    kind: ModelKind,
    per_fold: Vec<Result<FoldFit, String>>,
    data: &[FoldData],
    folds: &[Fold],
    sigma: f64,
) -> ModelResult {
    let mut out = ModelResult {
        model: kind,
        error: None,
        mae: None,
        mae_std: None,
        rmae: None,
        rmae_std: None,
        acc: None,
        folds: Vec::new(),
        predictions: Vec::new(),
    };
    for (f, fit) in per_fold.into_iter().enumerate() {
        let fit = match fit {
            Ok(fit) => fit,
            Err(e) => {
                out.error = Some(format!("fold {f}: {e}"));
                out.folds.clear();
                out.predictions.clear();
                return out;
            }
        };
        let truth = targets(&data[f].test);
        let fold_mae = mae(&fit.predictions, &truth).unwrap_or(f64::NAN);
        for (s, &p) in data[f].test.iter().zip(&fit.predictions) {
            out.predictions.push(Prediction {
                sample_id: s.id.clone(),
                fold: f,
                true_pct: s.concentration_pct,
                predicted_pct: p,
            });
        }
        out.folds.push(FoldSummary {
            fold: f,
            held_out_pct: folds[f].held_out_pct,
            selection: fit.selection,
            imputed: fit.imputed,
            test_mae: fold_mae,
        });
    }
    let pred: Vec<f64> = out.predictions.iter().map(|p| p.predicted_pct).collect();
    let truth: Vec<f64> = out.predictions.iter().map(|p| p.true_pct).collect();
    if pred.iter().any(|p| !p.is_finite()) {
        out.error = Some("non-finite prediction".into());
        return out;
    }
    let errs: Vec<f64> = pred.iter().zip(&truth).map(|(p, t)| (p - t).abs()).collect();
    let (m, sd) = (mean(&errs), population_std(&errs));
    out.mae = Some(m);
    out.mae_std = Some(sd);
    out.rmae = Some(rmae(m, sigma));
    out.rmae_std = Some(rmae(sd, sigma));
    out.acc = acc(&pred, &truth).ok();
    out
}

fn fmt_opt(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.prec$}"))
}

/// Fixed-width summary table in reporting order.
pub fn render_table(r: &MetricsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<8}  {:>16}  {:>13}  {:>6}", "Model", "MAE (p.p.)", "rMAE", "ACC");
    for m in &r.models {
        if let Some(e) = &m.error {
            let _ = writeln!(s, "{:<8}  failed: {e}", m.model.name());
            continue;
        }
        let _ = writeln!(
            s,
            "{:<8}  {:>16}  {:>13}  {:>6}",
            m.model.name(),
            format!("{} ± {}", fmt_opt(m.mae, 2), fmt_opt(m.mae_std, 2)),
            format!("{} ± {}", fmt_opt(m.rmae, 2), fmt_opt(m.rmae_std, 2)),
            fmt_opt(m.acc, 2),
        );
    }
    s
}

const SUMMARY_HEADER: &str = "model,mae,mae_std,rmae,rmae_std,acc";

fn csv_num(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

/// Summary rows as CSV; numbers use shortest round-trip formatting.
pub fn render_csv(r: &MetricsReport) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for m in &r.models {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            m.model.name(),
            csv_num(m.mae),
            csv_num(m.mae_std),
            csv_num(m.rmae),
            csv_num(m.rmae_std),
            csv_num(m.acc)
        );
    }
    s
}

/// One summary CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub model: ModelKind,
    pub mae: Option<f64>,
    pub mae_std: Option<f64>,
    pub rmae: Option<f64>,
    pub rmae_std: Option<f64>,
    pub acc: Option<f64>,
}

impl From<&ModelResult> for SummaryRow {
    fn from(m: &ModelResult) -> Self {
        Self {
            model: m.model,
            mae: m.mae,
            mae_std: m.mae_std,
            rmae: m.rmae,
            rmae_std: m.rmae_std,
            acc: m.acc,
        }
    }
}

pub fn parse_csv(text: &str) -> Result<Vec<SummaryRow>, EvalError> {
    let mut lines = text.lines();
    if lines.next() != Some(SUMMARY_HEADER) {
        return Err(EvalError::Report("unexpected CSV header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(EvalError::Report(format!("bad CSV row '{l}'")));
            }
            let num = |s: &str| -> Result<Option<f64>, EvalError> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| EvalError::Report(format!("bad number '{s}'")))
                }
            };
            Ok(SummaryRow {
                model: ModelKind::parse(f[0])?,
                mae: num(f[1])?,
                mae_std: num(f[2])?,
                rmae: num(f[3])?,
                rmae_std: num(f[4])?,
                acc: num(f[5])?,
            })
        })
        .collect()
}

/// Velocity per concentration, ascending.
pub fn render_velocity_csv(r: &MetricsReport) -> String {
    let mut s = String::from("concentration_pct,velocity_mean_mps,velocity_std_mps,n,failures\n");
    for v in &r.velocity_by_concentration {
        let _ = writeln!(s, "{},{},{},{},{}", v.concentration_pct, v.mean_mps, v.std_mps, v.n, v.failures);
    }
    s
}

/// Per-sample predictions of every successful model.
pub fn render_predictions_csv(r: &MetricsReport) -> String {
    let mut s = String::from("model,fold,sample_id,true_pct,predicted_pct\n");
    for m in &r.models {
        for p in &m.predictions {
            let _ = writeln!(s, "{},{},{},{},{}", m.model.name(), p.fold, p.sample_id, p.true_pct, p.predicted_pct);
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DatasetConfig, DEFAULT_CONCENTRATIONS};
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn manifest() -> Vec<Sample> {
        DatasetConfig::default().plan(3).unwrap().into_iter().map(|p| p.sample).collect()
    }

    #[test]
    fn sixfold_plan_partitions() {
        let samples = manifest();
        let folds = make_sixfold_plan(&samples, 11).unwrap();
        assert_eq!(folds.len(), 6);
        let held: BTreeSet<String> = folds.iter().map(|f| conc_key(f.held_out_pct)).collect();
        assert_eq!(held.len(), 6);
        let conc: BTreeMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
        for f in &folds {
            assert_eq!(f.optimization.len(), 320);
            assert_eq!(f.test.len(), 32);
            assert_eq!(f.validation.len(), 32);
            let opt: BTreeSet<&String> = f.optimization.iter().collect();
            for id in f.test.iter().chain(&f.validation) {
                assert!(!opt.contains(id));
                assert_eq!(conc[id.as_str()].concentration_pct, f.held_out_pct);
            }
            assert!(f.optimization.iter().all(|id| conc[id.as_str()].concentration_pct != f.held_out_pct));
            let tv: BTreeSet<&String> = f.test.iter().chain(&f.validation).collect();
            assert_eq!(tv.len(), 64);
            for subset in [&f.test, &f.validation] {
                let mut per: BTreeMap<String, usize> = BTreeMap::new();
                for id in subset {
                    *per.entry(conc_key(conc[id.as_str()].needle_distance_m)).or_default() += 1;
                }
                assert_eq!(per.len(), 4);
                assert!(per.values().all(|&n| n == 8));
            }
        }
        assert_eq!(folds, make_sixfold_plan(&samples, 11).unwrap());
        assert_ne!(folds, make_sixfold_plan(&samples, 12).unwrap());
    }

    #[test]
    fn sixfold_plan_rejects_bad_counts() {
        let mut samples = manifest();
        samples.pop();
        assert!(matches!(make_sixfold_plan(&samples, 0), Err(EvalError::BadCounts(_))));
        let samples: Vec<Sample> = manifest()
            .into_iter()
            .filter(|s| s.concentration_pct != 4.2)
            .collect();
        assert!(matches!(make_sixfold_plan(&samples, 0), Err(EvalError::BadCounts(_))));
    }

    #[test]
    fn sigma_of_concentrations() {
        // Equal-weight population std, computed the long way.
        let c = DEFAULT_CONCENTRATIONS;
        let m = c.iter().sum::<f64>() / 6.0;
        let var = c.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 6.0;
        let sigma = population_std(&c);
        assert!((sigma - var.sqrt()).abs() < 1e-12);
        assert!((sigma - 2.3434).abs() < 5e-5);
        assert!((rmae(1.57, sigma) - 0.670).abs() < 5e-4);
    }

    #[test]
    fn metric_examples() {
        let t = [1.0, 2.0, 3.0, 5.0];
        assert_eq!(mae(&t, &t).unwrap(), 0.0);
        assert!((acc(&t, &t).unwrap() - 1.0).abs() < 1e-12);
        let p: Vec<f64> = t.iter().map(|x| x + 1.0).collect();
        assert!((mae(&p, &t).unwrap() - 1.0).abs() < 1e-12);
        assert!((acc(&p, &t).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(acc(&[2.0; 4], &t), Err(EvalError::UndefinedCorrelation)));
        assert!(mae(&[], &[]).is_err());
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 90.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!(spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() < 1.0);
    }

    #[test]
    fn model_names_roundtrip() {
        for m in ModelKind::ALL {
            assert_eq!(ModelKind::parse(m.name()).unwrap(), m);
            let j = serde_json::to_string(&m).unwrap();
            assert_eq!(j, format!("\"{}\"", m.name()));
        }
        assert_eq!(ModelKind::parse_list("all").unwrap().len(), 7);
        assert_eq!(
            ModelKind::parse_list("CNN-2Dt, lr,LR").unwrap(),
            vec![ModelKind::Lr, ModelKind::Cnn2Dt]
        );
        assert!(ModelKind::parse_list("LR,knn").is_err());
    }

    #[test]
    fn resample_examples() {
        let x: Vec<f32> = (0..8).map(|v| v as f32).collect();
        assert_eq!(resample_mean(&x, &[8], &[4]), vec![0.5, 2.5, 4.5, 6.5]);
        assert_eq!(resample_mean(&x, &[8], &[8]), x);
        assert_eq!(resample_mean(&x, &[2, 4], &[1, 2]), vec![2.5, 4.5]);
        // Uneven bins: 5 → 2 takes [0, 2) and [2, 5).
        assert_eq!(resample_mean(&[1.0, 3.0, 0.0, 3.0, 6.0], &[5], &[2]), vec![2.0, 3.0]);
    }

    fn synthetic_features(seed: u64) -> (Vec<Sample>, FeatureSet) {
        let samples = manifest();
        let mut rng = rng_from_seed(seed);
        use rand::Rng;
        let feats = samples
            .iter()
            .map(|s| {
                let v = 0.5 + 0.3 * s.concentration_pct + rng.random_range(-0.05..0.05);
                SampleFeatures {
                    id: s.id.clone(),
                    concentration_pct: s.concentration_pct,
                    needle_distance_m: s.needle_distance_m,
                    velocity: Some(VelocityEstimate {
                        v_px_per_frame: v,
                        v_mps: v,
                        r_squared: 1.0,
                        n_points: 32,
                    }),
                    velocity_error: None,
                    map_1dt: Vec::new(),
                    volume_2dt: Vec::new(),
                }
            })
            .collect();
        (
            samples,
            FeatureSet {
                samples: feats,
                shape_1dt: [0; 2],
                shape_2dt: [0; 3],
            },
        )
    }

    fn quick_cfg() -> ProtocolConfig {
        let mut cfg = ProtocolConfig::desk();
        cfg.nn.max_epochs = 3;
        cfg.svr_grid = SvrGrid {
            c: vec![10.0],
            epsilon: vec![0.1],
            gamma: vec![1.0],
        };
        cfg
    }

    #[test]
    fn protocol_on_linear_velocities() {
        let (samples, fs) = synthetic_features(1);
        let folds = make_sixfold_plan(&samples, 2).unwrap();
        let models = [ModelKind::Lr, ModelKind::SvrLinear, ModelKind::Mlp50];
        let r = run_protocol(&fs, &folds, &models, &quick_cfg(), 5).unwrap();
        assert_eq!(r.models.len(), 3);
        for m in &r.models {
            assert!(m.error.is_none(), "{:?}", m.error);
            assert_eq!(m.predictions.len(), 192);
            assert!((m.rmae.unwrap() * r.sigma_pct - m.mae.unwrap()).abs() < 1e-12);
        }
        // Noise of ±0.05 m/s on a slope of 0.3 m/s per p.p.
        assert!(r.model(ModelKind::Lr).unwrap().mae.unwrap() < 0.2);
        assert_eq!(r.velocity_spearman, Some(1.0));
        assert_eq!(r.velocity_by_concentration.len(), 6);
    }

    #[test]
    fn models_are_isolated() {
        let (samples, fs) = synthetic_features(4);
        let folds = make_sixfold_plan(&samples, 2).unwrap();
        let cfg = quick_cfg();
        let all = [ModelKind::Lr, ModelKind::SvrRbf, ModelKind::Mlp100];
        let r = run_protocol(&fs, &folds, &all, &cfg, 9).unwrap();
        let one = run_protocol(&fs, &folds, &[ModelKind::Mlp100], &cfg, 9).unwrap();
        assert_eq!(r.model(ModelKind::Mlp100), one.model(ModelKind::Mlp100));
    }

    #[test]
    fn single_fold_matches_protocol() {
        let (samples, fs) = synthetic_features(2);
        let folds = make_sixfold_plan(&samples, 2).unwrap();
        let cfg = quick_cfg();
        let r = run_protocol(&fs, &folds, &[ModelKind::SvrRbf, ModelKind::Mlp50], &cfg, 3).unwrap();
        for kind in [ModelKind::SvrRbf, ModelKind::Mlp50] {
            let one = train_fold(&fs, &folds, 4, kind, &cfg, 3).unwrap();
            let m = r.model(kind).unwrap();
            assert_eq!(one.summary, m.folds[4]);
            let from_report: Vec<&Prediction> = m.predictions.iter().filter(|p| p.fold == 4).collect();
            assert_eq!(one.predictions.iter().collect::<Vec<_>>(), from_report);
        }
        let one = train_fold(&fs, &folds, 0, ModelKind::Mlp50, &cfg, 3).unwrap();
        assert!(one.artifact.network.is_some());
        assert_eq!(one.artifact.history.len(), 4);
        let svr = train_fold(&fs, &folds, 0, ModelKind::SvrLinear, &cfg, 3).unwrap();
        assert!(svr.artifact.description["svr"]["coef"].is_array());
        assert!(train_fold(&fs, &folds, 6, ModelKind::Lr, &cfg, 3).is_err());
    }

    #[test]
    fn missing_cnn_inputs_fail_in_isolation() {
        let (samples, fs) = synthetic_features(4);
        let folds = make_sixfold_plan(&samples, 2).unwrap();
        let r = run_protocol(&fs, &folds, &[ModelKind::Lr, ModelKind::Cnn1Dt], &quick_cfg(), 9).unwrap();
        assert!(r.model(ModelKind::Lr).unwrap().error.is_none());
        let cnn = r.model(ModelKind::Cnn1Dt).unwrap();
        assert!(cnn.error.is_some());
        assert!(cnn.mae.is_none());
        assert!(render_table(&r).contains("failed"));
    }

    #[test]
    fn failed_velocities_are_imputed() {
        let (samples, mut fs) = synthetic_features(6);
        for s in fs.samples.iter_mut().step_by(10) {
            s.velocity = None;
        }
        let folds = make_sixfold_plan(&samples, 2).unwrap();
        let r = run_protocol(&fs, &folds, &[ModelKind::Lr], &quick_cfg(), 1).unwrap();
        let lr = r.model(ModelKind::Lr).unwrap();
        assert!(lr.error.is_none());
        let total: usize = lr.folds.iter().map(|f| f.imputed).sum();
        // Each sample is counted once per fold it takes part in.
        assert_eq!(total, 6 * fs.velocity_failures());
        assert_eq!(r.velocity_failures, fs.velocity_failures());
    }

    #[test]
    fn report_renderings() {
        let (samples, fs) = synthetic_features(1);
        let folds = make_sixfold_plan(&samples, 2).unwrap();
        let r = run_protocol(&fs, &folds, &[ModelKind::Lr, ModelKind::SvrLinear], &quick_cfg(), 5).unwrap();
        let back = MetricsReport::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
        let rows = parse_csv(&render_csv(&r)).unwrap();
        let expect: Vec<SummaryRow> = r.models.iter().map(SummaryRow::from).collect();
        assert_eq!(rows, expect);
        assert_eq!(render_table(&r).lines().count(), 3);
        assert_eq!(render_velocity_csv(&r).lines().count(), 7);
        assert_eq!(render_predictions_csv(&r).lines().count(), 1 + 2 * 192);
    }

    fn arb_opt() -> impl Strategy<Value = Option<f64>> {
        prop_oneof![Just(None), any::<f64>().prop_filter("finite", |v| v.is_finite()).prop_map(Some)]
    }

    proptest! {
        #[test]
        fn csv_roundtrip_is_exact(vals in proptest::collection::vec((0usize..7, arb_opt(), arb_opt(), arb_opt(), arb_opt(), arb_opt()), 0..8)) {
            let models = vals.into_iter().map(|(k, a, b, c, d, e)| ModelResult {
                model: ModelKind::ALL[k],
                error: None,
                mae: a, mae_std: b, rmae: c, rmae_std: d, acc: e,
                folds: vec![],
                predictions: vec![],
            }).collect::<Vec<_>>();
            let r = MetricsReport {
                preset: "desk".into(), seed: 0, n_samples: 0, sigma_pct: 1.0, velocity_failures: 0,
                velocity_by_concentration: vec![], velocity_spearman: None, models,
            };
            let rows = parse_csv(&render_csv(&r)).unwrap();
            let expect: Vec<SummaryRow> = r.models.iter().map(SummaryRow::from).collect();
            prop_assert_eq!(rows, expect);
        }
    }
}
