//! Acceptance criteria, run in order without the libtest harness so every
//! `criterion N PASS|FAIL` line is printed. Exits non-zero if any criterion fails.

use std::f64::consts::PI;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use oce_core::config::AcquisitionConfig;
use oce_core::dataset::{generate_dataset, DatasetConfig};
use oce_core::eval::{
    extract_features, make_sixfold_plan, population_std, run_protocol, FoldSummary, MetricsReport, ModelKind,
    ModelResult, Prediction, ProtocolConfig, VelocityStat,
};
use oce_core::nn::gradcheck::{check_layer_kind, grad_check, LayerKind, STEP};
use oce_core::nn::{ArchSpec, CnnArch, Model};
use oce_core::phasepipe::{axial_mean, median_filter_3, preprocess, unwrap_temporal, PreprocessConfig, SpatioTemporalMap};
use oce_core::seed::rng_from_seed;
use oce_core::tensor::{Axis, Tensor};
use oce_core::velocity::{estimate_velocity, VelocityConfig};
use oce_core::wavesim::{simulate_with_delay, wrap_phase, NoiseSpec, PhantomSpec, VelocityModel};

const CONCENTRATIONS: [f64; 6] = [11.1, 8.3, 6.7, 5.6, 4.8, 4.2];

struct Criterion {
    id: u32,
    start: Instant,
    failed: Vec<String>,
}

impl Criterion {
    fn new(id: u32) -> Self {
        Self {
            id,
            start: Instant::now(),
            failed: Vec::new(),
        }
    }

    fn check(&mut self, name: &str, pass: bool, detail: impl AsRef<str>) -> bool {
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("criterion {:>2} {tag} {name}: {}", self.id, detail.as_ref());
        if !pass {
            self.failed.push(name.to_string());
        }
        pass
    }

    fn finish(mut self, limit: Duration) {
        let t = self.start.elapsed();
        self.check(
            "runtime",
            t <= limit,
            format!("{:.1} s (limit {} s)", t.as_secs_f64(), limit.as_secs()),
        );
        assert!(self.failed.is_empty(), "criterion {} failed: {:?}", self.id, self.failed);
    }
}

fn random_tensor(rng: &mut ChaCha8Rng) -> Tensor {
    let all = [Axis::C, Axis::Y, Axis::Z, Axis::T];
    let axes: Vec<Axis> = loop {
        let pick: Vec<Axis> = all.iter().copied().filter(|_| rng.random_bool(0.5)).collect();
        if !pick.is_empty() {
            break pick;
        }
    };
    let shape: Vec<usize> = axes.iter().map(|_| rng.random_range(1..=6)).collect();
    let n = shape.iter().product();
    let data = (0..n).map(|_| f32::from_bits(rng.random())).collect();
    let mut t = Tensor::new(shape, axes, data).unwrap();
    for k in 0..rng.random_range(0..4) {
        let v = match rng.random_range(0..3) {
            0 => json!(rng.random::<f64>() * 10f64.powi(rng.random_range(-30..30))),
            1 => json!(rng.random::<i64>()),
            _ => json!(format!("s{}", rng.random::<u32>())),
        };
        t.meta_mut().insert(format!("k{k}"), v);
    }
    t
}

fn random_f64(rng: &mut ChaCha8Rng) -> f64 {
    let m = rng.random::<f64>() - 0.5;
    m * 10f64.powi(rng.random_range(-12..12))
}

fn random_report(rng: &mut ChaCha8Rng) -> MetricsReport {
    let opt = |rng: &mut ChaCha8Rng| rng.random_bool(0.8).then(|| random_f64(rng));
    let models = (0..rng.random_range(0..4))
        .map(|_| {
            let model = ModelKind::ALL[rng.random_range(0..7)];
            let folds = (0..rng.random_range(0..3))
                .map(|f| FoldSummary {
                    fold: f,
                    held_out_pct: CONCENTRATIONS[f],
                    selection: json!({ "c": random_f64(rng), "epochs": rng.random::<u32>() }),
                    imputed: rng.random_range(0..64),
                    test_mae: random_f64(rng),
                })
                .collect();
            let predictions = (0..rng.random_range(0..5))
                .map(|i| Prediction {
                    sample_id: format!("s{i}"),
                    fold: i,
                    true_pct: random_f64(rng),
                    predicted_pct: random_f64(rng),
                })
                .collect();
            ModelResult {
                model,
                error: rng.random_bool(0.1).then(|| "diverged \"x\"\n".to_string()),
                mae: opt(rng),
                mae_std: opt(rng),
                rmae: opt(rng),
                rmae_std: opt(rng),
                acc: opt(rng),
                folds,
                predictions,
            }
        })
        .collect();
    MetricsReport {
        preset: "desk".into(),
        seed: rng.random(),
        n_samples: rng.random_range(0..1000),
        sigma_pct: random_f64(rng),
        velocity_failures: rng.random_range(0..100),
        velocity_by_concentration: (0..rng.random_range(0..7))
            .map(|_| VelocityStat {
                concentration_pct: random_f64(rng),
                n: rng.random_range(0..64),
                failures: rng.random_range(0..64),
                mean_mps: random_f64(rng),
                std_mps: random_f64(rng),
            })
            .collect(),
        velocity_spearman: opt(rng),
        models,
    }
}

fn criterion_01_format_roundtrip() {
    let mut c = Criterion::new(1);
    let mut rng = rng_from_seed(1);
    let dir = tempfile::tempdir().unwrap();
    let mut bad = 0;
    for i in 0..1000 {
        let t = random_tensor(&mut rng);
        let back = if i % 50 == 0 {
            let p = dir.path().join(format!("t{i}.oct"));
            oce_core::tensor::write_tensor(&t, &p).unwrap();
            oce_core::tensor::read_tensor(&p).unwrap()
        } else {
            Tensor::from_bytes(&t.to_bytes().unwrap(), Path::new("memory")).unwrap()
        };
        let same = back.shape() == t.shape()
            && back.axes() == t.axes()
            && back.meta() == t.meta()
            && back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        bad += usize::from(!same);
    }
    c.check("tensor container", bad == 0, format!("{bad}/1000 cases differ"));
    let mut bad = 0;
    for _ in 0..1000 {
        let r = random_report(&mut rng);
        let text = r.to_json();
        let back = MetricsReport::from_json(&text).unwrap();
        bad += usize::from(back != r || back.to_json() != text);
    }
    c.check("metrics report", bad == 0, format!("{bad}/1000 cases differ"));
    c.finish(Duration::from_secs(10));
}

fn yzt(ny: usize, nz: usize, nt: usize, data: Vec<f32>) -> Tensor {
    Tensor::new(vec![ny, nz, nt], vec![Axis::Y, Axis::Z, Axis::T], data).unwrap()
}

fn criterion_02_phase_pipeline_oracles() {
    let mut c = Criterion::new(2);
    let mut rng = rng_from_seed(2);

    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..300);
        let mut x = vec![rng.random_range(-PI..PI)];
        for _ in 1..n {
            let step = rng.random_range(-0.99 * PI..0.99 * PI);
            x.push(x.last().unwrap() + step);
        }
        let wrapped: Vec<f64> = x.iter().map(|&v| wrap_phase(v)).collect();
        let back = unwrap_temporal(&wrapped);
        for (a, b) in back.iter().zip(&x) {
            worst = worst.max((a - b).abs());
        }
    }
    c.check("unwrap inverts wrap", worst < 1e-9, format!("max deviation {worst:.2e} rad over 1000 sequences"));

    let (ny, nz, nt) = (5, 5, 7);
    let mut mismatches = 0;
    for _ in 0..50 {
        let data: Vec<f32> = (0..ny * nz * nt).map(|_| rng.random_range(-1.0..1.0)).collect();
        let vol = yzt(ny, nz, nt, data);
        let out = median_filter_3(&vol).unwrap();
        for y in 0..ny {
            for z in 0..nz {
                for t in 0..nt {
                    let mut win = Vec::with_capacity(27);
                    for dy in -1..=1isize {
                        for dz in -1..=1isize {
                            for dt in -1..=1isize {
                                let yy = (y as isize + dy).clamp(0, ny as isize - 1) as usize;
                                let zz = (z as isize + dz).clamp(0, nz as isize - 1) as usize;
                                let tt = (t as isize + dt).clamp(0, nt as isize - 1) as usize;
                                win.push(vol.get(&[yy, zz, tt]));
                            }
                        }
                    }
                    win.sort_by(f32::total_cmp);
                    mismatches += usize::from(out.get(&[y, z, t]).to_bits() != win[13].to_bits());
                }
            }
        }
    }
    c.check("median filter vs sorting oracle", mismatches == 0, format!("{mismatches} voxels differ over 50 volumes"));

    let mut violations = 0;
    for _ in 0..100 {
        let (ny, nz, nt) = (rng.random_range(1..6), rng.random_range(2..12), rng.random_range(1..20));
        let mut mask: Vec<bool> = (0..nz).map(|_| rng.random_bool(0.6)).collect();
        mask[rng.random_range(0..nz)] = true;
        let data: Vec<f32> = (0..ny * nz * nt).map(|_| rng.random_range(-1.0..1.0)).collect();
        let vol = yzt(ny, nz, nt, data);
        let base = axial_mean(&vol, &mask, 1.0, 1.0).unwrap();
        let mut perturbed = vol.clone();
        for y in 0..ny {
            for z in (0..nz).filter(|&z| !mask[z]) {
                for t in 0..nt {
                    perturbed.set(&[y, z, t], rng.random_range(-1e6..1e6));
                }
            }
        }
        let other = axial_mean(&perturbed, &mask, 1.0, 1.0).unwrap();
        violations += usize::from(base.values.data() != other.values.data());
        let kept: Vec<usize> = (0..nz).filter(|&z| mask[z]).collect();
        for y in 0..ny {
            for t in 0..nt {
                let oracle = kept.iter().map(|&z| vol.get(&[y, z, t]) as f64).sum::<f64>() / kept.len() as f64;
                violations += usize::from((base.values.get(&[y, t]) as f64 - oracle).abs() > 1e-6);
            }
        }
    }
    c.check("axial mean ignores masked rows", violations == 0, format!("{violations} violations over 100 volumes"));
    c.finish(Duration::from_secs(30));
}

fn phantom_at(v: f64) -> PhantomSpec {
    PhantomSpec {
        concentration_pct: 8.3,
        velocity_model: VelocityModel {
            v_ref_mps: v,
            c_ref_pct: 8.3,
            gamma: 1.25,
        },
        ..PhantomSpec::default()
    }
}

fn recovered(v: f64, noise: &NoiseSpec, seed: u64) -> Option<f64> {
    let raw = simulate_with_delay(&phantom_at(v), &AcquisitionConfig::default(), noise, 5e-3, 0.0, seed).unwrap();
    let pre = preprocess(&raw, &PreprocessConfig::default()).unwrap();
    estimate_velocity(&pre.map, &VelocityConfig::default()).ok().map(|e| e.v_mps)
}

fn criterion_03_velocity_recovery() {
    let mut c = Criterion::new(3);
    for v in [1.0, 2.0, 3.0, 4.0] {
        let clean = recovered(v, &NoiseSpec::none(), 300);
        let err = clean.map(|e| (e / v - 1.0).abs());
        c.check(
            &format!("noise-free v = {v} m/s"),
            err.is_some_and(|e| e <= 0.03),
            format!("estimate {clean:?} m/s, relative error {err:?}"),
        );
        // Runs without an estimate count as unbounded error.
        let mut errs: Vec<f64> = (0..32)
            .map(|s| recovered(v, &NoiseSpec::default(), 1000 + s).map_or(f64::INFINITY, |e| (e / v - 1.0).abs()))
            .collect();
        errs.sort_by(f64::total_cmp);
        let failures = errs.iter().filter(|e| e.is_infinite()).count();
        let median = 0.5 * (errs[15] + errs[16]);
        c.check(
            &format!("noisy v = {v} m/s"),
            median <= 0.10,
            format!("median relative error {median:.4} over 32 runs ({failures} without estimate)"),
        );
    }
    c.finish(Duration::from_secs(120));
}

fn criterion_04_unit_conversion() {
    let mut c = Criterion::new(4);
    let acq = AcquisitionConfig::default();
    let pitch = acq.pixel_pitch_m();
    let dt = acq.frame_interval_s();
    c.check("pixel pitch", (pitch - 93.75e-6).abs() < 1e-15, format!("{pitch:e} m"));
    c.check("frame interval", (dt - 1.0 / 30_000.0).abs() < 1e-15, format!("{dt:e} s"));
    // A wavefront advancing one pixel every two frames, sampled as unit pulses.
    let (ny, nt) = (32, 200);
    let mut data = vec![0.0f32; ny * nt];
    for y in 0..ny {
        let centre = 50 + 2 * y;
        for t in 0..nt {
            let d = t as f64 - centre as f64;
            data[y * nt + t] = (-d * d / 8.0).exp() as f32;
        }
    }
    let map = SpatioTemporalMap {
        values: Tensor::new(vec![ny, nt], vec![Axis::Y, Axis::T], data).unwrap(),
        frame_interval_s: dt,
        pixel_pitch_m: pitch,
    };
    let est = estimate_velocity(&map, &VelocityConfig::default()).unwrap();
    c.check(
        "0.5 px/frame",
        (est.v_px_per_frame - 0.5).abs() < 1e-9,
        format!("{} px/frame", est.v_px_per_frame),
    );
    c.check("1.40625 m/s", (est.v_mps - 1.40625).abs() < 1e-9, format!("{} m/s", est.v_mps));
    c.finish(Duration::from_secs(10));
}

fn criterion_05_gradient_correctness() {
    let mut c = Criterion::new(5);
    for (i, kind) in LayerKind::ALL.iter().enumerate() {
        let e = check_layer_kind(*kind, 20, 500 + i as u64);
        c.check(kind.name(), e < 1e-5, format!("max relative error {e:.2e}"));
    }
    let nets = [
        ("reduced 1D+t CNN", CnnArch::one_dt(2, 4, 32)),
        ("reduced 2D+t CNN", CnnArch::two_dt(2, 3, 3, 32)),
    ];
    for (name, mut arch) in nets {
        arch.blocks = 2;
        let m = Model::<f64>::new(ArchSpec::Cnn(arch), 55).unwrap();
        let x: Vec<f32> = (0..m.input_len()).map(|i| ((i * 7919) % 113) as f32 / 56.0 - 1.0).collect();
        let e = grad_check(&m, &x, 1.0, STEP).unwrap();
        c.check(name, e < 1e-5, format!("{} parameters, max relative error {e:.2e}", m.param_count()));
    }
    c.finish(Duration::from_secs(300));
}

fn criterion_06_architecture_arithmetic() {
    let mut c = Criterion::new(6);
    let acq = AcquisitionConfig::default();
    let depth = acq.depth_pixels - PhantomSpec::default().surface_index;
    let nets = [
        ("1D+t", CnnArch::one_dt(16, acq.lateral_pixels, acq.frames_kept)),
        ("2D+t", CnnArch::two_dt(16, acq.lateral_pixels, depth, acq.frames_kept)),
    ];
    for (name, arch) in nets {
        let blocks = arch.propagate().unwrap();
        let growth_ok = blocks.iter().all(|(g, _)| g.cout() == g.cin + 20);
        let mut cins: Vec<usize> = blocks.iter().map(|(g, _)| g.cin).collect();
        cins.push(blocks.last().unwrap().0.cout());
        c.check(
            &format!("{name} dense blocks add 20 channels"),
            growth_ok,
            format!("channels {cins:?}"),
        );
        let model = Model::<f32>::new(ArchSpec::Cnn(arch), 0).unwrap();
        let head = model.head_input();
        c.check(&format!("{name} head input"), head == 96, format!("{head} channels"));
    }
    c.finish(Duration::from_secs(10));
}

fn criterion_07_metric_consistency() {
    let mut c = Criterion::new(7);
    let sigma = population_std(&CONCENTRATIONS);
    c.check("sigma", (sigma - 2.3434).abs() < 5e-5, format!("{sigma:.5} p.p."));
    // Rows of the reference results table: (model, MAE, rMAE).
    let table = [
        ("LR", 1.57, 0.67),
        ("SVR (Linear)", 1.50, 0.63),
        ("SVR (RBF)", 1.41, 0.60),
        ("MLP (50,50)", 1.29, 0.55),
        ("MLP (100,100)", 1.32, 0.60),
        ("1D+t CNN", 1.04, 0.44),
        ("2D+t CNN", 0.90, 0.38),
    ];
    let mut inconsistent = Vec::new();
    for (name, mae, rmae) in table {
        let r = mae / sigma;
        let d = (r - rmae).abs();
        if !c.check(name, d <= 0.005, format!("{mae}/{sigma:.4} = {r:.4} vs printed {rmae} (|diff| {d:.4})")) {
            inconsistent.push(name);
        }
    }
    // The printed SVR (Linear) and MLP (100,100) rows disagree with their own MAE
    // under any single sigma; those rows are reported, not asserted.
    c.failed.retain(|n| !["SVR (Linear)", "MLP (100,100)"].contains(&n.as_str()));
    println!("criterion  7 note: rows inconsistent in the reference table: {inconsistent:?}");
    c.finish(Duration::from_secs(10));
}

fn criterion_08_protocol_integrity() {
    let mut c = Criterion::new(8);
    let samples: Vec<_> = DatasetConfig::default()
        .plan(8)
        .unwrap()
        .into_iter()
        .map(|p| p.sample)
        .collect();
    let folds = make_sixfold_plan(&samples, 8).unwrap();
    let by_id: std::collections::HashMap<&str, &oce_core::config::Sample> =
        samples.iter().map(|s| (s.id.as_str(), s)).collect();
    c.check("six folds", folds.len() == 6, format!("{} folds", folds.len()));
    let mut held: Vec<f64> = folds.iter().map(|f| f.held_out_pct).collect();
    held.sort_by(f64::total_cmp);
    let mut expected = CONCENTRATIONS.to_vec();
    expected.sort_by(f64::total_cmp);
    c.check("each concentration held out once", held == expected, format!("{held:?}"));
    let sizes_ok = folds.iter().all(|f| f.test.len() == 32 && f.validation.len() == 32 && f.optimization.len() == 320);
    let sizes: Vec<_> = folds.iter().map(|f| (f.test.len(), f.validation.len(), f.optimization.len())).collect();
    c.check("32/32/320 split", sizes_ok, format!("{sizes:?}"));
    let mut leaks = 0;
    let mut strata_bad = 0;
    for f in &folds {
        let mut seen = std::collections::HashSet::new();
        for id in f.test.iter().chain(&f.validation).chain(&f.optimization) {
            leaks += usize::from(!seen.insert(id.as_str()));
        }
        leaks += samples.len() - seen.len();
        for id in f.test.iter().chain(&f.validation) {
            leaks += usize::from(by_id[id.as_str()].concentration_pct != f.held_out_pct);
        }
        for id in &f.optimization {
            leaks += usize::from(by_id[id.as_str()].concentration_pct == f.held_out_pct);
        }
        for d in [5e-3, 10e-3, 15e-3, 20e-3] {
            let count = |ids: &[String]| ids.iter().filter(|id| by_id[id.as_str()].needle_distance_m == d).count();
            strata_bad += usize::from(count(&f.test) != 8 || count(&f.validation) != 8);
        }
    }
    c.check("zero leakage", leaks == 0, format!("{leaks} violations"));
    c.check("split stratified by needle distance", strata_bad == 0, format!("{strata_bad} unbalanced strata"));
    let again = make_sixfold_plan(&samples, 8).unwrap();
    c.check("seeded", again == folds, "same seed gives the same plan");
    c.finish(Duration::from_secs(10));
}

const E2E_SEED: u64 = 2024;
/// Every sample is predicted once, in the test half of its held-out concentration.
const TEST_PREDICTIONS: usize = 6 * 32;

fn desk_run() -> MetricsReport {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate_dataset(&DatasetConfig::default(), E2E_SEED, dir.path()).unwrap();
    let cfg = ProtocolConfig::desk();
    let folds = make_sixfold_plan(&samples, E2E_SEED).unwrap();
    let features = extract_features(&samples, dir.path(), &cfg, &ModelKind::ALL).unwrap();
    run_protocol(&features, &folds, &ModelKind::ALL, &cfg, E2E_SEED).unwrap()
}

fn criteria_09_10_desk_end_to_end() {
    let mut c = Criterion::new(9);
    let report = desk_run();
    let complete: Vec<&str> = report
        .models
        .iter()
        .filter(|m| m.error.is_none() && m.rmae.is_some() && m.acc.is_some() && m.predictions.len() == TEST_PREDICTIONS)
        .map(|m| m.model.name())
        .collect();
    c.check("all 7 models complete", complete.len() == 7, format!("{complete:?}"));
    for m in &report.models {
        println!(
            "criterion  9 info {:<8} MAE {:?} rMAE {:?} ACC {:?} error {:?}",
            m.model.name(),
            m.mae,
            m.rmae,
            m.acc,
            m.error
        );
    }
    for kind in [ModelKind::Mlp50, ModelKind::Cnn2Dt] {
        let r = report.model(kind).and_then(|m| m.rmae);
        c.check(&format!("{} rMAE < 0.8", kind.name()), r.is_some_and(|r| r < 0.8), format!("{r:?}"));
    }
    let mut stats = report.velocity_by_concentration.clone();
    stats.sort_by(|a, b| a.concentration_pct.total_cmp(&b.concentration_pct));
    let means: Vec<f64> = stats.iter().map(|s| s.mean_mps).collect();
    let increasing = means.windows(2).all(|w| w[0] < w[1]) && means.len() == 6;
    c.check(
        "velocity increases with concentration",
        increasing && report.velocity_spearman == Some(1.0),
        format!("means {means:.3?} m/s, Spearman {:?}, {} failed estimates", report.velocity_spearman, report.velocity_failures),
    );
    let mut not_decreased = Vec::new();
    for m in report.models.iter().filter(|m| matches!(m.model, ModelKind::Mlp50 | ModelKind::Mlp100 | ModelKind::Cnn1Dt | ModelKind::Cnn2Dt)) {
        for f in &m.folds {
            let first = f.selection["initial_train_mse"].as_f64();
            let last = f.selection["last_epoch_train_mse"].as_f64();
            if !matches!((first, last), (Some(a), Some(b)) if b < a) {
                not_decreased.push(format!("{}/{}", m.model.name(), f.fold));
            }
        }
    }
    c.check("training MSE decreases", not_decreased.is_empty(), format!("runs without decrease: {not_decreased:?}"));
    let best = report
        .models
        .iter()
        .filter_map(|m| m.rmae.map(|r| (r, m.model.name())))
        .min_by(|a, b| a.0.total_cmp(&b.0));
    println!("criterion  9 info best model by rMAE: {best:?} (reference ordering: 2D+t CNN best)");
    c.finish(Duration::from_secs(30 * 60));

    let mut d = Criterion::new(10);
    let again = desk_run();
    let (a, b) = (report.to_json(), again.to_json());
    d.check("byte-identical rerun", a == b, format!("{} bytes", a.len()));
    d.finish(Duration::from_secs(30 * 60));
}

fn main() {
    let criteria: [(&str, fn()); 9] = [
        ("1", criterion_01_format_roundtrip),
        ("2", criterion_02_phase_pipeline_oracles),
        ("3", criterion_03_velocity_recovery),
        ("4", criterion_04_unit_conversion),
        ("5", criterion_05_gradient_correctness),
        ("6", criterion_06_architecture_arithmetic),
        ("7", criterion_07_metric_consistency),
        ("8", criterion_08_protocol_integrity),
        ("9, 10", criteria_09_10_desk_end_to_end),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = Vec::new();
    for (id, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| id.split(", ").any(|i| i == f)) {
            continue;
        }
        if std::panic::catch_unwind(run).is_err() {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
