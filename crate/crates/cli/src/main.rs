//! `oce`: simulate → preprocess → velocity → train → evaluate → report.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::{json, Value};

use oce_core::config::{read_manifest, Sample};
use oce_core::dataset::{generate_dataset, DatasetConfig};
use oce_core::eval::{
    extract_features, make_fold_plan, render_csv, render_predictions_csv, render_table, render_velocity_csv,
    run_protocol, train_fold, MetricsReport, ModelKind, ProtocolConfig,
};
use oce_core::nn::{history_csv, save_checkpoint};
use oce_core::phasepipe::preprocess_tensors;
use oce_core::tensor::{read_tensor, write_tensor};
use oce_core::velocity::estimate_velocity;

#[derive(Parser, Debug)]
#[command(name = "oce", version, about = "Shear wave elastography vs. spatio-temporal CNNs on synthetic OCE data")]
struct Cli {
    /// Worker threads (overrides OCE_THREADS; default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Also write wall-clock stage timings to `timing.json` next to `run.json`.
    #[arg(long, global = true)]
    timing: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Paper,
}

impl Preset {
    fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Csv,
    Json,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset: tensors plus manifest.json.
    Simulate {
        /// Dataset config JSON; missing keys take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the 1D+t map (and optionally the filtered 2D+t volume) of every sample.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
        /// Protocol config JSON applied on top of the preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the filtered difference volumes.
        #[arg(long)]
        volumes: bool,
    },
    /// Estimate the shear wave velocity of every sample.
    Velocity {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Fit one model on one fold of the leave-one-concentration-out plan.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// LR, SVR-lin, SVR-RBF, MLP50, MLP100, CNN-1Dt or CNN-2Dt.
        #[arg(long)]
        model: String,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full protocol and write a metrics report.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated model names or `all`.
        #[arg(long, default_value = "all")]
        models: String,
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report JSON path; sidecar files are written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a report as a table, CSV or JSON.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
        /// Also write the per-concentration velocity CSV here.
        #[arg(long)]
        plot: Option<PathBuf>,
        /// Write the rendering to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::from(1)
        }
    }
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var("OCE_THREADS") {
        Ok(s) => {
            let n: usize = s.trim().parse().with_context(|| format!("OCE_THREADS='{s}' is not a thread count"))?;
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = thread_count(cli.threads)? {
        if n == 0 {
            bail!("thread count must be >= 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    TIMING.store(cli.timing, std::sync::atomic::Ordering::Relaxed);
    match cli.command {
        Command::Simulate { config, out, seed } => simulate(config.as_deref(), &out, seed),
        Command::Preprocess {
            manifest,
            out,
            preset,
            config,
            volumes,
        } => preprocess(&manifest, &out, &protocol_config(preset, config.as_deref())?, volumes),
        Command::Velocity {
            manifest,
            out,
            preset,
            config,
        } => velocity(&manifest, &out, &protocol_config(preset, config.as_deref())?),
        Command::Train {
            manifest,
            model,
            fold,
            preset,
            config,
            seed,
            out,
        } => train(&manifest, &model, fold, &protocol_config(preset, config.as_deref())?, seed, &out),
        Command::Evaluate {
            manifest,
            models,
            preset,
            config,
            seed,
            out,
        } => evaluate(&manifest, &models, &protocol_config(preset, config.as_deref())?, seed, &out),
        Command::Report {
            input,
            format,
            plot,
            out,
        } => report(&input, format, plot.as_deref(), out.as_deref()),
    }
}

/// Recursively overlays `patch` onto `base`; non-object values replace.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).with_context(|| format!("{}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{}", path.display()))
}

fn protocol_config(preset: Preset, path: Option<&Path>) -> Result<ProtocolConfig> {
    let base = ProtocolConfig::preset(preset.name())?;
    let Some(path) = path else { return Ok(base) };
    let mut v = serde_json::to_value(&base)?;
    merge(&mut v, read_json(path)?);
    let mut cfg: ProtocolConfig = serde_json::from_value(v).with_context(|| format!("{}", path.display()))?;
    cfg.preset = preset.name().to_string();
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).with_context(|| format!("{}", dir.display()))?;
        }
    }
    fs::write(path, text).with_context(|| format!("{}", path.display()))
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    write_text(path, &s)
}

static TIMING: std::sync::atomic::AtomicBool = std::sync::atomic::AtomicBool::new(false);

/// Run metadata: `run.json` is deterministic; wall-clock timings go to stderr
/// and, with `--timing`, to `timing.json`.
struct RunLog {
    command: &'static str,
    start: Instant,
    last: Instant,
    stages: Vec<(String, f64)>,
}

impl RunLog {
    fn new(command: &'static str) -> Self {
        let now = Instant::now();
        Self {
            command,
            start: now,
            last: now,
            stages: Vec::new(),
        }
    }

    fn stage(&mut self, name: &str) {
        let now = Instant::now();
        self.stages.push((name.to_string(), (now - self.last).as_secs_f64()));
        self.last = now;
    }

    fn finish(self, run_path: &Path, timing_path: &Path, args: Value, config: Value) -> Result<()> {
        write_json(
            run_path,
            &json!({
                "command": self.command,
                "version": env!("CARGO_PKG_VERSION"),
                "args": args,
                "config": config,
            }),
        )?;
        let total = self.start.elapsed().as_secs_f64();
        let summary: Vec<String> = self.stages.iter().map(|(n, s)| format!("{n} {s:.1} s")).collect();
        eprintln!("{}: {} (total {total:.1} s)", self.command, summary.join(", "));
        if !TIMING.load(std::sync::atomic::Ordering::Relaxed) {
            return Ok(());
        }
        let stages: Vec<Value> = self
            .stages
            .iter()
            .map(|(n, s)| json!({ "stage": n, "seconds": s }))
            .collect();
        write_json(
            timing_path,
            &json!({
                "command": self.command,
                "threads": rayon::current_num_threads(),
                "stages": stages,
                "total_seconds": total,
            }),
        )
    }
}

fn manifest_root(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_manifest(manifest: &Path) -> Result<Vec<Sample>> {
    let samples = read_manifest(manifest)?;
    if samples.is_empty() {
        bail!("{}: manifest lists no samples", manifest.display());
    }
    Ok(samples)
}

fn simulate(config: Option<&Path>, out: &Path, seed: u64) -> Result<()> {
    let mut log = RunLog::new("simulate");
    let cfg: DatasetConfig = match config {
        Some(p) => oce_core::config::read_json_config(p)?,
        None => DatasetConfig::default(),
    };
    let samples = generate_dataset(&cfg, seed, out)?;
    log.stage("simulate");
    eprintln!("simulated {} samples into {}", samples.len(), out.display());
    log.finish(
        &out.join("run.json"),
        &out.join("timing.json"),
        json!({ "seed": seed, "samples": samples.len() }),
        serde_json::to_value(&cfg)?,
    )
}

fn preprocess(manifest: &Path, out: &Path, cfg: &ProtocolConfig, volumes: bool) -> Result<()> {
    let mut log = RunLog::new("preprocess");
    let samples = load_manifest(manifest)?;
    let root = manifest_root(manifest);
    let rows = samples
        .par_iter()
        .map(|s| -> Result<String> {
            let phase = read_tensor(&root.join(&s.tensor_path))?;
            let intensity = read_tensor(&root.join(&s.intensity_path))?;
            let surface = phase
                .meta_f64("surface_index")
                .with_context(|| format!("{}: phase tensor lacks surface_index", s.tensor_path))?
                as usize;
            let pre = preprocess_tensors(&phase, &intensity, surface, &cfg.preprocess)
                .with_context(|| format!("sample {}", s.id))?;
            let map_path = format!("maps/{}.oct", s.id);
            write_tensor(&pre.map.to_tensor(), &out.join(&map_path))?;
            if volumes {
                write_tensor(&pre.volume.values, &out.join(format!("volumes/{}.oct", s.id)))?;
            }
            let kept = pre.volume.row_mask.iter().filter(|&&k| k).count();
            Ok(format!("{},{},{},{}\n", s.id, s.concentration_pct, kept, map_path))
        })
        .collect::<Result<Vec<_>>>()?;
    log.stage("preprocess");
    let mut csv = String::from("sample_id,concentration_pct,kept_rows,map_path\n");
    csv.extend(rows);
    write_text(&out.join("preprocess.csv"), &csv)?;
    log.finish(
        &out.join("run.json"),
        &out.join("timing.json"),
        json!({ "manifest": manifest, "volumes": volumes }),
        serde_json::to_value(cfg)?,
    )
}

fn velocity(manifest: &Path, out: &Path, cfg: &ProtocolConfig) -> Result<()> {
    let mut log = RunLog::new("velocity");
    let samples = load_manifest(manifest)?;
    let root = manifest_root(manifest);
    let rows = samples
        .par_iter()
        .map(|s| -> Result<(String, bool)> {
            let phase = read_tensor(&root.join(&s.tensor_path))?;
            let intensity = read_tensor(&root.join(&s.intensity_path))?;
            let surface = phase
                .meta_f64("surface_index")
                .with_context(|| format!("{}: phase tensor lacks surface_index", s.tensor_path))?
                as usize;
            let pre = preprocess_tensors(&phase, &intensity, surface, &cfg.preprocess)
                .with_context(|| format!("sample {}", s.id))?;
            Ok(match estimate_velocity(&pre.map, &cfg.velocity) {
                Ok(v) => (
                    format!(
                        "{},{},{},{},{}\n",
                        s.id, s.concentration_pct, v.v_px_per_frame, v.v_mps, v.r_squared
                    ),
                    true,
                ),
                Err(_) => (format!("{},{},,,\n", s.id, s.concentration_pct), false),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    log.stage("velocity");
    let failures = rows.iter().filter(|(_, ok)| !ok).count();
    let mut csv = String::from("sample_id,concentration_pct,v_px_per_frame,v_mps,r_squared\n");
    csv.extend(rows.into_iter().map(|(r, _)| r));
    write_text(&out.join("velocity.csv"), &csv)?;
    eprintln!("{} samples, {failures} without a velocity estimate", samples.len());
    log.finish(
        &out.join("run.json"),
        &out.join("timing.json"),
        json!({ "manifest": manifest, "failures": failures }),
        serde_json::to_value(cfg)?,
    )
}

fn train(manifest: &Path, model: &str, fold: usize, cfg: &ProtocolConfig, seed: u64, out: &Path) -> Result<()> {
    let mut log = RunLog::new("train");
    let kind = ModelKind::parse(model)?;
    let samples = load_manifest(manifest)?;
    let features = extract_features(&samples, &manifest_root(manifest), cfg, &[kind])?;
    log.stage("features");
    let folds = make_fold_plan(&samples, seed)?;
    let run = train_fold(&features, &folds, fold, kind, cfg, seed)?;
    log.stage("train");
    let mut desc = run.artifact.description.clone();
    desc["model"] = json!(kind);
    desc["fold"] = json!(fold);
    desc["held_out_pct"] = json!(run.summary.held_out_pct);
    if let Some(net) = &run.artifact.network {
        save_checkpoint(net, &out.join("model.oct"))?;
        desc["checkpoint"] = json!("model.oct");
        write_text(&out.join("history.csv"), &history_csv(&run.artifact.history))?;
    }
    write_json(&out.join("model.json"), &desc)?;
    let mut csv = String::from("sample_id,true_pct,predicted_pct\n");
    for p in &run.predictions {
        csv.push_str(&format!("{},{},{}\n", p.sample_id, p.true_pct, p.predicted_pct));
    }
    write_text(&out.join("predictions.csv"), &csv)?;
    eprintln!(
        "{} fold {fold} (held out {} %): test MAE {:.3} p.p.",
        kind.name(),
        run.summary.held_out_pct,
        run.summary.test_mae
    );
    log.finish(
        &out.join("run.json"),
        &out.join("timing.json"),
        json!({ "manifest": manifest, "model": kind, "fold": fold, "seed": seed }),
        serde_json::to_value(cfg)?,
    )
}

/// `dir/stem.<suffix>` next to the report file.
fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "report".into());
    out.with_file_name(format!("{stem}.{suffix}"))
}

fn evaluate(manifest: &Path, models: &str, cfg: &ProtocolConfig, seed: u64, out: &Path) -> Result<()> {
    let mut log = RunLog::new("evaluate");
    let models = ModelKind::parse_list(models)?;
    let samples = load_manifest(manifest)?;
    let folds = make_fold_plan(&samples, seed)?;
    let features = extract_features(&samples, &manifest_root(manifest), cfg, &models)?;
    log.stage("features");
    let report = run_protocol(&features, &folds, &models, cfg, seed)?;
    log.stage("protocol");
    write_text(out, &report.to_json())?;
    write_text(&sidecar(out, "predictions.csv"), &render_predictions_csv(&report))?;
    eprint!("{}", render_table(&report));
    let names: Vec<&str> = models.iter().map(|m| m.name()).collect();
    log.finish(
        &sidecar(out, "run.json"),
        &sidecar(out, "timing.json"),
        json!({ "manifest": manifest, "models": names, "seed": seed }),
        serde_json::to_value(cfg)?,
    )
}

fn report(input: &Path, format: Format, plot: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let text = fs::read_to_string(input).with_context(|| format!("{}", input.display()))?;
    let r = MetricsReport::from_json(&text).with_context(|| format!("{}", input.display()))?;
    let rendered = match format {
        Format::Table => render_table(&r),
        Format::Csv => render_csv(&r),
        Format::Json => r.to_json(),
    };
    match out {
        Some(p) => write_text(p, &rendered)?,
        None => print!("{rendered}"),
    }
    if let Some(p) = plot {
        write_text(p, &render_velocity_csv(&r))?;
    }
    Ok(())
}
