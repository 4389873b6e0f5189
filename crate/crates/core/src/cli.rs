//! Command-line experiment runner.
//!
//! Each subcommand reads one JSON config document and writes CSV plus a JSON
//! metadata sidecar (`<out>.meta.json`, and `<out>.fits.json` for `rate`).
//! Output is a pure function of the config: cells run in parallel but are
//! written in config order, and every random stream is derived from `seed`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::analysis::{
    exact_error, fit_rate_filtered, propagate_affine, reference_law, sliced_w1_with_se,
    stability_sweep, RateFit,
};
use crate::oracle::exact_oracle;
use crate::rng::derive_seed;
use crate::samplers::{run_sampler, SamplerSpec};
use crate::schedule::{
    build_schedule, validate_schedule, NoiseSchedule, ScheduleParams, ScheduleSnapshot,
};
use crate::target::{sample_forward, GaussianMixture, MixtureJson};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const DEFAULT_T_GRID: [usize; 6] = [16, 32, 64, 128, 256, 512];

#[derive(Debug, Parser)]
#[command(name = "difflab", version, about = "Diffusion sampler convergence lab")]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print or write a noise schedule and its property checks.
    Schedule(ScheduleArgs),
    /// Draw final iterates from each configured sampler.
    Sample(RunArgs),
    /// Measure errors over a grid of step counts and fit log-log rates.
    Rate(RunArgs),
    /// Measure error growth under constant score perturbations.
    Stability(RunArgs),
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(short = 'T', long = "steps")]
    pub steps: Option<usize>,
    #[arg(long)]
    pub c0: Option<f64>,
    #[arg(long)]
    pub c1: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `json` (default) or `csv`.
    #[arg(long, default_value = "json")]
    pub format: String,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `out` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Preset name or inline mixture.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetConfig {
    Preset(String),
    Inline(MixtureJson),
}

impl TargetConfig {
    pub fn build(&self) -> Result<GaussianMixture> {
        match self {
            TargetConfig::Preset(name) => GaussianMixture::preset(name)
                .map_err(|_| Error::Config(format!("unknown target preset '{name}'"))),
            TargetConfig::Inline(m) => m.clone().try_into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(rename = "T", default)]
    pub steps: Option<usize>,
    #[serde(default = "default_c0")]
    pub c0: f64,
    #[serde(default = "default_c1")]
    pub c1: f64,
}

fn default_c0() -> f64 {
    2.0
}

fn default_c1() -> f64 {
    4.0
}

fn default_n_directions() -> usize {
    64
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: None,
            c0: default_c0(),
            c1: default_c1(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Tv,
    Kl,
    SlicedW1,
}

impl Metric {
    fn label(self) -> &'static str {
        match self {
            Metric::Tv => "tv",
            Metric::Kl => "kl",
            Metric::SlicedW1 => "sliced_w1",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub target: TargetConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    pub samplers: Vec<SamplerSpec>,
    #[serde(default)]
    pub t_grid: Option<Vec<usize>>,
    #[serde(default)]
    pub n_traj: Option<usize>,
    pub seed: u64,
    #[serde(default)]
    pub metrics: Option<Vec<Metric>>,
    #[serde(default)]
    pub magnitudes: Option<Vec<f64>>,
    #[serde(default = "default_n_directions")]
    pub n_directions: usize,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

/// A parsed config and the SHA-256 of its bytes.
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub hash: String,
}

pub fn load_config(path: &Path) -> Result<LoadedConfig> {
    let raw = fs::read(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let config: ExperimentConfig = serde_json::from_slice(&raw)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if config.schema_version != SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "unsupported schema_version {} (expected {SCHEMA_VERSION})",
            config.schema_version
        )));
    }
    if config.samplers.is_empty() {
        return Err(Error::Config("no samplers configured".into()));
    }
    let hash = Sha256::digest(&raw)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    Ok(LoadedConfig { config, hash })
}

impl ExperimentConfig {
    fn steps(&self) -> Result<usize> {
        self.schedule
            .steps
            .ok_or_else(|| Error::Config("schedule.T is required".into()))
    }

    fn schedule_for(&self, steps: usize) -> Result<Arc<NoiseSchedule>> {
        Ok(Arc::new(build_schedule(&ScheduleParams::new(
            steps,
            self.schedule.c0,
            self.schedule.c1,
        )?)?))
    }

    fn n_traj(&self) -> Result<usize> {
        match self.n_traj {
            Some(0) => Err(Error::Config("n_traj must be at least 1".into())),
            Some(n) => Ok(n),
            None => Err(Error::Config("n_traj is required".into())),
        }
    }

    fn t_grid(&self) -> Result<Vec<usize>> {
        let grid = self
            .t_grid
            .clone()
            .unwrap_or_else(|| DEFAULT_T_GRID.to_vec());
        if grid.is_empty() || grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(
                "t_grid must be non-empty and strictly increasing".into(),
            ));
        }
        Ok(grid)
    }

    fn out_path(&self, flag: Option<&PathBuf>) -> Result<PathBuf> {
        flag.or(self.out.as_ref())
            .cloned()
            .ok_or_else(|| Error::Config("an output path is required (--out or \"out\")".into()))
    }
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn metadata(command: &str, loaded: &LoadedConfig, extra: serde_json::Value) -> serde_json::Value {
    let mut m = json!({
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "version": VERSION,
        "config_sha256": loaded.hash,
        "seed": loaded.config.seed,
        "samplers": loaded.config.samplers,
    });
    if let (Some(obj), serde_json::Value::Object(more)) = (m.as_object_mut(), extra) {
        obj.extend(more);
    }
    m
}

/// Schedule table plus the property report, as JSON.
pub fn cmd_schedule(args: &ScheduleArgs) -> Result<()> {
    let base = match &args.config {
        Some(p) => load_config(p)?.config.schedule,
        None => ScheduleConfig::default(),
    };
    let steps = args
        .steps
        .or(base.steps)
        .ok_or_else(|| Error::Config("schedule needs T (-T or schedule.T in the config)".into()))?;
    let params = ScheduleParams::new(
        steps,
        args.c0.unwrap_or(base.c0),
        args.c1.unwrap_or(base.c1),
    )?;
    let sched = build_schedule(&params)?;
    let report = validate_schedule(&sched, &params);
    let text = match args.format.as_str() {
        "json" => {
            let doc = ScheduleDocument {
                schema_version: SCHEMA_VERSION,
                schedule: sched.snapshot(),
                alpha: sched.alphas().to_vec(),
                alpha_bar: sched.alpha_bars()[1..=steps].to_vec(),
                alpha_ext: sched.alpha_ext(),
                report: serde_json::to_value(&report)?,
            };
            serde_json::to_string_pretty(&doc)? + "\n"
        }
        "csv" => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["t", "beta", "alpha", "alpha_bar"])?;
            for t in 1..=steps {
                w.write_record([
                    t.to_string(),
                    fmt(sched.beta(t)),
                    fmt(sched.alpha(t)),
                    fmt(sched.alpha_bar(t)),
                ])?;
            }
            String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
                .expect("csv output is utf-8")
        }
        other => {
            return Err(Error::Config(format!(
                "unknown format '{other}' (json or csv)"
            )))
        }
    };
    match &args.out {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

/// JSON layout written by `difflab schedule`.
#[derive(Debug, Serialize, Deserialize)]
pub struct ScheduleDocument {
    pub schema_version: u32,
    pub schedule: ScheduleSnapshot,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub alpha_ext: f64,
    pub report: serde_json::Value,
}

/// CSV `sampler, mode, traj_id, y_0.., nfe` for every configured sampler.
pub fn cmd_sample(args: &RunArgs) -> Result<()> {
    let loaded = load_config(&args.config)?;
    let cfg = &loaded.config;
    let out = cfg.out_path(args.out.as_ref())?;
    let target = cfg.target.build()?;
    let steps = cfg.steps()?;
    let n = cfg.n_traj()?;
    let sched = cfg.schedule_for(steps)?;
    let oracle = exact_oracle(&target, sched)?;

    let mut w = csv::Writer::from_path(&out)?;
    let mut header = vec!["sampler".to_string(), "mode".into(), "traj_id".into()];
    header.extend((0..target.dim()).map(|i| format!("y_{i}")));
    header.push("nfe".into());
    w.write_record(&header)?;
    let mut runs = Vec::new();
    for spec in &cfg.samplers {
        let seed = derive_seed(cfg.seed, &["sample", spec.label(), spec.mode_label()]);
        let batch = run_sampler(spec, &oracle, n, seed)?;
        let meta = batch.metadata();
        for (i, p) in batch.points.iter().enumerate() {
            let mut row = vec![
                spec.label().to_string(),
                spec.mode_label().into(),
                i.to_string(),
            ];
            row.extend(p.iter().map(|v| fmt(*v)));
            row.push(meta.nfe_per_trajectory.to_string());
            w.write_record(&row)?;
        }
        runs.push(meta);
    }
    w.flush()?;
    let meta = metadata(
        "sample",
        &loaded,
        json!({ "T": steps, "n_traj": n, "runs": runs }),
    );
    write_json(&sidecar(&out, ".meta.json"), &meta)
}

#[derive(Debug, Clone, Serialize)]
pub struct RateRow {
    #[serde(rename = "T")]
    pub steps: usize,
    pub sampler: &'static str,
    pub mode: &'static str,
    pub metric: &'static str,
    pub value: f64,
    pub nfe: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitEntry {
    pub sampler: &'static str,
    pub mode: &'static str,
    pub metric: &'static str,
    pub fit: Option<RateFit>,
    pub fit_error: Option<String>,
}

/// Whether a rate run uses exact propagation or sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RatePath {
    Exact,
    MonteCarlo,
}

pub struct RateOutput {
    pub path: RatePath,
    pub rows: Vec<RateRow>,
    pub fits: Vec<FitEntry>,
}

/// Compute every (sampler, T, metric) cell of a rate experiment.
pub fn rate_experiment(cfg: &ExperimentConfig) -> Result<RateOutput> {
    let target = cfg.target.build()?;
    let grid = cfg.t_grid()?;
    let path = if target.is_single_gaussian() {
        RatePath::Exact
    } else {
        RatePath::MonteCarlo
    };
    let metrics = match (&cfg.metrics, path) {
        (Some(m), _) => m.clone(),
        (None, RatePath::Exact) if target.dim() == 1 => vec![Metric::Tv, Metric::Kl],
        (None, RatePath::Exact) => vec![Metric::Kl],
        (None, RatePath::MonteCarlo) => vec![Metric::SlicedW1],
    };
    for m in &metrics {
        let ok = match (m, path) {
            (Metric::Tv, RatePath::Exact) => target.dim() == 1,
            (Metric::Kl, RatePath::Exact) | (Metric::SlicedW1, RatePath::MonteCarlo) => true,
            _ => false,
        };
        if !ok {
            return Err(Error::Config(format!(
                "metric '{}' is not available for this target",
                m.label()
            )));
        }
    }
    if path == RatePath::MonteCarlo {
        cfg.n_traj()?;
    }
    let cells: Vec<(SamplerSpec, usize)> = cfg
        .samplers
        .iter()
        .flat_map(|s| grid.iter().map(move |&t| (*s, t)))
        .collect();
    let results = cells
        .par_iter()
        .map(|&(spec, steps)| -> Result<Vec<RateRow>> {
            let sched = cfg.schedule_for(steps)?;
            let seed = derive_seed(
                cfg.seed,
                &[spec.label(), spec.mode_label(), &steps.to_string()],
            );
            let nfe = spec.nfe_per_trajectory(steps);
            let row = |metric: Metric, value: f64| RateRow {
                steps,
                sampler: spec.label(),
                mode: spec.mode_label(),
                metric: metric.label(),
                value,
                nfe,
                seed,
            };
            match path {
                RatePath::Exact => {
                    let law = propagate_affine(&spec, &target, sched.clone())?;
                    let err = exact_error(&law, &reference_law(&target, &sched)?)?;
                    Ok(metrics
                        .iter()
                        .map(|&m| match m {
                            Metric::Tv => row(m, err.tv.expect("checked d = 1")),
                            _ => row(m, err.kl),
                        })
                        .collect())
                }
                RatePath::MonteCarlo => {
                    let n = cfg.n_traj()?;
                    let oracle = exact_oracle(&target, sched.clone())?;
                    let batch = run_sampler(&spec, &oracle, n, seed)?;
                    // the reference draw depends on T only, so samplers share it
                    let ref_seed = derive_seed(cfg.seed, &["reference", &steps.to_string()]);
                    let reference = sample_forward(&target, sched.alpha_bar(1), n, ref_seed)?;
                    let w =
                        sliced_w1_with_se(&batch.points, &reference, cfg.n_directions, ref_seed)?;
                    Ok(vec![row(Metric::SlicedW1, w.value)])
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<RateRow> = results.into_iter().flatten().collect();
    let mut fits = Vec::new();
    for spec in &cfg.samplers {
        for m in &metrics {
            let pts: Vec<(usize, f64)> = rows
                .iter()
                .filter(|r| {
                    r.sampler == spec.label()
                        && r.mode == spec.mode_label()
                        && r.metric == m.label()
                })
                .map(|r| (r.steps, r.value))
                .collect();
            let (fit, fit_error) = match fit_rate_filtered(&pts) {
                Ok(f) => (Some(f), None),
                Err(e) => (None, Some(e.to_string())),
            };
            fits.push(FitEntry {
                sampler: spec.label(),
                mode: spec.mode_label(),
                metric: m.label(),
                fit,
                fit_error,
            });
        }
    }
    Ok(RateOutput { path, rows, fits })
}

pub fn write_rate_csv<W: Write>(rows: &[RateRow], w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["T", "sampler", "mode", "metric", "value", "nfe", "seed"])?;
    for r in rows {
        w.write_record([
            r.steps.to_string(),
            r.sampler.into(),
            r.mode.into(),
            r.metric.into(),
            fmt(r.value),
            r.nfe.to_string(),
            r.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_rate(args: &RunArgs) -> Result<()> {
    let loaded = load_config(&args.config)?;
    let out = loaded.config.out_path(args.out.as_ref())?;
    let result = rate_experiment(&loaded.config)?;
    write_rate_csv(&result.rows, fs::File::create(&out)?)?;
    let extra = json!({
        "path": result.path,
        "t_grid": loaded.config.t_grid()?,
        "schedule": { "c0": loaded.config.schedule.c0, "c1": loaded.config.schedule.c1 },
        "n_traj": loaded.config.n_traj,
    });
    write_json(
        &sidecar(&out, ".meta.json"),
        &metadata("rate", &loaded, extra),
    )?;
    write_json(
        &sidecar(&out, ".fits.json"),
        &json!({ "schema_version": SCHEMA_VERSION, "path": result.path, "fits": result.fits }),
    )
}

/// CSV `T, sampler, mode, magnitude, tv, kl, nfe, seed`: one row per sampler and magnitude.
pub fn cmd_stability(args: &RunArgs) -> Result<()> {
    let loaded = load_config(&args.config)?;
    let cfg = &loaded.config;
    let out = cfg.out_path(args.out.as_ref())?;
    let target = cfg.target.build()?;
    if !target.is_single_gaussian() {
        return Err(Error::Config(
            "stability sweeps need a single-Gaussian target".into(),
        ));
    }
    let steps = cfg.steps()?;
    let mags = cfg
        .magnitudes
        .clone()
        .ok_or_else(|| Error::Config("magnitudes are required".into()))?;
    if mags.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Config("magnitudes must be sorted ascending".into()));
    }
    let sched = cfg.schedule_for(steps)?;
    let sweeps = cfg
        .samplers
        .par_iter()
        .map(|spec| {
            let seed = derive_seed(cfg.seed, &["stability", spec.label(), spec.mode_label()]);
            stability_sweep(spec, &target, sched.clone(), &mags, seed).map(|s| (*spec, seed, s))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut w = csv::Writer::from_path(&out)?;
    w.write_record([
        "T",
        "sampler",
        "mode",
        "magnitude",
        "tv",
        "kl",
        "nfe",
        "seed",
    ])?;
    for (spec, seed, sweep) in &sweeps {
        for p in sweep {
            w.write_record([
                steps.to_string(),
                spec.label().into(),
                spec.mode_label().into(),
                fmt(p.magnitude),
                p.error.tv.map(fmt).unwrap_or_default(),
                fmt(p.error.kl),
                spec.nfe_per_trajectory(steps).to_string(),
                seed.to_string(),
            ])?;
        }
    }
    w.flush()?;
    let extra = json!({ "T": steps, "magnitudes": mags, "perturbation": "constant_shift" });
    write_json(
        &sidecar(&out, ".meta.json"),
        &metadata("stability", &loaded, extra),
    )
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    match &cli.command {
        Command::Schedule(a) => cmd_schedule(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Rate(a) => cmd_rate(a),
        Command::Stability(a) => cmd_stability(a),
    }
}

/// Parse arguments, run, and map failures to exit codes
/// (0 ok, 2 configuration, 3 numerical).
pub fn main_exit_code() -> i32 {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("difflab: {e}");
            e.exit_code()
        }
    }
}
