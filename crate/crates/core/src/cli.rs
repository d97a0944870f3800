//! Batch command-line front end.
//!
//! Every subcommand writes into `--out-dir` and finishes with a
//! `<command>.manifest.json` describing the run. A `--config FILE` of
//! `key = value` lines is expanded into flags placed before the explicit
//! ones, so explicit flags win.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::analysis::{
    aggregate_by_interval, aggregate_ppca_by_interval, emit_plots, estimate_snr, join_scatter, trend_check,
    CatalogEntry, Grouping, IntervalTable, PlotInputs, DEFAULT_BORDER_WIDTH,
};
use crate::classical::{lpca_batch, mle_aggregate_outcomes, mle_batch, ppca_id_global, LpcaParams, MleParams};
use crate::diffusion_id::{batch_estimate, batch_estimate_precomputed, DiffusionIdParams};
use crate::domain::{
    images_to_points, normalize_pixels, IdEstimate, ImageGrid, Method, Normalization, Outcome, PointSet,
};
use crate::energy::{bin_energies, posteriors_from_tensor};
use crate::error::{Error, Result};
use crate::io::{
    read_catalog_csv, read_energy_csv, read_estimates_csv, read_fixture_tables, read_ids, read_manifest,
    read_spectra_csv, read_tensor, write_energy_csv, write_estimates_csv, write_ids, write_interval_tables_csv,
    write_manifest, write_spectra_csv, write_tensor, RunManifest,
};
use crate::scoremodel::{load_score_matrix, train_dsm_score_net, AnalyticGaussianScore, DsmConfig, VeSchedule};
use crate::synth::{analytic_covariance, sample_manifold, ManifoldKind, ManifoldSpec, DEFAULT_SCALE_DECAY};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_USAGE: i32 = 64;

#[derive(Parser, Debug)]
#[command(name = "dimscope", version, about = "Intrinsic dimension estimation and energy-interval reporting")]
struct Cli {
    /// Print failures as a single JSON object on stderr.
    #[arg(long, global = true)]
    json_errors: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a synthetic manifold with known intrinsic dimension.
    Synth(SynthArgs),
    /// Per-sample intrinsic dimension estimates.
    Estimate(EstimateArgs),
    /// Energy statistics and interval labels from posterior logits.
    EnergyBin(EnergyArgs),
    /// Interval tables, trend checks and plots.
    Report(ReportArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

const SUBCOMMANDS: [&str; 5] = ["synth", "estimate", "energy-bin", "report", "replay"];

#[derive(Args, Debug, Clone, Serialize)]
struct Common {
    /// `key = value` file; explicit flags take precedence.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Created if missing; removed again if the run fails and created it.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
#[command(args_override_self = true)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// subspace_gaussian, k_sphere, k_cube or swiss_roll.
    #[arg(long)]
    kind: ManifoldKind,
    #[arg(short = 'd', long = "ambient-d")]
    ambient_d: usize,
    /// Ignored for swiss_roll (always 2).
    #[arg(short = 'k', long = "intrinsic-k", default_value_t = 2)]
    intrinsic_k: usize,
    #[arg(short = 'n', long)]
    n: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_SCALE_DECAY)]
    scale_decay: f64,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
enum OracleKind {
    /// Closed-form Gaussian score from a `synth` truth sidecar.
    Analytic,
    /// Precomputed `(n, K, d)` score tensor.
    File,
    /// Score network trained here with denoising score matching.
    Dsm,
}

#[derive(Args, Debug, Clone, Serialize)]
#[command(args_override_self = true)]
struct EstimateArgs {
    #[command(flatten)]
    common: Common,
    /// diffusion, mle, lpca or ppca.
    #[arg(long)]
    method: Method,
    /// `(n, d)` points or `(n, h, w)` images.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    ids: Option<PathBuf>,
    /// none or per_sample_minmax.
    #[arg(long, default_value_t = Normalization::None)]
    normalize: Normalization,
    /// Keep only the first N samples.
    #[arg(long)]
    max_samples: Option<usize>,
    #[arg(long, value_enum, default_value_t = OracleKind::Analytic)]
    oracle: OracleKind,
    /// `truth.json` written by `synth`.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// `(n, K, d)` score tensor.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// DSM training set; defaults to `--data`.
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long, default_value_t = 0.01)]
    sigma_t0: f64,
    /// Defaults to 4d.
    #[arg(long)]
    k_scores: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// MLE neighbour count.
    #[arg(long, default_value_t = 20)]
    m: usize,
    #[arg(long, default_value_t = 100)]
    lpca_m: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long)]
    dsm_steps: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    dsm_hidden: Option<Vec<usize>>,
    #[arg(long)]
    dsm_batch: Option<usize>,
    #[arg(long)]
    dsm_lr: Option<f64>,
    #[arg(long)]
    dsm_seed: Option<u64>,
    #[arg(long)]
    sigma_min: Option<f64>,
    #[arg(long)]
    sigma_max: Option<f64>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Debug, Clone, Serialize)]
#[command(args_override_self = true)]
struct EnergyArgs {
    #[command(flatten)]
    common: Common,
    /// `(n, N, C)` tensor: N posterior draws of C class logits per sample.
    #[arg(long)]
    logits: PathBuf,
    #[arg(long)]
    ids: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Debug, Clone, Serialize)]
#[command(args_override_self = true)]
struct ReportArgs {
    #[command(flatten)]
    common: Common,
    /// `[LABEL=]PATH` of an estimates CSV; repeatable.
    #[arg(long)]
    estimates: Vec<String>,
    /// `energy.csv` from `energy-bin`.
    #[arg(long)]
    energy: Option<PathBuf>,
    /// CSV with id, fr_class and optional consensus, angular_size, snr.
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Published-style tables to run trend checks on.
    #[arg(long)]
    fixtures: Option<PathBuf>,
    /// Points for per-interval PPCA.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    data_ids: Option<PathBuf>,
    #[arg(long, default_value_t = Normalization::None)]
    normalize: Normalization,
    /// `(n, h, w)` cutouts for SNR.
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    image_ids: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BORDER_WIDTH)]
    snr_border: usize,
    #[arg(long)]
    spectra: Option<PathBuf>,
    /// Number of spectra copied into the plot data.
    #[arg(long, default_value_t = 5)]
    spectra_samples: usize,
}

#[derive(Args, Debug, Clone, Serialize)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
}

/// Files registered before they are written; removed again if the run fails.
struct Outputs {
    dir: PathBuf,
    created_dir: bool,
    written: Vec<PathBuf>,
}

impl Outputs {
    fn open(dir: &Path) -> Result<Self> {
        let created_dir = !dir.exists();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            created_dir,
            written: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.written.push(p.clone());
        p
    }

    fn record(&mut self, paths: Vec<PathBuf>) {
        self.written.extend(paths);
    }

    fn discard(&self) {
        for p in &self.written {
            let _ = fs::remove_file(p);
        }
        if self.created_dir {
            let _ = fs::remove_dir(&self.dir);
        }
    }
}

struct RunInfo {
    command_line: Vec<String>,
    started: f64,
    seeds: BTreeMap<String, u64>,
    decisions: BTreeMap<String, String>,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

fn finish(info: RunInfo, command: &str, config: &impl Serialize, out: &mut Outputs) -> Result<()> {
    let path = out.path(&format!("{command}.manifest.json"));
    let manifest = RunManifest {
        tool: "dimscope".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command_line: info.command_line,
        command: command.into(),
        config: serde_json::to_value(config)?,
        seeds: info.seeds,
        decisions: info.decisions,
        outputs: out.written.clone(),
        started_unix: info.started,
        finished_unix: now(),
    };
    write_manifest(path, &manifest)
}

/// Expand `--config FILE` into flags inserted right after the subcommand.
fn expand_config(args: Vec<String>) -> Result<Vec<String>> {
    let mut cfg_path = None;
    for (i, a) in args.iter().enumerate() {
        if a == "--config" {
            cfg_path = args.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            cfg_path = Some(p.to_string());
        }
    }
    let Some(cfg_path) = cfg_path else {
        return Ok(args);
    };
    let Some(sub) = args.iter().position(|a| SUBCOMMANDS.contains(&a.as_str())) else {
        return Ok(args);
    };
    let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let mut extra = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::invalid(format!("{cfg_path}: line {}: expected key = value", lineno + 1))
        })?;
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        if key == "config" {
            return Err(Error::invalid(format!("{cfg_path}: nested config is not supported")));
        }
        match value {
            "true" => extra.push(format!("--{key}")),
            "false" => {}
            v => {
                extra.push(format!("--{key}"));
                extra.push(v.to_string());
            }
        }
    }
    let mut out = args[..=sub].to_vec();
    out.extend(extra);
    out.extend_from_slice(&args[sub + 1..]);
    Ok(out)
}

fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_VALIDATION
    }
}

/// Status line on stdout; a closed pipe is not an error.
macro_rules! note {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

fn report_error(json_errors: bool, kind: &str, message: &str, code: i32) {
    if json_errors {
        eprintln!("{}", json!({ "error": kind, "message": message, "exit_code": code }));
    } else {
        eprintln!("dimscope: {message}");
    }
}

/// Parse and execute; returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let raw: Vec<String> = args.into_iter().map(Into::into).collect();
    let json_errors = raw.iter().any(|a| a == "--json-errors");
    let expanded = match expand_config(raw.clone()) {
        Ok(a) => a,
        Err(e) => {
            let code = exit_code(&e);
            report_error(json_errors, "validation", &e.to_string(), code);
            return code;
        }
    };
    let cli = match Cli::try_parse_from(&expanded) {
        Ok(c) => c,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    EXIT_OK
                }
                _ => {
                    if json_errors {
                        report_error(true, "usage", &e.to_string(), EXIT_USAGE);
                    } else {
                        eprint!("{e}");
                    }
                    EXIT_USAGE
                }
            };
        }
    };
    let info = RunInfo {
        command_line: raw,
        started: now(),
        seeds: BTreeMap::new(),
        decisions: BTreeMap::new(),
    };
    let result = match cli.command {
        Command::Synth(a) => with_outputs(&a.common.out_dir, |out| cmd_synth(&a, info, out)),
        Command::Estimate(a) => with_outputs(&a.common.out_dir, |out| cmd_estimate(&a, info, out)),
        Command::EnergyBin(a) => with_outputs(&a.common.out_dir, |out| cmd_energy_bin(&a, info, out)),
        Command::Report(a) => with_outputs(&a.common.out_dir, |out| cmd_report(&a, info, out)),
        Command::Replay(a) => return cmd_replay(&a, json_errors),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = exit_code(&e);
            let kind = if code == EXIT_NUMERICAL { "numerical" } else { "validation" };
            report_error(json_errors, kind, &e.to_string(), code);
            code
        }
    }
}

fn with_outputs(dir: &Path, f: impl FnOnce(&mut Outputs) -> Result<()>) -> Result<()> {
    let mut out = Outputs::open(dir)?;
    let r = f(&mut out);
    if r.is_err() {
        out.discard();
    }
    r
}

fn cmd_replay(a: &ReplayArgs, json_errors: bool) -> i32 {
    match read_manifest(&a.manifest) {
        Ok(m) if m.command_line.iter().any(|s| s == "replay") => {
            report_error(json_errors, "validation", "manifest records a replay", EXIT_VALIDATION);
            EXIT_VALIDATION
        }
        Ok(m) => run(m.command_line),
        Err(e) => {
            report_error(json_errors, "validation", &e.to_string(), EXIT_VALIDATION);
            EXIT_VALIDATION
        }
    }
}

fn cmd_synth(a: &SynthArgs, mut info: RunInfo, out: &mut Outputs) -> Result<()> {
    let spec = match a.kind {
        ManifoldKind::SwissRoll => ManifoldSpec::swiss_roll(a.ambient_d, a.n),
        kind => ManifoldSpec::new(kind, a.ambient_d, a.intrinsic_k, a.n),
    }
    .with_noise(a.noise)
    .with_seed(a.seed)
    .with_scale_decay(a.scale_decay);
    let set = sample_manifold(&spec)?;
    write_tensor(out.path("points.tensor"), &[set.points.n(), set.points.dim()], set.points.values())?;
    write_ids(out.path("ids.csv"), set.points.ids())?;
    let truth = out.path("truth.json");
    fs::write(&truth, serde_json::to_string_pretty(&spec)? + "\n").map_err(|e| Error::io(&truth, e))?;
    info.seeds.insert("synth".into(), a.seed);
    note!("wrote {} points (d = {}, k = {})", set.points.n(), set.points.dim(), set.intrinsic_k);
    finish(info, "synth", a, out)
}

/// Points from a rank-2 tensor, or flattened images from a rank-3 one.
fn load_points(path: &Path, ids: Option<&Path>, normalize: Normalization) -> Result<PointSet> {
    let t = read_tensor(path)?;
    let ids = match ids {
        Some(p) => Some(read_ids(p)?),
        None => None,
    };
    let n = *t.dims.first().unwrap_or(&0);
    let ids = ids.unwrap_or_else(|| (0..n).map(|i| i.to_string()).collect());
    let pts = match t.dims[..] {
        [n, d] => PointSet::new(t.values, n, d, ids)?,
        [_, h, w] => images_to_points(&load_images(t.values, h, w, &ids)?)?,
        _ => {
            return Err(Error::invalid(format!(
                "{}: expected (n, d) points or (n, h, w) images, got rank {}",
                path.display(),
                t.dims.len()
            )))
        }
    };
    Ok(normalize_pixels(&pts, normalize))
}

fn load_images(values: Vec<f64>, h: usize, w: usize, ids: &[String]) -> Result<Vec<ImageGrid>> {
    if values.len() != ids.len() * h * w {
        return Err(Error::invalid(format!("{} ids for {} images", ids.len(), values.len() / (h * w).max(1))));
    }
    values
        .chunks_exact(h * w)
        .zip(ids)
        .map(|(px, id)| ImageGrid::new(id.clone(), h, w, px.to_vec()))
        .collect()
}

fn first_n(pts: PointSet, max: Option<usize>) -> Result<PointSet> {
    match max {
        Some(m) if m < pts.n() => pts.select(&(0..m).collect::<Vec<_>>()),
        _ => Ok(pts),
    }
}

fn require<'a>(v: &'a Option<PathBuf>, flag: &str, why: &str) -> Result<&'a Path> {
    v.as_deref()
        .ok_or_else(|| Error::invalid(format!("{flag} is required {why}")))
}

fn dsm_config(a: &EstimateArgs) -> Result<DsmConfig> {
    let d = DsmConfig::default();
    let schedule = VeSchedule::new(
        a.sigma_min.unwrap_or(d.schedule.sigma_min),
        a.sigma_max.unwrap_or(d.schedule.sigma_max),
    )?;
    let cfg = DsmConfig {
        hidden_layers: a.dsm_hidden.clone().unwrap_or(d.hidden_layers),
        steps: a.dsm_steps.unwrap_or(d.steps),
        batch_size: a.dsm_batch.unwrap_or(d.batch_size),
        learning_rate: a.dsm_lr.unwrap_or(d.learning_rate),
        seed: a.dsm_seed.unwrap_or(d.seed),
        schedule,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_estimate(a: &EstimateArgs, mut info: RunInfo, out: &mut Outputs) -> Result<()> {
    info.decisions.insert("normalization".into(), a.normalize.to_string());
    let file_oracle = a.method == Method::Diffusion && a.oracle == OracleKind::File;
    let pts = if file_oracle && a.data.is_none() {
        None
    } else {
        let data = require(&a.data, "--data", "for this method")?;
        Some(first_n(load_points(data, a.ids.as_deref(), a.normalize)?, a.max_samples)?)
    };
    let mut summary = serde_json::Map::new();
    summary.insert("method".into(), json!(a.method));
    let outcomes: Vec<Outcome> = match a.method {
        Method::Diffusion => {
            info.decisions.insert("oracle".into(), format!("{:?}", a.oracle).to_lowercase());
            info.seeds.insert("perturbation".into(), a.seed);
            if file_oracle {
                let scores = load_score_matrix(
                    require(&a.scores, "--scores", "with --oracle file")?,
                    pts.as_ref().map(PointSet::dim),
                )?;
                let ids = match (&pts, &a.ids) {
                    (Some(p), _) => p.ids().to_vec(),
                    (None, Some(path)) => read_ids(path)?,
                    (None, None) => (0..scores.n_samples()).map(|i| i.to_string()).collect(),
                };
                batch_estimate_precomputed(&scores, &ids, a.workers)?
            } else {
                let pts = pts.as_ref().expect("loaded above");
                let params = DiffusionIdParams {
                    sigma_t0: a.sigma_t0,
                    k_scores: a.k_scores.unwrap_or(4 * pts.dim()),
                    seed: a.seed,
                };
                summary.insert("sigma_t0".into(), json!(params.sigma_t0));
                summary.insert("k_scores".into(), json!(params.k_scores));
                match a.oracle {
                    OracleKind::Analytic => {
                        let truth = require(&a.truth, "--truth", "with --oracle analytic")?;
                        let text = fs::read_to_string(truth).map_err(|e| Error::io(truth, e))?;
                        let spec: ManifoldSpec = serde_json::from_str(&text)?;
                        if spec.ambient_d != pts.dim() {
                            return Err(Error::invalid(format!(
                                "truth has d = {} but the data has d = {}",
                                spec.ambient_d,
                                pts.dim()
                            )));
                        }
                        let (mean, cov) = analytic_covariance(&spec)?;
                        batch_estimate(&AnalyticGaussianScore::new(mean, cov)?, pts, &params, a.workers)?
                    }
                    OracleKind::Dsm => {
                        let cfg = dsm_config(a)?;
                        info.seeds.insert("dsm".into(), cfg.seed);
                        let train = match &a.train_data {
                            Some(p) => load_points(p, None, a.normalize)?,
                            None => pts.clone(),
                        };
                        let (net, trace) = train_dsm_score_net(&train, &cfg)?;
                        let path = out.path("loss_trace.csv");
                        fs::write(&path, trace.to_csv()).map_err(|e| Error::io(&path, e))?;
                        summary.insert("dsm".into(), serde_json::to_value(&cfg)?);
                        summary.insert("final_loss".into(), json!(trace.0.last()));
                        batch_estimate(&net, pts, &params, a.workers)?
                    }
                    OracleKind::File => unreachable!(),
                }
            }
        }
        Method::Mle => {
            let pts = pts.as_ref().expect("loaded above");
            let outs = mle_batch(pts, &MleParams { m: a.m }, a.workers)?;
            let agg = mle_aggregate_outcomes(&outs)?;
            summary.insert("m".into(), json!(a.m));
            summary.insert("aggregate".into(), json!(agg.estimate));
            outs
        }
        Method::Lpca => {
            let pts = pts.as_ref().expect("loaded above");
            summary.insert("m".into(), json!(a.lpca_m));
            summary.insert("alpha".into(), json!(a.alpha));
            lpca_batch(pts, &LpcaParams { m: a.lpca_m, alpha: a.alpha }, a.workers)?
        }
        Method::Ppca => {
            let pts = pts.as_ref().expect("loaded above");
            let r = ppca_id_global(pts)?;
            summary.insert("q_star".into(), json!(r.q_star));
            summary.insert("bic_table".into(), serde_json::to_value(&r.table)?);
            let e = IdEstimate {
                sample_id: "all".into(),
                method: Method::Ppca,
                value: r.q_star as f64,
                k_hat: r.q_star,
                spectrum: Vec::new(),
                gap_index: None,
                truncated: false,
                low_confidence: false,
                params: BTreeMap::from([("n".to_string(), pts.n().to_string())]),
            };
            vec![Ok(e)]
        }
    };
    write_estimates_csv(out.path("estimates.csv"), a.method, &outcomes)?;
    let ok: Vec<&IdEstimate> = outcomes.iter().filter_map(|o| o.as_ref().ok()).collect();
    if ok.iter().any(|e| !e.spectrum.is_empty()) {
        write_spectra_csv(
            out.path("spectra.csv"),
            ok.iter().map(|e| (e.sample_id.as_str(), e.spectrum.as_slice())),
        )?;
    }
    let mut hist = BTreeMap::<usize, usize>::new();
    for e in &ok {
        *hist.entry(e.k_hat).or_default() += 1;
    }
    summary.insert("samples".into(), json!(outcomes.len()));
    summary.insert("excluded".into(), json!(outcomes.len() - ok.len()));
    summary.insert("k_hat_counts".into(), json!(hist));
    summary.insert("truncated".into(), json!(ok.iter().filter(|e| e.truncated).count()));
    summary.insert("low_confidence".into(), json!(ok.iter().filter(|e| e.low_confidence).count()));
    let path = out.path("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n").map_err(|e| Error::io(&path, e))?;
    note!(
        "{}: {} estimates, {} excluded",
        a.method,
        ok.len(),
        outcomes.len() - ok.len()
    );
    finish(info, "estimate", a, out)
}

fn cmd_energy_bin(a: &EnergyArgs, mut info: RunInfo, out: &mut Outputs) -> Result<()> {
    let t = read_tensor(&a.logits)?;
    let n = *t.dims.first().unwrap_or(&0);
    let ids = match &a.ids {
        Some(p) => read_ids(p)?,
        None => (0..n).map(|i| i.to_string()).collect(),
    };
    let posts = posteriors_from_tensor(&t, &ids)?;
    let b = bin_energies(&posts, a.temperature, a.workers)?;
    write_energy_csv(out.path("energy.csv"), &b.records)?;
    let path = out.path("energy_fits.json");
    let fits = json!({ "temperature": a.temperature, "mean": b.mean_fit, "std": b.std_fit });
    fs::write(&path, serde_json::to_string_pretty(&fits)? + "\n").map_err(|e| Error::io(&path, e))?;
    info.decisions.insert("mean_transform".into(), b.mean_fit.transform.to_string());
    info.decisions.insert("std_transform".into(), b.std_fit.transform.to_string());
    info.decisions.insert("interval_rule".into(), "floor(z) - min floor(z) + 1".into());
    note!("binned {} samples", b.records.len());
    finish(info, "energy-bin", a, out)
}

const PLOT_FILES: [&str; 5] = [
    "snr_vs_id.csv",
    "snr_vs_id.svg",
    "interval_bars.csv",
    "interval_bars.svg",
    "score_spectra.csv",
];

struct EstimateSet {
    label: String,
    method: Method,
    outcomes: Vec<Outcome>,
}

fn load_estimate_set(arg: &str) -> Result<EstimateSet> {
    // labels may contain '=' themselves, e.g. `MLE(m=5)=run/estimates.csv`
    let (label, path) = match arg.rsplit_once('=') {
        Some((l, p)) if !Path::new(arg).exists() => (Some(l.to_string()), PathBuf::from(p)),
        _ => (None, PathBuf::from(arg)),
    };
    let outcomes = read_estimates_csv(&path)?;
    let methods: Vec<Method> = outcomes.iter().filter_map(|o| o.as_ref().ok().map(|e| e.method)).collect();
    let method = *methods
        .first()
        .ok_or_else(|| Error::invalid(format!("{}: no usable estimates", path.display())))?;
    if methods.iter().any(|&m| m != method) {
        return Err(Error::invalid(format!("{}: mixed methods", path.display())));
    }
    Ok(EstimateSet {
        label: label.unwrap_or_else(|| method.to_string()),
        method,
        outcomes,
    })
}

#[derive(Serialize)]
struct TrendRow {
    source: String,
    grouping: String,
    method: String,
    rho: Option<f64>,
    status: String,
}

fn trend_row(source: &str, t: &IntervalTable) -> TrendRow {
    let (rho, status) = match trend_check(t) {
        Ok(r) => (Some(r), "ok".to_string()),
        Err(e) => (None, e.to_string()),
    };
    TrendRow {
        source: source.into(),
        grouping: t.grouping.clone(),
        method: t.method.clone(),
        rho,
        status,
    }
}

fn cmd_report(a: &ReportArgs, mut info: RunInfo, out: &mut Outputs) -> Result<()> {
    info.decisions.insert(
        "snr_rule".into(),
        format!("max pixel / (1.4826 * MAD of {}-pixel border ring)", a.snr_border),
    );
    info.decisions.insert("normalization".into(), a.normalize.to_string());
    let sets = a
        .estimates
        .iter()
        .map(|s| load_estimate_set(s))
        .collect::<Result<Vec<_>>>()?;
    let mut tables = Vec::new();
    if let Some(energy) = &a.energy {
        let records = read_energy_csv(energy)?;
        for g in [Grouping::Mean, Grouping::Std] {
            for s in sets.iter().filter(|s| s.method != Method::Ppca) {
                tables.push(aggregate_by_interval(&s.outcomes, &records, s.method, g, &s.label)?);
            }
            if let Some(data) = &a.data {
                let pts = load_points(data, a.data_ids.as_deref(), a.normalize)?;
                tables.push(aggregate_ppca_by_interval(&pts, &records, g, "ppca")?);
            }
        }
    } else if a.data.is_some() {
        return Err(Error::invalid("--data (per-interval PPCA) needs --energy"));
    }
    let fixtures = match &a.fixtures {
        Some(p) => read_fixture_tables(p)?,
        None => Vec::new(),
    };
    if tables.is_empty() && fixtures.is_empty() && sets.is_empty() {
        return Err(Error::invalid("report needs --estimates, --energy or --fixtures"));
    }

    let trend_path = out.path("trend.csv");
    let mut w = csv::Writer::from_path(&trend_path).map_err(|e| Error::csv(&trend_path, e))?;
    for row in tables
        .iter()
        .map(|t| trend_row("computed", t))
        .chain(fixtures.iter().map(|t| trend_row("fixture", t)))
    {
        note!(
            "trend {} {} ({}): {}",
            row.source,
            row.method,
            row.grouping,
            row.rho.map_or(row.status.clone(), |r| format!("rho = {r}"))
        );
        w.serialize(&row).map_err(|e| Error::csv(&trend_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&trend_path, e))?;
    if !tables.is_empty() {
        write_interval_tables_csv(out.path("tables.csv"), &tables)?;
    }

    let mut scatter = Vec::new();
    if let (Some(first), true) = (sets.first(), a.catalog.is_some() || a.images.is_some()) {
        let catalog = match &a.catalog {
            Some(p) => read_catalog_csv(p)?,
            None => Default::default(),
        };
        info.decisions.insert("catalog_rejected".into(), catalog.rejected.len().to_string());
        let mut snr = HashMap::new();
        if let Some(images) = &a.images {
            let t = read_tensor(images)?;
            let [n, h, w] = t.dims[..] else {
                return Err(Error::invalid(format!("{}: images must be (n, h, w)", images.display())));
            };
            let ids = match &a.image_ids {
                Some(p) => read_ids(p)?,
                None => (0..n).map(|i| i.to_string()).collect(),
            };
            for img in load_images(t.values, h, w, &ids)? {
                snr.insert(img.id().to_string(), estimate_snr(&img, a.snr_border)?);
            }
        }
        scatter = join_scatter(&first.outcomes, &catalog.entries, &snr);
        let rejected: HashMap<&str, (&CatalogEntry, &str)> = catalog
            .rejected
            .iter()
            .map(|(e, why)| (e.sample_id.as_str(), (e, why.as_str())))
            .collect();
        for row in &mut scatter {
            if let Some((entry, why)) = rejected.get(row.sample_id.as_str()) {
                row.fr_class = entry.fr_class;
                row.status = format!("catalog filter: {why}");
            }
        }
    }
    let spectra: Vec<(String, Vec<f64>)> = match &a.spectra {
        Some(p) => read_spectra_csv(p)?.into_iter().take(a.spectra_samples).collect(),
        None => Vec::new(),
    };
    let plot_tables: Vec<IntervalTable> = tables.iter().filter(|t| t.grouping == "mean").cloned().collect();
    let inputs = PlotInputs {
        scatter: &scatter,
        tables: &plot_tables,
        spectra: &spectra,
    };
    if !(scatter.is_empty() && plot_tables.is_empty() && spectra.is_empty()) {
        let files = emit_plots(&inputs, &out.dir).inspect_err(|_| {
            for name in PLOT_FILES {
                let _ = fs::remove_file(out.dir.join(name));
            }
        })?;
        out.record(files);
    }
    finish(info, "report", a, out)
}
