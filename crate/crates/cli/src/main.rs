use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use catpose::diagnostics::{diagnose_run, list_checkpoints, window_mean, ContentionReport, DiagnoseOptions, Weighting};
use catpose::grouping::{build_routing, compute_difficulty, read_difficulty};
use catpose::synthdata::{generate_dataset, read_dataset, write_dataset, DataConfig, Dataset};
use catpose::trainer::{
    evaluate, load_checkpoint, train, EvalReport, PilotRunner, RoutedModel, RoutingSource, Thresholds, TrainConfig,
    TrainOptions,
};
use catpose::{Error, Result};

const VERSION: &str = env!("CATPOSE_VERSION");

#[derive(Parser)]
#[command(name = "catpose", version = VERSION, about = "Category-level pose pipeline with gradient contention diagnostics")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset from a data config.
    GenData {
        /// Data config JSON (`"v": 1` required).
        #[arg(long)]
        config: PathBuf,
        /// Output dataset file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write checkpoints plus metrics.csv.
    Train {
        /// Train config JSON (`"v": 1` required).
        #[arg(long)]
        config: PathBuf,
        /// Dataset file; overrides `dataset` in the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        /// `none` for the shared baseline, or a routing JSON path.
        #[arg(long)]
        routing: Option<String>,
        /// Evaluate on the test split every this many epochs.
        #[arg(long)]
        eval_every: Option<usize>,
    },
    /// Group categories by difficulty into routed branches.
    Group {
        /// `{category: success_rate}` JSON or an evaluate report.
        #[arg(long)]
        difficulty: PathBuf,
        /// Number of groups.
        #[arg(long = "G", default_value_t = 3)]
        g: usize,
        /// Refine boundary categories with short pilot runs.
        #[arg(long, requires = "pilot_data")]
        refine: bool,
        /// Dataset whose training split feeds the pilot runs.
        #[arg(long)]
        pilot_data: Option<PathBuf>,
        /// Train config for the pilot runs; desk defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seed recorded in the routing and used by default pilot runs.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output routing JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay every checkpoint of a run and write contention reports.
    Diagnose {
        /// Run directory produced by `train`.
        #[arg(long)]
        rundir: PathBuf,
        /// Dataset the run was trained on.
        #[arg(long)]
        data: PathBuf,
        /// Seed of the fixed replay subset.
        #[arg(long, default_value_t = 11)]
        subset_seed: u64,
        /// Replay batches per category.
        #[arg(long, default_value_t = 8)]
        batches: usize,
        /// Instances per replay batch.
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        /// Aggregation of the other categories in category-to-all metrics.
        #[arg(long, value_enum, default_value_t = WeightingArg::Uniform)]
        weighting: WeightingArg,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-category success rates of a checkpoint on the test split.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Rotation degrees, translation and relative scale thresholds.
        #[arg(long, default_value = "10,0.1,0.15")]
        thresholds: String,
        /// Dataset split to evaluate.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect contention curves and success rates of several runs.
    Report {
        /// Diagnose output directories.
        #[arg(long, num_args = 1.., required = true)]
        diag: Vec<PathBuf>,
        /// Evaluate outputs.
        #[arg(long, num_args = 1..)]
        evals: Vec<PathBuf>,
        /// Trailing epochs averaged in the summary.
        #[arg(long, default_value_t = 10)]
        window: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightingArg {
    Uniform,
    Frequency,
}

impl From<WeightingArg> for Weighting {
    fn from(w: WeightingArg) -> Self {
        match w {
            WeightingArg::Uniform => Weighting::Uniform,
            WeightingArg::Frequency => Weighting::Frequency,
        }
    }
}

#[derive(Serialize)]
struct Timings {
    started_unix: f64,
    wall_seconds: f64,
}

#[derive(Serialize)]
struct RunManifest {
    subcommand: String,
    config: Value,
    seeds: Vec<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    version: String,
    timings: Timings,
    status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

/// What a subcommand records about itself while it runs.
#[derive(Default)]
struct Record {
    config: Value,
    seeds: Vec<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
    let t0 = Instant::now();
    let (name, manifest_path) = manifest_target(&cli.cmd);
    let mut rec = Record::default();
    let result = run(cli.cmd, &mut rec);
    let manifest = RunManifest {
        subcommand: name.into(),
        config: rec.config,
        seeds: rec.seeds,
        inputs: rec.inputs,
        outputs: rec.outputs,
        version: VERSION.into(),
        timings: Timings { started_unix: started, wall_seconds: t0.elapsed().as_secs_f64() },
        status: if result.is_ok() { "ok" } else { "failed" }.into(),
        error: result.as_ref().err().map(|e| e.to_string()),
    };
    if let Err(e) = write_manifest(&manifest_path, &manifest) {
        eprintln!("warning: could not write manifest {}: {e}", manifest_path.display());
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Directory outputs get `manifest.json` inside; file outputs get a
/// sibling `<name>.manifest.json`.
fn manifest_target(cmd: &Cmd) -> (&'static str, PathBuf) {
    let sibling = |p: &Path| {
        let mut name = p.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".manifest.json");
        p.with_file_name(name)
    };
    match cmd {
        Cmd::GenData { out, .. } => ("gen-data", sibling(out)),
        Cmd::Train { out, .. } => ("train", out.join("manifest.json")),
        Cmd::Group { out, .. } => ("group", sibling(out)),
        Cmd::Diagnose { out, .. } => ("diagnose", out.join("manifest.json")),
        Cmd::Evaluate { out, .. } => ("evaluate", sibling(out)),
        Cmd::Report { out, .. } => ("report", sibling(out)),
    }
}

fn write_manifest(path: &Path, m: &RunManifest) -> std::io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_string_pretty(m).map_err(std::io::Error::other)?)?;
    fs::rename(&tmp, path)
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: e }
}

/// Config files that cannot be read are usage errors, not data errors.
fn read_config_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(v)?).map_err(|e| io_err(path, e))
}

fn run(cmd: Cmd, rec: &mut Record) -> Result<()> {
    match cmd {
        Cmd::GenData { config, out } => gen_data(&config, &out, rec),
        Cmd::Train { config, data, out, routing, eval_every } => {
            train_cmd(&config, data, &out, routing.as_deref(), eval_every, rec)
        }
        Cmd::Group { difficulty, g, refine, pilot_data, config, seed, out } => {
            group(&difficulty, g, refine, pilot_data.as_deref(), config.as_deref(), seed, &out, rec)
        }
        Cmd::Diagnose { rundir, data, subset_seed, batches, batch_size, weighting, out } => {
            let opts = DiagnoseOptions {
                subset_seed,
                batches_per_category: batches,
                batch_size,
                weighting: weighting.into(),
                ..DiagnoseOptions::default()
            };
            diagnose(&rundir, &data, opts, &out, rec)
        }
        Cmd::Evaluate { ckpt, data, thresholds, split, out } => evaluate_cmd(&ckpt, &data, &thresholds, &split, &out, rec),
        Cmd::Report { diag, evals, window, out } => report(&diag, &evals, window, &out, rec),
    }
}

fn gen_data(config: &Path, out: &Path, rec: &mut Record) -> Result<()> {
    let cfg: DataConfig = serde_json::from_str(&read_config_text(config)?)?;
    rec.config = serde_json::to_value(&cfg)?;
    rec.seeds = vec![cfg.seed];
    rec.inputs = vec![config.to_path_buf()];
    let data = generate_dataset(&cfg)?;
    write_dataset(&data, out)?;
    rec.outputs = vec![out.to_path_buf()];
    for split in &data.header.splits {
        let counts = data.counts(&split.name)?;
        println!("{}: {}", split.name, counts.iter().enumerate().map(|(c, n)| format!("c{c}={n}")).collect::<Vec<_>>().join(" "));
    }
    Ok(())
}

fn train_cmd(
    config: &Path,
    data: Option<PathBuf>,
    out: &Path,
    routing: Option<&str>,
    eval_every: Option<usize>,
    rec: &mut Record,
) -> Result<()> {
    let mut cfg: TrainConfig = serde_json::from_str(&read_config_text(config)?)?;
    if let Some(d) = data {
        cfg.dataset = Some(d);
    }
    match routing {
        Some("none") => cfg.routing = RoutingSource::None,
        Some(p) => cfg.routing = RoutingSource::File { path: p.into() },
        None => {}
    }
    if let Some(e) = eval_every {
        cfg.eval_every = e;
    }
    cfg.validate()?;
    rec.config = serde_json::to_value(&cfg)?;
    rec.seeds = vec![cfg.seed];
    let data_path = cfg.dataset.clone().ok_or_else(|| Error::Config("no dataset: pass --data or set `dataset`".into()))?;
    rec.inputs = vec![config.to_path_buf(), data_path.clone()];
    let data = read_dataset(&data_path)?;
    let k = data.header.k;
    let train_set = data.split("train")?;
    let routing = catpose::trainer::resolve_routing(&cfg, k, train_set)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write_json(&out.join("config.json"), &cfg)?;
    routing.write(out.join("routing.json"))?;
    let eval_set = if cfg.eval_every > 0 { Some(data.split("test")?) } else { None };
    let outcome = train(&cfg, k, train_set, &routing, TrainOptions { out_dir: Some(out.to_path_buf()), eval_set, ..Default::default() })?;
    for m in &outcome.metrics {
        println!("epoch {} loss {:.6} lr {:.3e}", m.epoch, m.mean_loss, m.lr);
    }
    rec.outputs = outcome.checkpoints.clone();
    rec.outputs.push(out.join("metrics.csv"));
    Ok(())
}

/// Accepts a plain `{category: rate}` map or an evaluate report.
fn load_rates(path: &Path) -> Result<BTreeMap<usize, f64>> {
    match read_difficulty(path) {
        Ok(r) => Ok(r),
        Err(Error::Json(_)) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            let report: EvalReport = serde_json::from_str(&text)?;
            Ok(report.rates())
        }
        Err(e) => Err(e),
    }
}

#[allow(clippy::too_many_arguments)]
fn group(
    difficulty: &Path,
    g: usize,
    refine: bool,
    pilot_data: Option<&Path>,
    config: Option<&Path>,
    seed: u64,
    out: &Path,
    rec: &mut Record,
) -> Result<()> {
    rec.inputs.push(difficulty.to_path_buf());
    let rates = load_rates(difficulty)?;
    let k = rates.keys().next_back().map_or(0, |&c| c + 1);
    let d = compute_difficulty(&rates, k)?;
    let reference = difficulty.display().to_string();
    let table = if refine {
        let pd = pilot_data.ok_or_else(|| Error::Config("--refine needs --pilot-data".into()))?;
        rec.inputs.push(pd.to_path_buf());
        let data = read_dataset(pd)?;
        if data.header.k != k {
            return Err(Error::Config(format!("difficulty covers {k} categories, pilot data has {}", data.header.k)));
        }
        let mut cfg = match config {
            Some(p) => {
                rec.inputs.push(p.to_path_buf());
                serde_json::from_str::<TrainConfig>(&read_config_text(p)?)?
            }
            None => TrainConfig::new(data.header.n, RoutingSource::None, seed),
        };
        cfg.g = g;
        cfg.validate()?;
        rec.config = serde_json::to_value(&cfg)?;
        let mut pilot = PilotRunner::new(&cfg, &d, k, data.split("train")?)?;
        build_routing(&d, g, Some(&mut pilot), &reference, seed)?
    } else {
        build_routing(&d, g, None, &reference, seed)?
    };
    if rec.config.is_null() {
        rec.config = json!({ "g": g, "refine": refine });
    }
    rec.seeds = vec![seed];
    table.write(out)?;
    rec.outputs = vec![out.to_path_buf()];
    println!("groups {:?}", table.group_sizes());
    for step in &table.provenance.refinement_log {
        println!(
            "boundary {}: category {} s_g={:.6} s_g+1={:.6} moved={}",
            step.boundary, step.category, step.s_g, step.s_g_plus_1, step.moved
        );
    }
    Ok(())
}

fn diagnose(rundir: &Path, data: &Path, mut opts: DiagnoseOptions, out: &Path, rec: &mut Record) -> Result<()> {
    let cfg_path = rundir.join("config.json");
    if cfg_path.exists() {
        let cfg: TrainConfig = serde_json::from_str(&read_config_text(&cfg_path)?)?;
        opts.loss = cfg.loss;
    }
    rec.config = json!({
        "subset_seed": opts.subset_seed,
        "batches_per_category": opts.batches_per_category,
        "batch_size": opts.batch_size,
        "weighting": opts.weighting,
        "loss": opts.loss,
    });
    rec.seeds = vec![opts.subset_seed];
    rec.inputs = vec![rundir.to_path_buf(), data.to_path_buf()];
    let dataset = read_dataset(data)?;
    let ckpts = list_checkpoints(rundir)?;
    if ckpts.is_empty() {
        return Err(Error::MissingData(format!("no checkpoints under {}", rundir.display())));
    }
    let reports = diagnose_run(&ckpts, dataset.split("train")?, dataset.header.k, &opts, Some(out))?;
    for r in &reports {
        let psi = r.block("psi").and_then(|b| b.mu_cc);
        let phi = r.block("phi").and_then(|b| b.mu_cc);
        println!("epoch {} mu_cc psi={psi:?} phi={phi:?}", r.epoch);
    }
    rec.outputs = vec![out.to_path_buf()];
    Ok(())
}

fn evaluate_cmd(ckpt: &Path, data: &Path, thresholds: &str, split: &str, out: &Path, rec: &mut Record) -> Result<()> {
    let th = Thresholds::parse(thresholds)?;
    rec.config = json!({ "thresholds": th, "split": split });
    rec.inputs = vec![ckpt.to_path_buf(), data.to_path_buf()];
    let dataset: Dataset = read_dataset(data)?;
    let ck = load_checkpoint(ckpt)?;
    let k = dataset.header.k;
    ck.routing.validate(k)?;
    let report = evaluate(&RoutedModel { model: &ck.model, routing: &ck.routing }, dataset.split(split)?, k, th)?;
    write_json(out, &report)?;
    rec.outputs = vec![out.to_path_buf()];
    for c in &report.categories {
        println!("category {} rate {:?}", c.category, c.rate);
    }
    Ok(())
}

/// Run id of a diagnose directory: its name, or its parent's name when the
/// directory is literally called `diag`.
fn run_id(path: &Path) -> String {
    let name = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned());
    match name(path) {
        Some(n) if n == "diag" => path.parent().and_then(name).unwrap_or(n),
        Some(n) => n,
        None => path.display().to_string(),
    }
}

fn read_reports(dir: &Path) -> Result<Vec<ContentionReport>> {
    if !dir.is_dir() {
        return Err(Error::Config(format!("diag directory {} does not exist", dir.display())));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("report_epoch_") && n.ends_with(".json"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::MissingData(format!("no contention reports in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            Ok(serde_json::from_str(&text)?)
        })
        .collect()
}

#[derive(Serialize)]
struct WindowSummary {
    mu_cc: Option<f64>,
    nbar: Option<f64>,
    r_theta: Option<f64>,
}

#[derive(Serialize)]
struct RunCurves {
    run_id: String,
    source: PathBuf,
    /// Trailing-window means per block; infinite ratios become null.
    window: BTreeMap<String, WindowSummary>,
    reports: Vec<ContentionReport>,
}

#[derive(Serialize)]
struct EvalSummary {
    run_id: String,
    source: PathBuf,
    mean_rate: f64,
    rates: BTreeMap<usize, f64>,
}

#[derive(Serialize)]
struct Summary {
    window: usize,
    runs: Vec<RunCurves>,
    evals: Vec<EvalSummary>,
}

fn report(diags: &[PathBuf], evals: &[PathBuf], window: usize, out: &Path, rec: &mut Record) -> Result<()> {
    if window == 0 {
        return Err(Error::Config("--window must be >= 1".into()));
    }
    rec.config = json!({ "window": window });
    rec.inputs = diags.iter().chain(evals).cloned().collect();
    let mut runs = Vec::new();
    for dir in diags {
        let reports = read_reports(dir)?;
        let names: Vec<String> = reports[0].blocks.iter().map(|b| b.block.clone()).collect();
        let window = names
            .into_iter()
            .map(|n| {
                let w = WindowSummary {
                    mu_cc: window_mean(&reports, &n, window, |b| b.mu_cc),
                    nbar: window_mean(&reports, &n, window, |b| b.nbar),
                    r_theta: window_mean(&reports, &n, window, |b| Some(b.r_theta)).filter(|x| x.is_finite()),
                };
                (n, w)
            })
            .collect();
        runs.push(RunCurves { run_id: run_id(dir), source: dir.clone(), window, reports });
    }
    let mut eval_rows = Vec::new();
    for p in evals {
        let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
        let r: EvalReport = serde_json::from_str(&text)?;
        let run_id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        eval_rows.push(EvalSummary { run_id, source: p.clone(), mean_rate: r.mean_rate(), rates: r.rates() });
    }
    for r in &runs {
        println!("run {} epochs {}", r.run_id, r.reports.len());
    }
    write_json(out, &Summary { window, runs, evals: eval_rows })?;
    rec.outputs = vec![out.to_path_buf()];
    Ok(())
}
