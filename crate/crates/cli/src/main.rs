//! `osda`: generate synthetic open-set tasks, train and evaluate the adversarial
//! open-set models, run openness sweeps, ablations and gradient self-checks.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use osda::data::{generate_synthetic_task, FeatureDataset, LabelSpaceConfig, SyntheticTaskSpec};
use osda::eval::{
    benchmark_task, benchmark_train_config, emit_report, evaluate, run_task, sweep_openness, write_trace_csv,
    ReportRow, SweepConfig,
};
use osda::gradcheck::{run_suite, SuiteOptions, DEFAULT_TRIALS};
use osda::model::Checkpoint;
use osda::train::{train_run, TrainConfig, Variant};

#[derive(Parser)]
#[command(name = "osda", version, about = "Open-set domain adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic open-set task as a feature CSV plus label space.
    GenData(GenDataArgs),
    /// Train one variant and write a manifest, parameters and weight traces.
    Train(TrainArgs),
    /// Evaluate saved parameters on the target rows of a dataset.
    Eval(EvalArgs),
    /// Run an openness sweep.
    Sweep(SweepArgs),
    /// Compare all five variants on one task.
    Ablate(AblateArgs),
    /// Run the finite-difference gradient suite.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Task spec JSON; flags override its values.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output feature CSV.
    #[arg(long)]
    out: PathBuf,
    /// Output label-space JSON [default: <out>.labels.json].
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_shared: Option<usize>,
    #[arg(long)]
    n_target_private: Option<usize>,
    #[arg(long)]
    n_source_private: Option<usize>,
    #[arg(long)]
    samples_per_class: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    rotation_deg: Option<f64>,
}

/// Training flags; each overrides the field of the same name.
#[derive(Args, Default)]
struct TrainOverrides {
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    batch_per_domain: Option<usize>,
    #[arg(long)]
    grl_lambda: Option<f64>,
    #[arg(long)]
    fixed_t: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    batch_norm: Option<bool>,
}

#[derive(Args)]
struct DataArgs {
    /// Feature CSV.
    #[arg(long)]
    data: PathBuf,
    /// Label-space JSON [default: <data>.labels.json].
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config JSON.
    #[arg(long, conflicts_with = "manifest")]
    config: Option<PathBuf>,
    /// Re-run the configuration and dataset recorded in a manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, required_unless_present = "manifest")]
    data: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
    /// Leave timestamps and wall-clock times out of every output file.
    #[arg(long)]
    no_timestamps: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Parameters written by `train`.
    #[arg(long)]
    params: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    /// Variant name recorded in the report.
    #[arg(long, default_value = "proposed")]
    variant: Variant,
    #[arg(long, default_value = "eval")]
    task_id: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Cells trained in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Root seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_timestamps: bool,
}

#[derive(Args)]
struct AblateArgs {
    /// Training config JSON [default: the benchmark settings].
    #[arg(long)]
    config: Option<PathBuf>,
    /// Feature CSV [default: the standard synthetic task for --seed].
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
    #[arg(long)]
    no_timestamps: bool,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_TRIALS)]
    trials: usize,
    /// Corrupt the analytic gradient of the named check (self-test of the
    /// failure path).
    #[arg(long)]
    corrupt: Option<String>,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// How a command failed: bad invocation or configuration (exit 2), or a
/// failed run (exit 1).
enum Failure {
    Usage(String),
    Run(String),
}

impl From<osda::Error> for Failure {
    fn from(e: osda::Error) -> Self {
        match e {
            osda::Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Run(e.to_string()),
        }
    }
}

type CmdResult<T = ()> = Result<T, Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Run(format!("{}: {e}", path.display()))
}

fn labels_path(data: &Path, explicit: Option<&Path>) -> PathBuf {
    explicit.map(Path::to_path_buf).unwrap_or_else(|| data.with_extension("labels.json"))
}

fn read_json_object(path: &Path) -> CmdResult<Map<String, Value>> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(Failure::Usage(format!("{}: expected a JSON object", path.display()))),
        Err(e) => Err(Failure::Usage(format!("{}: {e}", path.display()))),
    }
}

/// Defaults, then the config file, then flags; unknown keys are rejected.
fn layered<T: Serialize + DeserializeOwned>(
    defaults: &T,
    file: Option<&Path>,
    flags: Map<String, Value>,
) -> CmdResult<T> {
    let Value::Object(mut merged) = serde_json::to_value(defaults).expect("serializable") else {
        unreachable!("configs serialize to objects")
    };
    if let Some(path) = file {
        merged.extend(read_json_object(path)?);
    }
    merged.extend(flags);
    serde_json::from_value(Value::Object(merged)).map_err(|e| {
        let origin = file.map_or("flags".to_string(), |p| p.display().to_string());
        Failure::Usage(format!("{origin}: {e}"))
    })
}

fn flag<T: Serialize>(map: &mut Map<String, Value>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        map.insert(key.to_string(), serde_json::to_value(v).expect("serializable"));
    }
}

impl TrainOverrides {
    fn to_map(&self) -> Map<String, Value> {
        let mut m = Map::new();
        flag(&mut m, "variant", self.variant);
        flag(&mut m, "seed", self.seed);
        flag(&mut m, "lr", self.lr);
        flag(&mut m, "momentum", self.momentum);
        flag(&mut m, "max_iterations", self.max_iterations);
        flag(&mut m, "batch_per_domain", self.batch_per_domain);
        flag(&mut m, "grl_lambda", self.grl_lambda);
        flag(&mut m, "fixed_t", self.fixed_t);
        flag(&mut m, "eval_every", self.eval_every);
        flag(&mut m, "batch_norm", self.batch_norm);
        m
    }
}

fn load_task(data: &Path, labels: Option<&Path>) -> CmdResult<(FeatureDataset, LabelSpaceConfig)> {
    let ls = LabelSpaceConfig::load(&labels_path(data, labels))?;
    let ds = FeatureDataset::load_csv(data)?;
    ds.validate(&ls)?;
    Ok((ds, ls))
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[derive(Serialize, serde::Deserialize)]
struct Artifacts {
    dataset: PathBuf,
    labels: PathBuf,
    params: PathBuf,
    trace: PathBuf,
    report: PathBuf,
}

/// Everything needed to reproduce a training run.
#[derive(Serialize, serde::Deserialize)]
struct RunManifest {
    tool_version: String,
    seed: u64,
    config: TrainConfig,
    artifacts: Artifacts,
    started_unix: Option<u64>,
    finished_unix: Option<u64>,
}

fn cmd_gen_data(a: GenDataArgs) -> CmdResult {
    let mut flags = Map::new();
    flag(&mut flags, "seed", a.seed);
    flag(&mut flags, "n_shared", a.n_shared);
    flag(&mut flags, "n_target_private", a.n_target_private);
    flag(&mut flags, "n_source_private", a.n_source_private);
    flag(&mut flags, "samples_per_class", a.samples_per_class);
    flag(&mut flags, "feature_dim", a.feature_dim);
    flag(&mut flags, "noise_sigma", a.noise_sigma);
    flag(&mut flags, "rotation_deg", a.rotation_deg);
    let spec: SyntheticTaskSpec = layered(&SyntheticTaskSpec::default(), a.spec.as_deref(), flags)?;
    let (ds, ls) = generate_synthetic_task(&spec)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    ds.write_csv(&a.out)?;
    let labels = labels_path(&a.out, a.labels.as_deref());
    ls.save(&labels)?;
    println!(
        "wrote {} ({} source, {} target rows) and {}",
        a.out.display(),
        ds.count(osda::data::Domain::Source),
        ds.count(osda::data::Domain::Target),
        labels.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let (cfg, data, labels) = match &a.manifest {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            let m: RunManifest =
                serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            let cfg = layered(&m.config, None, a.overrides.to_map())?;
            (cfg, m.artifacts.dataset, m.artifacts.labels)
        }
        None => {
            let data = a.data.clone().expect("required by clap");
            let labels = labels_path(&data, a.labels.as_deref());
            let cfg = layered(&TrainConfig::new(Variant::Proposed), a.config.as_deref(), a.overrides.to_map())?;
            (cfg, data, labels)
        }
    };
    cfg.validate()?;
    let (ds, ls) = load_task(&data, Some(&labels))?;
    create_dir(&a.out)?;
    let mut manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        config: cfg.clone(),
        artifacts: Artifacts {
            dataset: data,
            labels,
            params: a.out.join("params.json"),
            trace: a.out.join("trace.csv"),
            report: a.out.join("report.csv"),
        },
        started_unix: (!a.no_timestamps).then(unix_now),
        finished_unix: None,
    };
    let manifest_path = a.out.join("manifest.json");
    write_json(&manifest_path, &manifest)?;

    let start = std::time::Instant::now();
    let out = train_run(&ds, &ls, &cfg)?;
    let secs = if a.no_timestamps { 0.0 } else { start.elapsed().as_secs_f64() };
    Checkpoint {
        model: out.networks.config.clone(),
        params: out.params.clone(),
    }
    .save(&manifest.artifacts.params)?;
    write_trace_csv(&out.trace(), &manifest.artifacts.trace)?;
    let report = evaluate(&out.networks, &out.params, &ds, &ls)?;
    let row = ReportRow {
        variant: cfg.variant,
        task_id: data_task_id(&manifest.artifacts.dataset),
        seed: cfg.seed,
        os: report.os,
        os_star: report.os_star,
        unknown_acc: report.unknown_acc,
        neg_transfer_delta: None,
        iterations: cfg.max_iterations,
        wall_seconds: secs,
    };
    emit_report(&[row], &manifest.artifacts.report)?;
    manifest.finished_unix = (!a.no_timestamps).then(unix_now);
    write_json(&manifest_path, &manifest)?;
    println!(
        "{} after {} iterations: OS {:.4}  OS* {:.4}  unknown {:.4}  ({})",
        cfg.variant,
        cfg.max_iterations,
        report.os,
        report.os_star,
        report.unknown_acc,
        a.out.display()
    );
    Ok(())
}

fn data_task_id(path: &Path) -> String {
    path.file_stem().map_or_else(|| "task".into(), |s| s.to_string_lossy().into_owned())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let ck = Checkpoint::load(&a.params)?;
    let (ds, ls) = load_task(&a.data.data, a.data.labels.as_deref())?;
    let net = ck.networks()?;
    let report = evaluate(&net, &ck.params, &ds, &ls)?;
    create_dir(&a.out)?;
    let row = ReportRow {
        variant: a.variant,
        task_id: a.task_id,
        seed: a.seed,
        os: report.os,
        os_star: report.os_star,
        unknown_acc: report.unknown_acc,
        neg_transfer_delta: None,
        iterations: 0,
        wall_seconds: 0.0,
    };
    emit_report(&[row], &a.out.join("report.csv"))?;
    println!(
        "OS {:.4}  OS* {:.4}  unknown {:.4}  over {} target rows",
        report.os, report.os_star, report.unknown_acc, report.n_evaluated
    );
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> CmdResult {
    let mut raw = read_json_object(&a.config)?;
    if let Some(seed) = a.seed {
        raw.insert("seed".into(), seed.into());
    }
    let sweep: SweepConfig = serde_json::from_value(Value::Object(raw))
        .map_err(|e| Failure::Usage(format!("{}: {e}", a.config.display())))?;
    create_dir(&a.out)?;
    let cells = sweep_openness(&sweep, a.jobs, !a.no_timestamps)?;
    let rows: Vec<ReportRow> = cells.into_iter().map(|c| c.row).collect();
    let path = a.out.join("sweep.csv");
    emit_report(&rows, &path)?;
    println!("{} rows -> {}", rows.len(), path.display());
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> CmdResult {
    let flags = a.overrides.to_map();
    let seed = flags.get("seed").and_then(Value::as_u64).unwrap_or(0);
    let cfg: TrainConfig = layered(&benchmark_train_config(Variant::Proposed, seed), a.config.as_deref(), flags)?;
    cfg.validate()?;
    let (ds, ls, task_id) = match &a.data {
        Some(data) => {
            let (ds, ls) = load_task(data, a.labels.as_deref())?;
            (ds, ls, data_task_id(data))
        }
        None => {
            let (ds, ls) = generate_synthetic_task(&benchmark_task(cfg.seed))?;
            (ds, ls, "synthetic".to_string())
        }
    };
    let cells = run_task(&ds, &ls, &task_id, &Variant::ALL, &cfg, !a.no_timestamps)?;
    create_dir(&a.out)?;
    let rows: Vec<ReportRow> = cells.into_iter().map(|c| c.row).collect();
    let path = a.out.join("ablation.csv");
    emit_report(&rows, &path)?;
    println!("{:<12} {:>8} {:>8} {:>8}", "variant", "OS", "OS*", "unknown");
    for r in &rows {
        println!(
            "{:<12} {:>8.2} {:>8.2} {:>8.2}",
            r.variant.name(),
            100.0 * r.os,
            100.0 * r.os_star,
            100.0 * r.unknown_acc
        );
    }
    Ok(())
}

fn cmd_grad_check(a: GradCheckArgs) -> CmdResult {
    let report = run_suite(&SuiteOptions {
        seed: a.seed,
        trials: a.trials,
        corrupt: a.corrupt,
    })?;
    let text = report.render();
    print!("{text}");
    if let Some(path) = &a.out {
        fs::write(path, &text).map_err(|e| io_err(path, e))?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Run(format!("gradient check failed: {}", report.failing().join(", "))))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::GradCheck(a) => cmd_grad_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Run(msg)) => {
            eprintln!("osda: error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("osda: error: {msg}");
            ExitCode::from(2)
        }
    }
}
