//! Open-set evaluation: confusion matrices, OS / OS*, negative transfer,
//! weight traces, benchmark and openness sweeps, and report files.
//!
//! Accuracy is macro-averaged per-class recall. Every target-private class is
//! folded into a single "unknown" class. Classes with no target samples are
//! left out of the averages.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic_task, DomainSplit, FeatureDataset, LabelSpaceConfig, SyntheticTaskSpec};
use crate::diffcore::rng::derive_seed;
use crate::diffcore::ParamStore;
use crate::error::{Error, Result};
use crate::model::{predict, Networks};
use crate::train::{train_split, StepHooks, TrainConfig, TrainOutcome, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceGroup {
    Known,
    Unknown,
}

impl TraceGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            TraceGroup::Known => "known",
            TraceGroup::Unknown => "unknown",
        }
    }
}

/// Mean weighting-head outputs over one group of target samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTraceRow {
    pub iter: usize,
    pub group: TraceGroup,
    pub mean_d1: f64,
    pub mean_d2: f64,
    pub mean_w: f64,
}

/// Rows are true classes (shared classes in source order, then "unknown");
/// columns are predicted model outputs (every source class, then "unknown").
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    /// Model output index of each known row.
    known: Vec<usize>,
    n_outputs: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    /// `known` lists the model index of each shared class; `n_known` is the
    /// number of source classes, so predictions range over `0..=n_known`.
    pub fn new(known: Vec<usize>, n_known: usize) -> Self {
        let rows = known.len() + 1;
        ConfusionMatrix {
            known,
            n_outputs: n_known + 1,
            counts: vec![0; rows * (n_known + 1)],
        }
    }

    pub fn for_label_space(ls: &LabelSpaceConfig) -> Self {
        let known = ls
            .shared()
            .into_iter()
            .map(|l| ls.source_index(l).expect("shared labels are source labels"))
            .collect();
        Self::new(known, ls.n_known())
    }

    pub fn n_rows(&self) -> usize {
        self.known.len() + 1
    }

    pub fn n_cols(&self) -> usize {
        self.n_outputs
    }

    fn unknown(&self) -> usize {
        self.n_outputs - 1
    }

    fn row_of(&self, class: usize) -> Result<usize> {
        if class == self.unknown() {
            return Ok(self.known.len());
        }
        self.known
            .iter()
            .position(|&k| k == class)
            .ok_or_else(|| Error::Contract(format!("class {class} is neither shared nor unknown")))
    }

    /// Records one sample with true evaluation class `truth` and prediction
    /// `predicted` (both model indices, `N` meaning unknown).
    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let r = self.row_of(truth)?;
        if predicted >= self.n_outputs {
            return Err(Error::Contract(format!("prediction {predicted} out of range")));
        }
        self.counts[r * self.n_outputs + predicted] += 1;
        Ok(())
    }

    pub fn count(&self, row: usize, col: usize) -> u64 {
        self.counts[row * self.n_outputs + col]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Recall of each row, `None` for rows without samples.
    pub fn per_class_accuracy(&self) -> Vec<Option<f64>> {
        (0..self.n_rows())
            .map(|r| {
                let support: u64 = (0..self.n_outputs).map(|c| self.count(r, c)).sum();
                let target_col = if r == self.known.len() { self.unknown() } else { self.known[r] };
                (support > 0).then(|| self.count(r, target_col) as f64 / support as f64)
            })
            .collect()
    }
}

fn mean_present(v: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = v.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Recall per shared class (source order), then the unknown class.
    pub per_class: Vec<Option<f64>>,
    /// Mean recall over the `|C| + 1` classes.
    pub os: f64,
    /// Mean recall over the `|C|` known classes.
    pub os_star: f64,
    pub unknown_acc: f64,
    /// `OS - OS(source_only)` when a reference is known.
    pub neg_transfer_delta: Option<f64>,
    pub n_evaluated: u64,
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Self {
        let per_class = cm.per_class_accuracy();
        let (known, unknown) = per_class.split_at(per_class.len() - 1);
        MetricsReport {
            os: mean_present(&per_class),
            os_star: mean_present(known),
            unknown_acc: unknown[0].unwrap_or(0.0),
            per_class,
            neg_transfer_delta: None,
            n_evaluated: cm.total(),
        }
    }

    /// `|OS - (|C| OS* + unknown) / (|C| + 1)|` when every class is present.
    pub fn identity_residual(&self) -> Option<f64> {
        if self.per_class.iter().any(Option::is_none) {
            return None;
        }
        let c = (self.per_class.len() - 1) as f64;
        Some((self.os - (c * self.os_star + self.unknown_acc) / (c + 1.0)).abs())
    }
}

/// `OS(method) - OS(source_only)`; negative values flag negative transfer.
pub fn negative_transfer_delta(method: &MetricsReport, source_only: &MetricsReport) -> f64 {
    method.os - source_only.os
}

/// Classifies evaluation rows with the generator and domain classifier and
/// fills a confusion matrix. `truth` holds the evaluation class of each row.
pub fn confusion(
    net: &Networks,
    params: &ParamStore,
    x: &crate::diffcore::TensorValue,
    truth: &[usize],
    ls: &LabelSpaceConfig,
) -> Result<ConfusionMatrix> {
    if truth.is_empty() {
        return Err(Error::Contract("no target samples to evaluate".into()));
    }
    let probs = net.classify(params, x)?;
    let mut cm = ConfusionMatrix::for_label_space(ls);
    for (r, &t) in truth.iter().enumerate() {
        cm.record(t, predict(probs.row(r)))?;
    }
    Ok(cm)
}

/// Evaluates the target rows of `ds`.
pub fn evaluate(
    net: &Networks,
    params: &ParamStore,
    ds: &FeatureDataset,
    ls: &LabelSpaceConfig,
) -> Result<MetricsReport> {
    net.check_params(params)?;
    if ds.d_in() != net.config.d_in {
        return Err(Error::dim(
            "evaluate",
            format!("dataset has {} features, model expects {}", ds.d_in(), net.config.d_in),
        ));
    }
    let split = DomainSplit::new(ds, ls)?;
    evaluate_split(net, params, &split, ls)
}

pub fn evaluate_split(
    net: &Networks,
    params: &ParamStore,
    split: &DomainSplit,
    ls: &LabelSpaceConfig,
) -> Result<MetricsReport> {
    let cm = confusion(net, params, &split.target_x, &split.target_y, ls)?;
    Ok(MetricsReport::from_confusion(&cm))
}

/// One line of a report CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: Variant,
    pub task_id: String,
    pub seed: u64,
    #[serde(rename = "OS")]
    pub os: f64,
    #[serde(rename = "OS_star")]
    pub os_star: f64,
    pub unknown_acc: f64,
    pub neg_transfer_delta: Option<f64>,
    pub iterations: usize,
    pub wall_seconds: f64,
}

pub const REPORT_COLUMNS: [&str; 9] = [
    "variant",
    "task_id",
    "seed",
    "OS",
    "OS_star",
    "unknown_acc",
    "neg_transfer_delta",
    "iterations",
    "wall_seconds",
];

/// 17 significant digits.
fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `path` as CSV and a sibling `.txt` aligned table.
pub fn emit_report(rows: &[ReportRow], path: &Path) -> Result<()> {
    let mut csv = REPORT_COLUMNS.join(",") + "\n";
    for r in rows {
        let fields = [
            r.variant.name().to_string(),
            r.task_id.clone(),
            r.seed.to_string(),
            num(r.os),
            num(r.os_star),
            num(r.unknown_acc),
            r.neg_transfer_delta.map(num).unwrap_or_default(),
            r.iterations.to_string(),
            num(r.wall_seconds),
        ];
        csv += &fields.join(",");
        csv.push('\n');
    }
    fs::write(path, csv).map_err(|e| Error::io(path, e))?;

    let header = ["variant", "task_id", "seed", "OS", "OS*", "unknown", "delta_OS", "iters", "secs"];
    let body: Vec<[String; 9]> = rows
        .iter()
        .map(|r| {
            [
                r.variant.name().to_string(),
                r.task_id.clone(),
                r.seed.to_string(),
                format!("{:.2}", 100.0 * r.os),
                format!("{:.2}", 100.0 * r.os_star),
                format!("{:.2}", 100.0 * r.unknown_acc),
                r.neg_transfer_delta.map_or("-".into(), |d| format!("{:+.2}", 100.0 * d)),
                r.iterations.to_string(),
                format!("{:.1}", r.wall_seconds),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut text = String::new();
    let line = |cells: Vec<&str>, text: &mut String| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        let _ = writeln!(text, "{}", padded.join("  ").trim_end());
    };
    line(header.to_vec(), &mut text);
    for row in &body {
        line(row.iter().map(String::as_str).collect(), &mut text);
    }
    let txt = path.with_extension("txt");
    fs::write(&txt, text).map_err(|e| Error::io(txt, e))
}

/// Parses a report CSV written by [`emit_report`].
pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: e.to_string(),
    })?;
    rdr.deserialize()
        .map(|r| {
            r.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: e.position().map_or(0, |p| p.line()),
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Writes weight traces as `iter,group,mean_d1,mean_d2,mean_w`.
pub fn write_trace_csv(rows: &[WeightTraceRow], path: &Path) -> Result<()> {
    let mut out = String::from("iter,group,mean_d1,mean_d2,mean_w\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.iter,
            r.group.as_str(),
            num(r.mean_d1),
            num(r.mean_d2),
            num(r.mean_w)
        );
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Final-iteration gap `mean W(known) - mean W(unknown)`.
pub fn weight_gap(trace: &[WeightTraceRow]) -> Option<f64> {
    let last = trace.iter().map(|r| r.iter).max()?;
    let at = |g| trace.iter().find(|r| r.iter == last && r.group == g).map(|r| r.mean_w);
    Some(at(TraceGroup::Known)? - at(TraceGroup::Unknown)?)
}

/// One trained-and-evaluated run.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub row: ReportRow,
    pub report: MetricsReport,
    pub trace: Vec<WeightTraceRow>,
}

/// Trains each variant (plus a source-only reference) on one task with the
/// same training seed and evaluates on its target rows.
pub fn run_task(
    ds: &FeatureDataset,
    ls: &LabelSpaceConfig,
    task_id: &str,
    variants: &[Variant],
    cfg: &TrainConfig,
    record_time: bool,
) -> Result<Vec<CellResult>> {
    let split = DomainSplit::new(ds, ls)?;
    let run = |variant: Variant| -> Result<(TrainOutcome, MetricsReport, f64)> {
        let c = TrainConfig { variant, ..cfg.clone() };
        let start = Instant::now();
        let out = train_split(&split, ls.n_known(), &c, &StepHooks::default())?;
        let report = evaluate_split(&out.networks, &out.params, &split, ls)?;
        let secs = if record_time { start.elapsed().as_secs_f64() } else { 0.0 };
        Ok((out, report, secs))
    };
    let reference_run = run(Variant::SourceOnly)?;
    let reference = reference_run.1.clone();
    let mut reference_run = Some(reference_run);
    let mut cells = Vec::with_capacity(variants.len());
    for &v in variants {
        let (out, mut report, secs) = match (v, reference_run.take()) {
            (Variant::SourceOnly, Some(done)) => done,
            (_, pending) => {
                reference_run = pending;
                run(v)?
            }
        };
        report.neg_transfer_delta = Some(negative_transfer_delta(&report, &reference));
        cells.push(CellResult {
            row: ReportRow {
                variant: v,
                task_id: task_id.to_string(),
                seed: cfg.seed,
                os: report.os,
                os_star: report.os_star,
                unknown_acc: report.unknown_acc,
                neg_transfer_delta: report.neg_transfer_delta,
                iterations: cfg.max_iterations,
                wall_seconds: secs,
            },
            trace: out.trace(),
            report,
        });
    }
    Ok(cells)
}

/// Standard synthetic open-set task: 4 shared and 4 target-private classes,
/// 100 samples per class, moderate shift.
pub fn benchmark_task(seed: u64) -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        seed,
        ..SyntheticTaskSpec::default()
    }
}

/// Training settings used for the synthetic benchmark. Batch norm is enabled
/// in the generator; without it the adversarial game saturates `P(unknown)` at
/// the log clamp and no variant ever predicts "unknown".
pub fn benchmark_train_config(variant: Variant, seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 5e-4,
        batch_norm: true,
        max_iterations: 2000,
        seed,
        ..TrainConfig::new(variant)
    }
}

/// Which task dimension an openness sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    TargetPrivateCount,
    SharedCount,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::TargetPrivateCount => "target_private_count",
            SweepAxis::SharedCount => "shared_count",
        }
    }

    fn apply(self, base: &SyntheticTaskSpec, value: usize) -> SyntheticTaskSpec {
        let mut spec = base.clone();
        match self {
            SweepAxis::TargetPrivateCount => spec.n_target_private = value,
            SweepAxis::SharedCount => spec.n_shared = value,
        }
        spec
    }
}

fn default_repeats() -> usize {
    1
}

/// Openness sweep: every value of `axis` × every repeat × every variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base_task: SyntheticTaskSpec,
    pub axis: SweepAxis,
    pub values: Vec<usize>,
    pub variants: Vec<Variant>,
    pub train: TrainConfig,
    /// Independent task/initialization draws per value.
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    /// Root seed; each cell derives its own task and training seed from it.
    #[serde(default)]
    pub seed: u64,
}

/// Seed of repeat `repeat` at sweep value position `value_index`.
pub fn cell_seed(root: u64, value_index: usize, repeat: usize) -> u64 {
    derive_seed(derive_seed(root, value_index as u64), repeat as u64)
}

/// Runs an openness sweep with up to `jobs` cells in parallel. Rows come back
/// sorted by variant, then sweep value, then repeat.
pub fn sweep_openness(sweep: &SweepConfig, jobs: usize, record_time: bool) -> Result<Vec<CellResult>> {
    if sweep.values.is_empty() || sweep.variants.is_empty() || sweep.repeats == 0 {
        return Err(Error::Config("sweep needs values, variants and repeats >= 1".into()));
    }
    sweep.train.validate()?;
    let cells: Vec<(usize, usize)> = (0..sweep.values.len())
        .flat_map(|v| (0..sweep.repeats).map(move |r| (v, r)))
        .collect();
    let run_cell = |&(vi, rep): &(usize, usize)| -> Result<Vec<(usize, usize, CellResult)>> {
        let seed = cell_seed(sweep.seed, vi, rep);
        let value = sweep.values[vi];
        let task = SyntheticTaskSpec {
            seed,
            ..sweep.axis.apply(&sweep.base_task, value)
        };
        let (ds, ls) = generate_synthetic_task(&task)?;
        ls.validate()?;
        let cfg = TrainConfig { seed, ..sweep.train.clone() };
        let task_id = format!("{}={}", sweep.axis.name(), value);
        let results = run_task(&ds, &ls, &task_id, &sweep.variants, &cfg, record_time)?;
        Ok(results.into_iter().map(|c| (vi, rep, c)).collect())
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let nested: Vec<Vec<(usize, usize, CellResult)>> =
        pool.install(|| cells.par_iter().map(run_cell).collect::<Result<_>>())?;
    let mut flat: Vec<(usize, usize, CellResult)> = nested.into_iter().flatten().collect();
    flat.sort_by_key(|(vi, rep, c)| (c.row.variant, *vi, *rep));
    Ok(flat.into_iter().map(|(_, _, c)| c).collect())
}
