//! Acceptance suite. Runs every release criterion in order and prints one
//! PASS/FAIL line per criterion; exits non-zero if any criterion fails.

use std::fs;
use std::process::ExitCode;
use std::time::Instant;

use osda::data::{generate_synthetic_task, DomainSplit};
use osda::diffcore::{Group, ParamStore, Tape, TensorValue};
use osda::eval::{
    benchmark_task, benchmark_train_config, emit_report, evaluate_split, negative_transfer_delta, run_task,
    weight_gap, ConfusionMatrix, MetricsReport, ReportRow,
};
use osda::gradcheck::{run_suite, SuiteOptions};
use osda::losses::{
    loss_adv_fixed_t, loss_adv_weighted, loss_domain_disc, loss_source_ce, loss_supplementary_ovr, DEFAULT_EPS,
};
use osda::train::{train_split, StepHooks, TrainConfig, Variant};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const EQUIVALENCE_ITERATIONS: usize = 200;
const RUN_BUDGET_SECONDS: f64 = 120.0;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Outcome {
            passed,
            detail: detail.into(),
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Report rows and metric reports produced by criteria 2 to 4.
#[derive(Default)]
struct Runs {
    rows: Vec<ReportRow>,
    reports: Vec<MetricsReport>,
    benchmark: Vec<(Variant, f64, f64)>,
    run_seconds: f64,
}

fn main_groups(store: &ParamStore) -> Vec<(String, TensorValue)> {
    store
        .iter()
        .filter(|p| matches!(p.group, Group::Generator | Group::DomainClassifier))
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect()
}

fn row(variant: Variant, task_id: &str, seed: u64, report: &MetricsReport, iterations: usize) -> ReportRow {
    ReportRow {
        variant,
        task_id: task_id.into(),
        seed,
        os: report.os,
        os_star: report.os_star,
        unknown_acc: report.unknown_acc,
        neg_transfer_delta: report.neg_transfer_delta,
        iterations,
        wall_seconds: 0.0,
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let report = match run_suite(&SuiteOptions::default()) {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, e.to_string()),
    };
    let secs = start.elapsed().as_secs_f64();
    let worst = report.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let failing = report.failing();
    Outcome::new(
        report.passed() && secs < 30.0,
        format!(
            "{} checks x {} trials, worst rel err {worst:.2e}, {secs:.1}s, failing {failing:?}",
            report.checks.len(),
            report.checks.iter().map(|c| c.trials).min().unwrap_or(0),
        ),
    )
}

fn osbp_equivalence(runs: &mut Runs) -> Outcome {
    let seed = SEEDS[0];
    let (ds, ls) = generate_synthetic_task(&benchmark_task(seed)).unwrap();
    let split = DomainSplit::new(&ds, &ls).unwrap();
    let cfg = TrainConfig {
        max_iterations: EQUIVALENCE_ITERATIONS,
        ..benchmark_train_config(Variant::Proposed, seed)
    };
    let osbp_cfg = TrainConfig {
        variant: Variant::Osbp,
        fixed_t: 0.5,
        ..cfg.clone()
    };
    let stub = StepHooks {
        weight_override: Some(0.5),
        ..StepHooks::default()
    };
    let proposed = train_split(&split, ls.n_known(), &cfg, &stub).unwrap();
    let osbp = train_split(&split, ls.n_known(), &osbp_cfg, &StepHooks::default()).unwrap();

    let params_equal = main_groups(&proposed.params) == main_groups(&osbp.params);
    let losses_equal = proposed.history.len() == osbp.history.len()
        && proposed.history.iter().zip(&osbp.history).all(|(a, b)| {
            a.losses.e_gc1.to_bits() == b.losses.e_gc1.to_bits() && a.losses.e_adv.to_bits() == b.losses.e_adv.to_bits()
        });

    for (variant, out) in [(Variant::Proposed, &proposed), (Variant::Osbp, &osbp)] {
        let report = evaluate_split(&out.networks, &out.params, &split, &ls).unwrap();
        runs.rows.push(row(variant, "equivalence", seed, &report, EQUIVALENCE_ITERATIONS));
        runs.reports.push(report);
    }
    Outcome::new(
        params_equal && losses_equal,
        format!(
            "{EQUIVALENCE_ITERATIONS} iterations, generator+classifier bitwise equal: {params_equal}, losses bitwise equal: {losses_equal}"
        ),
    )
}

fn benchmark(runs: &mut Runs) -> Outcome {
    let mut gaps = Vec::new();
    for seed in SEEDS {
        let (ds, ls) = generate_synthetic_task(&benchmark_task(seed)).unwrap();
        let cfg = benchmark_train_config(Variant::Proposed, seed);
        let start = Instant::now();
        let cells = run_task(&ds, &ls, "benchmark", &Variant::ALL, &cfg, false).unwrap();
        // One reference run plus one run per non-reference variant.
        let per_run = start.elapsed().as_secs_f64() / Variant::ALL.len() as f64;
        runs.run_seconds = runs.run_seconds.max(per_run);
        for c in cells {
            if c.row.variant == Variant::Proposed {
                gaps.push(weight_gap(&c.trace).unwrap_or(f64::NAN));
            }
            runs.benchmark.push((c.row.variant, c.report.os, c.report.unknown_acc));
            runs.rows.push(c.row);
            runs.reports.push(c.report);
        }
    }
    let med = |v: Variant| median(runs.benchmark.iter().filter(|r| r.0 == v).map(|r| r.1).collect());
    let (p, so, osbp) = (med(Variant::Proposed), med(Variant::SourceOnly), med(Variant::Osbp));
    let gap = median(gaps);
    let checks = [p >= so, p >= osbp, gap >= 0.2, runs.run_seconds < RUN_BUDGET_SECONDS];
    Outcome::new(
        checks.iter().all(|&c| c),
        format!(
            "median OS proposed {p:.4} vs source_only {so:.4} [{}], vs osbp {osbp:.4} [{}]; W gap {gap:.4} >= 0.2 [{}]; {:.1}s per run [{}]",
            mark(checks[0]),
            mark(checks[1]),
            mark(checks[2]),
            runs.run_seconds,
            mark(checks[3]),
        ),
    )
}

fn mark(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAIL"
    }
}

fn ablation(runs: &Runs) -> Outcome {
    let med = |v: Variant| median(runs.benchmark.iter().filter(|r| r.0 == v).map(|r| r.1).collect());
    let (p, d1, d2) = (med(Variant::Proposed), med(Variant::WoD1), med(Variant::WoD2));
    Outcome::new(
        p >= d1 && p >= d2,
        format!("median OS proposed {p:.4}, wo_d1 {d1:.4}, wo_d2 {d2:.4}"),
    )
}

fn confusion_from(per_class: &[(usize, usize)]) -> ConfusionMatrix {
    // (correct, total) per class, unknown last; misses land in the next column.
    let n_known = per_class.len() - 1;
    let mut cm = ConfusionMatrix::new((0..n_known).collect(), n_known);
    for (class, &(correct, total)) in per_class.iter().enumerate() {
        for i in 0..total {
            let predicted = if i < correct { class } else { (class + 1) % (n_known + 1) };
            cm.record(class, predicted).unwrap();
        }
    }
    cm
}

fn metric_identities(runs: &Runs) -> Outcome {
    let mut failures = Vec::new();
    let examples: [(&str, ConfusionMatrix, f64, f64); 3] = [
        ("mixed recalls", confusion_from(&[(4, 4), (2, 4), (3, 4), (1, 4)]), 0.625, 0.75),
        ("unknowns missed", confusion_from(&[(5, 5), (5, 5), (5, 5), (0, 5)]), 0.75, 1.0),
        ("all unknown", {
            let mut cm = ConfusionMatrix::new(vec![0, 1, 2], 3);
            for class in 0..4 {
                cm.record(class, 3).unwrap();
            }
            cm
        }, 0.25, 0.0),
    ];
    for (name, cm, os, os_star) in examples {
        let r = MetricsReport::from_confusion(&cm);
        if r.os != os || r.os_star != os_star {
            failures.push(format!("{name}: OS {} OS* {}", r.os, r.os_star));
        }
    }
    let report_with = |os: f64| MetricsReport {
        per_class: vec![],
        os,
        os_star: 0.0,
        unknown_acc: 0.0,
        neg_transfer_delta: None,
        n_evaluated: 0,
    };
    for (a, b, want) in [(0.70, 0.65, 0.05), (0.60, 0.65, -0.05), (0.65, 0.65, 0.0)] {
        let got = negative_transfer_delta(&report_with(a), &report_with(b));
        if (got - want).abs() > 1e-12 {
            failures.push(format!("delta {a} vs {b} = {got}"));
        }
    }

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for r in &runs.reports {
        match r.identity_residual() {
            Some(res) => {
                worst = worst.max(res);
                checked += 1;
            }
            None => failures.push("report with an absent class".into()),
        }
    }
    if worst > 1e-12 {
        failures.push(format!("identity residual {worst:.2e}"));
    }
    Outcome::new(
        failures.is_empty(),
        format!("6 examples, identity on {checked} reports (max residual {worst:.1e}) {failures:?}"),
    )
}

fn closed_form_losses() -> Outcome {
    let eps = DEFAULT_EPS;
    let ln = f64::ln;
    let clamp_top = -ln(1.0 - eps);
    let vector = |t: &mut Tape, v: &[f64]| t.constant(TensorValue::vector(v.to_vec())).unwrap();
    let rows = |t: &mut Tape, r: &[&[f64]]| t.constant(TensorValue::from_rows(r).unwrap()).unwrap();

    type Case = (&'static str, Box<dyn Fn(&mut Tape) -> osda::diffcore::Var>, f64);
    let cases: Vec<Case> = vec![
        ("ce p=1", Box::new(move |t| { let p = rows(t, &[&[1.0, 0.0]]); loss_source_ce(t, p, &[0], eps).unwrap() }), clamp_top),
        ("ce p=0.25", Box::new(move |t| { let p = rows(t, &[&[0.25, 0.75]]); loss_source_ce(t, p, &[0], eps).unwrap() }), ln(4.0)),
        ("ce two samples", Box::new(move |t| {
            let p = rows(t, &[&[0.5, 0.5], &[0.25, 0.75]]);
            loss_source_ce(t, p, &[0, 0], eps).unwrap()
        }), (ln(2.0) + ln(4.0)) / 2.0),
        ("adv w=0.5 p=0.5", Box::new(move |t| { let p = vector(t, &[0.5]); loss_adv_weighted(t, p, &[0.5], eps).unwrap() }), ln(2.0)),
        ("adv w=1 p=0.9", Box::new(move |t| { let p = vector(t, &[0.9]); loss_adv_weighted(t, p, &[1.0], eps).unwrap() }), -ln(0.9)),
        ("adv w=0 p=0.1", Box::new(move |t| { let p = vector(t, &[0.1]); loss_adv_weighted(t, p, &[0.0], eps).unwrap() }), -ln(0.9)),
        ("fixed t=0.5 p=0.5", Box::new(move |t| { let p = vector(t, &[0.5]); loss_adv_fixed_t(t, p, 0.5, eps).unwrap() }), ln(2.0)),
        ("fixed t=0.5 p=0.9", Box::new(move |t| { let p = vector(t, &[0.9]); loss_adv_fixed_t(t, p, 0.5, eps).unwrap() }), -(0.5 * ln(0.9) + 0.5 * ln(0.1))),
        ("ovr K=2", Box::new(move |t| { let p = rows(t, &[&[0.25, 0.25]]); loss_supplementary_ovr(t, p, &[0], eps).unwrap() }), ln(4.0) - ln(0.75)),
        ("ovr K=1", Box::new(move |t| { let p = rows(t, &[&[0.5]]); loss_supplementary_ovr(t, p, &[0], eps).unwrap() }), ln(2.0)),
        ("ovr K=10", Box::new(move |t| { let p = rows(t, &[&[0.05; 10]]); loss_supplementary_ovr(t, p, &[0], eps).unwrap() }), ln(20.0) - 9.0 * ln(0.95)),
        ("disc 0.8/0.3", Box::new(move |t| { let s = vector(t, &[0.8]); let g = vector(t, &[0.3]); loss_domain_disc(t, s, g, eps).unwrap() }), -ln(0.8) - ln(0.7)),
        ("disc 0.5/0.5", Box::new(move |t| { let s = vector(t, &[0.5]); let g = vector(t, &[0.5]); loss_domain_disc(t, s, g, eps).unwrap() }), 2.0 * ln(2.0)),
        ("disc 1/0", Box::new(move |t| { let s = vector(t, &[1.0]); let g = vector(t, &[0.0]); loss_domain_disc(t, s, g, eps).unwrap() }), 2.0 * clamp_top),
    ];
    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;
    for (name, build, want) in &cases {
        let mut tape = Tape::new();
        let loss = build(&mut tape);
        let err = (tape.value(loss).item() - want).abs();
        worst = worst.max(err);
        if err > 1e-9 {
            failures.push(*name);
        }
    }

    // Constant weights of one half and the fixed threshold are the same loss.
    let batch = [0.03, 0.41, 0.5, 0.77, 0.999];
    let value = |fixed: bool| {
        let mut t = Tape::new();
        let p = vector(&mut t, &batch);
        let l = if fixed {
            loss_adv_fixed_t(&mut t, p, 0.5, eps).unwrap()
        } else {
            loss_adv_weighted(&mut t, p, &[0.5; 5], eps).unwrap()
        };
        t.value(l).item().to_bits()
    };
    if value(true) != value(false) {
        failures.push("fixed threshold vs constant weights");
    }
    Outcome::new(
        failures.is_empty(),
        format!("{} closed forms, max error {worst:.1e}, bitwise identity checked {failures:?}", cases.len()),
    )
}

fn report_csv(rows: &[ReportRow]) -> Vec<u8> {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.csv");
    emit_report(rows, &path).unwrap();
    fs::read(path).unwrap()
}

fn determinism(first: &Runs) -> Outcome {
    let mut again = Runs::default();
    let _ = osbp_equivalence(&mut again);
    let _ = benchmark(&mut again);
    let (a, b) = (report_csv(&first.rows), report_csv(&again.rows));
    Outcome::new(
        a == b,
        format!("{} report rows rerun, {} CSV bytes, identical: {}", first.rows.len(), a.len(), a == b),
    )
}

fn main() -> ExitCode {
    let mut runs = Runs::default();
    let mut all = true;
    let mut record = |n: usize, title: &str, o: Outcome| {
        println!(
            "acceptance {n} {} {title}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
        all &= o.passed;
    };

    record(1, "gradient suite", gradient_suite());
    record(2, "fixed-threshold equivalence", osbp_equivalence(&mut runs));
    record(3, "synthetic benchmark", benchmark(&mut runs));
    record(4, "ablation ordering", ablation(&runs));
    record(5, "metric identities", metric_identities(&runs));
    record(6, "closed-form losses", closed_form_losses());
    record(7, "determinism", determinism(&runs));

    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
