//! Central finite-difference checks for every differentiable tape operation,
//! every composite loss and the three networks.
//!
//! Each check draws seeded random inputs away from kinks and clamps, projects
//! non-scalar outputs onto a random direction, and compares the reverse-mode
//! gradient of every input element with `(f(x + h) - f(x - h)) / 2h`.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::diffcore::rng::{derive_seed, stream, Rng, Stream};
use crate::diffcore::{Group, Tape, TensorValue, Var};
use crate::error::{Error, Result};
use crate::losses;
use crate::model::{Activation, Mode, ModelConfig, Networks, Session};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-6;
/// Below this magnitude the absolute tolerance applies.
pub const SMALL_GRAD: f64 = 1e-3;
pub const DEFAULT_TRIALS: usize = 100;

const LOSS_EPS: f64 = 1e-7;
/// Factor applied to the analytic gradient of a check selected for corruption.
const CORRUPTION: f64 = 1.01;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub trials: usize,
    pub elements: usize,
    /// Largest relative error over elements with `|grad| >= SMALL_GRAD`.
    pub max_rel_err: f64,
    /// Largest absolute error over elements with `|grad| < SMALL_GRAD`.
    pub max_abs_err: f64,
    pub failures: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect()
    }

    /// One aligned line per check plus a summary line.
    pub fn render(&self) -> String {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        let mut out = String::new();
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{:<width$}  {}  trials={:<4} elements={:<6} max_rel_err={:.3e} max_abs_err={:.3e}",
                c.name,
                if c.passed() { "ok  " } else { "FAIL" },
                c.trials,
                c.elements,
                c.max_rel_err,
                c.max_abs_err,
            );
        }
        let failing = self.failing();
        let _ = writeln!(
            out,
            "{} of {} checks passed in {:.2}s (seed {})",
            self.checks.len() - failing.len(),
            self.checks.len(),
            self.seconds,
            self.seed
        );
        if !failing.is_empty() {
            let _ = writeln!(out, "failing: {}", failing.join(", "));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub seed: u64,
    pub trials: usize,
    /// Name of a check whose analytic gradient is deliberately scaled, to
    /// exercise failure reporting.
    pub corrupt: Option<String>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seed: 0,
            trials: DEFAULT_TRIALS,
            corrupt: None,
        }
    }
}

/// Inputs of one trial. `scalar` is a free parameter (e.g. the reversal
/// strength) and `fd_scale` relates the finite difference to the expected
/// analytic gradient.
struct Trial {
    inputs: Vec<TensorValue>,
    scalar: f64,
    fd_scale: f64,
}

impl Trial {
    fn plain(inputs: Vec<TensorValue>) -> Self {
        Trial {
            inputs,
            scalar: 0.0,
            fd_scale: 1.0,
        }
    }
}

/// Builds a tape from the trial inputs, returning it with the output node and
/// the node of each input.
type Forward = Box<dyn Fn(&[TensorValue], f64) -> Result<(Tape, Var, Vec<Var>)>>;

struct Case {
    name: &'static str,
    sample: Box<dyn Fn(&mut Rng) -> Trial>,
    forward: Forward,
}

fn normal(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

fn uniform(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Magnitudes in `[0.1, 2)` with random sign, away from the ReLU kink.
fn off_kink(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..2.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect()
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> TensorValue {
    TensorValue::matrix(rows, cols, data).expect("shape matches")
}

fn labels(rng: &mut Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

/// A case whose inputs all become tape leaves.
fn simple(
    name: &'static str,
    sample: impl Fn(&mut Rng) -> Trial + 'static,
    build: impl Fn(&mut Tape, &[Var], f64) -> Result<Var> + 'static,
) -> Case {
    Case {
        name,
        sample: Box::new(sample),
        forward: Box::new(move |inputs, scalar| {
            let mut tape = Tape::new();
            let leaves = inputs
                .iter()
                .map(|v| tape.leaf(v.clone()))
                .collect::<Result<Vec<_>>>()?;
            let out = build(&mut tape, &leaves, scalar)?;
            Ok((tape, out, leaves))
        }),
    }
}

fn op_cases() -> Vec<Case> {
    vec![
        simple(
            "affine",
            |r| Trial::plain(vec![mat(3, 4, normal(r, 12, 1.0)), mat(4, 5, normal(r, 20, 1.0)), TensorValue::vector(normal(r, 5, 1.0))]),
            |t, v, _| t.affine(v[0], v[1], v[2]),
        ),
        simple("relu", |r| Trial::plain(vec![mat(3, 4, off_kink(r, 12))]), |t, v, _| t.relu(v[0])),
        simple("tanh", |r| Trial::plain(vec![mat(3, 4, normal(r, 12, 1.5))]), |t, v, _| t.tanh(v[0])),
        simple("softmax", |r| Trial::plain(vec![mat(3, 5, normal(r, 15, 2.0))]), |t, v, _| t.softmax(v[0])),
        simple(
            "leaky_softmax",
            |r| Trial::plain(vec![mat(3, 4, uniform(r, 12, -5.0, 5.0))]),
            |t, v, _| t.leaky_softmax(v[0]),
        ),
        simple(
            "grad_reverse",
            |r| {
                let lambda = r.random_range(0.1..2.0);
                Trial {
                    inputs: vec![mat(3, 4, normal(r, 12, 1.0))],
                    scalar: lambda,
                    fd_scale: -lambda,
                }
            },
            |t, v, lambda| {
                let y = t.grad_reverse(v[0], lambda)?;
                t.tanh(y)
            },
        ),
        simple(
            "safe_log",
            |r| Trial::plain(vec![mat(3, 4, uniform(r, 12, 0.01, 0.99))]),
            |t, v, _| t.safe_log(v[0], LOSS_EPS),
        ),
        simple(
            "gather",
            |r| {
                let mut tr = Trial::plain(vec![mat(4, 5, normal(r, 20, 1.0))]);
                tr.scalar = r.random_range(0..1u32 << 30) as f64;
                tr
            },
            |t, v, s| {
                let mut r = stream(s as u64, Stream::Derive);
                t.gather(v[0], &labels(&mut r, 4, 5))
            },
        ),
        simple("column", |r| Trial::plain(vec![mat(4, 3, normal(r, 12, 1.0))]), |t, v, _| t.column(v[0], 2)),
        simple("row_sum", |r| Trial::plain(vec![mat(4, 3, normal(r, 12, 1.0))]), |t, v, _| t.row_sum(v[0])),
        simple(
            "add",
            |r| Trial::plain(vec![mat(3, 3, normal(r, 9, 1.0)), mat(3, 3, normal(r, 9, 1.0))]),
            |t, v, _| t.add(v[0], v[1]),
        ),
        simple(
            "mul",
            |r| Trial::plain(vec![mat(3, 3, normal(r, 9, 1.0)), mat(3, 3, normal(r, 9, 1.0))]),
            |t, v, _| t.mul(v[0], v[1]),
        ),
        simple(
            "scale_shift",
            |r| {
                let mut tr = Trial::plain(vec![TensorValue::vector(normal(r, 6, 1.0))]);
                tr.scalar = r.random_range(-3.0..3.0);
                tr
            },
            |t, v, s| t.scale_shift(v[0], s, 0.7),
        ),
        simple("mean", |r| Trial::plain(vec![mat(3, 4, normal(r, 12, 1.0))]), |t, v, _| t.mean(v[0])),
        simple(
            "batch_norm",
            |r| {
                Trial::plain(vec![
                    mat(6, 3, normal(r, 18, 1.5)),
                    TensorValue::vector(uniform(r, 3, 0.5, 1.5)),
                    TensorValue::vector(normal(r, 3, 0.5)),
                ])
            },
            |t, v, _| Ok(t.batch_norm(v[0], v[1], v[2], 1e-5)?.0),
        ),
    ]
}

fn loss_cases() -> Vec<Case> {
    vec![
        simple(
            "loss_source_ce",
            |r| {
                let mut tr = Trial::plain(vec![mat(5, 4, normal(r, 20, 1.0))]);
                tr.scalar = r.random_range(0..1u32 << 30) as f64;
                tr
            },
            |t, v, s| {
                // Probabilities from a softmax over 3 known classes + unknown.
                let p = t.softmax(v[0])?;
                let mut r = stream(s as u64, Stream::Derive);
                losses::loss_source_ce(t, p, &labels(&mut r, 5, 3), LOSS_EPS)
            },
        ),
        simple(
            "loss_adv_fixed_t",
            |r| {
                let mut tr = Trial::plain(vec![TensorValue::vector(uniform(r, 6, 0.02, 0.98))]);
                tr.scalar = r.random_range(0.0..1.0);
                tr
            },
            |t, v, s| losses::loss_adv_fixed_t(t, v[0], s, LOSS_EPS),
        ),
        simple(
            "loss_adv_weighted",
            |r| {
                let mut tr = Trial::plain(vec![TensorValue::vector(uniform(r, 6, 0.02, 0.98))]);
                tr.scalar = r.random_range(0..1u32 << 30) as f64;
                tr
            },
            |t, v, s| {
                let mut r = stream(s as u64, Stream::Derive);
                let w = uniform(&mut r, 6, 0.0, 1.0);
                losses::loss_adv_weighted(t, v[0], &w, LOSS_EPS)
            },
        ),
        simple(
            "loss_supplementary_ovr",
            |r| {
                let mut tr = Trial::plain(vec![mat(5, 3, uniform(r, 15, 0.02, 0.98))]);
                tr.scalar = r.random_range(0..1u32 << 30) as f64;
                tr
            },
            |t, v, s| {
                let mut r = stream(s as u64, Stream::Derive);
                losses::loss_supplementary_ovr(t, v[0], &labels(&mut r, 5, 3), LOSS_EPS)
            },
        ),
        simple(
            "loss_domain_disc",
            |r| {
                Trial::plain(vec![
                    TensorValue::vector(uniform(r, 5, 0.02, 0.98)),
                    TensorValue::vector(uniform(r, 4, 0.02, 0.98)),
                ])
            },
            |t, v, _| losses::loss_domain_disc(t, v[0], v[1], LOSS_EPS),
        ),
    ]
}

#[derive(Clone, Copy)]
enum Head {
    Generator,
    DomainClassifier,
    Supplementary,
}

/// Gradient of a network output with respect to its own parameters and the
/// inputs (or features) fed to it. Tanh keeps the generator smooth.
fn network_case(name: &'static str, head: Head, batch_norm: bool) -> Case {
    let config = ModelConfig {
        d_in: 3,
        hidden: 5,
        feature_dim: 4,
        n_known: 3,
        activation: Activation::Tanh,
        batch_norm,
    };
    let net = Networks::new(config).expect("valid config");
    let template = net.init(0).expect("init");
    let (group, prefix) = match head {
        Head::Generator => (Group::Generator, "gf."),
        Head::DomainClassifier => (Group::DomainClassifier, "gc1."),
        Head::Supplementary => (Group::Supplementary, "gc2."),
    };
    let names: Vec<String> = template.in_group(group).map(|p| p.name.clone()).collect();
    debug_assert!(names.iter().all(|n| n.starts_with(prefix)));
    let in_dim = match head {
        Head::Generator => 3,
        _ => 4,
    };
    let shapes: Vec<Vec<usize>> = names
        .iter()
        .map(|n| template.value(n).expect("present").shape().to_vec())
        .collect();
    let sample_net = net.clone();
    let sample_names = names.clone();
    Case {
        name,
        sample: Box::new(move |r| {
            let seed = r.random();
            let init = sample_net.init(seed).expect("init");
            let mut inputs = vec![mat(6, in_dim, normal(r, 6 * in_dim, 1.0))];
            for (n, shape) in sample_names.iter().zip(&shapes) {
                let mut v = init.value(n).expect("present").clone();
                // Non-trivial biases and batch-norm affines.
                if shape.len() == 1 {
                    for (x, d) in v.data_mut().iter_mut().zip(normal(r, shape[0], 0.3)) {
                        *x += d;
                    }
                }
                inputs.push(v);
            }
            Trial::plain(inputs)
        }),
        forward: Box::new(move |inputs, _| {
            let mut store = template.clone();
            for (n, v) in names.iter().zip(&inputs[1..]) {
                store.get_mut(n).expect("present").value = v.clone();
            }
            let mut s = Session::new(&store, Mode::Train)?;
            let x = s.tape.leaf(inputs[0].clone())?;
            let out = match head {
                Head::Generator => net.gf_forward(&mut s, x)?,
                Head::DomainClassifier => net.gc1_forward(&mut s, x)?,
                Head::Supplementary => net.gc2_forward(&mut s, x)?,
            };
            let mut leaves = vec![x];
            for n in &names {
                leaves.push(s.bound.var(n)?);
            }
            Ok((s.tape, out, leaves))
        }),
    }
}

fn all_cases() -> Vec<Case> {
    let mut cases = op_cases();
    cases.extend(loss_cases());
    cases.push(network_case("gf", Head::Generator, false));
    cases.push(network_case("gf_batch_norm", Head::Generator, true));
    cases.push(network_case("gc1", Head::DomainClassifier, false));
    cases.push(network_case("gc2", Head::Supplementary, false));
    cases
}

/// Names of every check in suite order.
pub fn check_names() -> Vec<&'static str> {
    all_cases().iter().map(|c| c.name).collect()
}

/// Scalar objective: the output itself, or its mean against fixed random
/// coefficients.
fn objective(tape: &mut Tape, out: Var, coeffs: Option<&TensorValue>) -> Result<Var> {
    match coeffs {
        None => Ok(out),
        Some(c) => {
            let c = tape.constant(c.clone())?;
            let prod = tape.mul(out, c)?;
            tape.mean(prod)
        }
    }
}

fn evaluate(case: &Case, inputs: &[TensorValue], scalar: f64, coeffs: Option<&TensorValue>) -> Result<f64> {
    let (mut tape, out, _) = (case.forward)(inputs, scalar)?;
    let obj = objective(&mut tape, out, coeffs)?;
    Ok(tape.value(obj).item())
}

fn run_case(case: &Case, seed: u64, trials: usize, corrupt: bool) -> Result<CheckResult> {
    let mut rng = stream(seed, Stream::Data);
    let mut res = CheckResult {
        name: case.name.to_string(),
        trials,
        elements: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        failures: 0,
    };
    for _ in 0..trials {
        let trial = (case.sample)(&mut rng);
        let (mut tape, out, leaves) = (case.forward)(&trial.inputs, trial.scalar)?;
        let out_value = tape.value(out);
        let coeffs = (!out_value.is_scalar()).then(|| {
            let n = out_value.len();
            TensorValue::new(out_value.shape().to_vec(), normal(&mut rng, n, 1.0)).expect("shape matches")
        });
        let obj = objective(&mut tape, out, coeffs.as_ref())?;
        let grads = tape.backward(obj)?;
        for (i, (&leaf, input)) in leaves.iter().zip(&trial.inputs).enumerate() {
            let analytic = grads.get_or_zero(leaf, input);
            for j in 0..input.len() {
                let mut perturbed = trial.inputs.clone();
                perturbed[i].data_mut()[j] += FD_STEP;
                let up = evaluate(case, &perturbed, trial.scalar, coeffs.as_ref())?;
                perturbed[i].data_mut()[j] -= 2.0 * FD_STEP;
                let down = evaluate(case, &perturbed, trial.scalar, coeffs.as_ref())?;
                let expected = trial.fd_scale * (up - down) / (2.0 * FD_STEP);
                let mut got = analytic.data()[j];
                if corrupt {
                    got = got * CORRUPTION + 1e-4;
                }
                let diff = (got - expected).abs();
                let scale = got.abs().max(expected.abs());
                res.elements += 1;
                let ok = if scale < SMALL_GRAD {
                    res.max_abs_err = res.max_abs_err.max(diff);
                    diff <= ABS_TOL
                } else {
                    let rel = diff / scale;
                    res.max_rel_err = res.max_rel_err.max(rel);
                    rel <= REL_TOL
                };
                if !ok {
                    res.failures += 1;
                }
            }
        }
    }
    Ok(res)
}

/// Runs every check with `opts.trials` seeded inputs each.
pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    let cases = all_cases();
    if let Some(c) = &opts.corrupt {
        if !cases.iter().any(|k| k.name == c) {
            return Err(Error::Config(format!("unknown gradient check `{c}`")));
        }
    }
    if opts.trials == 0 {
        return Err(Error::Config("gradient checks need at least one trial".into()));
    }
    let start = Instant::now();
    let checks = cases
        .iter()
        .enumerate()
        .map(|(i, case)| {
            let corrupt = opts.corrupt.as_deref() == Some(case.name);
            run_case(case, derive_seed(opts.seed, i as u64), opts.trials, corrupt)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SuiteReport {
        seed: opts.seed,
        checks,
        seconds: start.elapsed().as_secs_f64(),
    })
}
