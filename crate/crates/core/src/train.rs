//! Joint training of the generator, domain classifier and supplementary
//! classifier, plus the fixed-threshold, source-only and ablation variants.
//!
//! One step builds a single tape and runs one backward pass. Gradient routing
//! comes from the graph itself:
//!
//! * the adversarial term reaches the generator through a gradient reversal
//!   node, so the generator ascends it while the domain classifier descends;
//! * the adversarial weights enter as plain numbers (stop-gradient);
//! * the supplementary classifier only ever sees detached features and a
//!   detached `d2`, so its losses update nothing but its own parameters.

use serde::{Deserialize, Serialize};

use crate::data::{BatchStream, DomainSplit, FeatureDataset, LabelSpaceConfig};
use crate::diffcore::{sgd_step, Group, ParamStore, TensorValue};
use crate::error::{Error, Result};
use crate::eval::{TraceGroup, WeightTraceRow};
use crate::losses::{
    loss_adv_weighted, loss_domain_disc, loss_source_ce, loss_supplementary_ovr, p_unknown,
};
use crate::model::{
    apply_norm_batches, compute_d1, compute_d2, compute_weight, Activation, Mode, ModelConfig,
    Networks, Session,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Adversarial weights `W = d1 * d2`.
    Proposed,
    /// Every target weight fixed to `fixed_t`.
    Osbp,
    /// Source cross-entropy only.
    SourceOnly,
    /// `W = d2`; the supplementary classifier is not used.
    WoD1,
    /// `W = d1`; the discrimination loss uses `d1` alone.
    WoD2,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Proposed,
        Variant::WoD1,
        Variant::WoD2,
        Variant::Osbp,
        Variant::SourceOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Proposed => "proposed",
            Variant::Osbp => "osbp",
            Variant::SourceOnly => "source_only",
            Variant::WoD1 => "wo_d1",
            Variant::WoD2 => "wo_d2",
        }
    }

    /// Whether the supplementary classifier is trained.
    pub fn trains_supplementary(self) -> bool {
        matches!(self, Variant::Proposed | Variant::WoD2)
    }

    fn groups(self) -> &'static [Group] {
        if self.trains_supplementary() {
            &Group::ALL
        } else {
            &[Group::Generator, Group::DomainClassifier]
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

mod defaults {
    pub fn lr() -> f64 {
        0.001
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn one() -> f64 {
        1.0
    }
    pub fn batch() -> usize {
        32
    }
    pub fn max_iterations() -> usize {
        2000
    }
    pub fn fixed_t() -> f64 {
        0.5
    }
    pub fn eps() -> f64 {
        crate::losses::DEFAULT_EPS
    }
    pub fn eval_every() -> usize {
        100
    }
    pub fn hidden() -> usize {
        64
    }
    pub fn feature_dim() -> usize {
        32
    }
}

/// Everything that determines a training run besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    /// Learning-rate factor for the classifier heads relative to the generator.
    #[serde(default = "defaults::one")]
    pub lr_multiplier: f64,
    #[serde(default = "defaults::batch")]
    pub batch_per_domain: usize,
    #[serde(default = "defaults::max_iterations")]
    pub max_iterations: usize,
    #[serde(default = "defaults::one")]
    pub grl_lambda: f64,
    /// Constant adversarial weight of the fixed-threshold variant.
    #[serde(default = "defaults::fixed_t")]
    pub fixed_t: f64,
    #[serde(default = "defaults::eps")]
    pub eps: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::eval_every")]
    pub eval_every: usize,
    #[serde(default = "defaults::hidden")]
    pub hidden: usize,
    #[serde(default = "defaults::feature_dim")]
    pub feature_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub batch_norm: bool,
}

impl TrainConfig {
    pub fn new(variant: Variant) -> Self {
        serde_json::from_value(serde_json::json!({ "variant": variant })).expect("defaults")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.lr_multiplier >= 0.0 && self.lr_multiplier.is_finite()) {
            return Err(Error::Config("lr_multiplier must be finite and >= 0".into()));
        }
        if !(self.grl_lambda >= 0.0 && self.grl_lambda.is_finite()) {
            return Err(Error::Config("grl_lambda must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.fixed_t) {
            return Err(Error::Config("fixed_t must lie in [0, 1]".into()));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(Error::Config("eps must lie in (0, 0.5)".into()));
        }
        if self.batch_per_domain == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_per_domain and eval_every must be at least 1".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, d_in: usize, n_known: usize) -> ModelConfig {
        ModelConfig {
            d_in,
            hidden: self.hidden,
            feature_dim: self.feature_dim,
            n_known,
            activation: self.activation,
            batch_norm: self.batch_norm,
        }
    }

    fn lr_for(&self, group: Group) -> f64 {
        match group {
            Group::Generator => self.lr,
            Group::DomainClassifier | Group::Supplementary => self.lr * self.lr_multiplier,
        }
    }
}

/// Loss values of one step. Terms a variant does not use are zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub e_gc1: f64,
    pub e_adv: f64,
    pub e_gc2: f64,
    pub e_d: f64,
}

/// Test and diagnostic switches for [`train_step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepHooks {
    /// Replace the weighting head's output with this constant.
    pub weight_override: Option<f64>,
    /// Which losses enter the backward pass: `[E_GC1, E_adv, E_GC2, E_D]`.
    pub include: [bool; 4],
}

impl Default for StepHooks {
    fn default() -> Self {
        StepHooks {
            weight_override: None,
            include: [true; 4],
        }
    }
}

/// One mini-batch: source rows with labels and unlabeled target rows.
#[derive(Debug, Clone)]
pub struct Batch {
    pub source_x: TensorValue,
    pub source_y: Vec<usize>,
    pub target_x: TensorValue,
}

impl Batch {
    pub fn gather(split: &DomainSplit, src: &[usize], tgt: &[usize]) -> Self {
        Batch {
            source_x: split.source_x.select_rows(src),
            source_y: src.iter().map(|&i| split.source_y[i]).collect(),
            target_x: split.target_x.select_rows(tgt),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub losses: LossValues,
    pub trace: Vec<WeightTraceRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub iteration: usize,
    pub losses: LossValues,
    pub history: Vec<LogRecord>,
}

impl TrainState {
    pub fn new(params: ParamStore) -> Self {
        TrainState {
            params,
            iteration: 0,
            losses: LossValues::default(),
            history: Vec::new(),
        }
    }
}

fn stage<T>(iteration: usize, loss: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite { .. } => Error::DivergedLoss { iteration, loss },
        other => other,
    })
}

fn finite(iteration: usize, loss: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::DivergedLoss { iteration, loss })
    }
}

/// One simultaneous update of every group the variant trains.
pub fn train_step(
    net: &Networks,
    state: &mut TrainState,
    batch: &Batch,
    cfg: &TrainConfig,
    hooks: &StepHooks,
) -> Result<LossValues> {
    let it = state.iteration;
    let variant = cfg.variant;
    let eps = cfg.eps;
    let mut losses = LossValues::default();
    let mut terms = Vec::with_capacity(4);

    let mut s = Session::new(&state.params, Mode::Train)?;
    let xs = s.input(batch.source_x.clone())?;
    let xt = s.input(batch.target_x.clone())?;
    let (feat_s, feat_t, probs_s) = stage(it, "E_GC1", (|| {
        let fs = net.gf_forward(&mut s, xs)?;
        let ft = net.gf_forward(&mut s, xt)?;
        let ps = net.gc1_forward(&mut s, fs)?;
        Ok((fs, ft, ps))
    })())?;
    let e_gc1 = stage(it, "E_GC1", loss_source_ce(&mut s.tape, probs_s, &batch.source_y, eps))?;
    losses.e_gc1 = finite(it, "E_GC1", s.tape.value(e_gc1).item())?;
    if hooks.include[0] {
        terms.push(e_gc1);
    }

    if variant != Variant::SourceOnly {
        let (p_unk, d2_t) = stage(it, "E_adv", (|| {
            let reversed = s.tape.grad_reverse(feat_t, cfg.grl_lambda)?;
            let probs_t = net.gc1_forward(&mut s, reversed)?;
            let p_unk = p_unknown(&mut s.tape, probs_t)?;
            let d2_t = compute_d2(&mut s.tape, probs_t)?;
            Ok((p_unk, d2_t))
        })())?;

        // d1 on target rows, from detached features.
        let d1_t = if variant.trains_supplementary() {
            Some(stage(it, "E_D", (|| {
                let ft = s.tape.detach(feat_t)?;
                let q = net.gc2_forward(&mut s, ft)?;
                compute_d1(&mut s.tape, q)
            })())?)
        } else {
            None
        };

        let n_t = batch.target_x.rows();
        let weights: Vec<f64> = match (hooks.weight_override, variant) {
            (Some(w), _) => vec![w; n_t],
            (None, Variant::Osbp) => vec![cfg.fixed_t; n_t],
            (None, Variant::WoD1) => s.tape.value(d2_t).data().to_vec(),
            (None, Variant::WoD2) => s.tape.value(d1_t.expect("trained")).data().to_vec(),
            (None, _) => {
                let w = stage(it, "E_adv", compute_weight(&mut s.tape, d1_t.expect("trained"), d2_t))?;
                s.tape.value(w).data().to_vec()
            }
        };
        let e_adv = stage(it, "E_adv", loss_adv_weighted(&mut s.tape, p_unk, &weights, eps))?;
        losses.e_adv = finite(it, "E_adv", s.tape.value(e_adv).item())?;
        if hooks.include[1] {
            terms.push(e_adv);
        }

        if let Some(d1_t) = d1_t {
            let (e_gc2, e_d) = stage(it, "E_GC2", (|| {
                let fs = s.tape.detach(feat_s)?;
                let q_s = net.gc2_forward(&mut s, fs)?;
                let e_gc2 = loss_supplementary_ovr(&mut s.tape, q_s, &batch.source_y, eps)?;
                let d1_s = compute_d1(&mut s.tape, q_s)?;
                let (gd_s, gd_t) = if variant == Variant::WoD2 {
                    (d1_s, d1_t)
                } else {
                    let d2_s = compute_d2(&mut s.tape, probs_s)?;
                    let d2_s = s.tape.detach(d2_s)?;
                    let d2_tc = s.tape.detach(d2_t)?;
                    (
                        compute_weight(&mut s.tape, d1_s, d2_s)?,
                        compute_weight(&mut s.tape, d1_t, d2_tc)?,
                    )
                };
                let e_d = loss_domain_disc(&mut s.tape, gd_s, gd_t, eps)?;
                Ok((e_gc2, e_d))
            })())?;
            losses.e_gc2 = finite(it, "E_GC2", s.tape.value(e_gc2).item())?;
            losses.e_d = finite(it, "E_D", s.tape.value(e_d).item())?;
            if hooks.include[2] {
                terms.push(e_gc2);
            }
            if hooks.include[3] {
                terms.push(e_d);
            }
        }
    }

    let groups = variant.groups();
    let grads = match terms.split_first() {
        Some((&first, rest)) => {
            let mut total = first;
            for &t in rest {
                total = s.tape.add(total, t)?;
            }
            let g = s.tape.backward(total)?;
            s.bound.grads_for(&s.tape, &g, &state.params, groups)?
        }
        None => {
            let zeros = state
                .params
                .iter()
                .filter(|p| groups.contains(&p.group))
                .map(|p| (p.name.clone(), TensorValue::zeros_like(&p.value)))
                .collect();
            zeros
        }
    };
    let norm_batches = s.take_norm_batches();
    drop(s);

    sgd_step(&mut state.params, &grads, |g| cfg.lr_for(g), cfg.momentum, groups)?;
    apply_norm_batches(&mut state.params, &norm_batches);
    state.iteration += 1;
    state.losses = losses;
    Ok(losses)
}

/// Mean `d1`, `d2`, `W` over the known and unknown target rows.
pub fn weight_trace(
    net: &Networks,
    params: &ParamStore,
    split: &DomainSplit,
    iteration: usize,
) -> Result<Vec<WeightTraceRow>> {
    let wb = net.weights(params, &split.target_x)?;
    let unknown = net.config.unknown_index();
    let mut rows = Vec::with_capacity(2);
    for group in [TraceGroup::Known, TraceGroup::Unknown] {
        let idx: Vec<usize> = (0..split.n_target())
            .filter(|&i| (split.target_y[i] == unknown) == (group == TraceGroup::Unknown))
            .collect();
        if idx.is_empty() {
            continue;
        }
        let mean = |v: &[f64]| idx.iter().map(|&i| v[i]).sum::<f64>() / idx.len() as f64;
        rows.push(WeightTraceRow {
            iter: iteration,
            group,
            mean_d1: mean(&wb.d1),
            mean_d2: mean(&wb.d2),
            mean_w: mean(&wb.w),
        });
    }
    Ok(rows)
}

/// Result of a full training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub networks: Networks,
    pub params: ParamStore,
    pub history: Vec<LogRecord>,
}

impl TrainOutcome {
    /// Weight trace rows of every logged iteration, in order.
    pub fn trace(&self) -> Vec<WeightTraceRow> {
        self.history.iter().flat_map(|r| r.trace.iter().cloned()).collect()
    }
}

/// Trains from the seeded initialization for `cfg.max_iterations` steps,
/// logging at iteration 0, every `eval_every` steps and at the end.
pub fn train_run(ds: &FeatureDataset, ls: &LabelSpaceConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let split = DomainSplit::new(ds, ls)?;
    train_split(&split, ls.n_known(), cfg, &StepHooks::default())
}

/// [`train_run`] on an already split dataset, with step hooks.
pub fn train_split(
    split: &DomainSplit,
    n_known: usize,
    cfg: &TrainConfig,
    hooks: &StepHooks,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let net = Networks::new(cfg.model_config(split.source_x.cols(), n_known))?;
    let mut state = TrainState::new(net.init(cfg.seed)?);
    let mut batches = BatchStream::new(split.n_source(), split.n_target(), cfg.batch_per_domain, cfg.seed)?;
    let log = |state: &TrainState| -> Result<LogRecord> {
        Ok(LogRecord {
            iteration: state.iteration,
            losses: state.losses,
            trace: weight_trace(&net, &state.params, split, state.iteration)?,
        })
    };
    state.history.push(log(&state)?);
    for _ in 0..cfg.max_iterations {
        let (src, tgt) = batches.next().expect("endless stream");
        let batch = Batch::gather(split, &src, &tgt);
        train_step(&net, &mut state, &batch, cfg, hooks)?;
        if state.iteration % cfg.eval_every == 0 || state.iteration == cfg.max_iterations {
            state.history.push(log(&state)?);
        }
    }
    Ok(TrainOutcome {
        networks: net,
        params: state.params,
        history: state.history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_task, SyntheticTaskSpec};

    fn small_split() -> (DomainSplit, usize) {
        let spec = SyntheticTaskSpec {
            n_shared: 2,
            n_target_private: 2,
            samples_per_class: 12,
            feature_dim: 3,
            seed: 4,
            ..SyntheticTaskSpec::default()
        };
        let (ds, ls) = generate_synthetic_task(&spec).unwrap();
        (DomainSplit::new(&ds, &ls).unwrap(), ls.n_known())
    }

    fn cfg(variant: Variant) -> TrainConfig {
        TrainConfig {
            batch_per_domain: 8,
            max_iterations: 6,
            eval_every: 2,
            hidden: 6,
            feature_dim: 4,
            lr: 0.05,
            ..TrainConfig::new(variant)
        }
    }

    #[test]
    fn config_defaults_and_unknown_keys() {
        let c = TrainConfig::new(Variant::Proposed);
        assert_eq!((c.lr, c.momentum, c.fixed_t, c.grl_lambda), (0.001, 0.9, 0.5, 1.0));
        assert_eq!(c.eps, 1e-7);
        let err = serde_json::from_str::<TrainConfig>(r#"{"variant":"osbp","learning_rate":0.1}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("learning_rate"), "{err}");
        let v: TrainConfig = serde_json::from_str(r#"{"variant":"wo_d2"}"#).unwrap();
        assert_eq!(v.variant, Variant::WoD2);
    }

    #[test]
    fn every_variant_runs_and_logs() {
        let (split, n) = small_split();
        for v in Variant::ALL {
            let out = train_split(&split, n, &cfg(v), &StepHooks::default()).unwrap();
            let iters: Vec<usize> = out.history.iter().map(|r| r.iteration).collect();
            assert_eq!(iters, vec![0, 2, 4, 6], "{v}");
            for rec in &out.history[1..] {
                let l = rec.losses;
                assert!(l.e_gc1 > 0.0);
                assert_eq!(l.e_adv == 0.0, v == Variant::SourceOnly, "{v}");
                assert_eq!(l.e_gc2 > 0.0, v.trains_supplementary(), "{v}");
                for row in &rec.trace {
                    for m in [row.mean_d1, row.mean_d2, row.mean_w] {
                        assert!((0.0..=1.0).contains(&m));
                    }
                }
            }
        }
    }

    #[test]
    fn untrained_groups_stay_at_initialization() {
        let (split, n) = small_split();
        for v in [Variant::Osbp, Variant::SourceOnly, Variant::WoD1] {
            let c = cfg(v);
            let out = train_split(&split, n, &c, &StepHooks::default()).unwrap();
            let init = out.networks.init(c.seed).unwrap();
            for p in out.params.in_group(Group::Supplementary) {
                assert_eq!(&p.value, init.value(&p.name).unwrap(), "{v} moved {}", p.name);
            }
        }
    }

    #[test]
    fn zero_lr_and_zero_iterations_keep_initialization() {
        let (split, n) = small_split();
        let c = TrainConfig { lr: 0.0, ..cfg(Variant::Proposed) };
        let out = train_split(&split, n, &c, &StepHooks::default()).unwrap();
        let init = out.networks.init(c.seed).unwrap();
        for p in out.params.iter() {
            assert_eq!(&p.value, init.value(&p.name).unwrap());
        }
        let c = TrainConfig { max_iterations: 0, ..cfg(Variant::Proposed) };
        let out = train_split(&split, n, &c, &StepHooks::default()).unwrap();
        assert_eq!(out.params, out.networks.init(c.seed).unwrap());
        assert_eq!(out.history.len(), 1);
    }

    #[test]
    fn divergence_aborts_with_iteration_and_loss() {
        let (split, n) = small_split();
        let c = TrainConfig {
            lr: 1e200,
            momentum: 0.0,
            ..cfg(Variant::Proposed)
        };
        let err = train_split(&split, n, &c, &StepHooks::default()).unwrap_err();
        match err {
            Error::DivergedLoss { iteration, loss } => {
                assert!(iteration >= 1);
                assert!(!loss.is_empty());
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        for bad in [
            TrainConfig { momentum: 1.0, ..cfg(Variant::Osbp) },
            TrainConfig { lr: -1.0, ..cfg(Variant::Osbp) },
            TrainConfig { fixed_t: 1.5, ..cfg(Variant::Osbp) },
            TrainConfig { batch_per_domain: 0, ..cfg(Variant::Osbp) },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }
}
