use osda::data::{generate_synthetic_task, BatchStream, DomainSplit, SyntheticTaskSpec};
use osda::diffcore::{Group, ParamStore, TensorValue};
use osda::model::{Activation, Networks};
use osda::train::{train_split, train_step, Batch, StepHooks, TrainConfig, TrainState, Variant};

fn split(seed: u64) -> (DomainSplit, usize) {
    let spec = SyntheticTaskSpec {
        n_shared: 3,
        n_target_private: 2,
        samples_per_class: 16,
        feature_dim: 4,
        seed,
        ..SyntheticTaskSpec::default()
    };
    let (ds, ls) = generate_synthetic_task(&spec).unwrap();
    (DomainSplit::new(&ds, &ls).unwrap(), ls.n_known())
}

fn small_cfg(variant: Variant) -> TrainConfig {
    TrainConfig {
        hidden: 8,
        feature_dim: 6,
        batch_per_domain: 8,
        lr: 0.01,
        max_iterations: 25,
        eval_every: 5,
        seed: 3,
        ..TrainConfig::new(variant)
    }
}

fn group_values(store: &ParamStore, groups: &[Group]) -> Vec<(String, TensorValue)> {
    store
        .iter()
        .filter(|p| groups.contains(&p.group))
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect()
}

/// Replays `cfg.max_iterations` steps, calling `check` with the state before
/// each step and the batch it consumes.
fn walk(split: &DomainSplit, n_known: usize, cfg: &TrainConfig, mut check: impl FnMut(&Networks, &TrainState, &Batch)) {
    let net = Networks::new(cfg.model_config(split.source_x.cols(), n_known)).unwrap();
    let mut state = TrainState::new(net.init(cfg.seed).unwrap());
    let mut stream = BatchStream::new(split.n_source(), split.n_target(), cfg.batch_per_domain, cfg.seed).unwrap();
    for _ in 0..cfg.max_iterations {
        let (s, t) = stream.next().unwrap();
        let batch = Batch::gather(split, &s, &t);
        check(&net, &state, &batch);
        train_step(&net, &mut state, &batch, cfg, &StepHooks::default()).unwrap();
    }
}

fn step_with(net: &Networks, state: &TrainState, batch: &Batch, cfg: &TrainConfig, hooks: StepHooks) -> ParamStore {
    let mut st = state.clone();
    train_step(net, &mut st, batch, cfg, &hooks).unwrap();
    st.params
}

#[test]
fn each_group_moves_only_through_its_own_losses() {
    let (sp, n) = split(1);
    for variant in [Variant::Proposed, Variant::WoD2] {
        let cfg = small_cfg(variant);
        walk(&sp, n, &cfg, |net, state, batch| {
            let full = step_with(net, state, batch, &cfg, StepHooks::default());
            let main_only = step_with(net, state, batch, &cfg, StepHooks { include: [true, true, false, false], ..StepHooks::default() });
            let supp_only = step_with(net, state, batch, &cfg, StepHooks { include: [false, false, true, true], ..StepHooks::default() });
            let main = [Group::Generator, Group::DomainClassifier];
            assert_eq!(group_values(&full, &main), group_values(&main_only, &main));
            assert_eq!(
                group_values(&full, &[Group::Supplementary]),
                group_values(&supp_only, &[Group::Supplementary])
            );
        });
    }
}

#[test]
fn supplementary_losses_give_the_generator_no_gradient() {
    let (sp, n) = split(2);
    let cfg = small_cfg(Variant::Proposed);
    walk(&sp, n, &cfg, |net, state, batch| {
        let supp_only = step_with(net, state, batch, &cfg, StepHooks { include: [false, false, true, true], ..StepHooks::default() });
        let main = [Group::Generator, Group::DomainClassifier];
        // Momentum alone may move them; compare against a step with no losses at all.
        let nothing = step_with(net, state, batch, &cfg, StepHooks { include: [false; 4], ..StepHooks::default() });
        assert_eq!(group_values(&supp_only, &main), group_values(&nothing, &main));
    });
}

#[test]
fn zero_reversal_gives_the_source_only_generator_update() {
    let (sp, n) = split(3);
    let cfg = TrainConfig { grl_lambda: 0.0, ..small_cfg(Variant::Proposed) };
    let so = TrainConfig { variant: Variant::SourceOnly, ..cfg.clone() };
    let mut steps = 0;
    walk(&sp, n, &cfg, |net, state, batch| {
        let a = step_with(net, state, batch, &cfg, StepHooks::default());
        let b = step_with(net, state, batch, &so, StepHooks::default());
        assert_eq!(group_values(&a, &[Group::Generator]), group_values(&b, &[Group::Generator]));
        steps += 1;
    });
    assert_eq!(steps, cfg.max_iterations);
}

#[test]
fn stubbed_weights_reproduce_the_fixed_threshold_trajectory() {
    let (sp, n) = split(4);
    let cfg = TrainConfig { max_iterations: 200, eval_every: 50, ..small_cfg(Variant::Proposed) };
    let stub = StepHooks { weight_override: Some(0.5), ..StepHooks::default() };
    let proposed = train_split(&sp, n, &cfg, &stub).unwrap();
    let osbp_cfg = TrainConfig { variant: Variant::Osbp, fixed_t: 0.5, ..cfg.clone() };
    let osbp = train_split(&sp, n, &osbp_cfg, &StepHooks::default()).unwrap();
    let main = [Group::Generator, Group::DomainClassifier];
    assert_eq!(group_values(&proposed.params, &main), group_values(&osbp.params, &main));
    for (a, b) in proposed.history.iter().zip(&osbp.history) {
        assert_eq!(a.losses.e_gc1.to_bits(), b.losses.e_gc1.to_bits());
        assert_eq!(a.losses.e_adv.to_bits(), b.losses.e_adv.to_bits());
    }
    // Without the stub the trajectories part ways.
    let free = train_split(&sp, n, &cfg, &StepHooks::default()).unwrap();
    assert_ne!(group_values(&free.params, &main), group_values(&osbp.params, &main));
}

#[test]
fn same_seed_same_history_and_parameters() {
    let (sp, n) = split(5);
    for variant in Variant::ALL {
        let cfg = TrainConfig { batch_norm: true, ..small_cfg(variant) };
        let a = train_split(&sp, n, &cfg, &StepHooks::default()).unwrap();
        let b = train_split(&sp, n, &cfg, &StepHooks::default()).unwrap();
        assert_eq!(a, b, "{variant}");
    }
}

/// Independent forward pass over plain vectors, for a tanh generator without
/// batch norm.
mod oracle {
    use osda::diffcore::ParamStore;

    pub type Rows = Vec<Vec<f64>>;

    fn affine(x: &Rows, store: &ParamStore, net: &str, layer: usize) -> Rows {
        let w = store.value(&format!("{net}.l{layer}.w")).unwrap();
        let b = store.value(&format!("{net}.l{layer}.b")).unwrap();
        let (fi, fo) = (w.shape()[0], w.shape()[1]);
        x.iter()
            .map(|row| {
                (0..fo)
                    .map(|o| b.data()[o] + (0..fi).map(|i| row[i] * w.data()[i * fo + o]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    fn map(x: Rows, f: impl Fn(f64) -> f64) -> Rows {
        x.into_iter().map(|r| r.into_iter().map(&f).collect()).collect()
    }

    pub fn features(store: &ParamStore, x: &Rows) -> Rows {
        let h = map(affine(x, store, "gf", 0), f64::tanh);
        let h = map(affine(&h, store, "gf", 1), f64::tanh);
        affine(&h, store, "gf", 2)
    }

    pub fn gc1(store: &ParamStore, f: &Rows) -> Rows {
        affine(f, store, "gc1", 0)
            .into_iter()
            .map(|z| {
                let m = z.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect()
            })
            .collect()
    }

    pub fn gc2(store: &ParamStore, f: &Rows) -> Rows {
        affine(f, store, "gc2", 0)
            .into_iter()
            .map(|l| {
                let e: Vec<f64> = l.iter().map(|v| v.exp()).collect();
                let denom = l.len() as f64 + e.iter().sum::<f64>();
                e.into_iter().map(|v| v / denom).collect()
            })
            .collect()
    }

    fn mean(v: impl Iterator<Item = f64>) -> f64 {
        let v: Vec<f64> = v.collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn e_gc1(store: &ParamStore, xs: &Rows, ys: &[usize]) -> f64 {
        let p = gc1(store, &features(store, xs));
        -mean(p.iter().zip(ys).map(|(r, &y)| r[y].ln()))
    }

    pub fn e_adv(store: &ParamStore, xt: &Rows, w: &[f64]) -> f64 {
        let p = gc1(store, &features(store, xt));
        -mean(p.iter().zip(w).map(|(r, &w)| {
            let u = r[r.len() - 1];
            w * u.ln() + (1.0 - w) * (1.0 - u).ln()
        }))
    }

    pub fn d1(store: &ParamStore, x: &Rows) -> Vec<f64> {
        gc2(store, &features(store, x)).iter().map(|r| r.iter().sum()).collect()
    }

    pub fn d2(store: &ParamStore, x: &Rows) -> Vec<f64> {
        gc1(store, &features(store, x)).iter().map(|r| 1.0 - r[r.len() - 1]).collect()
    }

    pub fn e_gc2(store: &ParamStore, xs: &Rows, ys: &[usize]) -> f64 {
        let q = gc2(store, &features(store, xs));
        -mean(q.iter().zip(ys).map(|(r, &y)| {
            r.iter()
                .enumerate()
                .map(|(k, &v)| if k == y { v.ln() } else { (1.0 - v).ln() })
                .sum::<f64>()
        }))
    }

    pub fn e_d(store: &ParamStore, xs: &Rows, xt: &Rows, d2s: &[f64], d2t: &[f64]) -> f64 {
        let s = d1(store, xs);
        let t = d1(store, xt);
        -mean(s.iter().zip(d2s).map(|(a, b)| (a * b).ln())) - mean(t.iter().zip(d2t).map(|(a, b)| (1.0 - a * b).ln()))
    }
}

fn rows(t: &TensorValue) -> oracle::Rows {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// Central difference of `f` with respect to element `k` of parameter `name`.
fn fd(store: &ParamStore, name: &str, k: usize, f: &dyn Fn(&ParamStore) -> f64) -> f64 {
    let h = 1e-6;
    let mut s = store.clone();
    s.get_mut(name).unwrap().value.data_mut()[k] += h;
    let up = f(&s);
    s.get_mut(name).unwrap().value.data_mut()[k] -= 2.0 * h;
    let down = f(&s);
    (up - down) / (2.0 * h)
}

#[test]
fn one_step_matches_finite_difference_update_oracle() {
    let (sp, n) = split(6);
    for variant in [Variant::Proposed, Variant::Osbp, Variant::WoD1, Variant::WoD2, Variant::SourceOnly] {
        let cfg = TrainConfig {
            hidden: 3,
            feature_dim: 2,
            activation: Activation::Tanh,
            lr: 0.1,
            lr_multiplier: 2.0,
            grl_lambda: 0.7,
            seed: 11,
            ..TrainConfig::new(variant)
        };
        let net = Networks::new(cfg.model_config(sp.source_x.cols(), n)).unwrap();
        let init = net.init(cfg.seed).unwrap();
        let batch = Batch::gather(&sp, &[0, 5, 9, 17], &[1, 2, 30, 41, 55]);
        let mut state = TrainState::new(init.clone());
        train_step(&net, &mut state, &batch, &cfg, &StepHooks::default()).unwrap();

        let xs = rows(&batch.source_x);
        let xt = rows(&batch.target_x);
        let ys = batch.source_y.clone();
        let d1t = oracle::d1(&init, &xt);
        let d2t = oracle::d2(&init, &xt);
        let d2s = oracle::d2(&init, &xs);
        let w: Vec<f64> = match variant {
            Variant::Osbp => vec![cfg.fixed_t; xt.len()],
            Variant::WoD1 => d2t.clone(),
            Variant::WoD2 => d1t.clone(),
            _ => d1t.iter().zip(&d2t).map(|(a, b)| a * b).collect(),
        };
        let ones_s = vec![1.0; xs.len()];
        let ones_t = vec![1.0; xt.len()];
        let adversarial = variant != Variant::SourceOnly;
        let supplementary = matches!(variant, Variant::Proposed | Variant::WoD2);

        for p in init.iter() {
            for k in 0..p.value.len() {
                let g_ce = fd(&init, &p.name, k, &|s| oracle::e_gc1(s, &xs, &ys));
                let g_adv = if adversarial { fd(&init, &p.name, k, &|s| oracle::e_adv(s, &xt, &w)) } else { 0.0 };
                let expected = match p.group {
                    Group::Generator => -cfg.lr * (g_ce - cfg.grl_lambda * g_adv),
                    Group::DomainClassifier => -cfg.lr * cfg.lr_multiplier * (g_ce + g_adv),
                    Group::Supplementary if supplementary => {
                        let (ds, dt) = if variant == Variant::WoD2 { (&ones_s, &ones_t) } else { (&d2s, &d2t) };
                        let g = fd(&init, &p.name, k, &|s| oracle::e_gc2(s, &xs, &ys))
                            + fd(&init, &p.name, k, &|s| oracle::e_d(s, &xs, &xt, ds, dt));
                        -cfg.lr * cfg.lr_multiplier * g
                    }
                    Group::Supplementary => 0.0,
                };
                let got = state.params.value(&p.name).unwrap().data()[k] - p.value.data()[k];
                assert!(
                    (got - expected).abs() <= 1e-8,
                    "{variant} {}[{k}]: step moved {got:e}, oracle {expected:e}",
                    p.name
                );
            }
        }
    }
}
