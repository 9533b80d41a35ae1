//! The three networks and the weighting head.
//!
//! * Feature generator: MLP `d_in -> hidden -> hidden -> feature_dim`.
//! * Domain classifier: affine `feature_dim -> N + 1` with softmax; the last
//!   column is the probability of "unknown".
//! * Supplementary classifier: affine `feature_dim -> N` with leaky softmax,
//!   trained on source samples only.
//!
//! The weighting head has no parameters. It turns the two classifier outputs
//! into `d1` (leaky-softmax mass), `d2` (one minus the unknown probability)
//! and their product `W`.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffcore::rng::{self, Stream};
use crate::diffcore::{BoundParams, Group, ParamStore, Tape, TensorValue, Var};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

/// Architecture of all three networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_in: usize,
    pub hidden: usize,
    pub feature_dim: usize,
    /// Number of source classes `N`; the domain classifier has `N + 1` outputs.
    pub n_known: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub batch_norm: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_in", self.d_in),
            ("hidden", self.hidden),
            ("feature_dim", self.feature_dim),
            ("n_known", self.n_known),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Index of the "unknown" output.
    pub fn unknown_index(&self) -> usize {
        self.n_known
    }

    fn gf_dims(&self) -> [(usize, usize); 3] {
        [
            (self.d_in, self.hidden),
            (self.hidden, self.hidden),
            (self.hidden, self.feature_dim),
        ]
    }
}

/// Whether a forward pass trains (batch statistics) or infers (running statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Batch statistics observed by one batch-norm layer during a training forward.
#[derive(Debug, Clone)]
pub struct NormBatch {
    pub layer: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// A tape with the parameters bound to it.
pub struct Session<'a> {
    pub tape: Tape,
    pub bound: BoundParams,
    store: &'a ParamStore,
    mode: Mode,
    norm_batches: Vec<NormBatch>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode) -> Result<Self> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape)?;
        Ok(Session {
            tape,
            bound,
            store,
            mode,
            norm_batches: Vec::new(),
        })
    }

    pub fn input(&mut self, x: TensorValue) -> Result<Var> {
        self.tape.constant(x)
    }

    pub fn take_norm_batches(&mut self) -> Vec<NormBatch> {
        std::mem::take(&mut self.norm_batches)
    }
}

fn w_name(net: &str, layer: usize) -> String {
    format!("{net}.l{layer}.w")
}

fn b_name(net: &str, layer: usize) -> String {
    format!("{net}.l{layer}.b")
}

fn bn_names(layer: usize) -> [String; 4] {
    [
        format!("gf.bn{layer}.gamma"),
        format!("gf.bn{layer}.beta"),
        format!("gf.bn{layer}.running_mean"),
        format!("gf.bn{layer}.running_var"),
    ]
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
fn glorot(rng: &mut rng::Rng, fan_in: usize, fan_out: usize) -> TensorValue {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    TensorValue::new(vec![fan_in, fan_out], data).expect("shape matches")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Networks {
    pub config: ModelConfig,
}

impl Networks {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Networks { config })
    }

    /// Fresh parameters from the initialization stream of `seed`.
    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        let mut rng = rng::stream(seed, Stream::Init);
        let c = &self.config;
        let mut store = ParamStore::new();
        for (layer, (fi, fo)) in c.gf_dims().into_iter().enumerate() {
            store.insert(w_name("gf", layer), Group::Generator, glorot(&mut rng, fi, fo))?;
            store.insert(b_name("gf", layer), Group::Generator, TensorValue::zeros(vec![fo]))?;
            if c.batch_norm && layer < 2 {
                let [g, b, rm, rv] = bn_names(layer);
                store.insert(g, Group::Generator, TensorValue::vector(vec![1.0; fo]))?;
                store.insert(b, Group::Generator, TensorValue::zeros(vec![fo]))?;
                store.set_buffer(rm, TensorValue::zeros(vec![fo]));
                store.set_buffer(rv, TensorValue::vector(vec![1.0; fo]));
            }
        }
        let f = c.feature_dim;
        let n = c.n_known;
        store.insert(w_name("gc1", 0), Group::DomainClassifier, glorot(&mut rng, f, n + 1))?;
        store.insert(b_name("gc1", 0), Group::DomainClassifier, TensorValue::zeros(vec![n + 1]))?;
        store.insert(w_name("gc2", 0), Group::Supplementary, glorot(&mut rng, f, n))?;
        store.insert(b_name("gc2", 0), Group::Supplementary, TensorValue::zeros(vec![n]))?;
        Ok(store)
    }

    /// Checks that a parameter store has exactly the shapes this architecture needs.
    pub fn check_params(&self, store: &ParamStore) -> Result<()> {
        let fresh = self.init(0)?;
        for p in fresh.iter() {
            let got = store.get(&p.name).ok_or_else(|| {
                Error::dim("params", format!("missing parameter {}", p.name))
            })?;
            if got.value.shape() != p.value.shape() {
                return Err(Error::dim(
                    "params",
                    format!(
                        "parameter {} has shape {:?}, architecture needs {:?}",
                        p.name,
                        got.value.shape(),
                        p.value.shape()
                    ),
                ));
            }
        }
        if store.len() != fresh.len() {
            return Err(Error::dim(
                "params",
                format!("{} parameters, architecture needs {}", store.len(), fresh.len()),
            ));
        }
        store.validate()
    }

    /// Feature generator forward: `[B×d_in] -> [B×feature_dim]`.
    pub fn gf_forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let cols = s.tape.value(x).cols();
        if s.tape.value(x).rank() != 2 || cols != self.config.d_in {
            return Err(Error::dim(
                "gf_forward",
                format!(
                    "input has shape {:?}, generator expects {} columns",
                    s.tape.value(x).shape(),
                    self.config.d_in
                ),
            ));
        }
        let mut h = x;
        for layer in 0..3 {
            let w = s.bound.var(&w_name("gf", layer))?;
            let b = s.bound.var(&b_name("gf", layer))?;
            h = s.tape.affine(h, w, b)?;
            if layer == 2 {
                break;
            }
            if self.config.batch_norm {
                h = self.norm(s, h, layer)?;
            }
            h = match self.config.activation {
                Activation::Relu => s.tape.relu(h)?,
                Activation::Tanh => s.tape.tanh(h)?,
            };
        }
        Ok(h)
    }

    fn norm(&self, s: &mut Session<'_>, h: Var, layer: usize) -> Result<Var> {
        let [g, b, rm, rv] = bn_names(layer);
        let gamma = s.bound.var(&g)?;
        let beta = s.bound.var(&b)?;
        match s.mode {
            Mode::Train => {
                let (out, mean, var) = s.tape.batch_norm(h, gamma, beta, BN_EPS)?;
                s.norm_batches.push(NormBatch { layer, mean, var });
                Ok(out)
            }
            Mode::Infer => {
                // Running statistics fold into a diagonal affine map.
                let missing = |n: &str| Error::Contract(format!("missing buffer {n}"));
                let mean = s.store.buffer(&rm).ok_or_else(|| missing(&rm))?.data();
                let var = s.store.buffer(&rv).ok_or_else(|| missing(&rv))?.data();
                let gv = s.tape.value(gamma).data();
                let bv = s.tape.value(beta).data();
                let f = mean.len();
                let mut diag = vec![0.0; f * f];
                let mut shift = vec![0.0; f];
                for c in 0..f {
                    let scale = gv[c] / (var[c] + BN_EPS).sqrt();
                    diag[c * f + c] = scale;
                    shift[c] = bv[c] - scale * mean[c];
                }
                let w = s.tape.constant(TensorValue::matrix(f, f, diag)?)?;
                let b = s.tape.constant(TensorValue::vector(shift))?;
                s.tape.affine(h, w, b)
            }
        }
    }

    /// Domain classifier: `N + 1` softmax probabilities per row.
    pub fn gc1_forward(&self, s: &mut Session<'_>, feat: Var) -> Result<Var> {
        let w = s.bound.var(&w_name("gc1", 0))?;
        let b = s.bound.var(&b_name("gc1", 0))?;
        let logits = s.tape.affine(feat, w, b)?;
        s.tape.softmax(logits)
    }

    /// Supplementary classifier: `N` leaky-softmax probabilities per row.
    pub fn gc2_forward(&self, s: &mut Session<'_>, feat: Var) -> Result<Var> {
        let w = s.bound.var(&w_name("gc2", 0))?;
        let b = s.bound.var(&b_name("gc2", 0))?;
        let logits = s.tape.affine(feat, w, b)?;
        s.tape.leaky_softmax(logits)
    }

    /// Class probabilities of the domain classifier for a batch, without
    /// keeping the tape.
    pub fn classify(&self, store: &ParamStore, x: &TensorValue) -> Result<TensorValue> {
        let mut s = Session::new(store, Mode::Infer)?;
        let xv = s.input(x.clone())?;
        let feat = self.gf_forward(&mut s, xv)?;
        let probs = self.gc1_forward(&mut s, feat)?;
        Ok(s.tape.value(probs).clone())
    }

    /// `d1`, `d2` and `W` for a batch in inference mode.
    pub fn weights(&self, store: &ParamStore, x: &TensorValue) -> Result<WeightBatch> {
        let mut s = Session::new(store, Mode::Infer)?;
        let xv = s.input(x.clone())?;
        let feat = self.gf_forward(&mut s, xv)?;
        let p1 = self.gc1_forward(&mut s, feat)?;
        let p2 = self.gc2_forward(&mut s, feat)?;
        let d1 = compute_d1(&mut s.tape, p2)?;
        let d2 = compute_d2(&mut s.tape, p1)?;
        let w = compute_weight(&mut s.tape, d1, d2)?;
        Ok(WeightBatch {
            d1: s.tape.value(d1).data().to_vec(),
            d2: s.tape.value(d2).data().to_vec(),
            w: s.tape.value(w).data().to_vec(),
        })
    }
}

/// Folds batch-norm statistics from training forwards into the running buffers.
pub fn apply_norm_batches(store: &mut ParamStore, batches: &[NormBatch]) {
    for nb in batches {
        let [_, _, rm, rv] = bn_names(nb.layer);
        for (name, obs) in [(rm, &nb.mean), (rv, &nb.var)] {
            if let Some(buf) = store.buffer(&name) {
                let mut buf = buf.clone();
                for (r, &o) in buf.data_mut().iter_mut().zip(obs.iter()) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * o;
                }
                store.set_buffer(name, buf);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightBatch {
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
    pub w: Vec<f64>,
}

/// `d1(x) = sum_k G_C2^k(x)`: total leaky-softmax mass per row.
pub fn compute_d1(tape: &mut Tape, gc2_probs: Var) -> Result<Var> {
    tape.row_sum(gc2_probs)
}

/// `d2(x) = 1 - P(unknown | x)`, reading the last column.
pub fn compute_d2(tape: &mut Tape, gc1_probs: Var) -> Result<Var> {
    let cols = tape.value(gc1_probs).cols();
    if cols < 2 {
        return Err(Error::dim(
            "compute_d2",
            format!("domain classifier output needs at least 2 columns, got {cols}"),
        ));
    }
    let p_unknown = tape.column(gc1_probs, cols - 1)?;
    tape.scale_shift(p_unknown, -1.0, 1.0)
}

/// `W = d1 * d2`.
pub fn compute_weight(tape: &mut Tape, d1: Var, d2: Var) -> Result<Var> {
    tape.mul(d1, d2)
}

/// Trained parameters together with the architecture they belong to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint and checks every parameter against its architecture.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Self = serde_json::from_str(&text)?;
        Networks::new(ck.model.clone())?.check_params(&ck.params)?;
        Ok(ck)
    }

    pub fn networks(&self) -> Result<Networks> {
        Networks::new(self.model.clone())
    }
}

/// Argmax over the `N + 1` probabilities; ties go to the lowest index and
/// index `N` means "unknown".
pub fn predict(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best
}
