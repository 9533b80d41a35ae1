//! Label spaces, feature datasets, synthetic task generation, the feature CSV
//! format and per-domain mini-batching.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::rng::{self, Stream};
use crate::diffcore::TensorValue;
use crate::error::{Error, Result};

/// Source and target label sets.
///
/// Model output `k` stands for `source_labels[k]`; output `N` (one past the
/// last source class) is "unknown".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSpaceConfig {
    pub source_labels: Vec<u32>,
    pub target_labels: Vec<u32>,
    /// Permit source classes absent from the target domain.
    #[serde(default)]
    pub allow_source_private: bool,
}

impl LabelSpaceConfig {
    /// `C = C_s ∩ C_t`, in source order.
    pub fn shared(&self) -> Vec<u32> {
        let t: BTreeSet<u32> = self.target_labels.iter().copied().collect();
        self.source_labels.iter().copied().filter(|l| t.contains(l)).collect()
    }

    /// `C_t \ C`, in target order.
    pub fn target_private(&self) -> Vec<u32> {
        let s: BTreeSet<u32> = self.source_labels.iter().copied().collect();
        self.target_labels.iter().copied().filter(|l| !s.contains(l)).collect()
    }

    /// `C_s \ C`, in source order.
    pub fn source_private(&self) -> Vec<u32> {
        let t: BTreeSet<u32> = self.target_labels.iter().copied().collect();
        self.source_labels.iter().copied().filter(|l| !t.contains(l)).collect()
    }

    pub fn n_known(&self) -> usize {
        self.source_labels.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, labels) in [("source_labels", &self.source_labels), ("target_labels", &self.target_labels)] {
            let set: BTreeSet<u32> = labels.iter().copied().collect();
            if set.len() != labels.len() {
                return Err(Error::Config(format!("{name} contains duplicates")));
            }
        }
        if self.source_labels.is_empty() {
            return Err(Error::Config("source_labels is empty".into()));
        }
        if !self.allow_source_private && !self.source_private().is_empty() {
            return Err(Error::Config(format!(
                "source classes {:?} are missing from the target domain and allow_source_private is off",
                self.source_private()
            )));
        }
        if self.shared().is_empty() {
            return Err(Error::Config("no shared classes".into()));
        }
        if self.target_private().is_empty() {
            return Err(Error::Config("no target-private classes: not an open-set task".into()));
        }
        Ok(())
    }

    /// Model output index for a source label.
    pub fn source_index(&self, label: u32) -> Option<usize> {
        self.source_labels.iter().position(|&l| l == label)
    }

    /// Evaluation class for a target label: its source index if shared,
    /// otherwise the unknown index `N`.
    pub fn target_index(&self, label: u32) -> usize {
        self.source_index(label).unwrap_or(self.n_known())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ls: Self = serde_json::from_str(&text)?;
        ls.validate()?;
        Ok(ls)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub domain: Domain,
    pub label: u32,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureDataset {
    pub rows: Vec<Sample>,
}

impl FeatureDataset {
    pub fn d_in(&self) -> usize {
        self.rows.first().map_or(0, |r| r.features.len())
    }

    pub fn domain(&self, domain: Domain) -> impl Iterator<Item = &Sample> {
        self.rows.iter().filter(move |r| r.domain == domain)
    }

    pub fn count(&self, domain: Domain) -> usize {
        self.domain(domain).count()
    }

    /// Checks width consistency and that labels fit the label space.
    pub fn validate(&self, ls: &LabelSpaceConfig) -> Result<()> {
        let d = self.d_in();
        if d == 0 {
            return Err(Error::Contract("dataset has no feature columns or no rows".into()));
        }
        let target: BTreeSet<u32> = ls.target_labels.iter().copied().collect();
        for r in &self.rows {
            if r.features.len() != d {
                return Err(Error::dim(
                    "dataset",
                    format!("row {} has {} features, expected {d}", r.id, r.features.len()),
                ));
            }
            let ok = match r.domain {
                Domain::Source => ls.source_index(r.label).is_some(),
                Domain::Target => target.contains(&r.label),
            };
            if !ok {
                return Err(Error::Contract(format!(
                    "row {} has label {} outside the {} label set",
                    r.id,
                    r.label,
                    r.domain.as_str()
                )));
            }
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)
            .map_err(|e| csv_io(path, e))?;
        let mut header = vec!["id".to_string(), "domain".into(), "label".into()];
        header.extend((0..self.d_in()).map(|i| format!("f{i}")));
        w.write_record(&header).map_err(|e| csv_io(path, e))?;
        for r in &self.rows {
            let mut rec = vec![r.id.clone(), r.domain.as_str().into(), r.label.to_string()];
            rec.extend(r.features.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads the feature CSV: header `id,domain,label,f0,...,f{D-1}`.
    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_path(path)
            .map_err(|e| csv_io(path, e))?;
        let parse_err = |line: u64, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
        if header.len() < 4 || &header[0] != "id" || &header[1] != "domain" || &header[2] != "label" {
            return Err(parse_err(1, "header must start with id,domain,label and name at least one feature".into()));
        }
        for (i, name) in header.iter().skip(3).enumerate() {
            if name != format!("f{i}") {
                return Err(parse_err(1, format!("feature column {i} is named {name:?}, expected \"f{i}\"")));
            }
        }
        let d = header.len() - 3;
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                parse_err(line, e.to_string())
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != d + 3 {
                return Err(parse_err(line, format!("expected {} fields, found {}", d + 3, rec.len())));
            }
            let domain = match &rec[1] {
                "source" => Domain::Source,
                "target" => Domain::Target,
                other => return Err(parse_err(line, format!("unknown domain tag {other:?}"))),
            };
            let label = rec[2]
                .parse::<u32>()
                .map_err(|_| parse_err(line, format!("label {:?} is not a non-negative integer", &rec[2])))?;
            let features = rec
                .iter()
                .skip(3)
                .enumerate()
                .map(|(i, s)| {
                    s.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| parse_err(line, format!("feature f{i} value {s:?} is not a finite number")))
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(Sample {
                id: rec[0].to_string(),
                domain,
                label,
                features,
            });
        }
        Ok(FeatureDataset { rows })
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: format!("{other:?}"),
        },
    }
}

/// Source and target rows as matrices, with labels mapped to model indices.
#[derive(Debug, Clone)]
pub struct DomainSplit {
    pub source_x: TensorValue,
    /// Model output index of each source row.
    pub source_y: Vec<usize>,
    pub target_x: TensorValue,
    /// Evaluation class of each target row (`N` for target-private labels).
    pub target_y: Vec<usize>,
}

impl DomainSplit {
    pub fn new(ds: &FeatureDataset, ls: &LabelSpaceConfig) -> Result<Self> {
        ds.validate(ls)?;
        let src: Vec<&Sample> = ds.domain(Domain::Source).collect();
        let tgt: Vec<&Sample> = ds.domain(Domain::Target).collect();
        if src.is_empty() || tgt.is_empty() {
            return Err(Error::Contract("dataset needs both source and target rows".into()));
        }
        let matrix = |rows: &[&Sample]| {
            let feats: Vec<&[f64]> = rows.iter().map(|r| r.features.as_slice()).collect();
            TensorValue::from_rows(&feats)
        };
        Ok(DomainSplit {
            source_x: matrix(&src)?,
            source_y: src
                .iter()
                .map(|r| ls.source_index(r.label).expect("validated"))
                .collect(),
            target_x: matrix(&tgt)?,
            target_y: tgt.iter().map(|r| ls.target_index(r.label)).collect(),
        })
    }

    pub fn n_source(&self) -> usize {
        self.source_y.len()
    }

    pub fn n_target(&self) -> usize {
        self.target_y.len()
    }
}

fn default_samples() -> usize {
    100
}
fn default_feature_dim() -> usize {
    8
}
fn default_radius() -> f64 {
    4.0
}
fn default_noise() -> f64 {
    0.5
}
fn default_rotation() -> f64 {
    15.0
}
fn default_translation() -> Vec<f64> {
    vec![0.5, -0.5]
}
fn default_shift_sigma() -> f64 {
    0.1
}

/// Gaussian classes on a circle with a rotated and translated target domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub n_shared: usize,
    pub n_target_private: usize,
    #[serde(default)]
    pub n_source_private: usize,
    #[serde(default = "default_samples")]
    pub samples_per_class: usize,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    /// Radius of the circle holding the class means.
    #[serde(default = "default_radius")]
    pub radius: f64,
    /// Per-coordinate standard deviation around each class mean.
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    /// Rotation of the target means in the first two dimensions, in degrees.
    #[serde(default = "default_rotation")]
    pub rotation_deg: f64,
    /// Offset added to target samples; shorter vectors are zero-padded.
    #[serde(default = "default_translation")]
    pub translation: Vec<f64>,
    /// Extra per-coordinate noise on target samples.
    #[serde(default = "default_shift_sigma")]
    pub shift_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            n_shared: 4,
            n_target_private: 4,
            n_source_private: 0,
            samples_per_class: default_samples(),
            feature_dim: default_feature_dim(),
            radius: default_radius(),
            noise_sigma: default_noise(),
            rotation_deg: default_rotation(),
            translation: default_translation(),
            shift_sigma: default_shift_sigma(),
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_shared == 0 {
            return Err(Error::Config("n_shared must be at least 1".into()));
        }
        if self.feature_dim < 2 {
            return Err(Error::Contract(format!(
                "feature_dim must be at least 2 for the domain rotation, got {}",
                self.feature_dim
            )));
        }
        if self.translation.len() > self.feature_dim {
            return Err(Error::Config(format!(
                "translation has {} entries for {} features",
                self.translation.len(),
                self.feature_dim
            )));
        }
        for (name, v) in [
            ("radius", self.radius),
            ("noise_sigma", self.noise_sigma),
            ("shift_sigma", self.shift_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if !self.rotation_deg.is_finite() || self.translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::Config("domain shift must be finite".into()));
        }
        Ok(())
    }

    /// Class ids: shared `0..S`, then source-private, then target-private.
    pub fn label_space(&self) -> LabelSpaceConfig {
        let s = self.n_shared as u32;
        let sp = self.n_source_private as u32;
        let tp = self.n_target_private as u32;
        let shared = 0..s;
        let source_private = s..s + sp;
        let target_private = s + sp..s + sp + tp;
        LabelSpaceConfig {
            source_labels: shared.clone().chain(source_private).collect(),
            target_labels: shared.chain(target_private).collect(),
            allow_source_private: sp > 0,
        }
    }

    /// Mean of every class, keyed by class id. Shared and private classes
    /// alternate around the circle.
    pub fn class_means(&self) -> Vec<(u32, Vec<f64>)> {
        let s = self.n_shared as u32;
        let sp = self.n_source_private as u32;
        let tp = self.n_target_private as u32;
        let longest = s.max(sp).max(tp);
        let mut order = Vec::new();
        for i in 0..longest {
            if i < s {
                order.push(i);
            }
            if i < tp {
                order.push(s + sp + i);
            }
            if i < sp {
                order.push(s + i);
            }
        }
        let total = order.len() as f64;
        let mut means: Vec<(u32, Vec<f64>)> = order
            .iter()
            .enumerate()
            .map(|(pos, &class)| {
                let angle = 2.0 * std::f64::consts::PI * pos as f64 / total;
                let mut m = vec![0.0; self.feature_dim];
                m[0] = self.radius * angle.cos();
                m[1] = self.radius * angle.sin();
                (class, m)
            })
            .collect();
        means.sort_by_key(|(c, _)| *c);
        means
    }

    /// Target-domain mean of a class: rotated in the first two dimensions,
    /// then translated.
    pub fn shifted_mean(&self, mean: &[f64]) -> Vec<f64> {
        let (sin, cos) = self.rotation_deg.to_radians().sin_cos();
        let mut m = mean.to_vec();
        m[0] = cos * mean[0] - sin * mean[1];
        m[1] = sin * mean[0] + cos * mean[1];
        for (v, t) in m.iter_mut().zip(&self.translation) {
            *v += t;
        }
        m
    }
}

/// Draws a synthetic open-set task from the data stream of `spec.seed`.
pub fn generate_synthetic_task(spec: &SyntheticTaskSpec) -> Result<(FeatureDataset, LabelSpaceConfig)> {
    spec.validate()?;
    let ls = spec.label_space();
    let means = spec.class_means();
    let mut rng = rng::stream(spec.seed, Stream::Data);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let shift_noise = Normal::new(0.0, spec.shift_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut rows = Vec::new();

    for (class, mean) in &means {
        if ls.source_index(*class).is_none() {
            continue;
        }
        for i in 0..spec.samples_per_class {
            let features = mean.iter().map(|m| m + noise.sample(&mut rng)).collect();
            rows.push(Sample {
                id: format!("s{class}_{i}"),
                domain: Domain::Source,
                label: *class,
                features,
            });
        }
    }
    for (class, mean) in &means {
        if !ls.target_labels.contains(class) {
            continue;
        }
        let shifted = spec.shifted_mean(mean);
        for i in 0..spec.samples_per_class {
            let features = shifted
                .iter()
                .map(|m| m + noise.sample(&mut rng) + shift_noise.sample(&mut rng))
                .collect();
            rows.push(Sample {
                id: format!("t{class}_{i}"),
                domain: Domain::Target,
                label: *class,
                features,
            });
        }
    }
    Ok((FeatureDataset { rows }, ls))
}

/// Endless stream of `(source rows, target rows)` index batches.
///
/// Each domain is walked through a fresh permutation per epoch; a partial
/// final batch is dropped and the domain reshuffled. Domains cycle
/// independently, so the smaller one simply recycles more often.
#[derive(Debug, Clone)]
pub struct BatchStream {
    batch: usize,
    source: EpochCursor,
    target: EpochCursor,
    rng: rng::Rng,
}

#[derive(Debug, Clone)]
struct EpochCursor {
    perm: Vec<usize>,
    pos: usize,
    epoch: usize,
}

impl EpochCursor {
    fn new(n: usize, rng: &mut rng::Rng) -> Self {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        EpochCursor { perm, pos: 0, epoch: 0 }
    }

    fn take(&mut self, batch: usize, rng: &mut rng::Rng) -> Vec<usize> {
        if self.pos + batch > self.perm.len() {
            self.perm.shuffle(rng);
            self.pos = 0;
            self.epoch += 1;
        }
        let out = self.perm[self.pos..self.pos + batch].to_vec();
        self.pos += batch;
        out
    }
}

impl BatchStream {
    pub fn new(n_source: usize, n_target: usize, batch_per_domain: usize, seed: u64) -> Result<Self> {
        if batch_per_domain == 0 {
            return Err(Error::Config("batch_per_domain must be at least 1".into()));
        }
        if batch_per_domain > n_source || batch_per_domain > n_target {
            return Err(Error::Config(format!(
                "batch_per_domain {batch_per_domain} exceeds a domain size ({n_source} source, {n_target} target)"
            )));
        }
        let mut rng = rng::stream(seed, Stream::Shuffle);
        let source = EpochCursor::new(n_source, &mut rng);
        let target = EpochCursor::new(n_target, &mut rng);
        Ok(BatchStream {
            batch: batch_per_domain,
            source,
            target,
            rng,
        })
    }

    /// Completed source epochs so far.
    pub fn source_epoch(&self) -> usize {
        self.source.epoch
    }

    pub fn target_epoch(&self) -> usize {
        self.target.epoch
    }
}

impl Iterator for BatchStream {
    type Item = (Vec<usize>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        let s = self.source.take(self.batch, &mut self.rng);
        let t = self.target.take(self.batch, &mut self.rng);
        Some((s, t))
    }
}
