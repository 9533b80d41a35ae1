use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::TensorValue;
use crate::error::{Error, Result};

/// Parameter group: which network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    /// Feature generator.
    #[serde(rename = "G_F")]
    Generator,
    /// Domain classifier with the extra "unknown" output.
    #[serde(rename = "G_C1")]
    DomainClassifier,
    /// Supplementary source classifier with leaky-softmax head.
    #[serde(rename = "G_C2")]
    Supplementary,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Generator, Group::DomainClassifier, Group::Supplementary];

    pub fn tag(self) -> &'static str {
        match self {
            Group::Generator => "G_F",
            Group::DomainClassifier => "G_C1",
            Group::Supplementary => "G_C2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: TensorValue,
    pub velocity: TensorValue,
}

/// Named, grouped parameters with their momentum buffers.
///
/// Insertion order is preserved, which fixes the order of every loop over
/// parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
    /// Non-trainable state such as batch-norm running statistics.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    buffers: BTreeMap<String, TensorValue>,
}

/// Gradients keyed by parameter name.
pub type ParamGrads = BTreeMap<String, TensorValue>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, group: Group, value: TensorValue) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::Contract(format!("parameter {name} registered twice")));
        }
        let velocity = TensorValue::zeros_like(&value);
        self.params.push(Param {
            name,
            group,
            value,
            velocity,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn value(&self, name: &str) -> Result<&TensorValue> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn buffer(&self, name: &str) -> Option<&TensorValue> {
        self.buffers.get(name)
    }

    pub fn set_buffer(&mut self, name: impl Into<String>, value: TensorValue) {
        self.buffers.insert(name.into(), value);
    }

    pub fn in_group(&self, group: Group) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(move |p| p.group == group)
    }

    /// Checks the store invariants: finite values and matching momentum shapes.
    pub fn validate(&self) -> Result<()> {
        for p in &self.params {
            if p.velocity.shape() != p.value.shape() {
                return Err(Error::Contract(format!(
                    "momentum buffer of {} has shape {:?}, weights {:?}",
                    p.name,
                    p.velocity.shape(),
                    p.value.shape()
                )));
            }
            if !p.value.is_finite() || !p.velocity.is_finite() {
                return Err(Error::Contract(format!("parameter {} is not finite", p.name)));
            }
        }
        Ok(())
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundParams> {
        let mut vars = BTreeMap::new();
        for p in &self.params {
            vars.insert(p.name.clone(), tape.leaf(p.value.clone())?);
        }
        Ok(BoundParams { vars })
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {name} not bound")))
    }

    /// Collects gradients for the parameters in `groups`; parameters no
    /// gradient reached get zeros.
    pub fn grads_for(
        &self,
        tape: &Tape,
        grads: &super::tape::Gradients,
        store: &ParamStore,
        groups: &[Group],
    ) -> Result<ParamGrads> {
        let mut out = ParamGrads::new();
        for p in store.iter().filter(|p| groups.contains(&p.group)) {
            let v = self.var(&p.name)?;
            out.insert(p.name.clone(), grads.get_or_zero(v, tape.value(v)));
        }
        Ok(out)
    }
}

/// Heavy-ball momentum update on the parameters of the selected groups:
/// `v <- mu * v + g`, `theta <- theta - lr * v`.
///
/// `lr_for` maps a group to its learning rate.
pub fn sgd_step(
    params: &mut ParamStore,
    grads: &ParamGrads,
    lr_for: impl Fn(Group) -> f64,
    mu: f64,
    groups: &[Group],
) -> Result<()> {
    for p in params.params.iter_mut().filter(|p| groups.contains(&p.group)) {
        let g = grads
            .get(&p.name)
            .ok_or_else(|| Error::Contract(format!("missing gradient for parameter {}", p.name)))?;
        if g.shape() != p.value.shape() {
            return Err(Error::dim(
                "sgd_step",
                format!(
                    "gradient for {} has shape {:?}, weights {:?}",
                    p.name,
                    g.shape(),
                    p.value.shape()
                ),
            ));
        }
        let lr = lr_for(p.group);
        for ((theta, v), &gv) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(p.velocity.data_mut())
            .zip(g.data())
        {
            *v = mu * *v + gv;
            *theta -= lr * *v;
        }
    }
    Ok(())
}
