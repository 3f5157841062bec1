//! Named parameter tensors and their tape handles.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::rng::normal_tensor;
use crate::tensor::Tensor;

/// Parameters keyed by dotted name, e.g. `rgb.stage1.conv.weight`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::validation(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Copies every entry whose name starts with `prefix` from `other`.
    pub fn copy_prefix(&mut self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for (name, t) in other.iter().filter(|(n, _)| n.starts_with(prefix)) {
            let slot = self
                .map
                .get_mut(name)
                .ok_or_else(|| Error::validation(format!("unexpected parameter {name}")))?;
            if slot.shape() != t.shape() {
                return Err(Error::shape(format!(
                    "{name}: {:?} vs {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            *slot = t.clone();
            n += 1;
        }
        Ok(n)
    }

    /// Puts every parameter on `tape`, as leaves when `trainable`, else constants.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let map = self
            .map
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        ParamVars { map }
    }
}

#[derive(Clone, Debug)]
pub struct ParamVars {
    map: BTreeMap<String, Var>,
}

impl FromIterator<(String, Var)> for ParamVars {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self {
            map: iter.into_iter().collect(),
        }
    }
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::validation(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.map.iter()
    }

    /// Rebinds `name` to `v`, e.g. to probe one tensor in a gradient check.
    pub fn set(&mut self, name: impl Into<String>, v: Var) {
        self.map.insert(name.into(), v);
    }
}

/// He-style normal init for a weight with the given fan-in.
pub(crate) fn he_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    normal_tensor(rng, shape, (2.0 / fan_in as f64).sqrt())
}

pub(crate) fn lecun_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    normal_tensor(rng, shape, (1.0 / fan_in as f64).sqrt())
}
