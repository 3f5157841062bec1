//! SGD with momentum and coupled weight decay.
//!
//! Per parameter with gradient `g`: `d = g + wd·p`, `v ← μ·v + d`,
//! `p ← p − lr·v`. The velocity starts at zero, so the first step uses `d`.
//! Parameters that received no gradient are left untouched, decay included.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// Applies one update for every `(name, gradient)` pair.
    pub fn step<'a>(
        &mut self,
        params: &mut ParamStore,
        grads: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::validation(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "{name}: gradient {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let d = gv + self.weight_decay * *pv;
                *vv = self.momentum * *vv + d;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}
