use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Element, Tensor};

pub const MOMENTUM: f64 = 0.9;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::SgdMomentum => "sgd_momentum",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "sgd_momentum" | "momentum" => Ok(OptimizerKind::SgdMomentum),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::InvalidArgument(format!(
                "unknown optimizer {s:?} (expected sgd, sgd_momentum or adam)"
            ))),
        }
    }
}

/// First-order optimizer with per-parameter state kept in `f64`.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    steps: usize,
    // Velocity for momentum; first and second moments for adam.
    slots: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Optimizer {
            kind,
            lr,
            steps: 0,
            slots: BTreeMap::new(),
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Updates every trainable parameter in place. All gradients are checked
    /// before anything is written, and the step fails if a parameter turns
    /// non-finite.
    pub fn step<F: Element>(&mut self, store: &mut ParamStore<F>, grads: &BTreeMap<String, Tensor<F>>) -> Result<()> {
        let trainable: Vec<String> = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.to_string())
            .collect();
        for name in &trainable {
            let g = grads.get(name).ok_or_else(|| Error::MissingGradient(name.clone()))?;
            let w = store.get(name)?;
            if g.shape() != w.shape() {
                return Err(Error::shape("optimizer step", g.shape(), w.shape()));
            }
        }
        if let Some(extra) = grads.keys().find(|k| !trainable.contains(k)) {
            return Err(Error::UnknownParameter(extra.clone()));
        }
        self.steps += 1;
        let t = self.steps as i32;
        for name in trainable {
            let g = &grads[&name];
            let mut w = store.get(&name)?.clone();
            let n = w.len();
            let slot = self
                .slots
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let lr = self.lr;
            for (i, (wv, gv)) in w.data_mut().iter_mut().zip(g.data()).enumerate() {
                let g = gv.as_f64();
                let delta = match self.kind {
                    OptimizerKind::Sgd => lr * g,
                    OptimizerKind::SgdMomentum => {
                        let v = &mut slot.0[i];
                        *v = MOMENTUM * *v + g;
                        lr * *v
                    }
                    OptimizerKind::Adam => {
                        let m = &mut slot.0[i];
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                        let v = &mut slot.1[i];
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                        let m_hat = *m / (1.0 - ADAM_BETA1.powi(t));
                        let v_hat = *v / (1.0 - ADAM_BETA2.powi(t));
                        lr * m_hat / (v_hat.sqrt() + ADAM_EPS)
                    }
                };
                *wv = F::lit(wv.as_f64() - delta);
            }
            if !w.all_finite() {
                return Err(Error::NonFinite {
                    param: name,
                    step: self.steps,
                });
            }
            store.set(&name, w)?;
        }
        Ok(())
    }
}

/// Global L2 norm over all gradients.
pub fn grad_norm<F: Element>(grads: &BTreeMap<String, Tensor<F>>) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<F: Element>(grads: &mut BTreeMap<String, Tensor<F>>, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for t in grads.values_mut() {
            *t = t.map(|v| F::lit(v.as_f64() * s));
        }
    }
    norm
}
