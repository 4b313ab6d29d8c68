//! First-order optimizers with exportable state.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::math;
use crate::params::{ParamGrads, ParamSet};
use crate::schedule::{OptimizerKind, TrainConfig};
use crate::tensor::Tensor;

/// SGD with heavy-ball momentum: `v ← μv + g + λw`, `w ← w − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

/// Adam with bias correction and optional L2 weight decay folded into the gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

fn zeros_for(params: &ParamSet) -> Vec<Tensor> {
    params.iter().map(|(_, _, t)| Tensor::zeros_like(t)).collect()
}

impl Optimizer {
    pub fn for_config(config: &TrainConfig, params: &ParamSet) -> Self {
        match config.optimizer {
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd {
                momentum: config.momentum,
                weight_decay: config.weight_decay,
                velocity: zeros_for(params),
            }),
            OptimizerKind::Adam => Optimizer::Adam(Adam {
                betas: config.betas,
                eps: 1e-8,
                weight_decay: config.weight_decay,
                step: 0,
                m: zeros_for(params),
                v: zeros_for(params),
            }),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamGrads, lr: f64) -> Result<()> {
        if !grads.is_finite() {
            bail!(NonFinite, "gradient contains non-finite values");
        }
        match self {
            Optimizer::Sgd(s) => {
                for ((w, g), v) in params.tensors_mut().iter_mut().zip(grads.iter()).zip(&mut s.velocity) {
                    if w.shape() != g.shape() {
                        bail!(Shape, "gradient shape {:?} for parameter {:?}", g.shape(), w.shape());
                    }
                    for ((wi, gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                        *vi = s.momentum * *vi + gi + s.weight_decay * *wi;
                        *wi -= lr * *vi;
                    }
                }
            }
            Optimizer::Adam(a) => {
                a.step += 1;
                let (b1, b2) = a.betas;
                let c1 = 1.0 - math::powi(b1, a.step as u32);
                let c2 = 1.0 - math::powi(b2, a.step as u32);
                for (((w, g), m), v) in params.tensors_mut().iter_mut().zip(grads.iter()).zip(&mut a.m).zip(&mut a.v) {
                    if w.shape() != g.shape() {
                        bail!(Shape, "gradient shape {:?} for parameter {:?}", g.shape(), w.shape());
                    }
                    for (((wi, gi), mi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                        let gi = gi + a.weight_decay * *wi;
                        *mi = b1 * *mi + (1.0 - b1) * gi;
                        *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                        *wi -= lr * (*mi / c1) / (math::sqrt(*vi / c2) + a.eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// Named state arrays, ordered deterministically. The Adam step counter is a 1-element array.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        match self {
            Optimizer::Sgd(s) => s.velocity.iter().enumerate().map(|(i, t)| (format!("velocity.{i}"), t.clone())).collect(),
            Optimizer::Adam(a) => {
                let mut out = Vec::with_capacity(2 * a.m.len() + 1);
                out.push((String::from("step"), Tensor::scalar(a.step as f64)));
                out.extend(a.m.iter().enumerate().map(|(i, t)| (format!("m.{i}"), t.clone())));
                out.extend(a.v.iter().enumerate().map(|(i, t)| (format!("v.{i}"), t.clone())));
                out
            }
        }
    }

    /// Restore state exported by [`Optimizer::state`] for the same parameter layout.
    pub fn load_state(&mut self, state: &[(String, Tensor)]) -> Result<()> {
        let lookup = |name: &str, like: &Tensor| -> Result<Tensor> {
            match state.iter().find(|(n, _)| n == name) {
                Some((_, t)) if t.shape() == like.shape() => Ok(t.clone()),
                Some((_, t)) => bail!(Shape, "optimizer state `{}` has shape {:?}, expected {:?}", name, t.shape(), like.shape()),
                None => bail!(Invalid, "optimizer state `{}` missing", name),
            }
        };
        match self {
            Optimizer::Sgd(s) => {
                if state.len() != s.velocity.len() {
                    bail!(Invalid, "expected {} SGD state arrays, got {}", s.velocity.len(), state.len());
                }
                for i in 0..s.velocity.len() {
                    s.velocity[i] = lookup(&format!("velocity.{i}"), &s.velocity[i])?;
                }
            }
            Optimizer::Adam(a) => {
                if state.len() != 2 * a.m.len() + 1 {
                    bail!(Invalid, "expected {} Adam state arrays, got {}", 2 * a.m.len() + 1, state.len());
                }
                let step = lookup("step", &Tensor::scalar(0.0))?.data()[0];
                if !(step >= 0.0 && math::floor(step) == step) {
                    bail!(Invalid, "Adam step counter {} is not a non-negative integer", step);
                }
                a.step = step as u64;
                for i in 0..a.m.len() {
                    a.m[i] = lookup(&format!("m.{i}"), &a.m[i])?;
                    a.v[i] = lookup(&format!("v.{i}"), &a.v[i])?;
                }
            }
        }
        Ok(())
    }
}
