use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::math;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        debug_assert!(self.find(name).is_none(), "duplicate parameter {name}");
        self.names.push(name.to_string());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replace every array with a same-named, same-shaped array from `other`.
    pub fn load_from(&mut self, other: &[(String, Tensor)]) -> Result<()> {
        if other.len() != self.len() {
            bail!(Invalid, "parameter count mismatch: model has {}, source has {}", self.len(), other.len());
        }
        for (name, t) in other {
            let Some(id) = self.find(name) else {
                bail!(Invalid, "unknown parameter `{}`", name);
            };
            if self.tensors[id.0].shape() != t.shape() {
                bail!(
                    Shape,
                    "parameter `{}` has shape {:?}, source has {:?}",
                    name,
                    self.tensors[id.0].shape(),
                    t.shape()
                );
            }
            self.tensors[id.0] = t.clone();
        }
        Ok(())
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }
}

/// Gradient accumulator aligned with a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Tensor>,
}

impl ParamGrads {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self { grads: params.tensors.iter().map(Tensor::zeros_like).collect() }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor) -> Result<()> {
        self.grads[id.0].axpy(1.0, g)
    }

    pub fn add(&mut self, other: &ParamGrads) -> Result<()> {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.axpy(1.0, b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.grads.iter_mut().for_each(|g| g.scale(alpha));
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }

    pub fn l2_norm(&self) -> f64 {
        math::sqrt(self.grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum())
    }
}

/// Seeded weight initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// He-style uniform initialization: `U(-b, b)` with `b = gain·sqrt(6 / fan_in)`.
    pub fn he_uniform(&mut self, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
        let bound = gain * math::sqrt(6.0 / fan_in.max(1) as f64);
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        Tensor::new(shape, data).expect("shape and data agree by construction")
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        Tensor::new(shape, data).expect("shape and data agree by construction")
    }
}
