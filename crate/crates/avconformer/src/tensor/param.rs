//! Named parameters and buffers.
//!
//! A `ParamSet` owns every tensor of a model in insertion order: trainable
//! weights plus non-trainable buffers (batch-norm running statistics). Names
//! are unique; checkpoints round-trip values bit-exactly.

use std::collections::BTreeMap;

use super::{Rng, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Vec<f32>>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<Parameter>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> usize {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = self.entries.len();
        self.entries.push(Parameter {
            name: name.to_string(),
            value,
            grad: None,
            trainable,
        });
        self.index.insert(name.to_string(), id);
        id
    }

    /// Weight init: uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)).
    pub fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut Rng) -> usize {
        let bound = (1.0 / fan_in as f32).sqrt();
        let t = Tensor::uniform(shape, bound, &mut rng.substream(fnv1a(name)));
        self.insert(name, t, true)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize], trainable: bool) -> usize {
        self.insert(name, Tensor::zeros(shape), trainable)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize], trainable: bool) -> usize {
        self.insert(name, Tensor::ones(shape), trainable)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: usize) -> &Parameter {
        &self.entries[id]
    }

    pub fn entry_mut(&mut self, id: usize) -> &mut Parameter {
        &mut self.entries[id]
    }

    pub fn lookup(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.entries.iter_mut()
    }

    /// Total element count, optionally restricted to trainable entries.
    pub fn num_elements(&self, trainable_only: bool) -> usize {
        self.entries
            .iter()
            .filter(|p| !trainable_only || p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Mutable views of two distinct entries (for batch-norm mean/var).
    pub fn two_mut(&mut self, a: usize, b: usize) -> (&mut Parameter, &mut Parameter) {
        assert_ne!(a, b);
        if a < b {
            let (lo, hi) = self.entries.split_at_mut(b);
            (&mut lo[a], &mut hi[0])
        } else {
            let (lo, hi) = self.entries.split_at_mut(a);
            (&mut hi[0], &mut lo[b])
        }
    }

    pub fn accumulate_grad(&mut self, id: usize, g: &[f32]) {
        let e = &mut self.entries[id];
        match &mut e.grad {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot => *slot = Some(g.to_vec()),
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    /// Fails if any gradient contains a non-finite value, naming the
    /// parameter.
    pub fn check_finite_grads(&self, step: usize) -> Result<()> {
        for e in &self.entries {
            if let Some(g) = &e.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        what: format!("gradient of {}", e.name),
                        step,
                    });
                }
            }
        }
        Ok(())
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::zeros(&[2]), true);
        p.insert("w", Tensor::zeros(&[2]), true);
    }

    #[test]
    fn init_reproducible_per_name() {
        let mut rng1 = Rng::new(5);
        let mut rng2 = Rng::new(5);
        let mut a = ParamSet::new();
        let mut b = ParamSet::new();
        a.weight("layer.w", &[4, 4], 4, &mut rng1);
        b.weight("layer.w", &[4, 4], 4, &mut rng2);
        assert_eq!(a.entry(0).value.data, b.entry(0).value.data);
    }
}
