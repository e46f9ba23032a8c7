//! Named parameter storage with per-entry freeze flags.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub frozen: bool,
}

/// Trainable and frozen tensors keyed by dotted names such as
/// `domain.layer3.attn.wq`. Iteration order is lexicographic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor, frozen: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter {name}")));
        }
        tensor.set_requires_grad(!frozen);
        self.entries.insert(name, Param { tensor, frozen });
        Ok(())
    }

    /// Inserts or replaces an entry.
    pub fn set(&mut self, name: impl Into<String>, mut tensor: Tensor, frozen: bool) {
        tensor.set_requires_grad(!frozen);
        self.entries.insert(name.into(), Param { tensor, frozen });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|p| p.frozen)
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))?;
        p.frozen = frozen;
        p.tensor.set_requires_grad(!frozen);
        Ok(())
    }

    /// Freezes or unfreezes every entry whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for (name, p) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                p.frozen = frozen;
                p.tensor.set_requires_grad(!frozen);
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.entries.remove(name)
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| !p.frozen)
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.frozen)
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            if p.frozen {
                p.tensor.clear_grad();
            } else {
                p.tensor.zero_grad();
            }
        }
    }

    pub fn clear_grads(&mut self) {
        self.entries.values_mut().for_each(|p| p.tensor.clear_grad());
    }

    /// FNV-1a over names, shapes and the raw bits of every value whose name
    /// starts with `prefix`. Used to assert byte-identity of frozen weights.
    pub fn checksum(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, p) in self.entries.iter().filter(|(n, _)| n.starts_with(prefix)) {
            eat(name.as_bytes());
            for d in p.tensor.shape() {
                eat(&(*d as u64).to_le_bytes());
            }
            for v in p.tensor.values() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Copies every entry under `from_prefix` into this store under
    /// `to_prefix`, with the given freeze flag.
    pub fn copy_prefix(&mut self, src: &ParamStore, from_prefix: &str, to_prefix: &str, frozen: bool) -> usize {
        let mut copied = 0;
        for (name, p) in src.entries.iter() {
            if let Some(rest) = name.strip_prefix(from_prefix) {
                let mut t = p.tensor.clone();
                t.clear_grad();
                self.set(format!("{to_prefix}{rest}"), t, frozen);
                copied += 1;
            }
        }
        copied
    }
}

/// Parameter initializers.
pub mod init {
    use super::*;

    pub fn normal_tensor<R: Rng>(rng: &mut R, shape: Vec<usize>, std: f64) -> Tensor {
        let numel: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let values = (0..numel).map(|_| dist.sample(rng)).collect();
        Tensor::new(shape, values).expect("shape and values agree")
    }
}
