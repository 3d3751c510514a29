//! Trainable parameters, layers, initialization and the optimizer.

mod adam;
pub mod blob;
mod layers;

use std::sync::{Arc, RwLock};

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autograd::{Array, Tensor};
use crate::error::{Error, Result};

pub use adam::{Adam, AdamConfig};
pub use layers::{Conv, InstanceNorm, Linear};

struct ParamInner {
    name: String,
    leaf: RwLock<Tensor>,
}

/// A named, shared handle on a trainable array. Clones refer to the same
/// parameter.
#[derive(Clone)]
pub struct Param(Arc<ParamInner>);

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Param")
            .field("name", &self.0.name)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Param {
    pub fn new(name: impl Into<String>, value: Array) -> Self {
        Param(Arc::new(ParamInner {
            name: name.into(),
            leaf: RwLock::new(Tensor::leaf(value)),
        }))
    }

    pub fn name(&self) -> &str {
        &self.0.name
    }

    /// The current leaf. Gradients computed through it are looked up with
    /// the same handle.
    pub fn tensor(&self) -> Tensor {
        self.0.leaf.read().expect("param lock").clone()
    }

    pub fn value(&self) -> Array {
        self.tensor().value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tensor().shape().to_vec()
    }

    /// Replaces the value; the next `tensor()` call yields a fresh leaf.
    pub fn set(&self, value: Array) {
        *self.0.leaf.write().expect("param lock") = Tensor::leaf(value);
    }
}

/// Anything owning parameters, listed in a stable order.
pub trait Module {
    fn params(&self) -> Vec<Param>;

    fn checksum(&self) -> String {
        checksum(&self.params())
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.tensor().len()).sum()
    }
}

/// SHA-256 over names, shapes and exact bit patterns of every value.
pub fn checksum(params: &[Param]) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.name().as_bytes());
        let t = p.tensor();
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.value().iter() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub fn snapshot(params: &[Param]) -> Vec<(String, Array)> {
    params.iter().map(|p| (p.name().to_string(), p.value())).collect()
}

/// Restores parameter values from named entries; every parameter must be
/// present with a matching shape.
pub fn restore(params: &[Param], entries: &[(String, Array)], component: &str) -> Result<()> {
    for p in params {
        let (_, value) = entries.iter().find(|(n, _)| n == p.name()).ok_or_else(|| Error::Checkpoint {
            component: component.to_string(),
            reason: format!("no entry for parameter `{}`", p.name()),
        })?;
        if value.shape() != p.shape().as_slice() {
            return Err(Error::Checkpoint {
                component: component.to_string(),
                reason: format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    p.name(),
                    value.shape(),
                    p.shape()
                ),
            });
        }
        p.set(value.clone());
    }
    Ok(())
}

/// He-normal initialization, `std = gain * sqrt(2 / fan_in)`.
pub fn he_normal<R: Rng>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Array {
    let std = gain * (2.0 / fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| dist.sample(rng)).collect()).unwrap()
}
