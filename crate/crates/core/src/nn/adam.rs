use ndarray::{ArrayD, IxDyn, Zip};
use serde::{Deserialize, Serialize};

use super::Param;
use crate::autograd::{Array, Gradients};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer over a fixed parameter list. Parameters that
/// received no gradient in a step are left untouched, moments included.
pub struct Adam {
    params: Vec<Param>,
    first: Vec<Array>,
    second: Vec<Array>,
    counts: Vec<u64>,
    lr: f64,
    cfg: AdamConfig,
}

impl Adam {
    pub fn new(params: Vec<Param>, lr: f64, cfg: AdamConfig) -> Self {
        let first: Vec<Array> = params.iter().map(|p| ArrayD::zeros(IxDyn(&p.shape()))).collect();
        let second = first.clone();
        let counts = vec![0; params.len()];
        Self {
            params,
            first,
            second,
            counts,
            lr,
            cfg,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn step(&mut self, grads: &Gradients) {
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        for i in 0..self.params.len() {
            let param = &self.params[i];
            let leaf = param.tensor();
            let Some(g) = grads.get(&leaf) else { continue };
            self.counts[i] += 1;
            let t = self.counts[i] as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let mut value = leaf.value().clone();
            Zip::from(&mut value)
                .and(&mut self.first[i])
                .and(&mut self.second[i])
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= self.lr * mhat / (vhat.sqrt() + eps);
                });
            param.set(value);
        }
    }

    /// Moments and step counts as named arrays for checkpointing.
    pub fn state(&self) -> Vec<(String, Array)> {
        let mut out = Vec::with_capacity(3 * self.params.len());
        for (i, p) in self.params.iter().enumerate() {
            out.push((format!("m.{}", p.name()), self.first[i].clone()));
            out.push((format!("v.{}", p.name()), self.second[i].clone()));
            out.push((
                format!("t.{}", p.name()),
                ArrayD::from_elem(IxDyn(&[]), self.counts[i] as f64),
            ));
        }
        out
    }

    pub fn load_state(&mut self, entries: &[(String, Array)], component: &str) -> Result<()> {
        let find = |key: String| -> Result<&Array> {
            entries.iter().find(|(n, _)| *n == key).map(|(_, a)| a).ok_or_else(|| Error::Checkpoint {
                component: component.to_string(),
                reason: format!("optimizer entry `{key}` missing"),
            })
        };
        for i in 0..self.params.len() {
            let name = self.params[i].name().to_string();
            let m = find(format!("m.{name}"))?;
            let v = find(format!("v.{name}"))?;
            let t = find(format!("t.{name}"))?;
            if m.shape() != self.first[i].shape() || v.shape() != self.second[i].shape() {
                return Err(Error::Checkpoint {
                    component: component.to_string(),
                    reason: format!("optimizer moments for `{name}` have the wrong shape"),
                });
            }
            self.first[i] = m.clone();
            self.second[i] = v.clone();
            self.counts[i] = t.iter().next().copied().unwrap_or(0.0) as u64;
        }
        Ok(())
    }
}
