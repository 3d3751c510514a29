//! Knowledge transfer by variational mutual-information maximization.
//!
//! Each encoder level `k` gets a head predicting the multimodal feature
//! `m_k` from the unimodal feature `u_k` as a Gaussian with a learned mean
//! network and one learned standard deviation per channel. The transfer
//! loss is the level-weighted negative log-likelihood of `m_k` under that
//! Gaussian, without its additive constant.

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ConvSpec, Tensor};
use crate::error::{Error, Result};
use crate::nn::{Conv, Module, Param};

/// `softplus^-1(1)`, so a fresh head starts at unit deviation.
pub const RHO_UNIT: f64 = 0.541_324_854_612_918_1;

#[derive(Debug, Clone)]
pub struct VariationalHead {
    layers: [Conv; 3],
    /// Unconstrained per-channel parameter; `sigma = softplus(rho)`.
    pub rho: Param,
}

impl VariationalHead {
    /// `in_channels` of `u`, `out_channels` of `m`; the hidden width equals
    /// `out_channels`. The last layer starts at zero.
    pub fn new(name: &str, in_channels: usize, out_channels: usize, rank: usize, rng: &mut ChaCha8Rng) -> Self {
        let spec = ConvSpec::new(1, 0);
        let layers = [
            Conv::new(&format!("{name}.mu0"), in_channels, out_channels, 1, rank, spec, true, 1.0, rng),
            Conv::new(&format!("{name}.mu1"), out_channels, out_channels, 1, rank, spec, true, 1.0, rng),
            Conv::new(&format!("{name}.mu2"), out_channels, out_channels, 1, rank, spec, true, 1.0, rng),
        ];
        layers[2].zero();
        let rho = Param::new(format!("{name}.rho"), ArrayD::from_elem(IxDyn(&[out_channels]), RHO_UNIT));
        Self { layers, rho }
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.layers[2].out_channels()
    }

    pub fn mean(&self, u: &Tensor) -> Result<Tensor> {
        if u.ndim() < 3 || u.shape()[1] != self.in_channels() {
            let mut expected = u.shape().to_vec();
            if expected.len() > 1 {
                expected[1] = self.in_channels();
            }
            return Err(Error::shape("variational head input", &expected, u.shape()));
        }
        let h = self.layers[0].forward(u).relu();
        let h = self.layers[1].forward(&h).relu();
        Ok(self.layers[2].forward(&h))
    }

    pub fn sigma(&self) -> Tensor {
        self.rho.tensor().softplus()
    }
}

impl Module for VariationalHead {
    fn params(&self) -> Vec<Param> {
        let mut p: Vec<Param> = self.layers.iter().flat_map(Module::params).collect();
        p.push(self.rho.clone());
        p
    }
}

/// `sum_{c,x} [ln sigma_c + (m - mu)^2 / (2 sigma_c^2)]`, averaged over the
/// batch. `sigma` has one entry per channel.
pub fn neg_log_q(m: &Tensor, mu: &Tensor, sigma: &Tensor) -> Result<Tensor> {
    if m.shape() != mu.shape() {
        return Err(Error::shape("neg_log_q mean", m.shape(), mu.shape()));
    }
    if m.ndim() < 2 || sigma.shape() != [m.shape()[1]] {
        return Err(Error::shape("neg_log_q sigma", &m.shape()[1..2.min(m.ndim())], sigma.shape()));
    }
    if let Some(&s) = sigma.value().iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::Config(format!("sigma must be positive, got {s}")));
    }
    let mut bshape = vec![1; m.ndim()];
    bshape[1] = m.shape()[1];
    let sigma = sigma.reshape(&bshape);
    let batch = m.shape()[0] as f64;
    let quad = m.sub(mu).square().div(&sigma.square().scale(2.0));
    let log_term = sigma.ln().add(&Tensor::zeros(m.shape()));
    Ok(quad.add(&log_term).sum().scale(1.0 / batch))
}

/// Level weights `gamma_k`, strictly increasing and summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelWeights(Vec<f64>);

impl LevelWeights {
    /// `gamma_k = k / sum_j j`.
    pub fn linear(levels: usize) -> Self {
        let total = (levels * (levels + 1) / 2) as f64;
        Self((1..=levels).map(|k| k as f64 / total).collect())
    }

    pub fn new(gamma: Vec<f64>) -> Result<Self> {
        let sum: f64 = gamma.iter().sum();
        if gamma.is_empty()
            || gamma.iter().any(|g| !(*g >= 0.0))
            || gamma.windows(2).any(|w| w[0] >= w[1])
            || (sum - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "level weights must be non-negative, strictly increasing and sum to 1, got {gamma:?}"
            )));
        }
        Ok(Self(gamma))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// One head per encoder level.
#[derive(Debug, Clone)]
pub struct MmiHeads {
    pub heads: Vec<VariationalHead>,
}

impl MmiHeads {
    /// `widths[k]` is the channel count at level `k + 1` of both paths.
    pub fn new(widths: &[usize], rank: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = widths
            .iter()
            .enumerate()
            .map(|(k, &w)| VariationalHead::new(&format!("mmi.level{}", k + 1), w, w, rank, &mut rng))
            .collect();
        Self { heads }
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }
}

impl Module for MmiHeads {
    fn params(&self) -> Vec<Param> {
        self.heads.iter().flat_map(Module::params).collect()
    }
}

/// `sum_k gamma_k neg_log_q(m_k, mu_k(u_k), sigma_k)` over `(m_k, u_k)`
/// pairs. With `detach_target` the multimodal features are constants.
pub fn mi_loss(pairs: &[(Tensor, Tensor)], heads: &MmiHeads, gamma: &LevelWeights, detach_target: bool) -> Result<Tensor> {
    let g = gamma.as_slice();
    if pairs.len() != heads.len() || pairs.len() != g.len() || pairs.is_empty() {
        return Err(Error::Config(format!(
            "mi_loss got {} feature pairs, {} heads and {} level weights",
            pairs.len(),
            heads.len(),
            g.len()
        )));
    }
    let mut total: Option<Tensor> = None;
    for (((m, u), head), &gk) in pairs.iter().zip(&heads.heads).zip(g) {
        let target = if detach_target { m.detach() } else { m.clone() };
        let term = neg_log_q(&target, &head.mean(u)?, &head.sigma())?.scale(gk);
        total = Some(match total {
            Some(t) => t.add(&term),
            None => term,
        });
    }
    Ok(total.unwrap())
}
