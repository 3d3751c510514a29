//! Training objectives over `(batch, classes, *spatial)` tensors.
//!
//! Everything is built from differentiable tensor ops, so gradients come
//! from the autodiff graph. Logarithms are natural; probabilities inside
//! logarithms are floored at [`PROB_FLOOR`].

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub const PROB_FLOOR: f64 = 1e-8;
pub const DICE_EPS: f64 = 1e-5;
/// Peak value of the consistency ramp.
pub const RAMP_AMPLITUDE: f64 = 0.1;

fn same_shape(ctx: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(ctx, a.shape(), b.shape()));
    }
    Ok(())
}

fn class_tensor(ctx: &str, t: &Tensor) -> Result<()> {
    if t.ndim() < 3 {
        return Err(Error::Config(format!(
            "{ctx} expects a (batch, classes, *spatial) tensor, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// `softmax(logits / tau)` over the class axis.
pub fn soften_logits(logits: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    class_tensor("soften_logits", logits)?;
    let scaled = if tau == 1.0 { logits.clone() } else { logits.scale(1.0 / tau) };
    Ok(scaled.softmax(1))
}

/// Symmetric KL divergence between two soft segmentations, divided by the
/// class count and averaged over voxels and batch.
pub fn consistency_loss(s_m: &Tensor, s_u: &Tensor) -> Result<Tensor> {
    same_shape("consistency_loss", s_m, s_u)?;
    class_tensor("consistency_loss", s_m)?;
    let c = s_m.shape()[1] as f64;
    let voxels = (s_m.len() as f64) / c;
    // p ln(p/q) + q ln(q/p) = (p - q)(ln p - ln q)
    let log_ratio = s_m.clamp_min(PROB_FLOOR).ln().sub(&s_u.clamp_min(PROB_FLOOR).ln());
    Ok(s_m.sub(s_u).mul(&log_ratio).sum().scale(1.0 / (c * voxels)))
}

/// Per-class `-p ln p` and its class sum (the Shannon entropy).
#[derive(Debug, Clone)]
pub struct SelfInformationMap {
    pub channels: Tensor,
    pub scalar_map: Tensor,
}

pub fn self_information(probs: &Tensor) -> Result<SelfInformationMap> {
    class_tensor("self_information", probs)?;
    let channels = probs.mul(&probs.clamp_min(PROB_FLOOR).ln()).neg();
    let scalar_map = channels.sum_axes_keep(&[1]);
    Ok(SelfInformationMap { channels, scalar_map })
}

/// Largest value any single log-term can contribute.
fn log_ceiling() -> f64 {
    -PROB_FLOOR.ln()
}

/// Discriminator objective from raw logits: the negated mean of
/// `log D(real) + log(1 - D(fake))`, each term capped at `-ln 1e-8`.
pub fn adversarial_d_loss(real_logits: &Tensor, fake_logits: &Tensor) -> Tensor {
    let real = real_logits.neg().softplus().clamp_max(log_ceiling()).mean();
    let fake = fake_logits.softplus().clamp_max(log_ceiling()).mean();
    real.add(&fake)
}

/// Non-saturating generator objective `-mean log D(fake)`.
pub fn adversarial_g_loss(fake_logits: &Tensor) -> Tensor {
    fake_logits.neg().softplus().clamp_max(log_ceiling()).mean()
}

/// `1 -` mean soft Dice over the foreground classes `1..C`, pooling batch
/// and voxels.
pub fn dice_loss(probs: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape("dice_loss", probs, target)?;
    class_tensor("dice_loss", probs)?;
    let c = probs.shape()[1];
    if c < 2 {
        return Err(Error::Config("dice_loss needs at least one foreground class".into()));
    }
    let axes: Vec<usize> = (0..probs.ndim()).filter(|&a| a != 1).collect();
    let inter = probs.mul(target).sum_axes_keep(&axes).scale(2.0).add_scalar(DICE_EPS);
    let denom = probs.sum_axes_keep(&axes).add(&target.sum_axes_keep(&axes)).add_scalar(DICE_EPS);
    let per_class = inter.div(&denom).reshape(&[c]);
    let mut fg_mask = ndarray::ArrayD::from_elem(ndarray::IxDyn(&[c]), 1.0 / (c - 1) as f64);
    fg_mask[0] = 0.0;
    Ok(per_class.mul(&Tensor::new(fg_mask)).sum().neg().add_scalar(1.0))
}

/// Gaussian warm-up `0.1 exp(-5 (1 - S/L)^2)`; steps past `L` hold at 0.1.
pub fn ramp_up(step: u64, length: u64) -> Result<f64> {
    if length == 0 {
        return Err(Error::Config("ramp length must be positive".into()));
    }
    let t = (step.min(length) as f64) / length as f64;
    Ok(RAMP_AMPLITUDE * (-5.0 * (1.0 - t).powi(2)).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub multi: f64,
    pub uni: f64,
    /// Entropy adversarial term.
    pub en: f64,
    /// Knowledge adversarial term.
    pub kn: f64,
    /// Mutual-information transfer term.
    pub mi: f64,
    /// Consistency ramp length in optimizer steps; `None` uses 40% of the
    /// planned steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ramp_length: Option<u64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            multi: 0.2,
            uni: 0.8,
            en: 0.001,
            kn: 0.0002,
            mi: 0.5,
            ramp_length: None,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("multi", self.multi),
            ("uni", self.uni),
            ("en", self.en),
            ("kn", self.kn),
            ("mi", self.mi),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight `{name}` must be non-negative, got {v}")));
            }
        }
        if self.ramp_length == Some(0) {
            return Err(Error::Config("ramp_length must be positive".into()));
        }
        Ok(())
    }
}

/// Unweighted objective terms of one step. Disabled terms are `None` and
/// contribute nothing.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub dice_multi: Tensor,
    pub dice_uni: Tensor,
    pub consistency: Tensor,
    pub en_adv: Option<Tensor>,
    pub kn_adv: Option<Tensor>,
    pub mi: Option<Tensor>,
}

/// Weighted terms as they enter the total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dice_multi: f64,
    pub dice_uni: f64,
    pub consistency: f64,
    pub en_adv: f64,
    pub kn_adv: f64,
    pub mi: f64,
    pub omega: f64,
    pub total: f64,
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "dice_multi={:.6} dice_uni={:.6} consistency={:.6} en_adv={:.6} kn_adv={:.6} mi={:.6} omega={:.6} total={:.6}",
            self.dice_multi, self.dice_uni, self.consistency, self.en_adv, self.kn_adv, self.mi, self.omega, self.total
        )
    }
}

/// Weighted sum of the step's terms with `omega = ramp_up(step, L)` on the
/// consistency term. Fails on the first non-finite term.
pub fn total_loss(parts: &LossParts, w: &LossWeights, step: u64) -> Result<(Tensor, LossBreakdown)> {
    let length = w
        .ramp_length
        .ok_or_else(|| Error::Config("ramp_length is unresolved".into()))?;
    let omega = ramp_up(step, length)?;
    let terms: [(&str, Option<&Tensor>, f64); 6] = [
        ("dice_multi", Some(&parts.dice_multi), w.multi),
        ("dice_uni", Some(&parts.dice_uni), w.uni),
        ("consistency", Some(&parts.consistency), omega),
        ("en_adv", parts.en_adv.as_ref(), w.en),
        ("kn_adv", parts.kn_adv.as_ref(), w.kn),
        ("mi", parts.mi.as_ref(), w.mi),
    ];
    let mut b = LossBreakdown {
        omega,
        ..Default::default()
    };
    let mut total: Option<Tensor> = None;
    for (name, t, coef) in terms {
        let Some(t) = t else { continue };
        let weighted = t.scale(coef);
        let v = weighted.item();
        match name {
            "dice_multi" => b.dice_multi = v,
            "dice_uni" => b.dice_uni = v,
            "consistency" => b.consistency = v,
            "en_adv" => b.en_adv = v,
            "kn_adv" => b.kn_adv = v,
            _ => b.mi = v,
        }
        if !t.item().is_finite() || !v.is_finite() {
            return Err(Error::NonFinite {
                term: name.to_string(),
                breakdown: b.to_string(),
            });
        }
        total = Some(match total {
            Some(acc) => acc.add(&weighted),
            None => weighted,
        });
    }
    let total = total.expect("dice terms are always present");
    b.total = total.item();
    Ok((total, b))
}
