//! Adversaries for the two alignment games.
//!
//! [`EntropyDiscriminator`] emits a grid of real/fake logits over a
//! self-information map; [`KnowledgeDiscriminator`] emits one logit per
//! sample from bottleneck features. Neither squashes its output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvSpec, Tensor};
use crate::error::{Error, Result};
use crate::nn::{Conv, Linear, Module, Param};

const LEAK: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub spatial_rank: usize,
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.contains(&0) || self.in_channels == 0 {
            return Err(Error::Config(format!(
                "discriminator needs at least 2 positive layer widths and inputs, got in={} widths={:?}",
                self.in_channels, self.widths
            )));
        }
        if !(2..=3).contains(&self.spatial_rank) {
            return Err(Error::Config(format!("spatial_rank must be 2 or 3, got {}", self.spatial_rank)));
        }
        Ok(())
    }
}

fn check_channels(name: &str, x: &Tensor, cfg: &DiscriminatorConfig) -> Result<()> {
    if x.ndim() != cfg.spatial_rank + 2 || x.shape()[1] != cfg.in_channels {
        let mut expected = x.shape().to_vec();
        expected.resize(cfg.spatial_rank + 2, 0);
        expected[1] = cfg.in_channels;
        return Err(Error::shape(format!("{name} input"), &expected, x.shape()));
    }
    Ok(())
}

/// Strided fully-convolutional classifier: `k4 s2 p1` layers followed by a
/// `k3 s1 p1` projection to one channel.
#[derive(Debug, Clone)]
pub struct EntropyDiscriminator {
    cfg: DiscriminatorConfig,
    layers: Vec<Conv>,
    classifier: Conv,
}

impl EntropyDiscriminator {
    pub fn new(cfg: &DiscriminatorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = cfg.in_channels;
        let mut layers = Vec::with_capacity(cfg.widths.len());
        for (i, &w) in cfg.widths.iter().enumerate() {
            layers.push(Conv::new(&format!("d_en.conv{i}"), cin, w, 4, cfg.spatial_rank, ConvSpec::new(2, 1), true, 1.0, &mut rng));
            cin = w;
        }
        let classifier = Conv::new("d_en.out", cin, 1, 3, cfg.spatial_rank, ConvSpec::new(1, 1), true, 0.5, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            layers,
            classifier,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    /// Spatial reduction factor of the logit grid.
    pub fn stride(&self) -> usize {
        1 << self.layers.len()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_channels("entropy discriminator", x, &self.cfg)?;
        let stride = self.stride();
        if let Some(&n) = x.shape()[2..].iter().find(|&&n| n % stride != 0) {
            return Err(Error::Config(format!(
                "entropy discriminator input extent {n} is not a multiple of {stride}"
            )));
        }
        let mut h = x.clone();
        for l in &self.layers {
            h = l.forward(&h).leaky_relu(LEAK);
        }
        Ok(self.classifier.forward(&h))
    }
}

impl Module for EntropyDiscriminator {
    fn params(&self) -> Vec<Param> {
        let mut p: Vec<Param> = self.layers.iter().flat_map(Module::params).collect();
        p.extend(self.classifier.params());
        p
    }
}

/// Two `k3` convolutions, global average pooling and an affine map to one
/// logit per sample.
#[derive(Debug, Clone)]
pub struct KnowledgeDiscriminator {
    cfg: DiscriminatorConfig,
    layers: Vec<Conv>,
    fc: Linear,
}

impl KnowledgeDiscriminator {
    pub fn new(cfg: &DiscriminatorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = cfg.in_channels;
        let mut layers = Vec::with_capacity(cfg.widths.len());
        for (i, &w) in cfg.widths.iter().enumerate() {
            layers.push(Conv::new(&format!("d_kn.conv{i}"), cin, w, 3, cfg.spatial_rank, ConvSpec::new(1, 1), true, 1.0, &mut rng));
            cin = w;
        }
        let fc = Linear::new("d_kn.fc", cin, 1, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            layers,
            fc,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn zero_classifier(&self) {
        self.fc.zero();
    }

    /// Returns `(batch, 1)` logits.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_channels("knowledge discriminator", x, &self.cfg)?;
        let mut h = x.clone();
        for l in &self.layers {
            h = l.forward(&h).leaky_relu(LEAK);
        }
        let axes: Vec<usize> = (2..h.ndim()).collect();
        let b = h.shape()[0];
        let c = h.shape()[1];
        let pooled = h.mean_axes_keep(&axes).reshape(&[b, c]);
        Ok(self.fc.forward(&pooled))
    }
}

impl Module for KnowledgeDiscriminator {
    fn params(&self) -> Vec<Param> {
        let mut p: Vec<Param> = self.layers.iter().flat_map(Module::params).collect();
        p.extend(self.fc.params());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{s, ArrayD, IxDyn};
    use rand::Rng;

    fn en_cfg() -> DiscriminatorConfig {
        DiscriminatorConfig {
            in_channels: 4,
            widths: vec![8, 16, 32, 64],
            spatial_rank: 2,
        }
    }

    fn kn_cfg() -> DiscriminatorConfig {
        DiscriminatorConfig {
            in_channels: 16,
            widths: vec![16, 16],
            spatial_rank: 2,
        }
    }

    fn rand_array(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        let n = shape.iter().product();
        ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn entropy_grid_shape_and_determinism() {
        let d = EntropyDiscriminator::new(&en_cfg(), 1).unwrap();
        let out = d.forward(&Tensor::zeros(&[2, 4, 64, 64])).unwrap();
        assert_eq!(out.shape(), &[2, 1, 4, 4]);
        assert_eq!(d.checksum(), EntropyDiscriminator::new(&en_cfg(), 1).unwrap().checksum());
        assert!(d.forward(&Tensor::zeros(&[1, 3, 64, 64])).is_err());
    }

    #[test]
    fn entropy_discriminator_is_shift_equivariant_in_the_interior() {
        let d = EntropyDiscriminator::new(&en_cfg(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_array(&[1, 4, 128, 128], &mut rng);
        let mut shifted = ArrayD::zeros(IxDyn(&[1, 4, 128, 128]));
        shifted.slice_mut(s![.., .., 16.., 16..]).assign(&x.slice(s![.., .., ..112, ..112]));
        let a = d.forward(&Tensor::new(x)).unwrap();
        let b = d.forward(&Tensor::new(shifted)).unwrap();
        assert_eq!(a.shape(), &[1, 1, 8, 8]);
        // outputs 2..=4 see only in-grid input in both runs
        for i in 2..=4 {
            for j in 2..=4 {
                let (u, v) = (a.value()[[0, 0, i, j]], b.value()[[0, 0, i + 1, j + 1]]);
                assert!((u - v).abs() < 1e-9, "({i},{j}): {u} vs {v}");
            }
        }
    }

    #[test]
    fn knowledge_logits() {
        let d = KnowledgeDiscriminator::new(&kn_cfg(), 1).unwrap();
        d.zero_classifier();
        let z = d.forward(&Tensor::zeros(&[1, 16, 8, 8])).unwrap();
        assert_eq!(z.value().iter().copied().collect::<Vec<_>>(), vec![0.0]);

        let d = KnowledgeDiscriminator::new(&kn_cfg(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_array(&[3, 16, 8, 8], &mut rng);
        let all = d.forward(&Tensor::new(x.clone())).unwrap();
        assert_eq!(all.shape(), &[3, 1]);
        for i in 0..3 {
            let one = d.forward(&Tensor::new(x.slice(s![i..i + 1, .., .., ..]).to_owned().into_dyn())).unwrap();
            assert!((one.item() - all.value()[[i, 0]]).abs() < 1e-6);
        }
        assert!(d.forward(&Tensor::zeros(&[1, 8, 8, 8])).is_err());
    }

    #[test]
    fn knowledge_is_invariant_to_permuting_a_constant_field() {
        let d = KnowledgeDiscriminator::new(&kn_cfg(), 6).unwrap();
        let c = ArrayD::from_shape_fn(IxDyn(&[1, 16, 8, 8]), |i| i[1] as f64 * 0.1 - 0.5);
        let mut p = c.clone();
        p.slice_mut(s![.., .., ..4, ..]).assign(&c.slice(s![.., .., 4.., ..]));
        p.slice_mut(s![.., .., 4.., ..]).assign(&c.slice(s![.., .., ..4, ..]));
        let a = d.forward(&Tensor::new(c)).unwrap().item();
        let b = d.forward(&Tensor::new(p)).unwrap().item();
        assert_eq!(a, b);
    }
}
