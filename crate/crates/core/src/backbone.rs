//! U-Net style encoder-decoder used by both segmentation paths.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvSpec, Tensor};
use crate::error::{Error, Result};
use crate::nn::{Conv, InstanceNorm, Module, Param};

const LEAK: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub levels: usize,
    pub base_width: usize,
    pub spatial_rank: usize,
    /// Start the 1x1 classifier at zero so initial predictions are uniform.
    #[serde(default = "yes")]
    pub zero_init_head: bool,
}

fn yes() -> bool {
    true
}

impl BackboneConfig {
    pub fn new(in_channels: usize, num_classes: usize, levels: usize, base_width: usize, spatial_rank: usize) -> Self {
        Self {
            in_channels,
            num_classes,
            levels,
            base_width,
            spatial_rank,
            zero_init_head: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.levels < 2 {
            return bad(format!("backbone needs at least 2 levels, got {}", self.levels));
        }
        if self.base_width < 4 {
            return bad(format!("base_width must be at least 4, got {}", self.base_width));
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        if !(2..=3).contains(&self.spatial_rank) {
            return bad(format!("spatial_rank must be 2 or 3, got {}", self.spatial_rank));
        }
        Ok(())
    }

    /// Feature width at 1-based level `k`.
    pub fn width(&self, k: usize) -> usize {
        self.base_width << (k - 1)
    }

    /// Every spatial extent must be a multiple of this.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }
}

/// conv3 -> instance norm -> leaky ReLU
#[derive(Debug, Clone)]
struct Block {
    conv: Conv,
    norm: InstanceNorm,
}

impl Block {
    fn new(name: &str, cin: usize, cout: usize, rank: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv::new(&format!("{name}.conv"), cin, cout, 3, rank, ConvSpec::new(1, 1), false, 1.0, rng),
            norm: InstanceNorm::new(&format!("{name}.norm"), cout),
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        self.norm.forward(&self.conv.forward(x)).leaky_relu(LEAK)
    }

    fn params(&self) -> Vec<Param> {
        let mut p = self.conv.params();
        p.extend(self.norm.params());
        p
    }
}

#[derive(Debug, Clone)]
pub struct BackboneOutput {
    pub logits: Tensor,
    /// One grid per level, finest first.
    pub encoder_features: Vec<Tensor>,
    /// Same tensor as the last encoder feature.
    pub bottleneck: Tensor,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    encoder: Vec<[Block; 2]>,
    /// Index `k` merges level `k + 2` into level `k + 1`.
    decoder: Vec<[Block; 2]>,
    head: Conv,
}

impl Backbone {
    /// Deterministic in `(cfg, prefix, seed)`.
    pub fn new(cfg: &BackboneConfig, prefix: &str, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = cfg.spatial_rank;
        let mut encoder = Vec::with_capacity(cfg.levels);
        for k in 1..=cfg.levels {
            let cin = if k == 1 { cfg.in_channels } else { cfg.width(k - 1) };
            let w = cfg.width(k);
            encoder.push([
                Block::new(&format!("{prefix}.enc{k}.0"), cin, w, r, &mut rng),
                Block::new(&format!("{prefix}.enc{k}.1"), w, w, r, &mut rng),
            ]);
        }
        let mut decoder = Vec::with_capacity(cfg.levels - 1);
        for k in 1..cfg.levels {
            let w = cfg.width(k);
            decoder.push([
                Block::new(&format!("{prefix}.dec{k}.0"), cfg.width(k + 1) + w, w, r, &mut rng),
                Block::new(&format!("{prefix}.dec{k}.1"), w, w, r, &mut rng),
            ]);
        }
        let head = Conv::new(
            &format!("{prefix}.head"),
            cfg.base_width,
            cfg.num_classes,
            1,
            r,
            ConvSpec::new(1, 0),
            true,
            1.0,
            &mut rng,
        );
        if cfg.zero_init_head {
            head.zero();
        }
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Checks a `(batch, channels, *spatial)` input against the config.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let rank = self.cfg.spatial_rank;
        if shape.len() != rank + 2 || shape[1] != self.cfg.in_channels {
            let mut expected = vec![shape.first().copied().unwrap_or(1), self.cfg.in_channels];
            expected.extend(shape.iter().skip(2).take(rank).copied());
            expected.resize(rank + 2, 0);
            return Err(Error::shape("backbone input", &expected, shape));
        }
        let d = self.cfg.divisor();
        for (axis, &n) in shape[2..].iter().enumerate() {
            if n == 0 || n % d != 0 {
                return Err(Error::PatchDivisibility { axis, size: n, divisor: d });
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<BackboneOutput> {
        self.check_input(x.shape())?;
        let mut feats = Vec::with_capacity(self.cfg.levels);
        let mut h = x.clone();
        for (k, [a, b]) in self.encoder.iter().enumerate() {
            if k > 0 {
                h = h.max_pool2();
            }
            h = b.forward(&a.forward(&h));
            feats.push(h.clone());
        }
        let mut up = h;
        for k in (0..self.cfg.levels - 1).rev() {
            let [a, b] = &self.decoder[k];
            let merged = Tensor::cat(&[up.upsample2(), feats[k].clone()], 1);
            up = b.forward(&a.forward(&merged));
        }
        let logits = self.head.forward(&up);
        Ok(BackboneOutput {
            logits,
            bottleneck: feats.last().unwrap().clone(),
            encoder_features: feats,
        })
    }
}

impl Module for Backbone {
    fn params(&self) -> Vec<Param> {
        let mut p = Vec::new();
        for pair in self.encoder.iter().chain(&self.decoder) {
            for block in pair {
                p.extend(block.params());
            }
        }
        p.extend(self.head.params());
        p
    }
}
