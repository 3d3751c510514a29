use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::data::{ModalityMask, NUM_CLASSES, NUM_MODALITIES};
use crate::discriminators::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;

/// Switches for the three alignment modules; consistency training is
/// always on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    pub use_ena: bool,
    pub use_kna: bool,
    pub use_mmi: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_ena: true,
            use_kna: true,
            use_mmi: true,
        }
    }
}

impl Ablation {
    /// Consistency-only baseline.
    pub fn none() -> Self {
        Self {
            use_ena: false,
            use_kna: false,
            use_mmi: false,
        }
    }

    /// Turns off the modules named in a comma list (`ena`, `kna`, `mmi`).
    pub fn without(mut self, list: &str) -> Result<Self> {
        for tok in list.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match tok.to_ascii_lowercase().as_str() {
                "ena" => self.use_ena = false,
                "kna" => self.use_kna = false,
                "mmi" => self.use_mmi = false,
                other => {
                    return Err(Error::Config(format!(
                        "unknown ablation `{other}`; valid names are ena, kna, mmi"
                    )))
                }
            }
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub levels: usize,
    pub base_width: usize,
    pub num_classes: usize,
    pub spatial_rank: usize,
    pub d_en_widths: Vec<usize>,
    pub d_kn_widths: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            base_width: 8,
            num_classes: NUM_CLASSES,
            spatial_rank: 2,
            d_en_widths: vec![8, 16, 32, 64],
            d_kn_widths: vec![32, 32],
        }
    }
}

impl ModelConfig {
    pub fn backbone(&self, in_channels: usize) -> BackboneConfig {
        BackboneConfig::new(in_channels, self.num_classes, self.levels, self.base_width, self.spatial_rank)
    }

    pub fn d_en(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            in_channels: self.num_classes,
            widths: self.d_en_widths.clone(),
            spatial_rank: self.spatial_rank,
        }
    }

    pub fn d_kn(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            in_channels: self.backbone(1).width(self.levels),
            widths: self.d_kn_widths.clone(),
            spatial_rank: self.spatial_rank,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Modalities fed to the unimodal path.
    pub mask: ModalityMask,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub ablation: Ablation,
    /// Softening temperature of the consistency term.
    pub temperature: f64,
    pub base_lr: f64,
    pub poly_power: f64,
    pub epoch_max: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub patch_size: Vec<usize>,
    /// Evaluate every this many epochs (and after the last one).
    pub eval_interval: usize,
    pub val_fraction: f64,
    /// Stop the transfer loss from moving the multimodal features.
    pub mmi_detach_target: bool,
    pub prefetch: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(mask: ModalityMask) -> Self {
        Self {
            mask,
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            ablation: Ablation::default(),
            temperature: 1.0,
            base_lr: 1e-4,
            poly_power: 0.9,
            epoch_max: 300,
            steps_per_epoch: 10,
            batch_size: 1,
            patch_size: vec![64, 64],
            eval_interval: 10,
            val_fraction: 1.0 / 3.0,
            mmi_detach_target: true,
            prefetch: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.weights.validate()?;
        self.model.backbone(NUM_MODALITIES).validate()?;
        self.model.d_en().validate()?;
        self.model.d_kn().validate()?;
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.poly_power >= 0.0) {
            return bad(format!("poly_power must be non-negative, got {}", self.poly_power));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.epoch_max == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 || self.eval_interval == 0 {
            return bad("epoch_max, steps_per_epoch, batch_size and eval_interval must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must be in [0, 1), got {}", self.val_fraction));
        }
        if self.patch_size.len() != self.model.spatial_rank {
            return bad(format!(
                "patch_size {:?} does not match spatial_rank {}",
                self.patch_size, self.model.spatial_rank
            ));
        }
        let div = self.model.backbone(1).divisor().max(1 << self.model.d_en_widths.len());
        for (axis, &n) in self.patch_size.iter().enumerate() {
            if n == 0 || n % div != 0 {
                return Err(Error::PatchDivisibility { axis, size: n, divisor: div });
            }
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        (self.epoch_max * self.steps_per_epoch) as u64
    }

    /// Consistency ramp length, defaulting to 40% of the planned steps.
    pub fn ramp_length(&self) -> u64 {
        self.weights
            .ramp_length
            .unwrap_or_else(|| ((self.total_steps() as f64 * 0.4).round() as u64).max(1))
    }

    pub fn resolved_weights(&self) -> LossWeights {
        LossWeights {
            ramp_length: Some(self.ramp_length()),
            ..self.weights.clone()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Toml {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// `base_lr (1 - epoch / epoch_max)^power`.
pub fn poly_lr(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch > cfg.epoch_max {
        return Err(Error::Config(format!(
            "epoch {epoch} is outside the schedule (epoch_max {})",
            cfg.epoch_max
        )));
    }
    Ok(cfg.base_lr * (1.0 - epoch as f64 / cfg.epoch_max as f64).powf(cfg.poly_power))
}
