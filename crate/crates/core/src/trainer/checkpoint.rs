//! Checkpoint directories.
//!
//! ```text
//! manifest.toml        counters, config hash, mask, metric history
//! config.toml          the training configuration
//! <component>.blob     parameters of multi, uni, d_en, d_kn, mmi
//! <component>.adam     optimizer state of the same components
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EvalRecord, Trainer, TrainConfig};
use crate::data::ModalityMask;
use crate::error::{Error, Result};
use crate::nn::{blob, restore, snapshot};

pub const COMPONENTS: [&str; 5] = ["multi", "uni", "d_en", "d_kn", "mmi"];
const FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    pub config_hash: String,
    pub step: u64,
    pub epoch: usize,
    pub mask: ModalityMask,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_mean_dsc: Option<f64>,
    #[serde(default)]
    pub history: Vec<EvalRecord>,
}

impl CheckpointManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.toml");
        let text = fs::read_to_string(&path).map_err(|e| Error::Checkpoint {
            component: "manifest".into(),
            reason: format!("{}: {e}", path.display()),
        })?;
        toml::from_str(&text).map_err(|e| Error::Toml {
            path,
            reason: e.to_string(),
        })
    }
}

impl Trainer {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for name in COMPONENTS {
            blob::write(&dir.join(format!("{name}.blob")), &snapshot(&self.model.component(name)))?;
            blob::write(&dir.join(format!("{name}.adam")), &self.opt.get(name).state())?;
        }
        let cfg_path = dir.join("config.toml");
        fs::write(&cfg_path, self.cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
        let manifest = CheckpointManifest {
            format: FORMAT,
            config_hash: self.cfg.hash(),
            step: self.step,
            epoch: self.epoch(),
            mask: self.cfg.mask,
            best_mean_dsc: self.best_mean_dsc,
            history: self.history.clone(),
        };
        let path = dir.join("manifest.toml");
        let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Restores a trainer; the stored configuration must hash to the value
    /// recorded in the manifest.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = CheckpointManifest::read(dir)?;
        let cfg = TrainConfig::load(&dir.join("config.toml"))?;
        Self::load_inner(dir, manifest, cfg)
    }

    /// Like [`Trainer::load`], also requiring the checkpoint to have been
    /// written for `expected`.
    pub fn load_expecting(dir: &Path, expected: &TrainConfig) -> Result<Self> {
        let manifest = CheckpointManifest::read(dir)?;
        if manifest.config_hash != expected.hash() {
            return Err(Error::HashMismatch {
                stored: manifest.config_hash,
                expected: expected.hash(),
            });
        }
        Self::load_inner(dir, manifest, expected.clone())
    }

    fn load_inner(dir: &Path, manifest: CheckpointManifest, cfg: TrainConfig) -> Result<Self> {
        if manifest.format != FORMAT {
            return Err(Error::Checkpoint {
                component: "manifest".into(),
                reason: format!("unsupported format {}", manifest.format),
            });
        }
        if manifest.config_hash != cfg.hash() {
            return Err(Error::HashMismatch {
                stored: manifest.config_hash,
                expected: cfg.hash(),
            });
        }
        let mut t = Trainer::new(cfg)?;
        for name in COMPONENTS {
            let params = blob::read(&dir.join(format!("{name}.blob")), name)?;
            restore(&t.model.component(name), &params, name)?;
            let state = blob::read(&dir.join(format!("{name}.adam")), name)?;
            t.opt.get_mut(name).load_state(&state, name)?;
        }
        t.step = manifest.step;
        t.history = manifest.history;
        t.best_mean_dsc = manifest.best_mean_dsc;
        Ok(t)
    }
}
