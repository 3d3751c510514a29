//! Co-training of the multimodal and unimodal paths with the two
//! adversaries and the transfer heads.
//!
//! A step has two phases. Phase A updates both segmentation paths (and the
//! transfer heads) on the weighted objective while the discriminators stay
//! fixed. Phase B recomputes the discriminator inputs without gradients
//! into the paths and takes one step on each enabled discriminator.

mod checkpoint;
mod config;
mod eval;
mod sampler;

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{no_grad, Tensor};
use crate::backbone::{Backbone, BackboneOutput};
use crate::data::{apply_modality_mask, case_seed, Case, Dataset, ModalityMask, SegmentationLabelMap, Subregion};
use crate::discriminators::{EntropyDiscriminator, KnowledgeDiscriminator};
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_d_loss, adversarial_g_loss, consistency_loss, dice_loss, self_information, soften_logits, total_loss,
    LossBreakdown, LossParts, LossWeights,
};
use crate::mmi::{mi_loss, LevelWeights, MmiHeads};
use crate::nn::{Adam, AdamConfig, Module};

pub use checkpoint::{CheckpointManifest, COMPONENTS};
pub use config::{poly_lr, Ablation, ModelConfig, TrainConfig};
pub use eval::{argmax_classes, score_case, sliding_window_probs, CaseMetrics, EvalReport, SubregionMetrics};
pub use sampler::{Batch, BatchSampler, Prefetcher};

/// All trainable components.
#[derive(Debug, Clone)]
pub struct AcnModel {
    pub multi: Backbone,
    pub uni: Backbone,
    pub d_en: EntropyDiscriminator,
    pub d_kn: KnowledgeDiscriminator,
    pub heads: MmiHeads,
}

impl AcnModel {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let m = &cfg.model;
        let multi = Backbone::new(&m.backbone(crate::data::NUM_MODALITIES), "multi", case_seed(cfg.seed, 0))?;
        let uni = Backbone::new(&m.backbone(cfg.mask.count()), "uni", case_seed(cfg.seed, 1))?;
        let widths: Vec<usize> = (1..=m.levels).map(|k| multi.config().width(k)).collect();
        Ok(Self {
            d_en: EntropyDiscriminator::new(&m.d_en(), case_seed(cfg.seed, 2))?,
            d_kn: KnowledgeDiscriminator::new(&m.d_kn(), case_seed(cfg.seed, 3))?,
            heads: MmiHeads::new(&widths, m.spatial_rank, case_seed(cfg.seed, 4)),
            multi,
            uni,
        })
    }

    /// Parameters of the named component (see [`COMPONENTS`]).
    pub fn component(&self, name: &str) -> Vec<crate::nn::Param> {
        match name {
            "multi" => self.multi.params(),
            "uni" => self.uni.params(),
            "d_en" => self.d_en.params(),
            "d_kn" => self.d_kn.params(),
            "mmi" => self.heads.params(),
            other => panic!("unknown component {other}"),
        }
    }

    /// Checksums of the segmentation side (both paths and heads) and the
    /// discriminator side.
    pub fn checksums(&self) -> (String, String) {
        let mut g = self.multi.params();
        g.extend(self.uni.params());
        g.extend(self.heads.params());
        let mut d = self.d_en.params();
        d.extend(self.d_kn.params());
        (crate::nn::checksum(&g), crate::nn::checksum(&d))
    }
}

/// One Adam instance per component.
pub struct Optimizers {
    pub multi: Adam,
    pub uni: Adam,
    pub heads: Adam,
    pub d_en: Adam,
    pub d_kn: Adam,
}

impl Optimizers {
    fn new(model: &AcnModel, lr: f64) -> Self {
        let a = |p| Adam::new(p, lr, AdamConfig::default());
        Self {
            multi: a(model.multi.params()),
            uni: a(model.uni.params()),
            heads: a(model.heads.params()),
            d_en: a(model.d_en.params()),
            d_kn: a(model.d_kn.params()),
        }
    }

    fn set_lr(&mut self, lr: f64) {
        for o in self.all_mut() {
            o.set_lr(lr);
        }
    }

    fn all_mut(&mut self) -> [&mut Adam; 5] {
        [&mut self.multi, &mut self.uni, &mut self.heads, &mut self.d_en, &mut self.d_kn]
    }

    pub fn get(&self, name: &str) -> &Adam {
        match name {
            "multi" => &self.multi,
            "uni" => &self.uni,
            "d_en" => &self.d_en,
            "d_kn" => &self.d_kn,
            _ => &self.heads,
        }
    }

    fn get_mut(&mut self, name: &str) -> &mut Adam {
        match name {
            "multi" => &mut self.multi,
            "uni" => &mut self.uni,
            "d_en" => &mut self.d_en,
            "d_kn" => &mut self.d_kn,
            _ => &mut self.heads,
        }
    }
}

/// Losses of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub losses: LossBreakdown,
    pub d_en: Option<f64>,
    pub d_kn: Option<f64>,
}

/// Validation result after an epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub step: u64,
    pub et: SubregionMetrics,
    pub tc: SubregionMetrics,
    pub wt: SubregionMetrics,
}

impl EvalRecord {
    pub fn mean_dsc(&self) -> f64 {
        (self.et.dsc + self.tc.dsc + self.wt.dsc) / 3.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathKind {
    Multi,
    Uni,
}

pub enum FitEvent<'a> {
    Step(&'a StepReport),
    Eval(&'a EvalRecord),
}

/// Predictions of both paths on one volume.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// `(C, *spatial)` probabilities.
    pub multi: crate::autograd::Array,
    pub uni: crate::autograd::Array,
}

pub struct Trainer {
    cfg: TrainConfig,
    weights: LossWeights,
    gamma: LevelWeights,
    pub model: AcnModel,
    pub opt: Optimizers,
    step: u64,
    history: Vec<EvalRecord>,
    best_mean_dsc: Option<f64>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = AcnModel::new(&cfg)?;
        let opt = Optimizers::new(&model, cfg.base_lr);
        Ok(Self {
            weights: cfg.resolved_weights(),
            gamma: LevelWeights::linear(cfg.model.levels),
            cfg,
            model,
            opt,
            step: 0,
            history: Vec::new(),
            best_mean_dsc: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Epoch the next step belongs to.
    pub fn epoch(&self) -> usize {
        ((self.step / self.cfg.steps_per_epoch as u64) as usize).min(self.cfg.epoch_max)
    }

    pub fn history(&self) -> &[EvalRecord] {
        &self.history
    }

    pub fn best_mean_dsc(&self) -> Option<f64> {
        self.best_mean_dsc
    }

    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    /// Batches for this trainer's mask and patch size.
    pub fn sampler(&self, cases: Arc<Vec<Case>>) -> Result<BatchSampler> {
        BatchSampler::new(
            cases,
            self.cfg.mask,
            self.cfg.patch_size.clone(),
            self.cfg.batch_size,
            self.cfg.model.levels,
            self.cfg.model.num_classes,
            self.cfg.seed,
        )
    }

    fn forward_paths(&self, batch: &Batch) -> Result<(BackboneOutput, BackboneOutput)> {
        let om = self.model.multi.forward(&Tensor::new(batch.full.clone()))?;
        let ou = self.model.uni.forward(&Tensor::new(batch.masked.clone()))?;
        Ok((om, ou))
    }

    /// Segmenter update with the discriminators held fixed.
    pub fn phase_a(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        let ab = self.cfg.ablation;
        let (om, ou) = self.forward_paths(batch)?;
        let y = Tensor::new(batch.target.clone());
        let pm = om.logits.softmax(1);
        let pu = ou.logits.softmax(1);
        let (sm, su) = if self.cfg.temperature == 1.0 {
            (pm.clone(), pu.clone())
        } else {
            (
                soften_logits(&om.logits, self.cfg.temperature)?,
                soften_logits(&ou.logits, self.cfg.temperature)?,
            )
        };
        let en_adv = if ab.use_ena {
            let iu = self_information(&pu)?.channels;
            Some(adversarial_g_loss(&self.model.d_en.forward(&iu)?))
        } else {
            None
        };
        let kn_adv = if ab.use_kna {
            Some(adversarial_g_loss(&self.model.d_kn.forward(&ou.bottleneck)?))
        } else {
            None
        };
        let mi = if ab.use_mmi {
            let pairs: Vec<(Tensor, Tensor)> = om
                .encoder_features
                .iter()
                .cloned()
                .zip(ou.encoder_features.iter().cloned())
                .collect();
            Some(mi_loss(&pairs, &self.model.heads, &self.gamma, self.cfg.mmi_detach_target)?)
        } else {
            None
        };
        let parts = LossParts {
            dice_multi: dice_loss(&pm, &y)?,
            dice_uni: dice_loss(&pu, &y)?,
            consistency: consistency_loss(&sm, &su)?,
            en_adv,
            kn_adv,
            mi,
        };
        let (total, breakdown) = total_loss(&parts, &self.weights, self.step)?;
        let grads = total.backward();
        self.opt.multi.step(&grads);
        self.opt.uni.step(&grads);
        if ab.use_mmi {
            self.opt.heads.step(&grads);
        }
        Ok(breakdown)
    }

    /// Discriminator update on freshly computed, gradient-free inputs.
    /// Returns the entropy and knowledge discriminator losses.
    pub fn phase_b(&mut self, batch: &Batch) -> Result<(Option<f64>, Option<f64>)> {
        let ab = self.cfg.ablation;
        if !ab.use_ena && !ab.use_kna {
            return Ok((None, None));
        }
        let (om, ou) = {
            let _g = no_grad();
            self.forward_paths(batch)?
        };
        let mut out = (None, None);
        if ab.use_ena {
            let (im, iu) = {
                let _g = no_grad();
                (
                    self_information(&om.logits.softmax(1))?.channels,
                    self_information(&ou.logits.softmax(1))?.channels,
                )
            };
            let d = &self.model.d_en;
            let loss = adversarial_d_loss(&d.forward(&im)?, &d.forward(&iu)?);
            check_finite("d_en", loss.item())?;
            self.opt.d_en.step(&loss.backward());
            out.0 = Some(loss.item());
        }
        if ab.use_kna {
            let d = &self.model.d_kn;
            let loss = adversarial_d_loss(&d.forward(&om.bottleneck)?, &d.forward(&ou.bottleneck)?);
            check_finite("d_kn", loss.item())?;
            self.opt.d_kn.step(&loss.backward());
            out.1 = Some(loss.item());
        }
        Ok(out)
    }

    /// Both phases at the scheduled learning rate, then advances the step
    /// counter.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepReport> {
        let lr = poly_lr(self.epoch(), &self.cfg)?;
        self.opt.set_lr(lr);
        let losses = self.phase_a(batch)?;
        let (d_en, d_kn) = self.phase_b(batch)?;
        let report = StepReport {
            step: self.step,
            lr,
            losses,
            d_en,
            d_kn,
        };
        self.step += 1;
        Ok(report)
    }

    /// Fraction of positions where the entropy discriminator assigns the
    /// right path (multimodal = real) on this batch.
    pub fn d_en_accuracy(&self, batch: &Batch) -> Result<f64> {
        let _g = no_grad();
        let (om, ou) = self.forward_paths(batch)?;
        let im = self_information(&om.logits.softmax(1))?.channels;
        let iu = self_information(&ou.logits.softmax(1))?.channels;
        let real = self.model.d_en.forward(&im)?;
        let fake = self.model.d_en.forward(&iu)?;
        let hits = real.value().iter().filter(|&&v| v > 0.0).count() + fake.value().iter().filter(|&&v| v < 0.0).count();
        Ok(hits as f64 / (real.len() + fake.len()) as f64)
    }

    /// Probabilities of both paths on a normalized case volume.
    pub fn predict(&self, case: &Case) -> Result<Prediction> {
        Ok(Prediction {
            multi: self.path_probs(case, PathKind::Multi)?,
            uni: self.path_probs(case, PathKind::Uni)?,
        })
    }

    /// Scores the unimodal path on every case of `dataset` (normalized
    /// here) for `mask`, which must be the mask this trainer was built for.
    pub fn evaluate(&self, dataset: &Dataset, mask: &ModalityMask) -> Result<EvalReport> {
        if *mask != self.cfg.mask {
            return Err(Error::MaskMismatch {
                checkpoint: self.cfg.mask.tokens(),
                requested: mask.tokens(),
            });
        }
        self.evaluate_path(dataset, PathKind::Uni)
    }

    /// Scores either path on every case of `dataset`.
    pub fn evaluate_path(&self, dataset: &Dataset, path: PathKind) -> Result<EvalReport> {
        let norm = dataset.normalized();
        let mut cases = Vec::with_capacity(norm.len());
        for case in &norm.cases {
            let probs = self.path_probs(case, path)?;
            let pred = SegmentationLabelMap::from_classes(&argmax_classes(&probs));
            let spacing = &case.volume.spacing()[..case.volume.rank()];
            cases.push(score_case(&case.id, &case.labels, &pred, spacing)?);
        }
        Ok(EvalReport::from_cases(cases))
    }

    fn path_probs(&self, case: &Case, path: PathKind) -> Result<crate::autograd::Array> {
        match path {
            PathKind::Multi => sliding_window_probs(&self.model.multi, case.volume.channels(), &self.cfg.patch_size),
            PathKind::Uni => {
                let masked = apply_modality_mask(&case.volume, &self.cfg.mask);
                sliding_window_probs(&self.model.uni, &masked, &self.cfg.patch_size)
            }
        }
    }

    /// Mean unimodal prediction entropy (nats per voxel) over the cases.
    pub fn mean_entropy(&self, dataset: &Dataset) -> Result<f64> {
        let norm = dataset.normalized();
        let mut total = 0.0;
        let mut count = 0usize;
        for case in &norm.cases {
            let probs = self.path_probs(case, PathKind::Uni)?;
            let p = Tensor::new(probs.insert_axis(ndarray::Axis(0)));
            let h = self_information(&p)?.scalar_map;
            total += h.value().sum();
            count += h.len();
        }
        Ok(total / count.max(1) as f64)
    }

    /// Runs the remaining steps of the schedule, evaluating on `val` (or
    /// `train` when `val` is empty) every `eval_interval` epochs and after
    /// the last. With `out`, keeps `best/` and `last/` checkpoints and a
    /// `metrics.csv` there.
    pub fn fit(
        &mut self,
        train: &Dataset,
        val: &Dataset,
        out: Option<&Path>,
        mut on_event: impl FnMut(FitEvent<'_>),
    ) -> Result<()> {
        if train.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        let eval_set = if val.is_empty() { train } else { val };
        let cases = Arc::new(train.normalized().cases);
        let sampler = self.sampler(cases)?;
        let total = self.cfg.total_steps();
        let prefetch = self
            .cfg
            .prefetch
            .then(|| Prefetcher::new(sampler.clone(), self.step..total, 2));
        let spe = self.cfg.steps_per_epoch as u64;
        while self.step < total {
            let batch = match &prefetch {
                Some(p) => p.next_batch()?,
                None => sampler.batch(self.step)?,
            };
            let report = self.train_step(&batch)?;
            on_event(FitEvent::Step(&report));
            if self.step % spe == 0 {
                let epoch = (self.step / spe) as usize;
                if epoch % self.cfg.eval_interval == 0 || self.step == total {
                    let report = self.evaluate(eval_set, &self.cfg.mask.clone())?;
                    let [et, tc, wt] = report.mean;
                    let rec = EvalRecord {
                        epoch,
                        step: self.step,
                        et,
                        tc,
                        wt,
                    };
                    let improved = self.best_mean_dsc.is_none_or(|b| rec.mean_dsc() > b);
                    if improved {
                        self.best_mean_dsc = Some(rec.mean_dsc());
                    }
                    self.history.push(rec);
                    on_event(FitEvent::Eval(self.history.last().unwrap()));
                    if let Some(dir) = out {
                        if improved {
                            self.save(&dir.join("best"))?;
                        }
                        self.write_metrics_csv(&dir.join("metrics.csv"))?;
                    }
                }
            }
        }
        if let Some(dir) = out {
            self.save(&dir.join("last"))?;
            self.write_metrics_csv(&dir.join("metrics.csv"))?;
        }
        Ok(())
    }

    /// History as `epoch,subregion,dsc,hd95` rows.
    pub fn write_metrics_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        let io = |e: csv::Error| Error::Dataset(format!("{}: {e}", path.display()));
        w.write_record(["epoch", "subregion", "dsc", "hd95"]).map_err(io)?;
        for rec in &self.history {
            for (r, m) in Subregion::ALL.iter().zip([rec.et, rec.tc, rec.wt]) {
                w.write_record([rec.epoch.to_string(), r.name().to_string(), m.dsc.to_string(), m.hd95.to_string()])
                    .map_err(io)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn check_finite(term: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            term: term.to_string(),
            breakdown: format!("{term}={v}"),
        })
    }
}
