//! Synthetic multimodal tumor phantoms.
//!
//! A case is an elliptical "brain" on a zero background holding one or more
//! tumors. Each tumor is three concentric ellipsoids sharing one axis
//! scaling, so the enhancing core sits inside the tumor core which sits
//! inside the whole tumor. Every modality is rendered from a per-tissue
//! intensity table plus Gaussian noise inside the brain.

use ndarray::{ArrayD, Dimension, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{MultimodalVolume, SegmentationLabelMap, NUM_MODALITIES};
use crate::error::{Error, Result};

/// Tissue columns of the contrast table.
#[allow(dead_code)]
pub const TISSUES: [&str; 4] = ["brain", "necrosis", "edema", "enhancing"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub spatial_shape: Vec<usize>,
    /// Inclusive range of tumors per case.
    pub tumor_count: (usize, usize),
    /// Radius ranges in voxels for whole tumor, tumor core, enhancing core.
    pub wt_radius: (f64, f64),
    pub tc_radius: (f64, f64),
    pub et_radius: (f64, f64),
    /// Per-axis radius jitter: each axis scales by a factor in `1 ± anisotropy`.
    pub anisotropy: f64,
    /// Mean intensity per modality (rows, Flair/T1/T1ce/T2) and tissue
    /// (columns, see [`TISSUES`]).
    pub contrast: [[f64; 4]; NUM_MODALITIES],
    pub noise_std: f64,
    pub spacing: [f64; 3],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            spatial_shape: vec![64, 64],
            tumor_count: (1, 2),
            wt_radius: (9.0, 14.0),
            tc_radius: (5.0, 8.0),
            et_radius: (2.0, 4.0),
            anisotropy: 0.2,
            contrast: [
                // brain, necrosis, edema, enhancing
                [0.40, 0.55, 0.85, 0.65],
                [0.60, 0.30, 0.50, 0.55],
                [0.50, 0.25, 0.42, 1.00],
                [0.40, 0.75, 0.80, 0.60],
            ],
            noise_std: 0.1,
            spacing: [1.0; 3],
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(2..=3).contains(&self.spatial_shape.len()) || self.spatial_shape.iter().any(|&n| n < 8) {
            return bad(format!(
                "spatial_shape must have 2 or 3 extents of at least 8, got {:?}",
                self.spatial_shape
            ));
        }
        if self.tumor_count.0 > self.tumor_count.1 {
            return bad(format!("tumor_count range {:?} is reversed", self.tumor_count));
        }
        for (name, (lo, hi)) in [("wt", self.wt_radius), ("tc", self.tc_radius), ("et", self.et_radius)] {
            if !(lo > 0.0 && lo <= hi) {
                return bad(format!("{name}_radius range ({lo}, {hi}) must be positive and ordered"));
            }
        }
        if self.et_radius.1 > self.tc_radius.0 || self.tc_radius.1 > self.wt_radius.0 {
            return bad("radius ranges must nest: et.max <= tc.min and tc.max <= wt.min".into());
        }
        if !(0.0..1.0).contains(&self.anisotropy) {
            return bad(format!("anisotropy must be in [0, 1), got {}", self.anisotropy));
        }
        if !(self.noise_std >= 0.0) {
            return bad(format!("noise_std must be non-negative, got {}", self.noise_std));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return bad(format!("spacing must be positive, got {:?}", self.spacing));
        }
        Ok(())
    }
}

struct Tumor {
    center: Vec<f64>,
    axes: Vec<f64>,
    radii: [f64; 3],
}

impl Tumor {
    /// Normalized squared distance from the center in this tumor's axis
    /// frame; a voxel is inside level `r` when it is at most `r²`.
    fn dist2(&self, p: &[usize]) -> f64 {
        p.iter()
            .zip(&self.center)
            .zip(&self.axes)
            .map(|((&x, &c), &a)| ((x as f64 - c) / a).powi(2))
            .sum()
    }

    fn label_at(&self, p: &[usize]) -> i64 {
        let d2 = self.dist2(p);
        let [wt, tc, et] = self.radii;
        if d2 <= et * et {
            4
        } else if d2 <= tc * tc {
            1
        } else if d2 <= wt * wt {
            2
        } else {
            0
        }
    }
}

/// Deterministic in `cfg` (seed included).
pub fn synth_generate(cfg: &SynthConfig) -> Result<(MultimodalVolume, SegmentationLabelMap)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shape = &cfg.spatial_shape;
    let brain_center: Vec<f64> = shape.iter().map(|&n| (n as f64 - 1.0) / 2.0).collect();
    let brain_radii: Vec<f64> = shape.iter().map(|&n| 0.45 * n as f64).collect();
    let in_brain = |p: &[usize]| -> bool {
        p.iter()
            .zip(&brain_center)
            .zip(&brain_radii)
            .map(|((&x, &c), &r)| ((x as f64 - c) / r).powi(2))
            .sum::<f64>()
            <= 1.0
    };

    let n_tumors = rng.random_range(cfg.tumor_count.0..=cfg.tumor_count.1);
    let mut tumors = Vec::with_capacity(n_tumors);
    for _ in 0..n_tumors {
        let wt = rng.random_range(cfg.wt_radius.0..=cfg.wt_radius.1);
        let tc = rng.random_range(cfg.tc_radius.0..=cfg.tc_radius.1);
        let et = rng.random_range(cfg.et_radius.0..=cfg.et_radius.1);
        let axes: Vec<f64> = shape
            .iter()
            .map(|_| 1.0 + rng.random_range(-cfg.anisotropy..=cfg.anisotropy))
            .collect();
        // keep the whole tumor inside the brain ellipse
        let center: Vec<f64> = brain_center
            .iter()
            .zip(&brain_radii)
            .zip(&axes)
            .map(|((&c, &r), &a)| {
                let slack = ((r - wt * a) / shape.len() as f64).max(0.0);
                c + rng.random_range(-slack..=slack)
            })
            .collect();
        tumors.push(Tumor {
            center,
            axes,
            radii: [wt, tc, et],
        });
    }

    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut channels = ArrayD::<f64>::zeros(IxDyn(&[NUM_MODALITIES].iter().chain(shape).copied().collect::<Vec<_>>()));
    let mut labels = ArrayD::<i64>::zeros(IxDyn(shape));
    for (idx, label) in labels.indexed_iter_mut() {
        let p = idx.slice();
        if !in_brain(p) {
            continue;
        }
        // most severe label wins where tumors overlap
        let lab = tumors.iter().map(|t| t.label_at(p)).max_by_key(|&l| severity(l)).unwrap_or(0);
        let col = match lab {
            4 => 3,
            1 => 1,
            2 => 2,
            _ => 0,
        };
        *label = lab;
        for m in 0..NUM_MODALITIES {
            let mut full = vec![m];
            full.extend_from_slice(p);
            let eps = if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            channels[IxDyn(&full)] = cfg.contrast[m][col] + eps;
        }
    }
    Ok((
        MultimodalVolume::new(channels, cfg.spacing)?,
        SegmentationLabelMap::new(labels)?,
    ))
}

/// Nesting depth of a label: background < edema < necrosis < enhancing.
fn severity(label: i64) -> u8 {
    match label {
        2 => 1,
        1 => 2,
        4 => 3,
        _ => 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::map_nested_subregions;

    #[test]
    fn same_seed_is_bitwise_identical() {
        let cfg = SynthConfig { seed: 42, ..Default::default() };
        let (a, la) = synth_generate(&cfg).unwrap();
        let (b, lb) = synth_generate(&cfg).unwrap();
        assert!(a.channels().iter().zip(b.channels()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(la, lb);
        let (c, _) = synth_generate(&SynthConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noiseless_render_is_piecewise_constant() {
        let cfg = SynthConfig { noise_std: 0.0, seed: 3, ..Default::default() };
        let (v, l) = synth_generate(&cfg).unwrap();
        for m in 0..4 {
            let ch = v.channels().index_axis(ndarray::Axis(0), m);
            for (val, &lab) in ch.iter().zip(l.labels()) {
                let col = match lab {
                    4 => 3,
                    1 => 1,
                    2 => 2,
                    _ => 0,
                };
                assert!(*val == 0.0 || *val == cfg.contrast[m][col]);
                if lab != 0 {
                    assert_eq!(*val, cfg.contrast[m][col]);
                }
            }
        }
    }

    #[test]
    fn subregions_nest_for_many_seeds() {
        for seed in 0..20 {
            let cfg = SynthConfig { seed, tumor_count: (1, 3), ..Default::default() };
            let (_, l) = synth_generate(&cfg).unwrap();
            let m = map_nested_subregions(&l);
            assert!(m.is_nested());
            assert!(m.et.iter().any(|&v| v), "seed {seed} has no enhancing core");
        }
        let cfg3 = SynthConfig { spatial_shape: vec![32, 32, 32], seed: 1, ..Default::default() };
        let (v, l) = synth_generate(&cfg3).unwrap();
        assert_eq!(v.spatial_shape(), &[32, 32, 32]);
        assert!(map_nested_subregions(&l).is_nested());
    }

    #[test]
    fn rejects_non_nesting_radii() {
        let cfg = SynthConfig { et_radius: (2.0, 6.0), ..Default::default() };
        assert!(matches!(synth_generate(&cfg), Err(Error::Config(_))));
        let cfg = SynthConfig { noise_std: -1.0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
