//! Multimodal volumes, modality subsets, tumor labels and patching.

mod dataset;
pub mod nifti;
mod synth;

use std::fmt;
use std::str::FromStr;

use ndarray::{ArrayD, Axis, Dimension, IxDyn, SliceInfoElem};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{
    case_seed, dataset_hash, load_brats_case, write_case, write_synthetic_dataset, Case, CaseEntry, Dataset,
    DatasetManifest,
};
pub use synth::{synth_generate, SynthConfig};

/// Number of input modalities.
pub const NUM_MODALITIES: usize = 4;

/// MRI contrasts in channel order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Flair,
    T1,
    T1ce,
    T2,
}

impl Modality {
    pub const ALL: [Modality; NUM_MODALITIES] = [Modality::Flair, Modality::T1, Modality::T1ce, Modality::T2];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Command-line token.
    pub fn token(self) -> &'static str {
        match self {
            Modality::Flair => "fl",
            Modality::T1 => "t1",
            Modality::T1ce => "t1c",
            Modality::T2 => "t2",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Flair => "Flair",
            Modality::T1 => "T1",
            Modality::T1ce => "T1ce",
            Modality::T2 => "T2",
        }
    }

    /// File-name suffix in BraTS releases.
    pub fn brats_suffix(self) -> &'static str {
        match self {
            Modality::Flair => "flair",
            Modality::T1 => "t1",
            Modality::T1ce => "t1ce",
            Modality::T2 => "t2",
        }
    }

    pub fn from_token(token: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.token() == token.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::MaskToken {
                token: token.to_string(),
            })
    }
}

/// Which modalities are available; never empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ModalityMask {
    present: [bool; NUM_MODALITIES],
}

/// Reporting order: single modalities, pairs, triples, then the full set.
const SUBSET_ORDER: [[bool; NUM_MODALITIES]; 15] = [
    [false, false, false, true],
    [false, false, true, false],
    [false, true, false, false],
    [true, false, false, false],
    [false, false, true, true],
    [false, true, true, false],
    [true, true, false, false],
    [false, true, false, true],
    [true, false, false, true],
    [true, false, true, false],
    [true, true, true, false],
    [true, true, false, true],
    [true, false, true, true],
    [false, true, true, true],
    [true, true, true, true],
];

impl ModalityMask {
    pub fn new(present: [bool; NUM_MODALITIES]) -> Result<Self> {
        if present.iter().any(|&p| p) {
            Ok(Self { present })
        } else {
            Err(Error::EmptyMask)
        }
    }

    pub fn full() -> Self {
        Self { present: [true; 4] }
    }

    pub fn only(m: Modality) -> Self {
        let mut present = [false; 4];
        present[m.index()] = true;
        Self { present }
    }

    pub fn present(&self) -> [bool; NUM_MODALITIES] {
        self.present
    }

    pub fn contains(&self, m: Modality) -> bool {
        self.present[m.index()]
    }

    /// Number of available modalities (`N`).
    pub fn count(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }

    pub fn modalities(&self) -> Vec<Modality> {
        Modality::ALL.into_iter().filter(|m| self.contains(*m)).collect()
    }

    /// Position (1-based) in [`enumerate_modality_subsets`].
    pub fn subset_id(&self) -> usize {
        SUBSET_ORDER.iter().position(|p| *p == self.present).unwrap() + 1
    }

    pub fn from_subset_id(id: usize) -> Result<Self> {
        if (1..=15).contains(&id) {
            Ok(Self {
                present: SUBSET_ORDER[id - 1],
            })
        } else {
            Err(Error::Config(format!("subset id {id} is outside 1..=15")))
        }
    }

    /// Comma-separated tokens, e.g. `fl,t2`.
    pub fn tokens(&self) -> String {
        self.modalities().iter().map(|m| m.token()).collect::<Vec<_>>().join(",")
    }

    /// Directory-safe name, e.g. `fl-t2`.
    pub fn slug(&self) -> String {
        self.modalities().iter().map(|m| m.token()).collect::<Vec<_>>().join("-")
    }
}

impl fmt::Display for ModalityMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tokens())
    }
}

impl FromStr for ModalityMask {
    type Err = Error;

    /// Accepts a subset id (`1`–`15`) or tokens separated by `,`, `+` or `-`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Ok(id) = s.parse::<usize>() {
            return Self::from_subset_id(id);
        }
        let mut present = [false; 4];
        for tok in s.split([',', '+', '-']).filter(|t| !t.trim().is_empty()) {
            present[Modality::from_token(tok)?.index()] = true;
        }
        Self::new(present)
    }
}

impl TryFrom<String> for ModalityMask {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ModalityMask> for String {
    fn from(m: ModalityMask) -> String {
        m.tokens()
    }
}

/// All 15 non-empty modality subsets in reporting order.
pub fn enumerate_modality_subsets() -> Vec<ModalityMask> {
    SUBSET_ORDER.iter().map(|&present| ModalityMask { present }).collect()
}

/// Co-registered intensity channels `(4, *spatial)` in [`Modality`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalVolume {
    channels: ArrayD<f64>,
    spacing: [f64; 3],
}

impl MultimodalVolume {
    pub fn new(channels: ArrayD<f64>, spacing: [f64; 3]) -> Result<Self> {
        if channels.shape().first() != Some(&NUM_MODALITIES) {
            return Err(Error::Config(format!(
                "a multimodal volume needs exactly {NUM_MODALITIES} channels, got shape {:?}",
                channels.shape()
            )));
        }
        let rank = channels.ndim() - 1;
        if !(2..=3).contains(&rank) {
            return Err(Error::Config(format!("spatial rank must be 2 or 3, got {rank}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config(format!("voxel spacing must be positive, got {spacing:?}")));
        }
        Ok(Self {
            channels: channels.as_standard_layout().into_owned(),
            spacing,
        })
    }

    pub fn channels(&self) -> &ArrayD<f64> {
        &self.channels
    }

    pub fn channel(&self, m: Modality) -> ndarray::ArrayViewD<'_, f64> {
        self.channels.index_axis(Axis(0), m.index())
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn spatial_shape(&self) -> &[usize] {
        &self.channels.shape()[1..]
    }

    pub fn rank(&self) -> usize {
        self.channels.ndim() - 1
    }
}

/// Integer tumor labels: 0 background, 1 NCR/NET, 2 edema, 4 enhancing tumor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationLabelMap {
    labels: ArrayD<u8>,
}

pub const LABEL_VALUES: [u8; 4] = [0, 1, 2, 4];

/// Number of segmentation classes: background plus the three tumor labels.
pub const NUM_CLASSES: usize = 4;

impl SegmentationLabelMap {
    /// Validates that every value is one of 0, 1, 2, 4.
    pub fn new(labels: ArrayD<i64>) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&v| !matches!(v, 0 | 1 | 2 | 4)) {
            return Err(Error::LabelValue { value: bad });
        }
        Ok(Self {
            labels: labels.mapv(|v| v as u8).as_standard_layout().into_owned(),
        })
    }

    pub fn from_u8(labels: ArrayD<u8>) -> Result<Self> {
        Self::new(labels.mapv(i64::from))
    }

    /// Builds labels from class indices `0..NUM_CLASSES`.
    pub fn from_classes(classes: &ArrayD<usize>) -> Self {
        Self {
            labels: classes.mapv(|c| LABEL_VALUES[c]),
        }
    }

    pub fn labels(&self) -> &ArrayD<u8> {
        &self.labels
    }

    pub fn shape(&self) -> &[usize] {
        self.labels.shape()
    }

    /// Class index per voxel: 0, 1, 2, 4 map to 0, 1, 2, 3.
    pub fn classes(&self) -> ArrayD<usize> {
        self.labels.mapv(|v| match v {
            0 => 0,
            1 => 1,
            2 => 2,
            _ => 3,
        })
    }
}

/// Nested binary tumor regions, `et ⊆ tc ⊆ wt`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubregionMasks {
    pub et: ArrayD<bool>,
    pub tc: ArrayD<bool>,
    pub wt: ArrayD<bool>,
}

/// Tumor subregions in reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Subregion {
    Et,
    Tc,
    Wt,
}

impl Subregion {
    pub const ALL: [Subregion; 3] = [Subregion::Et, Subregion::Tc, Subregion::Wt];

    pub fn name(self) -> &'static str {
        match self {
            Subregion::Et => "ET",
            Subregion::Tc => "TC",
            Subregion::Wt => "WT",
        }
    }
}

impl SubregionMasks {
    pub fn get(&self, r: Subregion) -> &ArrayD<bool> {
        match r {
            Subregion::Et => &self.et,
            Subregion::Tc => &self.tc,
            Subregion::Wt => &self.wt,
        }
    }

    pub fn is_nested(&self) -> bool {
        ndarray::Zip::from(&self.et)
            .and(&self.tc)
            .and(&self.wt)
            .all(|&e, &t, &w| (!e || t) && (!t || w))
    }
}

/// ET = {4}, TC = {1, 4}, WT = {1, 2, 4}.
pub fn map_nested_subregions(labels: &SegmentationLabelMap) -> SubregionMasks {
    let l = labels.labels();
    SubregionMasks {
        et: l.mapv(|v| v == 4),
        tc: l.mapv(|v| v == 1 || v == 4),
        wt: l.mapv(|v| v == 1 || v == 2 || v == 4),
    }
}

/// Stacks the present channels in modality order: `(N, *spatial)`.
pub fn apply_modality_mask(vol: &MultimodalVolume, mask: &ModalityMask) -> ArrayD<f64> {
    let idx: Vec<usize> = mask.modalities().iter().map(|m| m.index()).collect();
    vol.channels.select(Axis(0), &idx)
}

const NORM_EPS: f64 = 1e-8;

/// Per-channel z-scoring. Statistics come from the nonzero (brain) voxels
/// and only those voxels are rescaled, so background stays zero; a channel
/// without nonzero voxels is left as all zeros.
pub fn zscore_normalize(vol: &MultimodalVolume) -> MultimodalVolume {
    let mut out = vol.channels.clone();
    for mut ch in out.axis_iter_mut(Axis(0)) {
        let brain: Vec<f64> = ch.iter().copied().filter(|&v| v != 0.0).collect();
        let stats = if brain.is_empty() { ch.iter().copied().collect() } else { brain };
        let n = stats.len() as f64;
        let mean = stats.iter().sum::<f64>() / n;
        let var = stats.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / var.sqrt().max(NORM_EPS);
        let std_zero = var.sqrt() < NORM_EPS;
        ch.mapv_inplace(|v| {
            if v == 0.0 || std_zero {
                0.0
            } else {
                (v - mean) * inv
            }
        });
    }
    MultimodalVolume {
        channels: out,
        spacing: vol.spacing,
    }
}

/// Contiguous crop of volume and labels. Every size component must be
/// divisible by `2^(levels-1)` so the crop fits a `levels`-deep backbone.
pub fn extract_patch(
    vol: &MultimodalVolume,
    labels: &SegmentationLabelMap,
    origin: &[usize],
    size: &[usize],
    levels: usize,
) -> Result<(MultimodalVolume, SegmentationLabelMap)> {
    let shape = vol.spatial_shape();
    if labels.shape() != shape {
        return Err(Error::shape("extract_patch labels", shape, labels.shape()));
    }
    if origin.len() != shape.len() || size.len() != shape.len() {
        return Err(Error::shape("extract_patch origin/size rank", shape, size));
    }
    let divisor = 1usize << levels.saturating_sub(1);
    for (axis, &s) in size.iter().enumerate() {
        if s == 0 || s % divisor != 0 {
            return Err(Error::PatchDivisibility { axis, size: s, divisor });
        }
    }
    if origin.iter().zip(size).zip(shape).any(|((&o, &s), &n)| o + s > n) {
        return Err(Error::PatchBounds {
            origin: origin.to_vec(),
            size: size.to_vec(),
            shape: shape.to_vec(),
        });
    }
    let spatial: Vec<SliceInfoElem> = origin
        .iter()
        .zip(size)
        .map(|(&o, &s)| SliceInfoElem::from(o..o + s))
        .collect();
    let mut with_channel = vec![SliceInfoElem::from(..)];
    with_channel.extend(spatial.iter().cloned());
    let ch = vol.channels.slice(with_channel.as_slice()).to_owned();
    let lab = labels.labels.slice(spatial.as_slice()).to_owned();
    Ok((
        MultimodalVolume {
            channels: ch,
            spacing: vol.spacing,
        },
        SegmentationLabelMap { labels: lab },
    ))
}

/// One-hot encodes class indices into `(C, *spatial)`.
pub fn one_hot(classes: &ArrayD<usize>, num_classes: usize) -> ArrayD<f64> {
    let mut shape = vec![num_classes];
    shape.extend_from_slice(classes.shape());
    let mut out = ArrayD::zeros(IxDyn(&shape));
    for (idx, &c) in classes.indexed_iter() {
        let mut full = vec![c];
        full.extend_from_slice(idx.slice());
        out[IxDyn(&full)] = 1.0;
    }
    out
}
