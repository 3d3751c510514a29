//! Case directories in BraTS naming and synthetic dataset persistence.
//!
//! A dataset directory holds one subdirectory per case, each with
//! `<id>_flair`, `<id>_t1`, `<id>_t1ce`, `<id>_t2` and `<id>_seg` NIfTI
//! volumes, plus an optional `dataset.toml` manifest listing the cases.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Axis;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::nifti::{self, StoredType};
use super::{synth_generate, Modality, MultimodalVolume, SegmentationLabelMap, SynthConfig};
use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "dataset.toml";

#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub id: String,
    pub volume: MultimodalVolume,
    pub labels: SegmentationLabelMap,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub cases: Vec<Case>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub id: String,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator: String,
    pub seed: u64,
    pub synth: SynthConfig,
    pub cases: Vec<CaseEntry>,
}

fn find_volume(dir: &Path, suffix: &str) -> Option<PathBuf> {
    let entries = fs::read_dir(dir).ok()?;
    let mut hits: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("").to_ascii_lowercase();
            name.ends_with(&format!("_{suffix}.nii")) || name.ends_with(&format!("_{suffix}.nii.gz"))
        })
        .collect();
    hits.sort();
    hits.into_iter().next()
}

/// Reads the four modality volumes and the segmentation of one case.
pub fn load_brats_case(dir: &Path) -> Result<(MultimodalVolume, SegmentationLabelMap)> {
    let mut channels = Vec::with_capacity(4);
    let mut spacing = [1.0; 3];
    for m in Modality::ALL {
        let path = find_volume(dir, m.brats_suffix()).ok_or_else(|| Error::MissingModality {
            modality: m.name().to_string(),
            dir: dir.to_path_buf(),
        })?;
        let img = nifti::read(&path)?;
        if let Some(first) = channels.first() {
            let first: &ndarray::ArrayD<f64> = first;
            if first.shape() != img.data.shape() {
                return Err(Error::shape(
                    format!("{} volume in {}", m.name(), dir.display()),
                    first.shape(),
                    img.data.shape(),
                ));
            }
        } else {
            spacing = img.spacing;
        }
        channels.push(img.data);
    }
    let seg_path = find_volume(dir, "seg").ok_or_else(|| Error::MissingLabels(dir.to_path_buf()))?;
    let seg = nifti::read(&seg_path)?;
    if seg.data.shape() != channels[0].shape() {
        return Err(Error::shape(
            format!("segmentation in {}", dir.display()),
            channels[0].shape(),
            seg.data.shape(),
        ));
    }
    if let Some(&bad) = seg.data.iter().find(|v| v.fract() != 0.0) {
        return Err(Error::Nifti {
            path: seg_path,
            reason: format!("non-integer label value {bad}"),
        });
    }
    let labels = SegmentationLabelMap::new(seg.data.mapv(|v| v as i64))?;
    let views: Vec<_> = channels.iter().map(|c| c.view().insert_axis(Axis(0))).collect();
    let stacked = ndarray::concatenate(Axis(0), &views).expect("equal shapes checked above");
    Ok((MultimodalVolume::new(stacked, spacing)?, labels))
}

/// Writes one case directory in BraTS naming.
pub fn write_case(root: &Path, case: &Case) -> Result<PathBuf> {
    let dir = root.join(&case.id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let spacing = case.volume.spacing();
    for m in Modality::ALL {
        let p = dir.join(format!("{}_{}.nii.gz", case.id, m.brats_suffix()));
        nifti::write(&p, &case.volume.channel(m).to_owned(), spacing, StoredType::F32)?;
    }
    let seg = case.labels.labels().mapv(f64::from);
    nifti::write(&dir.join(format!("{}_seg.nii.gz", case.id)), &seg, spacing, StoredType::U8)?;
    Ok(dir)
}

/// Per-case generator seed derived from the dataset seed.
pub fn case_seed(dataset_seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = dataset_seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn config_hash(cfg: &SynthConfig) -> String {
    let text = toml::to_string(cfg).expect("synth config serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Generates `n_cases` phantoms under `out` and writes the manifest.
pub fn write_synthetic_dataset(out: &Path, base: &SynthConfig, n_cases: usize, seed: u64) -> Result<DatasetManifest> {
    base.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut cases = Vec::with_capacity(n_cases);
    for i in 0..n_cases {
        let cfg = SynthConfig {
            seed: case_seed(seed, i),
            ..base.clone()
        };
        let (volume, labels) = synth_generate(&cfg)?;
        let id = format!("case_{i:04}");
        write_case(
            out,
            &Case {
                id: id.clone(),
                volume,
                labels,
            },
        )?;
        cases.push(CaseEntry {
            id,
            seed: cfg.seed,
            config_hash: config_hash(&cfg),
        });
    }
    let manifest = DatasetManifest {
        generator: "synthetic-phantom".into(),
        seed,
        synth: base.clone(),
        cases,
    };
    let path = out.join(MANIFEST_NAME);
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

impl Dataset {
    /// Loads every case listed in the manifest, or every subdirectory
    /// (sorted by name) when there is none.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let manifest = dir.join(MANIFEST_NAME);
        let ids: Vec<String> = if manifest.exists() {
            let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
            let m: DatasetManifest = toml::from_str(&text).map_err(|e| Error::Toml {
                path: manifest.clone(),
                reason: e.to_string(),
            })?;
            m.cases.into_iter().map(|c| c.id).collect()
        } else {
            let mut ids: Vec<String> = fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .filter_map(|e| e.ok())
                .filter(|e| e.path().is_dir())
                .filter_map(|e| e.file_name().to_str().map(str::to_string))
                .collect();
            ids.sort();
            ids
        };
        if ids.is_empty() {
            return Err(Error::Dataset(format!("no cases found in {}", dir.display())));
        }
        let cases = ids
            .into_iter()
            .map(|id| {
                let (volume, labels) = load_brats_case(&dir.join(&id))?;
                Ok(Case { id, volume, labels })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cases })
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Case> {
        self.cases.iter().find(|c| c.id == id)
    }

    /// Deterministic split: the last `round(n * val_fraction)` cases of a
    /// seeded shuffle go to validation.
    pub fn split(&self, val_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut idx: Vec<usize> = (0..self.cases.len()).collect();
        idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let n_val = ((self.cases.len() as f64) * val_fraction.clamp(0.0, 1.0)).round() as usize;
        let n_train = self.cases.len() - n_val;
        let pick = |sel: &[usize]| {
            let mut s = sel.to_vec();
            s.sort_unstable();
            Dataset {
                cases: s.iter().map(|&i| self.cases[i].clone()).collect(),
            }
        };
        (pick(&idx[..n_train]), pick(&idx[n_train..]))
    }

    /// Normalizes every case's intensities.
    pub fn normalized(&self) -> Dataset {
        Dataset {
            cases: self
                .cases
                .iter()
                .map(|c| Case {
                    id: c.id.clone(),
                    volume: super::zscore_normalize(&c.volume),
                    labels: c.labels.clone(),
                })
                .collect(),
        }
    }
}

/// SHA-256 over relative paths and contents of every file below `dir`,
/// skipping run manifests.
pub fn dataset_hash(dir: &Path) -> Result<String> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let p = e.map_err(|e| Error::io(dir, e))?.path();
            if p.is_dir() {
                walk(base, &p, out)?;
            } else {
                out.push(p.strip_prefix(base).unwrap().to_path_buf());
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.retain(|p| p.file_name().is_none_or(|n| n != "run_manifest.toml"));
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        h.update(rel.to_string_lossy().as_bytes());
        let full = dir.join(&rel);
        h.update(fs::read(&full).map_err(|e| Error::io(&full, e))?);
    }
    Ok(hex::encode(h.finalize()))
}
