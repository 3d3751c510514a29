use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use ndarray::{concatenate, ArrayD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Array;
use crate::data::{apply_modality_mask, case_seed, extract_patch, one_hot, Case, ModalityMask};
use crate::error::{Error, Result};

/// One training batch, `(batch, channels, *spatial)` everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// All four modalities.
    pub full: Array,
    /// Only the masked-in modalities.
    pub masked: Array,
    /// One-hot labels over the classes.
    pub target: Array,
    pub classes: ArrayD<usize>,
}

fn stack<T: Clone>(items: &[ArrayD<T>]) -> ArrayD<T> {
    let views: Vec<_> = items.iter().map(|a| a.view().insert_axis(Axis(0))).collect();
    concatenate(Axis(0), &views).expect("equal patch shapes")
}

/// Draws random patches; the draw for a step depends only on the seed and
/// the step index, so batches can be produced in any order.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    cases: Arc<Vec<Case>>,
    mask: ModalityMask,
    patch: Vec<usize>,
    batch_size: usize,
    levels: usize,
    num_classes: usize,
    seed: u64,
}

impl BatchSampler {
    pub fn new(
        cases: Arc<Vec<Case>>,
        mask: ModalityMask,
        patch: Vec<usize>,
        batch_size: usize,
        levels: usize,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::Dataset("no training cases".into()));
        }
        for c in cases.iter() {
            let shape = c.volume.spatial_shape();
            if shape.len() != patch.len() || shape.iter().zip(&patch).any(|(&n, &p)| n < p) {
                return Err(Error::Dataset(format!(
                    "case {} has shape {shape:?}, smaller than patch {patch:?}",
                    c.id
                )));
            }
        }
        Ok(Self {
            cases,
            mask,
            patch,
            batch_size,
            levels,
            num_classes,
            seed,
        })
    }

    pub fn batch(&self, step: u64) -> Result<Batch> {
        let mut rng = ChaCha8Rng::seed_from_u64(case_seed(self.seed, step as usize));
        let mut full = Vec::with_capacity(self.batch_size);
        let mut masked = Vec::with_capacity(self.batch_size);
        let mut target = Vec::with_capacity(self.batch_size);
        let mut classes = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            let case = &self.cases[rng.random_range(0..self.cases.len())];
            let origin: Vec<usize> = case
                .volume
                .spatial_shape()
                .iter()
                .zip(&self.patch)
                .map(|(&n, &p)| rng.random_range(0..=n - p))
                .collect();
            let (vol, lab) = extract_patch(&case.volume, &case.labels, &origin, &self.patch, self.levels)?;
            let cls = lab.classes();
            masked.push(apply_modality_mask(&vol, &self.mask));
            target.push(one_hot(&cls, self.num_classes));
            full.push(vol.channels().clone());
            classes.push(cls);
        }
        Ok(Batch {
            full: stack(&full),
            masked: stack(&masked),
            target: stack(&target),
            classes: stack(&classes),
        })
    }
}

/// Produces batches for consecutive steps on a background thread.
pub struct Prefetcher {
    rx: Receiver<Result<Batch>>,
    handle: Option<JoinHandle<()>>,
}

impl Prefetcher {
    pub fn new(sampler: BatchSampler, steps: std::ops::Range<u64>, depth: usize) -> Self {
        let (tx, rx) = sync_channel(depth.max(1));
        let handle = std::thread::spawn(move || {
            for s in steps {
                if tx.send(sampler.batch(s)).is_err() {
                    break;
                }
            }
        });
        Self { rx, handle: Some(handle) }
    }

    pub fn next_batch(&self) -> Result<Batch> {
        self.rx
            .recv()
            .map_err(|_| Error::Dataset("batch prefetcher stopped early".into()))?
    }
}

impl Drop for Prefetcher {
    fn drop(&mut self) {
        // drain so the producer unblocks and exits
        while self.rx.try_recv().is_ok() {}
        let (_, dummy) = sync_channel(1);
        drop(std::mem::replace(&mut self.rx, dummy));
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
