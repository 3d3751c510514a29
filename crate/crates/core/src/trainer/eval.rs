use ndarray::{ArrayD, Axis, IxDyn, SliceInfoElem};
use serde::{Deserialize, Serialize};

use crate::autograd::{no_grad, Array, Tensor};
use crate::backbone::Backbone;
use crate::data::{map_nested_subregions, SegmentationLabelMap, Subregion};
use crate::error::{Error, Result};
use crate::metrics::{dsc, hd95, BinaryMask};

/// DSC and HD95 for one subregion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubregionMetrics {
    pub dsc: f64,
    pub hd95: f64,
    /// HD95 is the empty-mask sentinel.
    #[serde(default)]
    pub hd95_sentinel: bool,
}

/// Metrics in `Subregion::ALL` order (ET, TC, WT).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub id: String,
    pub et: SubregionMetrics,
    pub tc: SubregionMetrics,
    pub wt: SubregionMetrics,
}

impl CaseMetrics {
    pub fn get(&self, r: Subregion) -> &SubregionMetrics {
        match r {
            Subregion::Et => &self.et,
            Subregion::Tc => &self.tc,
            Subregion::Wt => &self.wt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cases: Vec<CaseMetrics>,
    /// Means over cases, ET/TC/WT.
    pub mean: [SubregionMetrics; 3],
}

impl EvalReport {
    pub fn from_cases(cases: Vec<CaseMetrics>) -> Self {
        let n = cases.len().max(1) as f64;
        let mean = Subregion::ALL.map(|r| SubregionMetrics {
            dsc: cases.iter().map(|c| c.get(r).dsc).sum::<f64>() / n,
            hd95: cases.iter().map(|c| c.get(r).hd95).sum::<f64>() / n,
            hd95_sentinel: cases.iter().any(|c| c.get(r).hd95_sentinel),
        });
        Self { cases, mean }
    }

    /// Mean DSC across the three subregions.
    pub fn mean_dsc(&self) -> f64 {
        self.mean.iter().map(|m| m.dsc).sum::<f64>() / 3.0
    }

    /// Number of individual metric values (cases x subregions x 2).
    pub fn metric_count(&self) -> usize {
        self.cases.len() * Subregion::ALL.len() * 2
    }
}

/// Scores a predicted label map against the reference.
pub fn score_case(
    id: &str,
    truth: &SegmentationLabelMap,
    pred: &SegmentationLabelMap,
    spacing: &[f64],
) -> Result<CaseMetrics> {
    let gt = map_nested_subregions(truth);
    let pr = map_nested_subregions(pred);
    let one = |r: Subregion| -> Result<SubregionMetrics> {
        let a = BinaryMask::new(pr.get(r).clone(), spacing)?;
        let b = BinaryMask::new(gt.get(r).clone(), spacing)?;
        let h = hd95(&a, &b)?;
        Ok(SubregionMetrics {
            dsc: dsc(&a, &b)?,
            hd95: h.value,
            hd95_sentinel: h.sentinel,
        })
    };
    Ok(CaseMetrics {
        id: id.to_string(),
        et: one(Subregion::Et)?,
        tc: one(Subregion::Tc)?,
        wt: one(Subregion::Wt)?,
    })
}

/// Window starts covering `[0, n)` with stride `window / 2`.
fn window_starts(n: usize, window: usize) -> Vec<usize> {
    if n <= window {
        return vec![0];
    }
    let stride = (window / 2).max(1);
    let mut starts: Vec<usize> = (0..=n - window).step_by(stride).collect();
    if *starts.last().unwrap() != n - window {
        starts.push(n - window);
    }
    starts
}

/// Class probabilities `(C, *spatial)` for one `(channels, *spatial)`
/// volume by sliding a `patch`-sized window with 50% overlap and
/// averaging the overlapping predictions.
pub fn sliding_window_probs(net: &Backbone, input: &Array, patch: &[usize]) -> Result<Array> {
    let _g = no_grad();
    let spatial = &input.shape()[1..];
    if spatial.len() != patch.len() {
        return Err(Error::shape("sliding window patch", spatial, patch));
    }
    let win: Vec<usize> = spatial.iter().zip(patch).map(|(&n, &p)| n.min(p)).collect();
    let c = net.config().num_classes;
    let mut out_shape = vec![c];
    out_shape.extend_from_slice(spatial);
    let mut acc = ArrayD::<f64>::zeros(IxDyn(&out_shape));
    let mut counts = ArrayD::<f64>::zeros(IxDyn(spatial));
    let starts: Vec<Vec<usize>> = spatial.iter().zip(&win).map(|(&n, &w)| window_starts(n, w)).collect();
    let mut idx = vec![0usize; starts.len()];
    loop {
        let region: Vec<SliceInfoElem> = idx
            .iter()
            .enumerate()
            .map(|(a, &i)| {
                let s = starts[a][i];
                SliceInfoElem::from(s..s + win[a])
            })
            .collect();
        let mut with_ch = vec![SliceInfoElem::from(..)];
        with_ch.extend(region.iter().cloned());
        let x = input.slice(with_ch.as_slice()).to_owned().insert_axis(Axis(0));
        let probs = net.forward(&Tensor::new(x))?.logits.softmax(1);
        let p = probs.value().index_axis(Axis(0), 0);
        let mut a = acc.slice_mut(with_ch.as_slice());
        a += &p;
        let mut cnt = counts.slice_mut(region.as_slice());
        cnt += 1.0;
        // odometer over window positions
        let mut axis = idx.len();
        loop {
            if axis == 0 {
                let counts = counts.insert_axis(Axis(0));
                return Ok(acc / &counts);
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < starts[axis].len() {
                break;
            }
            idx[axis] = 0;
        }
    }
}

/// Argmax over the class axis of `(C, *spatial)` probabilities.
pub fn argmax_classes(probs: &Array) -> ArrayD<usize> {
    probs.map_axis(Axis(0), |p| {
        p.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0
    })
}
