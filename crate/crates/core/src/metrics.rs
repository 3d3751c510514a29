//! Overlap and surface-distance metrics on binary masks.

use ndarray::{ArrayD, Axis, Dimension, IxDyn};

use crate::error::{Error, Result};

/// A boolean grid with physical voxel spacing (one entry per axis, mm).
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    mask: ArrayD<bool>,
    spacing: Vec<f64>,
}

impl BinaryMask {
    pub fn new(mask: ArrayD<bool>, spacing: &[f64]) -> Result<Self> {
        if spacing.len() != mask.ndim() {
            return Err(Error::Config(format!(
                "spacing has {} entries for a rank-{} mask",
                spacing.len(),
                mask.ndim()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(Self {
            mask,
            spacing: spacing.to_vec(),
        })
    }

    /// Unit spacing on every axis.
    pub fn unit(mask: ArrayD<bool>) -> Self {
        let spacing = vec![1.0; mask.ndim()];
        Self { mask, spacing }
    }

    pub fn mask(&self) -> &ArrayD<bool> {
        &self.mask
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&v| v)
    }

    /// Length of the grid's bounding diagonal in mm.
    pub fn diagonal(&self) -> f64 {
        self.mask
            .shape()
            .iter()
            .zip(&self.spacing)
            .map(|(&n, &s)| (n as f64 * s).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

fn same_grid(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.mask.shape() != b.mask.shape() {
        return Err(Error::shape("metric operands", a.mask.shape(), b.mask.shape()));
    }
    if a.spacing != b.spacing {
        return Err(Error::Config(format!(
            "metric operands have different spacing {:?} and {:?}",
            a.spacing, b.spacing
        )));
    }
    Ok(())
}

/// Dice similarity coefficient; two empty masks score 1.
pub fn dsc(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.mask.shape() != b.mask.shape() {
        return Err(Error::shape("dsc operands", a.mask.shape(), b.mask.shape()));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.mask.iter().zip(b.mask.iter()) {
        inter += (x && y) as usize;
        na += x as usize;
        nb += y as usize;
    }
    Ok(if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hd95 {
    pub value: f64,
    /// Exactly one mask was empty and `value` is the grid diagonal.
    pub sentinel: bool,
}

/// Voxels of the mask with at least one face neighbour outside it; the
/// region beyond the grid counts as outside.
pub fn surface(mask: &ArrayD<bool>) -> ArrayD<bool> {
    let shape = mask.shape().to_vec();
    let mut out = ArrayD::from_elem(mask.raw_dim(), false);
    for (idx, &v) in mask.indexed_iter() {
        if !v {
            continue;
        }
        let mut p = idx.slice().to_vec();
        let mut border = false;
        'axes: for ax in 0..shape.len() {
            for step in [-1isize, 1] {
                let q = p[ax] as isize + step;
                if q < 0 || q >= shape[ax] as isize {
                    border = true;
                    break 'axes;
                }
                p[ax] = q as usize;
                let inside = mask[IxDyn(&p)];
                p[ax] = idx[ax];
                if !inside {
                    border = true;
                    break 'axes;
                }
            }
        }
        out[&idx] = border;
    }
    out
}

/// Squared distance from every voxel to the nearest `true` voxel of
/// `features`, in physical units; infinite when there are none.
pub fn squared_edt(features: &ArrayD<bool>, spacing: &[f64]) -> ArrayD<f64> {
    let mut d = features.mapv(|f| if f { 0.0 } else { f64::INFINITY });
    for (ax, &s) in spacing.iter().enumerate() {
        let n = d.shape()[ax];
        let mut buf = vec![0.0; n];
        let mut out = vec![0.0; n];
        for mut lane in d.lanes_mut(Axis(ax)) {
            for (b, v) in buf.iter_mut().zip(lane.iter()) {
                *b = *v;
            }
            lower_envelope(&buf, s, &mut out);
            for (v, o) in lane.iter_mut().zip(&out) {
                *v = *o;
            }
        }
    }
    d
}

/// One-dimensional squared distance transform of a sampled function
/// (Felzenszwalb & Huttenlocher) at sample positions `i * s`.
fn lower_envelope(f: &[f64], s: f64, out: &mut [f64]) {
    let n = f.len();
    let sites: Vec<usize> = (0..n).filter(|&i| f[i].is_finite()).collect();
    if sites.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let x = |i: usize| i as f64 * s;
    let meet = |p: usize, q: usize| ((f[q] + x(q) * x(q)) - (f[p] + x(p) * x(p))) / (2.0 * (x(q) - x(p)));
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    for &q in &sites {
        loop {
            match v.last() {
                Some(&p) => {
                    let m = meet(p, q);
                    if m <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(m);
                        break;
                    }
                }
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
            }
        }
    }
    let mut k = 0;
    for (i, o) in out.iter_mut().enumerate() {
        let xi = x(i);
        while k + 1 < v.len() && z[k + 1] < xi {
            k += 1;
        }
        let p = v[k];
        *o = (xi - x(p)).powi(2) + f[p];
    }
}

/// 95th percentile with linear interpolation between order statistics.
pub fn percentile95(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.total_cmp(b));
    let pos = 0.95 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (pos - lo as f64) * (values[hi] - values[lo])
}

fn directed(from: &ArrayD<bool>, to_dist2: &ArrayD<f64>) -> f64 {
    let mut d: Vec<f64> = from
        .iter()
        .zip(to_dist2.iter())
        .filter(|(&f, _)| f)
        .map(|(_, &d2)| d2.sqrt())
        .collect();
    percentile95(&mut d)
}

/// Symmetric 95th-percentile surface distance in mm.
pub fn hd95(a: &BinaryMask, b: &BinaryMask) -> Result<Hd95> {
    same_grid(a, b)?;
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return Ok(Hd95 { value: 0.0, sentinel: false }),
        (true, false) | (false, true) => {
            return Ok(Hd95 {
                value: a.diagonal(),
                sentinel: true,
            })
        }
        _ => {}
    }
    let sa = surface(&a.mask);
    let sb = surface(&b.mask);
    let da = squared_edt(&sa, &a.spacing);
    let db = squared_edt(&sb, &b.spacing);
    Ok(Hd95 {
        value: directed(&sa, &db).max(directed(&sb, &da)),
        sentinel: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn mask2(rows: &[&str]) -> BinaryMask {
        let h = rows.len();
        let w = rows[0].len();
        BinaryMask::unit(ArrayD::from_shape_fn(IxDyn(&[h, w]), |i| rows[i[0]].as_bytes()[i[1]] == b'#'))
    }

    #[test]
    fn dsc_examples() {
        let a = mask2(&["##..", "...."]);
        let b = mask2(&[".##.", "...."]);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(dsc(&a, &b).unwrap(), 0.5);
        assert_eq!(dsc(&a, &mask2(&["..##", "...."])).unwrap(), 0.0);
        assert_eq!(dsc(&mask2(&["...."]), &mask2(&["...."])).unwrap(), 1.0);
        assert!(dsc(&a, &mask2(&["##.."])).is_err());
    }

    #[test]
    fn hd95_examples() {
        let a = mask2(&["#...", "...."]);
        let b = mask2(&[".#..", "...."]);
        assert_eq!(hd95(&a, &a).unwrap().value, 0.0);
        assert_eq!(hd95(&a, &b).unwrap().value, 1.0);
        let empty = mask2(&["....", "...."]);
        let h = hd95(&a, &empty).unwrap();
        assert!(h.sentinel);
        assert!((h.value - 20f64.sqrt()).abs() < 1e-12);
        assert_eq!(hd95(&empty, &empty).unwrap(), Hd95 { value: 0.0, sentinel: false });
        let c = BinaryMask::new(a.mask().clone(), &[1.0, 2.0]).unwrap();
        assert!(hd95(&a, &c).is_err());
    }

    #[test]
    fn surface_of_a_filled_square_is_its_ring() {
        let m = mask2(&[".....", ".###.", ".###.", ".###.", "....."]);
        let s = surface(m.mask());
        assert_eq!(s.iter().filter(|&&v| v).count(), 8);
        assert!(!s[[2, 2]]);
        // touching the grid edge counts as a boundary
        let full = mask2(&["###", "###", "###"]);
        assert_eq!(surface(full.mask()).iter().filter(|&&v| v).count(), 8);
    }

    #[test]
    fn percentile_interpolates() {
        let mut v: Vec<f64> = (0..=20).map(f64::from).collect();
        assert_eq!(percentile95(&mut v), 19.0);
        let mut v = vec![0.0, 10.0];
        assert!((percentile95(&mut v) - 9.5).abs() < 1e-12);
    }

    fn brute_edt(features: &ArrayD<bool>, spacing: &[f64]) -> ArrayD<f64> {
        let pts: Vec<Vec<usize>> = features.indexed_iter().filter(|(_, &f)| f).map(|(i, _)| i.slice().to_vec()).collect();
        ArrayD::from_shape_fn(features.raw_dim(), |i| {
            pts.iter()
                .map(|p| {
                    p.iter()
                        .zip(i.slice())
                        .zip(spacing)
                        .map(|((&a, &b), &s)| ((a as f64 - b as f64) * s).powi(2))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
        })
    }

    proptest! {
        #[test]
        fn edt_matches_brute_force(
            bits in proptest::collection::vec(proptest::bool::weighted(0.1), 6 * 7 * 5),
            sx in 0.5f64..3.0, sy in 0.5f64..3.0, sz in 0.5f64..3.0,
        ) {
            let f = ArrayD::from_shape_vec(IxDyn(&[6, 7, 5]), bits).unwrap();
            let sp = [sx, sy, sz];
            let fast = squared_edt(&f, &sp);
            let slow = brute_edt(&f, &sp);
            for (a, b) in fast.iter().zip(slow.iter()) {
                prop_assert!(a == b || (a - b).abs() <= 1e-9 * b.max(1.0), "{a} vs {b}");
            }
        }

        #[test]
        fn hd95_scales_with_spacing(seed in 0u64..1000, k in 1u32..4) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut gen = || ArrayD::from_shape_fn(IxDyn(&[8, 9]), |_| rng.random_bool(0.3));
            let (a, b) = (gen(), gen());
            let s = f64::from(k);
            let h1 = hd95(&BinaryMask::unit(a.clone()), &BinaryMask::unit(b.clone())).unwrap().value;
            let h2 = hd95(&BinaryMask::new(a.clone(), &[s, s]).unwrap(), &BinaryMask::new(b.clone(), &[s, s]).unwrap()).unwrap().value;
            prop_assert!((h2 - s * h1).abs() < 1e-9);
            let sym = hd95(&BinaryMask::unit(b), &BinaryMask::unit(a)).unwrap().value;
            prop_assert_eq!(sym, h1);
        }
    }
}
