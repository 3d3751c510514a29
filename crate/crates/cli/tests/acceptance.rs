//! Acceptance suite: prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers to run a subset:
//! `cargo test --test acceptance -- 5 8`.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use acn_core::autograd::gradcheck::check_gradients;
use acn_core::autograd::{no_grad, Array, Tensor};
use acn_core::backbone::Backbone;
use acn_core::data::{
    case_seed, enumerate_modality_subsets, synth_generate, write_synthetic_dataset, Case, Dataset, ModalityMask,
    SynthConfig,
};
use acn_core::discriminators::EntropyDiscriminator;
use acn_core::losses::{
    adversarial_d_loss, adversarial_g_loss, consistency_loss, dice_loss, ramp_up, self_information, soften_logits,
    total_loss, LossParts, LossWeights, DICE_EPS,
};
use acn_core::metrics::{dsc, hd95, BinaryMask};
use acn_core::mmi::{mi_loss, neg_log_q, LevelWeights, MmiHeads};
use acn_core::nn::{checksum, Adam, AdamConfig, Module};
use acn_core::trainer::{poly_lr, Ablation, ModelConfig, PathKind, Trainer, TrainConfig};
use ndarray::{ArrayD, Axis, Dimension, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

/// `|got - want| <= rtol |want|`, or `<= rtol` when `want` is zero.
fn close(what: &str, got: f64, want: f64, rtol: f64) -> Result<(), String> {
    let tol = if want == 0.0 { rtol } else { rtol * want.abs() };
    ensure!((got - want).abs() <= tol, "{what}: got {got:.12e}, want {want:.12e}");
    Ok(())
}

/// Matches a value printed to `digits` decimals.
fn rounds_to(what: &str, got: f64, printed: f64, digits: i32) -> Result<(), String> {
    let half = 0.5 * 10f64.powi(-digits);
    ensure!((got - printed).abs() <= half, "{what}: {got} does not round to {printed}");
    Ok(())
}

fn t(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::from_vec(shape, v.to_vec())
}

fn rand_array(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Array {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(lo..hi))
}

fn synth_cases(n: usize, seed: u64) -> Vec<Case> {
    (0..n)
        .map(|i| {
            let cfg = SynthConfig {
                seed: case_seed(seed, i),
                ..SynthConfig::default()
            };
            let (volume, labels) = synth_generate(&cfg).expect("synthetic case");
            Case {
                id: format!("case_{i:04}"),
                volume,
                labels,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// 1. analytic examples

fn analytic_examples() -> Outcome {
    const R: f64 = 1e-6;
    let mut n = 0;
    let mut ok = |r: Result<(), String>| -> Result<(), String> {
        n += 1;
        r
    };

    // softening
    for tau in [0.5, 1.0, 7.0] {
        let p = soften_logits(&t(&[1, 4, 1], &[0.3; 4]), tau).map_err(|e| e.to_string())?;
        for &v in p.value() {
            ok(close("uniform softening", v, 0.25, R))?;
        }
    }
    let p = soften_logits(&t(&[1, 3, 1], &[1.0, -0.4, 0.2]), 1000.0).map_err(|e| e.to_string())?;
    let spread = p.value().iter().cloned().fold(f64::MIN, f64::max) - p.value().iter().cloned().fold(f64::MAX, f64::min);
    ok(if spread < 0.01 { Ok(()) } else { Err(format!("tau=1000 spread {spread}")) })?;
    let p = soften_logits(&t(&[1, 2, 1], &[2.0, 0.0]), 1.0).map_err(|e| e.to_string())?;
    let logistic = 1.0 / (1.0 + (-2f64).exp());
    ok(close("softmax (2,0)", p.value()[[0, 0, 0]], logistic, R))?;
    ok(close("softmax (2,0)", p.value()[[0, 1, 0]], 1.0 - logistic, R))?;
    ok(rounds_to("softmax (2,0)", p.value()[[0, 0, 0]], 0.8808, 4))?;
    ok(rounds_to("softmax (2,0)", p.value()[[0, 1, 0]], 0.1192, 4))?;
    ok(if soften_logits(&p, 0.0).is_err() && soften_logits(&p, -1.0).is_err() {
        Ok(())
    } else {
        Err("non-positive temperature accepted".into())
    })?;

    // consistency
    let a = t(&[1, 2, 1], &[0.8, 0.2]);
    let b = t(&[1, 2, 1], &[0.5, 0.5]);
    let kl = |p: [f64; 2], q: [f64; 2]| p[0] * (p[0] / q[0]).ln() + p[1] * (p[1] / q[1]).ln();
    let oracle = (kl([0.8, 0.2], [0.5, 0.5]) + kl([0.5, 0.5], [0.8, 0.2])) / 2.0;
    let v = consistency_loss(&a, &b).map_err(|e| e.to_string())?.item();
    ok(close("consistency example", v, oracle, R))?;
    ok(rounds_to("consistency example", v, 0.2079, 4))?;
    ok(close("consistency of equal inputs", consistency_loss(&a, &a).unwrap().item(), 0.0, R))?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let x = soften_logits(&Tensor::new(rand_array(&[2, 3, 4], -3.0, 3.0, &mut rng)), 1.0).unwrap();
        let y = soften_logits(&Tensor::new(rand_array(&[2, 3, 4], -3.0, 3.0, &mut rng)), 1.0).unwrap();
        let (xy, yx) = (consistency_loss(&x, &y).unwrap().item(), consistency_loss(&y, &x).unwrap().item());
        ok(if (xy - yx).abs() <= 1e-9 { Ok(()) } else { Err(format!("asymmetric consistency {xy} vs {yx}")) })?;
    }

    // self-information
    let s = self_information(&t(&[1, 4, 1], &[0.0, 0.0, 1.0, 0.0])).unwrap();
    ok(close("one-hot entropy", s.scalar_map.item(), 0.0, R))?;
    ok(if s.channels.value().iter().all(|&v| v == 0.0) { Ok(()) } else { Err("one-hot channels".into()) })?;
    let s = self_information(&t(&[1, 4, 1], &[0.25; 4])).unwrap();
    ok(close("uniform entropy", s.scalar_map.item(), 4f64.ln(), R))?;
    ok(rounds_to("uniform entropy", s.scalar_map.item(), 1.3863, 4))?;
    for &c in s.channels.value() {
        ok(close("uniform channel", c, 0.25 * 4f64.ln(), R))?;
        ok(rounds_to("uniform channel", c, 0.3466, 4))?;
    }

    // adversarial (logits 0 <=> probability 0.5)
    let zero = Tensor::zeros(&[1, 1, 2, 2]);
    let d = adversarial_d_loss(&zero, &zero).item();
    ok(close("D loss at 0.5", d, -(0.5f64.ln() + 0.5f64.ln()), R))?;
    ok(rounds_to("D loss at 0.5", d, 1.3863, 4))?;
    let sure = Tensor::from_vec(&[1, 1, 2, 2], vec![60.0; 4]);
    ok(close("perfect D", adversarial_d_loss(&sure, &sure.neg()).item(), 0.0, R))?;
    ok(close("swapped perfect D", adversarial_d_loss(&sure.neg(), &sure).item(), 2.0 * 1e8f64.ln(), R))?;
    ok(close("G loss at d_fake = 1", adversarial_g_loss(&sure).item(), 0.0, R))?;
    let g = adversarial_g_loss(&zero).item();
    ok(close("G loss at 0.5", g, 2f64.ln(), R))?;
    ok(rounds_to("G loss at 0.5", g, 0.6931, 4))?;
    for x in [-4.0, -1.0, 0.0, 0.5, 3.0] {
        let f = Tensor::leaf(ndarray::arr1(&[x]).into_dyn());
        let grad = adversarial_g_loss(&f).backward().get(&f).map(|g| g[0]).unwrap_or(0.0);
        ok(if grad < 0.0 { Ok(()) } else { Err(format!("G gradient {grad} at logit {x}")) })?;
    }

    // dice: channel 1 is the single foreground class
    let y = t(&[1, 2, 4], &[0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0]);
    ok(if dice_loss(&y, &y).unwrap().item() < 1e-4 { Ok(()) } else { Err("dice of target".into()) })?;
    let anti = t(&[1, 2, 4], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
    ok(if (dice_loss(&anti, &y).unwrap().item() - 1.0).abs() < 1e-4 { Ok(()) } else { Err("disjoint dice".into()) })?;
    let p = t(&[1, 2, 4], &[0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
    let v = dice_loss(&p, &y).unwrap().item();
    ok(close("dice example", v, 1.0 - (2.0 + DICE_EPS) / (4.0 + DICE_EPS), R))?;
    ok(if (v - 0.5).abs() < 1e-4 { Ok(()) } else { Err(format!("dice example {v}")) })?;

    // ramp
    ok(close("ramp at L", ramp_up(40, 40).unwrap(), 0.1, R))?;
    ok(close("ramp past L", ramp_up(90, 40).unwrap(), 0.1, R))?;
    ok(close("ramp at 0", ramp_up(0, 40).unwrap(), 0.1 * (-5f64).exp(), R))?;
    ok(rounds_to("ramp at 0", ramp_up(0, 40).unwrap() * 1e4, 6.738, 3))?;
    ok(close("ramp at L/2", ramp_up(20, 40).unwrap(), 0.1 * (-1.25f64).exp(), R))?;
    ok(rounds_to("ramp at L/2", ramp_up(20, 40).unwrap(), 0.02865, 5))?;
    ok(if ramp_up(1, 0).is_err() { Ok(()) } else { Err("L = 0 accepted".into()) })?;

    // total
    let parts = |v: f64| LossParts {
        dice_multi: Tensor::scalar(v),
        dice_uni: Tensor::scalar(v),
        consistency: Tensor::scalar(v),
        en_adv: Some(Tensor::scalar(v)),
        kn_adv: Some(Tensor::scalar(v)),
        mi: Some(Tensor::scalar(v)),
    };
    let w = LossWeights {
        ramp_length: Some(40),
        ..LossWeights::default()
    };
    ok(close("total of zeros", total_loss(&parts(0.0), &w, 40).unwrap().0.item(), 0.0, R))?;
    ok(close("total of ones", total_loss(&parts(1.0), &w, 40).unwrap().0.item(), 1.6012, R))?;
    let d = LossWeights::default();
    ok(if [d.multi, d.uni, d.en, d.kn, d.mi] == [0.2, 0.8, 0.001, 0.0002, 0.5] {
        Ok(())
    } else {
        Err(format!("default weights {d:?}"))
    })?;

    // variational heads on the desk backbone
    let model = ModelConfig::default();
    let multi = Backbone::new(&model.backbone(4), "multi", 1).unwrap();
    let uni = Backbone::new(&model.backbone(1), "uni", 2).unwrap();
    let widths: Vec<usize> = (1..=model.levels).map(|k| multi.config().width(k)).collect();
    let heads = MmiHeads::new(&widths, 2, 3);
    ok(if checksum(&heads.params()) == checksum(&MmiHeads::new(&widths, 2, 3).params()) {
        Ok(())
    } else {
        Err("heads are not deterministic".into())
    })?;
    let x4 = Tensor::new(rand_array(&[1, 4, 64, 64], -1.0, 1.0, &mut rng));
    let x1 = Tensor::new(rand_array(&[1, 1, 64, 64], -1.0, 1.0, &mut rng));
    let (om, ou) = {
        let _g = no_grad();
        (multi.forward(&x4).unwrap(), uni.forward(&x1).unwrap())
    };
    for ((m, u), h) in om.encoder_features.iter().zip(&ou.encoder_features).zip(&heads.heads) {
        let mu = h.mean(u).unwrap();
        ok(if mu.shape() == m.shape() { Ok(()) } else { Err(format!("mean shape {:?} vs {:?}", mu.shape(), m.shape())) })?;
        ok(if mu.value().iter().all(|&v| v == 0.0) { Ok(()) } else { Err("zero head output".into()) })?;
    }

    // neg_log_q and mi_loss
    let one = t(&[1], &[1.0]);
    let m1 = t(&[1, 1, 1, 1], &[1.0]);
    let z1 = Tensor::zeros(&[1, 1, 1, 1]);
    ok(close("neg_log_q at m = mu", neg_log_q(&m1, &m1, &one).unwrap().item(), 0.0, R))?;
    ok(close("neg_log_q unit residual", neg_log_q(&m1, &z1, &one).unwrap().item(), 0.5, R))?;
    let m = Tensor::new(rand_array(&[1, 2, 3, 3], -1.0, 1.0, &mut rng));
    let mu = Tensor::leaf(rand_array(&[1, 2, 3, 3], -1.0, 1.0, &mut rng));
    let sigma = t(&[2], &[0.6, 1.7]);
    let grads = neg_log_q(&m, &mu, &sigma).unwrap().backward();
    for (i, &gv) in grads.get(&mu).unwrap().indexed_iter() {
        let s = sigma.value()[i[1]];
        ok(close("d/dmu", gv, (mu.value()[&i] - m.value()[&i]) / (s * s), R))?;
    }
    let h2 = MmiHeads::new(&[1, 1], 2, 0);
    let g2 = LevelWeights::new(vec![1.0 / 3.0, 2.0 / 3.0]).unwrap();
    let same = vec![(z1.clone(), z1.clone()), (z1.clone(), z1.clone())];
    ok(close("mi_loss at m = mu", mi_loss(&same, &h2, &g2, true).unwrap().item(), 0.0, R))?;
    let pairs = vec![
        (t(&[1, 1, 1, 1], &[0.6f64.sqrt()]), z1.clone()),
        (t(&[1, 1, 1, 1], &[1.2f64.sqrt()]), z1.clone()),
    ];
    ok(close("mi_loss weighted sum", mi_loss(&pairs, &h2, &g2, true).unwrap().item(), 0.5, R))?;

    // optimization oracle: m is an affine map of u
    let heads = MmiHeads::new(&[3], 2, 2);
    let u = Tensor::new(rand_array(&[2, 3, 4, 4], -1.5, 1.5, &mut rng));
    let a = [[0.5, -1.0, 0.2], [0.3, 0.8, -0.4], [-0.6, 0.1, 0.9]];
    let bias = [0.1, -0.2, 0.3];
    let mut mv = ArrayD::zeros(IxDyn(&[2, 3, 4, 4]));
    for ((bi, c, y, x), v) in mv.view_mut().into_dimensionality::<ndarray::Ix4>().unwrap().indexed_iter_mut() {
        *v = bias[c] + (0..3).map(|j| a[c][j] * u.value()[[bi, j, y, x]]).sum::<f64>();
    }
    let pairs = vec![(Tensor::new(mv), u)];
    let g1 = LevelWeights::linear(1);
    let mut opt = Adam::new(heads.params(), 1e-2, AdamConfig::default());
    let initial = mi_loss(&pairs, &heads, &g1, true).unwrap().item();
    let mut last = initial;
    for _ in 0..500 {
        let l = mi_loss(&pairs, &heads, &g1, true).unwrap();
        last = l.item();
        opt.step(&l.backward());
    }
    ok(if last < 0.1 * initial { Ok(()) } else { Err(format!("affine task {initial} -> {last}")) })?;

    // metrics
    let grid = |cells: &[[usize; 2]]| {
        let mut a = ArrayD::from_elem(IxDyn(&[6, 6]), false);
        for c in cells {
            a[[c[0], c[1]]] = true;
        }
        BinaryMask::unit(a)
    };
    let a = grid(&[[1, 1], [1, 2]]);
    let b = grid(&[[1, 2], [4, 4]]);
    let c = grid(&[[3, 3]]);
    ok(close("dsc a=a", dsc(&a, &a).unwrap(), 1.0, R))?;
    ok(close("dsc disjoint", dsc(&a, &c).unwrap(), 0.0, R))?;
    ok(close("dsc overlap 1 of 2", dsc(&a, &b).unwrap(), 0.5, R))?;
    ok(close("hd95 a=a", hd95(&a, &a).unwrap().value, 0.0, R))?;
    ok(close("hd95 offset voxel", hd95(&grid(&[[2, 2]]), &grid(&[[2, 3]])).unwrap().value, 1.0, R))?;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..5 {
        let (a, b) = random_pair(&mut rng);
        ok(close("hd95 vs brute force", hd95(&a, &b).unwrap().value, brute_hd95(&a, &b), 1e-9))?;
    }
    Ok(format!("{n} checks within 1e-6 relative"))
}

// ---------------------------------------------------------------------------
// 2. gradients

fn gradient_suite() -> Outcome {
    const TRIALS: usize = 20;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let gc = |name: &str, inputs: &[Tensor], f: &dyn Fn(&[Tensor]) -> Tensor| -> Result<(), String> {
        check_gradients(inputs, f, 1e-6, 1e-4, 1e-6).map_err(|e| format!("{name}: {e}"))
    };
    let probs = |shape: &[usize], rng: &mut ChaCha8Rng| {
        soften_logits(&Tensor::new(rand_array(shape, -2.0, 2.0, rng)), 1.0).unwrap().value().clone()
    };
    let shape = |rng: &mut ChaCha8Rng| vec![rng.random_range(1..=2), rng.random_range(2..=4), rng.random_range(2..=3), rng.random_range(2..=3)];
    for _ in 0..TRIALS {
        let s = shape(&mut rng);
        let (p, q) = (Tensor::new(probs(&s, &mut rng)), Tensor::new(probs(&s, &mut rng)));
        gc("consistency_loss", &[p, q], &|x| consistency_loss(&x[0], &x[1]).unwrap())?;

        let s = shape(&mut rng);
        let logits = Tensor::new(rand_array(&s, -2.0, 2.0, &mut rng));
        let w = Tensor::new(rand_array(&s, -1.0, 1.0, &mut rng));
        gc("self_information through softmax", &[logits], &|x| {
            self_information(&x[0].softmax(1)).unwrap().channels.mul(&w).sum()
        })?;

        let real = Tensor::new(rand_array(&[2, 1, 3, 3], -3.0, 3.0, &mut rng));
        let fake = Tensor::new(rand_array(&[2, 1, 3, 3], -3.0, 3.0, &mut rng));
        gc("adversarial_d_loss", &[real, fake.clone()], &|x| adversarial_d_loss(&x[0], &x[1]))?;
        gc("adversarial_g_loss", &[fake], &|x| adversarial_g_loss(&x[0]))?;

        let s = shape(&mut rng);
        let p = Tensor::new(rand_array(&s, 0.05, 1.0, &mut rng));
        let mut y = ArrayD::zeros(IxDyn(&s));
        for mut lane in y.lanes_mut(Axis(1)) {
            let k = rng.random_range(0..lane.len());
            lane[k] = 1.0;
        }
        let y = Tensor::new(y);
        gc("dice_loss", &[p], &|x| dice_loss(&x[0], &y).unwrap())?;

        let s = shape(&mut rng);
        let m = Tensor::new(rand_array(&s, -1.0, 1.0, &mut rng));
        let mu = Tensor::new(rand_array(&s, -1.0, 1.0, &mut rng));
        let sigma = Tensor::new(rand_array(&[s[1]], 0.5, 2.0, &mut rng));
        gc("neg_log_q", &[m, mu, sigma], &|x| neg_log_q(&x[0], &x[1], &x[2]).unwrap())?;

        let widths = [rng.random_range(1..=3), rng.random_range(1..=3)];
        let heads = MmiHeads::new(&widths, 2, rng.random());
        for p in heads.params() {
            if p.name().ends_with("mu2.weight") {
                p.set(rand_array(&p.shape(), -0.5, 0.5, &mut rng));
            }
        }
        let inputs: Vec<Tensor> = [widths[0], widths[0], widths[1], widths[1]]
            .iter()
            .enumerate()
            .map(|(i, &c)| Tensor::new(rand_array(&[1, c, 3 - i / 2, 3 - i / 2], -1.0, 1.0, &mut rng)))
            .collect();
        let g = LevelWeights::linear(2);
        gc("mi_loss", &inputs, &|x| {
            mi_loss(&[(x[0].clone(), x[1].clone()), (x[2].clone(), x[3].clone())], &heads, &g, false).unwrap()
        })?;
    }
    Ok(format!("7 functions x {TRIALS} random inputs, rtol 1e-4 atol 1e-6"))
}

// ---------------------------------------------------------------------------
// 3. defaults

fn hyperparameter_defaults() -> Outcome {
    let cfg = TrainConfig::new("t1c".parse().unwrap());
    let snapshot = include_str!("snapshots/default_config.toml");
    ensure!(cfg.to_toml() == snapshot, "default config differs from snapshot:\n{}", cfg.to_toml());
    let w = cfg.resolved_weights();
    ensure!([w.multi, w.uni, w.en, w.kn, w.mi] == [0.2, 0.8, 0.001, 0.0002, 0.5], "weights {w:?}");
    let l = cfg.ramp_length();
    close("omega(L)", ramp_up(l, l).map_err(|e| e.to_string())?, 0.1, 0.0)?;
    close("lr(0)", poly_lr(0, &cfg).map_err(|e| e.to_string())?, 1e-4, 0.0)?;
    ensure!(cfg.poly_power == 0.9 && cfg.epoch_max == 300, "schedule {} / {}", cfg.poly_power, cfg.epoch_max);
    Ok("lambda = (0.2, 0.8, 0.001, 0.0002, 0.5), omega(L) = 0.1, lr(0) = 1e-4, power 0.9".into())
}

// ---------------------------------------------------------------------------
// 4. metric oracles

fn random_pair(rng: &mut ChaCha8Rng) -> (BinaryMask, BinaryMask) {
    let spacing: Vec<f64> = (0..3).map(|_| rng.random_range(0.5..2.0)).collect();
    let draw = |rng: &mut ChaCha8Rng| {
        let density = rng.random_range(0.02..0.4);
        let mut m = ArrayD::from_shape_simple_fn(IxDyn(&[16, 16, 16]), || rng.random_bool(density));
        m[[rng.random_range(0..16), rng.random_range(0..16), rng.random_range(0..16)]] = true;
        BinaryMask::new(m, &spacing).unwrap()
    };
    let a = draw(rng);
    let b = draw(rng);
    (a, b)
}

/// Voxels with a face neighbour outside the mask or outside the grid.
fn brute_surface(m: &ArrayD<bool>) -> Vec<Vec<usize>> {
    let shape = m.shape().to_vec();
    let mut out = Vec::new();
    for (idx, &v) in m.indexed_iter() {
        if !v {
            continue;
        }
        let idx: Vec<usize> = idx.slice().to_vec();
        let border = (0..shape.len()).any(|ax| {
            [-1i64, 1].iter().any(|&d| {
                let j = idx[ax] as i64 + d;
                if j < 0 || j >= shape[ax] as i64 {
                    return true;
                }
                let mut n = idx.clone();
                n[ax] = j as usize;
                !m[IxDyn(&n)]
            })
        });
        if border {
            out.push(idx);
        }
    }
    out
}

fn brute_percentile95(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let rank = 0.95 * (v.len() - 1) as f64;
    let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
    v[lo] + (rank - lo as f64) * (v[hi] - v[lo])
}

fn brute_hd95(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let sp = a.spacing();
    let (sa, sb) = (brute_surface(a.mask()), brute_surface(b.mask()));
    let directed = |from: &[Vec<usize>], to: &[Vec<usize>]| {
        let d: Vec<f64> = from
            .iter()
            .map(|p| {
                to.iter()
                    .map(|q| {
                        p.iter()
                            .zip(q)
                            .zip(sp)
                            .map(|((&x, &y), s)| ((x as f64 - y as f64) * s).powi(2))
                            .sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .collect();
        brute_percentile95(d)
    };
    directed(&sa, &sb).max(directed(&sb, &sa))
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let (a, b) = random_pair(&mut rng);
        let inter = a.mask().iter().zip(b.mask()).filter(|(x, y)| **x && **y).count();
        let want = 2.0 * inter as f64 / (a.count() + b.count()) as f64;
        let got = dsc(&a, &b).map_err(|e| e.to_string())?;
        ensure!(got == want, "pair {i}: dsc {got} vs oracle {want}");
        let h = hd95(&a, &b).map_err(|e| e.to_string())?.value;
        let oracle = brute_hd95(&a, &b);
        worst = worst.max((h - oracle).abs());
        ensure!((h - oracle).abs() <= 1e-9, "pair {i}: hd95 {h} vs oracle {oracle}");
    }
    Ok(format!("50 random 16^3 pairs, anisotropic spacing; dsc exact, max hd95 error {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 5. overfit

fn overfit() -> Outcome {
    let case = synth_cases(1, 1).remove(0);
    let ds = Dataset { cases: vec![case] };
    let mut cfg = TrainConfig::new("t1c".parse().unwrap());
    cfg.base_lr = 2e-2;
    cfg.batch_size = 1;
    let mut trainer = Trainer::new(cfg).map_err(|e| e.to_string())?;
    let sampler = trainer.sampler(Arc::new(ds.normalized().cases)).map_err(|e| e.to_string())?;
    for step in 0..200 {
        trainer.train_step(&sampler.batch(step).unwrap()).map_err(|e| e.to_string())?;
    }
    let wt = |p| trainer.evaluate_path(&ds, p).map(|r| r.mean[2].dsc).map_err(|e| e.to_string());
    let (m, u) = (wt(PathKind::Multi)?, wt(PathKind::Uni)?);
    ensure!(m > 0.95 && u > 0.95, "training WT DSC multi {m:.4}, uni {u:.4}");
    Ok(format!("training WT DSC multi {m:.4}, uni {u:.4} after 200 steps"))
}

// ---------------------------------------------------------------------------
// 6. ablation trend

fn ablation_trend() -> Outcome {
    let all = synth_cases(60, 2024);
    let train = Dataset {
        cases: all[..40].to_vec(),
    };
    let val = Dataset {
        cases: all[40..].to_vec(),
    };
    let run = |seed: u64, ablation: Ablation| -> Result<(f64, f64), String> {
        let mut cfg = TrainConfig::new("t1c".parse().unwrap());
        cfg.base_lr = 2e-2;
        cfg.batch_size = 2;
        cfg.epoch_max = 40;
        cfg.steps_per_epoch = 10;
        cfg.eval_interval = cfg.epoch_max;
        cfg.seed = seed;
        cfg.ablation = ablation;
        let mut t = Trainer::new(cfg).map_err(|e| e.to_string())?;
        t.fit(&train, &val, None, |_| {}).map_err(|e| e.to_string())?;
        let dsc = t.evaluate_path(&val, PathKind::Uni).map_err(|e| e.to_string())?.mean_dsc();
        let h = t.mean_entropy(&val).map_err(|e| e.to_string())?;
        Ok((dsc, h))
    };
    let no_ena = Ablation::default().without("ena").unwrap();
    let mut rows = Vec::new();
    let (mut full_d, mut base_d, mut full_h, mut noena_h) = (0.0, 0.0, 0.0, 0.0);
    for seed in 0..3 {
        let (fd, fh) = run(seed, Ablation::default())?;
        let (bd, _) = run(seed, Ablation::none())?;
        let (_, nh) = run(seed, no_ena)?;
        rows.push(format!("seed {seed}: full {fd:.4} / baseline {bd:.4}, entropy {fh:.4} / no-EnA {nh:.4}"));
        full_d += fd / 3.0;
        base_d += bd / 3.0;
        full_h += fh / 3.0;
        noena_h += nh / 3.0;
    }
    let detail = format!(
        "mean val DSC full {full_d:.4} vs baseline {base_d:.4}; entropy with EnA {full_h:.4} vs without {noena_h:.4} [{}]",
        rows.join("; ")
    );
    ensure!(full_d >= base_d - 0.01, "{detail}");
    ensure!(full_h <= noena_h, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 7. min-max mechanics

fn minmax_mechanics() -> Outcome {
    // phase isolation
    let ds = Dataset {
        cases: synth_cases(3, 70),
    };
    let mut cfg = TrainConfig::new("fl,t2".parse().unwrap());
    cfg.base_lr = 1e-3;
    let mut t = Trainer::new(cfg).map_err(|e| e.to_string())?;
    let s = t.sampler(Arc::new(ds.normalized().cases)).map_err(|e| e.to_string())?;
    for i in 0..100 {
        let batch = s.batch(i).unwrap();
        let (g0, d0) = t.model.checksums();
        t.phase_a(&batch).map_err(|e| e.to_string())?;
        let (g1, d1) = t.model.checksums();
        t.phase_b(&batch).map_err(|e| e.to_string())?;
        let (g2, d2) = t.model.checksums();
        ensure!(d0 == d1 && g1 == g2, "step {i}: a phase touched the other side's parameters");
        ensure!(g0 != g1 && d1 != d2, "step {i}: a phase left its own parameters unchanged");
    }

    // capacity on frozen, separable inputs
    let dcfg = ModelConfig::default().d_en();
    let d = EntropyDiscriminator::new(&dcfg, 5).map_err(|e| e.to_string())?;
    let mut opt = Adam::new(d.params(), 1e-3, AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut draw = |mean: f64| {
        let n = Normal::new(mean, 1.0).unwrap();
        Tensor::new(ArrayD::from_shape_simple_fn(IxDyn(&[2, dcfg.in_channels, 32, 32]), || n.sample(&mut rng)))
    };
    for _ in 0..200 {
        let loss = adversarial_d_loss(&d.forward(&draw(0.5)).unwrap(), &d.forward(&draw(-0.5)).unwrap());
        opt.step(&loss.backward());
    }
    let cap_acc = {
        let _g = no_grad();
        let (mut hits, mut total) = (0, 0);
        for _ in 0..4 {
            let (real, fake) = (d.forward(&draw(0.5)).unwrap(), d.forward(&draw(-0.5)).unwrap());
            hits += real.value().iter().filter(|&&v| v > 0.0).count() + fake.value().iter().filter(|&&v| v < 0.0).count();
            total += real.len() + fake.len();
        }
        hits as f64 / total as f64
    };
    ensure!(cap_acc >= 0.95, "entropy discriminator reaches only {cap_acc:.3} on separable inputs");

    // alignment: D_en accuracy falls once the generators fight back
    let train = Dataset {
        cases: synth_cases(4, 7),
    }
    .normalized();
    let held = Dataset {
        cases: synth_cases(2, 99),
    }
    .normalized();
    let mut cfg = TrainConfig::new("t1c".parse().unwrap());
    cfg.batch_size = 2;
    cfg.seed = 3;
    cfg.weights.en = 1.0;
    let mut t = Trainer::new(cfg).map_err(|e| e.to_string())?;
    let s = t.sampler(Arc::new(train.cases)).map_err(|e| e.to_string())?;
    let hs = t.sampler(Arc::new(held.cases)).map_err(|e| e.to_string())?;
    let accuracy = |t: &Trainer| -> Result<f64, String> {
        let mut sum = 0.0;
        for i in 0..4 {
            sum += t.d_en_accuracy(&hs.batch(10_000 + i).unwrap()).map_err(|e| e.to_string())?;
        }
        Ok(sum / 4.0)
    };
    // segmenters first, so the two paths differ
    t.opt.multi.set_lr(1e-2);
    t.opt.uni.set_lr(1e-2);
    t.opt.heads.set_lr(1e-2);
    t.opt.d_en.set_lr(0.0);
    t.opt.d_kn.set_lr(0.0);
    for i in 0..150 {
        t.phase_a(&s.batch(i).unwrap()).map_err(|e| e.to_string())?;
    }
    // frozen generators: train the discriminators only
    t.opt.d_en.set_lr(1e-3);
    t.opt.d_kn.set_lr(1e-3);
    let mut peak: f64 = 0.0;
    for i in 0..150 {
        t.phase_b(&s.batch(200 + i).unwrap()).map_err(|e| e.to_string())?;
        if i % 25 == 24 {
            peak = peak.max(accuracy(&t)?);
        }
    }
    // adversarial training
    t.opt.multi.set_lr(3e-3);
    t.opt.uni.set_lr(3e-3);
    t.opt.heads.set_lr(3e-3);
    let mut trace = Vec::new();
    for i in 0..200 {
        let b = s.batch(400 + i).unwrap();
        t.phase_a(&b).map_err(|e| e.to_string())?;
        t.phase_b(&b).map_err(|e| e.to_string())?;
        if i % 50 == 49 {
            trace.push(accuracy(&t)?);
        }
    }
    let last = *trace.last().unwrap();
    let trace_s: Vec<String> = trace.iter().map(|a| format!("{a:.3}")).collect();
    let detail = format!(
        "phases isolated for 100 steps; capacity {cap_acc:.3} after 200 steps; D_en held-out accuracy peak {peak:.3} -> [{}]",
        trace_s.join(", ")
    );
    ensure!(peak >= 0.95, "frozen-generator peak below 95%: {detail}");
    ensure!(last < peak, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 8. determinism and resume

fn determinism_and_resume() -> Outcome {
    let ds = Dataset {
        cases: synth_cases(3, 80),
    };
    let mut cfg = TrainConfig::new("t1,t2".parse().unwrap());
    cfg.base_lr = 1e-3;
    cfg.batch_size = 2;
    cfg.seed = 8;
    let trace = || -> Result<Vec<_>, String> {
        let mut t = Trainer::new(cfg.clone()).map_err(|e| e.to_string())?;
        let s = t.sampler(Arc::new(ds.normalized().cases)).map_err(|e| e.to_string())?;
        (0..50).map(|i| t.train_step(&s.batch(i).unwrap()).map_err(|e| e.to_string())).collect()
    };
    let a = trace()?;
    let b = trace()?;
    ensure!(a == b, "loss traces differ between identical runs");

    let mut t = Trainer::new(cfg.clone()).map_err(|e| e.to_string())?;
    let s = t.sampler(Arc::new(ds.normalized().cases)).map_err(|e| e.to_string())?;
    for i in 0..25 {
        t.train_step(&s.batch(i).unwrap()).map_err(|e| e.to_string())?;
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    t.save(dir.path()).map_err(|e| e.to_string())?;
    let mut r = Trainer::load(dir.path()).map_err(|e| e.to_string())?;
    for i in 25..27 {
        let batch = s.batch(i).unwrap();
        let (x, y) = (t.train_step(&batch).unwrap(), r.train_step(&batch).unwrap());
        ensure!(x == y, "step {i} after resume differs: {} vs {}", x.losses, y.losses);
        ensure!(x == a[i as usize], "step {i} differs from the uninterrupted run");
    }
    ensure!(t.model.checksums() == r.model.checksums(), "parameters diverged after resume");
    Ok("50-step traces identical; resume at step 25 bitwise identical".into())
}

// ---------------------------------------------------------------------------
// 9. subsets

fn subset_coverage() -> Outcome {
    // rows of the comparison table: Flair, T1, T1ce, T2
    let table: [[u8; 4]; 15] = [
        [0, 0, 0, 1],
        [0, 0, 1, 0],
        [0, 1, 0, 0],
        [1, 0, 0, 0],
        [0, 0, 1, 1],
        [0, 1, 1, 0],
        [1, 1, 0, 0],
        [0, 1, 0, 1],
        [1, 0, 0, 1],
        [1, 0, 1, 0],
        [1, 1, 1, 0],
        [1, 1, 0, 1],
        [1, 0, 1, 1],
        [0, 1, 1, 1],
        [1, 1, 1, 1],
    ];
    let subsets = enumerate_modality_subsets();
    ensure!(subsets.len() == 15, "{} subsets", subsets.len());
    for (i, (mask, row)) in subsets.iter().zip(&table).enumerate() {
        ensure!(mask.present().map(u8::from) == *row, "subset {} is {mask}", i + 1);
        ensure!(mask.subset_id() == i + 1, "id of {mask} is {}", mask.subset_id());
        ensure!(ModalityMask::from_subset_id(i + 1).unwrap() == *mask, "id {} round trip", i + 1);
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("data");
    let synth = SynthConfig {
        spatial_shape: vec![32, 32],
        wt_radius: (5.0, 8.0),
        tc_radius: (3.0, 4.5),
        et_radius: (1.5, 2.5),
        ..SynthConfig::default()
    };
    write_synthetic_dataset(&data, &synth, 2, 0).map_err(|e| e.to_string())?;
    let mut cfg = TrainConfig::new("t1c".parse().unwrap());
    cfg.patch_size = vec![32, 32];
    Trainer::new(cfg).unwrap().save(&dir.path().join("runs/t1c")).map_err(|e| e.to_string())?;
    let out = Command::new(env!("CARGO_BIN_EXE_acn"))
        .args(["eval", "--all-subsets", "--ckpt", "runs", "--data", "data", "--out", "report"])
        .current_dir(dir.path())
        .output()
        .map_err(|e| e.to_string())?;
    let csv = fs::read_to_string(Path::new(dir.path()).join("report/eval.csv")).map_err(|e| e.to_string())?;
    let rows = csv.lines().skip(1).count();
    ensure!(rows == 15, "report has {rows} rows");
    let scored = csv.lines().filter(|l| l.contains(",ok,")).count();
    ensure!(scored == 1, "{scored} scored rows, expected the one checkpoint");
    ensure!(out.status.code() == Some(5), "exit status {:?} with 14 absent subsets", out.status.code());
    Ok("15 subsets in table order; eval --all-subsets wrote 15 rows".into())
}

// ---------------------------------------------------------------------------

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

const CRITERIA: [Criterion; 9] = [
    Criterion { id: 1, name: "analytic loss suite", budget: Duration::from_secs(30), run: analytic_examples },
    Criterion { id: 2, name: "gradient suite", budget: Duration::from_secs(120), run: gradient_suite },
    Criterion { id: 3, name: "hyperparameter fidelity", budget: Duration::from_secs(30), run: hyperparameter_defaults },
    Criterion { id: 4, name: "metric oracles", budget: Duration::from_secs(60), run: metric_oracles },
    Criterion { id: 5, name: "overfit smoke", budget: Duration::from_secs(300), run: overfit },
    Criterion { id: 6, name: "ablation trend", budget: Duration::from_secs(45 * 60), run: ablation_trend },
    Criterion { id: 7, name: "min-max mechanics", budget: Duration::from_secs(20 * 60), run: minmax_mechanics },
    Criterion { id: 8, name: "determinism and resume", budget: Duration::from_secs(10 * 60), run: determinism_and_resume },
    Criterion { id: 9, name: "subset coverage", budget: Duration::from_secs(120), run: subset_coverage },
];

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for c in CRITERIA.iter().filter(|c| selected.is_empty() || selected.contains(&c.id)) {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let result = match result {
            Ok(d) if elapsed > c.budget => Err(format!("{d}; took {elapsed:.0?}, budget {:?}", c.budget)),
            r => r,
        };
        match result {
            Ok(detail) => println!("criterion {} PASS [{}] ({elapsed:.1?}) {detail}", c.id, c.name),
            Err(detail) => {
                failed += 1;
                println!("criterion {} FAIL [{}] ({elapsed:.1?}) {detail}", c.id, c.name);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
