//! Central finite-difference check of reverse-mode gradients.
//!
//! The numeric side only ever evaluates the forward function, so it is
//! independent of every backward rule it is used to check.

use std::fmt;

use super::{no_grad, Tensor};

#[derive(Debug, Clone)]
pub struct GradcheckFailure {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl fmt::Display for GradcheckFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "input {} element {}: analytic {:.10e} vs numeric {:.10e}",
            self.input, self.index, self.analytic, self.numeric
        )
    }
}

impl std::error::Error for GradcheckFailure {}

/// Central differences `(f(x+h) - f(x-h)) / 2h` for every element of every
/// input.
pub fn numeric_gradients<F>(inputs: &[Tensor], f: &F, eps: f64) -> Vec<Vec<f64>>
where
    F: Fn(&[Tensor]) -> Tensor,
{
    let _guard = no_grad();
    let base: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let n = inputs[i].len();
        let mut grads = Vec::with_capacity(n);
        for j in 0..n {
            let eval = |delta: f64| {
                let mut args = base.clone();
                let mut v = inputs[i].value().clone();
                *v.iter_mut().nth(j).unwrap() += delta;
                args[i] = Tensor::new(v);
                f(&args).item()
            };
            grads.push((eval(eps) - eval(-eps)) / (2.0 * eps));
        }
        out.push(grads);
    }
    out
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences; passes when `|a - n| <= atol + rtol * |n|` elementwise.
pub fn check_gradients<F>(
    inputs: &[Tensor],
    f: F,
    eps: f64,
    rtol: f64,
    atol: f64,
) -> Result<(), GradcheckFailure>
where
    F: Fn(&[Tensor]) -> Tensor,
{
    let leaves: Vec<Tensor> = inputs.iter().map(|t| Tensor::leaf(t.value().clone())).collect();
    let out = f(&leaves);
    assert_eq!(out.len(), 1, "gradcheck needs a scalar output");
    let grads = out.backward();
    let numeric = numeric_gradients(&leaves, &f, eps);
    for (i, leaf) in leaves.iter().enumerate() {
        let zeros = ndarray::ArrayD::zeros(leaf.value().raw_dim());
        let analytic = grads.get(leaf).unwrap_or(&zeros);
        for (j, (&a, &n)) in analytic.iter().zip(&numeric[i]).enumerate() {
            if (a - n).abs() > atol + rtol * n.abs() || !a.is_finite() {
                return Err(GradcheckFailure {
                    input: i,
                    index: j,
                    analytic: a,
                    numeric: n,
                });
            }
        }
    }
    Ok(())
}
