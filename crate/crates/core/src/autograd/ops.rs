//! Elementwise, reduction and shape operations.

use ndarray::{Axis, IxDyn, Zip};

use super::{Array, Backward, Tensor};

/// Sums `grad` down to `shape`, undoing numpy-style broadcasting.
pub(crate) fn sum_to_shape(grad: &Array, shape: &[usize]) -> Array {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut g = grad.clone();
    let extra = g.ndim() - shape.len();
    for _ in 0..extra {
        g = g.sum_axis(Axis(0));
    }
    for (axis, &n) in shape.iter().enumerate() {
        if n == 1 && g.shape()[axis] != 1 {
            g = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    g
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| {
            let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
            let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
            match (da, db) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => panic!("cannot broadcast {a:?} with {b:?}"),
            }
        })
        .collect()
}

fn broadcast_to(a: &Array, shape: &[usize]) -> Array {
    a.broadcast(IxDyn(shape))
        .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", a.shape(), shape))
        .to_owned()
}

#[derive(Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

struct Binary {
    inputs: [Tensor; 2],
    kind: BinKind,
}

impl Backward for Binary {
    fn inputs(&self) -> &[Tensor] {
        &self.inputs
    }

    fn backward(&self, _out: &Array, grad: &Array) -> Vec<Option<Array>> {
        let a = self.inputs[0].value();
        let b = self.inputs[1].value();
        let (ga, gb) = match self.kind {
            BinKind::Add => (grad.clone(), grad.clone()),
            BinKind::Sub => (grad.clone(), -grad),
            BinKind::Mul => (grad * b, grad * a),
            BinKind::Div => {
                let ga = grad / b;
                let gb = -(grad * a) / (b * b);
                (ga, gb)
            }
        };
        vec![
            Some(sum_to_shape(&ga, a.shape())),
            Some(sum_to_shape(&gb, b.shape())),
        ]
    }
}

fn binary(a: &Tensor, b: &Tensor, kind: BinKind) -> Tensor {
    let (av, bv) = (a.value(), b.value());
    let value = if av.shape() == bv.shape() {
        match kind {
            BinKind::Add => av + bv,
            BinKind::Sub => av - bv,
            BinKind::Mul => av * bv,
            BinKind::Div => av / bv,
        }
    } else {
        let shape = broadcast_shape(av.shape(), bv.shape());
        let av = broadcast_to(av, &shape);
        let bv = broadcast_to(bv, &shape);
        match kind {
            BinKind::Add => av + bv,
            BinKind::Sub => av - bv,
            BinKind::Mul => av * bv,
            BinKind::Div => av / bv,
        }
    };
    Tensor::from_op(
        value,
        Binary {
            inputs: [a.clone(), b.clone()],
            kind,
        },
    )
}

/// Pointwise map with a derivative expressed in terms of input and output.
struct Unary<D: Fn(f64, f64) -> f64 + Send + Sync> {
    inputs: [Tensor; 1],
    deriv: D,
}

impl<D: Fn(f64, f64) -> f64 + Send + Sync> Backward for Unary<D> {
    fn inputs(&self) -> &[Tensor] {
        &self.inputs
    }

    fn backward(&self, out: &Array, grad: &Array) -> Vec<Option<Array>> {
        let mut g = grad.clone();
        Zip::from(&mut g)
            .and(self.inputs[0].value())
            .and(out)
            .for_each(|g, &x, &y| *g *= (self.deriv)(x, y));
        vec![Some(g)]
    }
}

fn unary<F, D>(a: &Tensor, f: F, deriv: D) -> Tensor
where
    F: Fn(f64) -> f64,
    D: Fn(f64, f64) -> f64 + Send + Sync + 'static,
{
    let value = a.value().mapv(f);
    Tensor::from_op(
        value,
        Unary {
            inputs: [a.clone()],
            deriv,
        },
    )
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct Reduce {
    inputs: [Tensor; 1],
    axes: Vec<usize>,
    scale: f64,
}

impl Backward for Reduce {
    fn inputs(&self) -> &[Tensor] {
        &self.inputs
    }

    fn backward(&self, _out: &Array, grad: &Array) -> Vec<Option<Array>> {
        let in_shape = self.inputs[0].shape();
        // restore reduced axes as length-1, then broadcast
        let mut keep_shape = in_shape.to_vec();
        for &ax in &self.axes {
            keep_shape[ax] = 1;
        }
        let g = grad
            .to_shape(IxDyn(&keep_shape))
            .expect("reduce grad reshape")
            .to_owned();
        let g = broadcast_to(&g, in_shape) * self.scale;
        vec![Some(g)]
    }
}

struct Reshape {
    inputs: [Tensor; 1],
}

impl Backward for Reshape {
    fn inputs(&self) -> &[Tensor] {
        &self.inputs
    }

    fn backward(&self, _out: &Array, grad: &Array) -> Vec<Option<Array>> {
        let g = grad
            .to_shape(IxDyn(self.inputs[0].shape()))
            .expect("reshape grad")
            .to_owned();
        vec![Some(g)]
    }
}

struct Concat {
    inputs: Vec<Tensor>,
    axis: usize,
}

impl Backward for Concat {
    fn inputs(&self) -> &[Tensor] {
        &self.inputs
    }

    fn backward(&self, _out: &Array, grad: &Array) -> Vec<Option<Array>> {
        let mut start = 0;
        self.inputs
            .iter()
            .map(|t| {
                let n = t.shape()[self.axis];
                let g = grad
                    .slice_axis(Axis(self.axis), (start..start + n).into())
                    .to_owned();
                start += n;
                Some(g)
            })
            .collect()
    }
}

struct Softmax {
    inputs: [Tensor; 1],
    axis: usize,
}

impl Backward for Softmax {
    fn inputs(&self) -> &[Tensor] {
        &self.inputs
    }

    fn backward(&self, out: &Array, grad: &Array) -> Vec<Option<Array>> {
        let dot = (grad * out).sum_axis(Axis(self.axis)).insert_axis(Axis(self.axis));
        let g = out * &(grad - &dot);
        vec![Some(g)]
    }
}

struct MatMul {
    inputs: [Tensor; 2],
}

impl Backward for MatMul {
    fn inputs(&self) -> &[Tensor] {
        &self.inputs
    }

    fn backward(&self, _out: &Array, grad: &Array) -> Vec<Option<Array>> {
        let a = self.inputs[0].value().view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b = self.inputs[1].value().view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let g = grad.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let ga = g.dot(&b.t()).into_dyn();
        let gb = a.t().dot(&g).into_dyn();
        vec![Some(ga), Some(gb)]
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        binary(self, other, BinKind::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        binary(self, other, BinKind::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        binary(self, other, BinKind::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        binary(self, other, BinKind::Div)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        unary(self, move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        unary(self, move |x| x + c, |_, _| 1.0)
    }

    pub fn square(&self) -> Tensor {
        unary(self, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn exp(&self) -> Tensor {
        unary(self, f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        unary(self, f64::ln, |x, _| 1.0 / x)
    }

    pub fn softplus(&self) -> Tensor {
        unary(self, softplus, |x, _| sigmoid(x))
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(self, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        unary(
            self,
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn relu(&self) -> Tensor {
        self.leaky_relu(0.0)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        unary(
            self,
            move |x| x.clamp(lo, hi),
            move |x, _| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 },
        )
    }

    pub fn clamp_min(&self, lo: f64) -> Tensor {
        self.clamp(lo, f64::INFINITY)
    }

    pub fn clamp_max(&self, hi: f64) -> Tensor {
        self.clamp(f64::NEG_INFINITY, hi)
    }

    pub fn sum(&self) -> Tensor {
        let value = Array::from_elem(IxDyn(&[]), self.value().sum());
        Tensor::from_op(
            value,
            Reduce {
                inputs: [self.clone()],
                axes: (0..self.ndim()).collect(),
                scale: 1.0,
            },
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.len() as f64;
        let value = Array::from_elem(IxDyn(&[]), self.value().sum() / n);
        Tensor::from_op(
            value,
            Reduce {
                inputs: [self.clone()],
                axes: (0..self.ndim()).collect(),
                scale: 1.0 / n,
            },
        )
    }

    /// Sums over `axes`, keeping them as length-1 dimensions.
    pub fn sum_axes_keep(&self, axes: &[usize]) -> Tensor {
        self.reduce_axes(axes, false)
    }

    pub fn mean_axes_keep(&self, axes: &[usize]) -> Tensor {
        self.reduce_axes(axes, true)
    }

    fn reduce_axes(&self, axes: &[usize], mean: bool) -> Tensor {
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut v = self.value().clone();
        let mut count = 1usize;
        for &ax in sorted.iter().rev() {
            count *= v.shape()[ax];
            v = v.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
        let scale = if mean { 1.0 / count as f64 } else { 1.0 };
        if mean {
            v *= scale;
        }
        Tensor::from_op(
            v,
            Reduce {
                inputs: [self.clone()],
                axes: sorted,
                scale,
            },
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let value = self
            .value()
            .to_shape(IxDyn(shape))
            .unwrap_or_else(|_| panic!("cannot reshape {:?} to {:?}", self.shape(), shape))
            .to_owned();
        Tensor::from_op(
            value,
            Reshape {
                inputs: [self.clone()],
            },
        )
    }

    /// Concatenates along `axis`.
    pub fn cat(tensors: &[Tensor], axis: usize) -> Tensor {
        assert!(!tensors.is_empty(), "cat of zero tensors");
        let views: Vec<_> = tensors.iter().map(|t| t.value().view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("cat shapes");
        Tensor::from_op(
            value,
            Concat {
                inputs: tensors.to_vec(),
                axis,
            },
        )
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Tensor {
        let x = self.value();
        let max = x.fold_axis(Axis(axis), f64::NEG_INFINITY, |&a, &b| a.max(b));
        let mut e = x - &max.insert_axis(Axis(axis));
        e.mapv_inplace(f64::exp);
        let s = e.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        let value = e / &s;
        Tensor::from_op(
            value,
            Softmax {
                inputs: [self.clone()],
                axis,
            },
        )
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let a = self
            .value()
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("matmul lhs must be rank 2");
        let b = other
            .value()
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("matmul rhs must be rank 2");
        let value = a.dot(&b).into_dyn();
        Tensor::from_op(
            value,
            MatMul {
                inputs: [self.clone(), other.clone()],
            },
        )
    }
}
