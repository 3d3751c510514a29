//! Spatial operations: convolution (2-D and 3-D), 2x max pooling, 2x
//! nearest upsampling and instance normalization.
//!
//! Tensors are laid out `(batch, channels, *spatial)` with two or three
//! spatial axes, handled through a common depth-height-width view: a 2-D
//! grid is a 3-D grid of depth 1 with kernel depth 1.

use ndarray::{ArrayD, IxDyn};

use super::{Array, Backward, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }
}

/// Splits `(B, C, *spatial)` into batch, channels and a depth-height-width
/// triple.
fn split_shape(shape: &[usize]) -> (usize, usize, [usize; 3]) {
    match shape.len() {
        4 => (shape[0], shape[1], [1, shape[2], shape[3]]),
        5 => (shape[0], shape[1], [shape[2], shape[3], shape[4]]),
        n => panic!("expected a (batch, channels, 2 or 3 spatial) tensor, got rank {n}"),
    }
}

fn join_shape(b: usize, c: usize, s: [usize; 3], rank: usize) -> Vec<usize> {
    if rank == 2 {
        vec![b, c, s[1], s[2]]
    } else {
        vec![b, c, s[0], s[1], s[2]]
    }
}

/// Row-major GEMM `c = a·b + beta·c` where `a` is `m×k`, `b` is `k×n`;
/// `a_t`/`b_t` say the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    cin: usize,
    cout: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    output: [usize; 3],
    rank: usize,
}

impl Geometry {
    fn new(x: &[usize], w: &[usize], spec: ConvSpec) -> Self {
        let rank = x.len() - 2;
        assert_eq!(w.len(), x.len(), "kernel rank {:?} vs input {:?}", w, x);
        let (batch, cin, input) = split_shape(x);
        let (cout, wcin, kernel) = split_shape(w);
        assert_eq!(cin, wcin, "conv input has {cin} channels but kernel expects {wcin}");
        let (stride, pad) = if rank == 2 {
            ([1, spec.stride, spec.stride], [0, spec.padding, spec.padding])
        } else {
            ([spec.stride; 3], [spec.padding; 3])
        };
        let mut output = [0; 3];
        for i in 0..3 {
            let span = input[i] + 2 * pad[i];
            assert!(span >= kernel[i], "kernel larger than padded input: {x:?} {w:?}");
            output[i] = (span - kernel[i]) / stride[i] + 1;
        }
        Self {
            batch,
            cin,
            cout,
            input,
            kernel,
            stride,
            pad,
            output,
            rank,
        }
    }

    fn k(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    fn p(&self) -> usize {
        self.output.iter().product()
    }

    fn in_len(&self) -> usize {
        self.cin * self.input.iter().product::<usize>()
    }

    fn pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }

    /// Valid output range along one axis for kernel offset `k`.
    fn out_range(&self, axis: usize, k: usize) -> (usize, usize) {
        let (s, p, n, o) = (
            self.stride[axis] as isize,
            self.pad[axis] as isize,
            self.input[axis] as isize,
            self.output[axis] as isize,
        );
        let k = k as isize;
        // need 0 <= o*s + k - p < n
        let lo = ((p - k + s - 1).max(0)) / s;
        let hi = ((n - 1 - k + p).div_euclid(s) + 1).clamp(0, o);
        (lo.min(o) as usize, hi.max(lo.min(o)) as usize)
    }

    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let [id, ih, iw] = self.input;
        let [kd, kh, kw] = self.kernel;
        let [_, oh, ow] = self.output;
        let p = self.p();
        col.fill(0.0);
        let mut row = 0;
        for c in 0..self.cin {
            let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
            for a in 0..kd {
                let (d0, d1) = self.out_range(0, a);
                for b in 0..kh {
                    let (h0, h1) = self.out_range(1, b);
                    for e in 0..kw {
                        let (w0, w1) = self.out_range(2, e);
                        let dst = &mut col[row * p..(row + 1) * p];
                        for o_d in d0..d1 {
                            let i_d = o_d * self.stride[0] + a - self.pad[0];
                            for o_h in h0..h1 {
                                let i_h = o_h * self.stride[1] + b - self.pad[1];
                                let src_base = (i_d * ih + i_h) * iw;
                                let dst_base = (o_d * oh + o_h) * ow;
                                if self.stride[2] == 1 {
                                    let i_w0 = w0 + e - self.pad[2];
                                    dst[dst_base + w0..dst_base + w1]
                                        .copy_from_slice(&xc[src_base + i_w0..src_base + i_w0 + (w1 - w0)]);
                                } else {
                                    for o_w in w0..w1 {
                                        let i_w = o_w * self.stride[2] + e - self.pad[2];
                                        dst[dst_base + o_w] = xc[src_base + i_w];
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], x: &mut [f64]) {
        let [id, ih, iw] = self.input;
        let [kd, kh, kw] = self.kernel;
        let [_, oh, ow] = self.output;
        let p = self.p();
        let mut row = 0;
        for c in 0..self.cin {
            let xc = &mut x[c * id * ih * iw..(c + 1) * id * ih * iw];
            for a in 0..kd {
                let (d0, d1) = self.out_range(0, a);
                for b in 0..kh {
                    let (h0, h1) = self.out_range(1, b);
                    for e in 0..kw {
                        let (w0, w1) = self.out_range(2, e);
                        let src = &col[row * p..(row + 1) * p];
                        for o_d in d0..d1 {
                            let i_d = o_d * self.stride[0] + a - self.pad[0];
                            for o_h in h0..h1 {
                                let i_h = o_h * self.stride[1] + b - self.pad[1];
                                let dst_base = (i_d * ih + i_h) * iw;
                                let src_base = (o_d * oh + o_h) * ow;
                                for o_w in w0..w1 {
                                    let i_w = o_w * self.stride[2] + e - self.pad[2];
                                    xc[dst_base + i_w] += src[src_base + o_w];
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }
}

struct Conv {
    inputs: Vec<Tensor>,
    geom: Geometry,
}

impl Backward for Conv {
    fn inputs(&self) -> &[Tensor] {
        &self.inputs
    }

    fn backward(&self, _out: &Array, grad: &Array) -> Vec<Option<Array>> {
        let g = &self.geom;
        let (k, p) = (g.k(), g.p());
        let x = self.inputs[0].value().as_standard_layout();
        let w = self.inputs[1].value().as_standard_layout();
        let grad = grad.as_standard_layout();
        let xs = x.as_slice().unwrap();
        let ws = w.as_slice().unwrap();
        let gs = grad.as_slice().unwrap();

        let want_x = self.inputs[0].requires_grad();
        let mut dx = vec![0.0; if want_x { xs.len() } else { 0 }];
        let mut dw = vec![0.0; ws.len()];
        let mut col = vec![0.0; if g.pointwise() { 0 } else { k * p }];
        let mut dcol = vec![0.0; if g.pointwise() || !want_x { 0 } else { k * p }];
        for bi in 0..g.batch {
            let xb = &xs[bi * g.in_len()..(bi + 1) * g.in_len()];
            let gb = &gs[bi * g.cout * p..(bi + 1) * g.cout * p];
            let colref: &[f64] = if g.pointwise() {
                xb
            } else {
                g.im2col(xb, &mut col);
                &col
            };
            // dW += g_b · col^T
            gemm(g.cout, p, k, gb, false, colref, true, &mut dw, 1.0);
            if want_x {
                let dxb = &mut dx[bi * g.in_len()..(bi + 1) * g.in_len()];
                if g.pointwise() {
                    gemm(k, g.cout, p, ws, true, gb, false, dxb, 1.0);
                } else {
                    gemm(k, g.cout, p, ws, true, gb, false, &mut dcol, 0.0);
                    g.col2im(&dcol, dxb);
                }
            }
        }
        let mut out = vec![
            want_x.then(|| ArrayD::from_shape_vec(IxDyn(x.shape()), dx).unwrap()),
            Some(ArrayD::from_shape_vec(IxDyn(w.shape()), dw).unwrap()),
        ];
        if self.inputs.len() == 3 {
            let mut db = vec![0.0; g.cout];
            for bi in 0..g.batch {
                for (o, acc) in db.iter_mut().enumerate() {
                    let base = (bi * g.cout + o) * p;
                    *acc += gs[base..base + p].iter().sum::<f64>();
                }
            }
            out.push(Some(ArrayD::from_shape_vec(IxDyn(&[g.cout]), db).unwrap()));
        }
        out
    }
}

struct MaxPool {
    inputs: [Tensor; 1],
    argmax: Vec<usize>,
}

impl Backward for MaxPool {
    fn inputs(&self) -> &[Tensor] {
        &self.inputs
    }

    fn backward(&self, _out: &Array, grad: &Array) -> Vec<Option<Array>> {
        let mut dx = vec![0.0; self.inputs[0].len()];
        for (&src, &g) in self.argmax.iter().zip(grad.iter()) {
            dx[src] += g;
        }
        vec![Some(ArrayD::from_shape_vec(IxDyn(self.inputs[0].shape()), dx).unwrap())]
    }
}

struct Upsample {
    inputs: [Tensor; 1],
}

impl Backward for Upsample {
    fn inputs(&self) -> &[Tensor] {
        &self.inputs
    }

    fn backward(&self, _out: &Array, grad: &Array) -> Vec<Option<Array>> {
        let shape = self.inputs[0].shape();
        let rank = shape.len() - 2;
        let (b, c, [d, h, w]) = split_shape(shape);
        let fd = if rank == 3 { 2 } else { 1 };
        let (od, oh, ow) = (d * fd, h * 2, w * 2);
        let grad = grad.as_standard_layout();
        let gs = grad.as_slice().unwrap();
        let mut dx = vec![0.0; b * c * d * h * w];
        for bc in 0..b * c {
            for z in 0..od {
                for y in 0..oh {
                    let src = ((bc * od + z) * oh + y) * ow;
                    let dst = ((bc * d + z / fd) * h + y / 2) * w;
                    for x in 0..ow {
                        dx[dst + x / 2] += gs[src + x];
                    }
                }
            }
        }
        vec![Some(ArrayD::from_shape_vec(IxDyn(shape), dx).unwrap())]
    }
}

struct InstanceNorm {
    inputs: [Tensor; 1],
    inv_std: Vec<f64>,
}

impl Backward for InstanceNorm {
    fn inputs(&self) -> &[Tensor] {
        &self.inputs
    }

    fn backward(&self, out: &Array, grad: &Array) -> Vec<Option<Array>> {
        let shape = self.inputs[0].shape();
        let (b, c, s) = split_shape(shape);
        let n: usize = s.iter().product();
        let y = out.as_standard_layout();
        let g = grad.as_standard_layout();
        let ys = y.as_slice().unwrap();
        let gs = g.as_slice().unwrap();
        let mut dx = vec![0.0; ys.len()];
        for i in 0..b * c {
            let (yi, gi) = (&ys[i * n..(i + 1) * n], &gs[i * n..(i + 1) * n]);
            let mean_g = gi.iter().sum::<f64>() / n as f64;
            let mean_gy = gi.iter().zip(yi).map(|(a, b)| a * b).sum::<f64>() / n as f64;
            let inv = self.inv_std[i];
            for ((d, &gv), &yv) in dx[i * n..(i + 1) * n].iter_mut().zip(gi).zip(yi) {
                *d = inv * (gv - mean_g - yv * mean_gy);
            }
        }
        vec![Some(ArrayD::from_shape_vec(IxDyn(shape), dx).unwrap())]
    }
}

impl Tensor {
    /// Cross-correlation with a `(Cout, Cin, *kernel)` weight and optional
    /// `(Cout,)` bias. Padding is zero padding.
    pub fn conv(&self, weight: &Tensor, bias: Option<&Tensor>, spec: ConvSpec) -> Tensor {
        let geom = Geometry::new(self.shape(), weight.shape(), spec);
        let (k, p) = (geom.k(), geom.p());
        let x = self.value().as_standard_layout();
        let w = weight.value().as_standard_layout();
        let xs = x.as_slice().unwrap();
        let ws = w.as_slice().unwrap();
        let mut out = vec![0.0; geom.batch * geom.cout * p];
        let mut col = vec![0.0; if geom.pointwise() { 0 } else { k * p }];
        for bi in 0..geom.batch {
            let xb = &xs[bi * geom.in_len()..(bi + 1) * geom.in_len()];
            let ob = &mut out[bi * geom.cout * p..(bi + 1) * geom.cout * p];
            if geom.pointwise() {
                gemm(geom.cout, k, p, ws, false, xb, false, ob, 0.0);
            } else {
                geom.im2col(xb, &mut col);
                gemm(geom.cout, k, p, ws, false, &col, false, ob, 0.0);
            }
            if let Some(bias) = bias {
                for (o, &bv) in bias.value().iter().enumerate() {
                    ob[o * p..(o + 1) * p].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let shape = join_shape(geom.batch, geom.cout, geom.output, geom.rank);
        let value = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();
        let mut inputs = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            assert_eq!(b.shape(), &[geom.cout], "bias shape");
            inputs.push(b.clone());
        }
        Tensor::from_op(value, Conv { inputs, geom })
    }

    /// Max pooling with a 2-wide window and stride 2 on every spatial axis.
    pub fn max_pool2(&self) -> Tensor {
        let rank = self.ndim() - 2;
        let (b, c, [d, h, w]) = split_shape(self.shape());
        let fd = if rank == 3 { 2 } else { 1 };
        assert!(
            d % fd == 0 && h % 2 == 0 && w % 2 == 0,
            "max_pool2 needs even spatial extents, got {:?}",
            self.shape()
        );
        let (od, oh, ow) = (d / fd, h / 2, w / 2);
        let x = self.value().as_standard_layout();
        let xs = x.as_slice().unwrap();
        let mut out = Vec::with_capacity(b * c * od * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        for bc in 0..b * c {
            for z in 0..od {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0;
                        for dz in 0..fd {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let i = ((bc * d + z * fd + dz) * h + y * 2 + dy) * w + xo * 2 + dx;
                                    if xs[i] > best {
                                        best = xs[i];
                                        best_i = i;
                                    }
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_i);
                    }
                }
            }
        }
        let shape = join_shape(b, c, [od, oh, ow], rank);
        let value = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();
        Tensor::from_op(
            value,
            MaxPool {
                inputs: [self.clone()],
                argmax,
            },
        )
    }

    /// Nearest-neighbour upsampling by 2 on every spatial axis.
    pub fn upsample2(&self) -> Tensor {
        let rank = self.ndim() - 2;
        let (b, c, [d, h, w]) = split_shape(self.shape());
        let fd = if rank == 3 { 2 } else { 1 };
        let (od, oh, ow) = (d * fd, h * 2, w * 2);
        let x = self.value().as_standard_layout();
        let xs = x.as_slice().unwrap();
        let mut out = vec![0.0; b * c * od * oh * ow];
        for bc in 0..b * c {
            for z in 0..od {
                for y in 0..oh {
                    let dst = ((bc * od + z) * oh + y) * ow;
                    let src = ((bc * d + z / fd) * h + y / 2) * w;
                    for xo in 0..ow {
                        out[dst + xo] = xs[src + xo / 2];
                    }
                }
            }
        }
        let shape = join_shape(b, c, [od, oh, ow], rank);
        let value = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();
        Tensor::from_op(
            value,
            Upsample {
                inputs: [self.clone()],
            },
        )
    }

    /// Per-sample, per-channel standardization over the spatial axes
    /// (biased variance).
    pub fn instance_norm(&self, eps: f64) -> Tensor {
        let (b, c, s) = split_shape(self.shape());
        let n: usize = s.iter().product();
        let x = self.value().as_standard_layout();
        let xs = x.as_slice().unwrap();
        let mut out = vec![0.0; xs.len()];
        let mut inv_std = Vec::with_capacity(b * c);
        for i in 0..b * c {
            let xi = &xs[i * n..(i + 1) * n];
            let mean = xi.iter().sum::<f64>() / n as f64;
            let var = xi.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(xi) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let value = ArrayD::from_shape_vec(IxDyn(self.shape()), out).unwrap();
        Tensor::from_op(
            value,
            InstanceNorm {
                inputs: [self.clone()],
                inv_std,
            },
        )
    }
}
