use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use super::{he_normal, Module, Param};
use crate::autograd::{ConvSpec, Tensor};

/// Convolution over 2-D or 3-D grids with a cubic kernel.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: Param,
    pub bias: Option<Param>,
    pub spec: ConvSpec,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rank: usize,
        spec: ConvSpec,
        bias: bool,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let mut shape = vec![out_channels, in_channels];
        shape.extend(std::iter::repeat_n(kernel, rank));
        let fan_in = in_channels * kernel.pow(rank as u32);
        let weight = Param::new(format!("{name}.weight"), he_normal(&shape, fan_in, gain, rng));
        let bias = bias.then(|| Param::new(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[out_channels]))));
        Self { weight, bias, spec }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn zero(&self) {
        self.weight.set(ArrayD::zeros(IxDyn(&self.weight.shape())));
        if let Some(b) = &self.bias {
            b.set(ArrayD::zeros(IxDyn(&b.shape())));
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let bias = self.bias.as_ref().map(Param::tensor);
        x.conv(&self.weight.tensor(), bias.as_ref(), self.spec)
    }
}

impl Module for Conv {
    fn params(&self) -> Vec<Param> {
        let mut v = vec![self.weight.clone()];
        v.extend(self.bias.clone());
        v
    }
}

/// Instance normalization with a per-channel affine map.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

impl InstanceNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), ArrayD::ones(IxDyn(&[channels]))),
            beta: Param::new(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels]))),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut shape = vec![1; x.ndim()];
        shape[1] = x.shape()[1];
        let gamma = self.gamma.tensor().reshape(&shape);
        let beta = self.beta.tensor().reshape(&shape);
        x.instance_norm(self.eps).mul(&gamma).add(&beta)
    }
}

impl Module for InstanceNorm {
    fn params(&self) -> Vec<Param> {
        vec![self.gamma.clone(), self.beta.clone()]
    }
}

/// Affine map on `(batch, features)` rows.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng>(name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                he_normal(&[inputs, outputs], inputs, 0.5, rng),
            ),
            bias: Param::new(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[1, outputs]))),
        }
    }

    pub fn zero(&self) {
        self.weight.set(ArrayD::zeros(IxDyn(&self.weight.shape())));
        self.bias.set(ArrayD::zeros(IxDyn(&self.bias.shape())));
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.matmul(&self.weight.tensor()).add(&self.bias.tensor())
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<Param> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}
