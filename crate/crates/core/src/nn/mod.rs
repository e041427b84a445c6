//! Network building blocks: plain conv, channel-attention conv, the
//! spatial/channel attention C3 block, SPPF, and modulated deformable conv.

mod attention;
mod blocks;
mod deform;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{conv2d, ConvSpec, Tensor};

pub use attention::{CaConv, ChannelAttention, SpatialAttention};
pub use blocks::{Bottleneck, ScaC3, Sppf};
pub use deform::DeformableConv;

/// Anything that owns named parameters.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Leaf parameter drawn from U(−1/√fan_in, 1/√fan_in).
pub(crate) fn init_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng).requires_grad_()
}

/// Convolution weights drawn from U(−b, b) with `b = 1.5·√(6/fan_in)`.
pub(crate) fn init_he<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.5 * (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng).requires_grad_()
}

pub(crate) fn init_zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape).requires_grad_()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    #[default]
    Silu,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Tensor {
        match self {
            Activation::Silu => x.silu(),
            Activation::Relu => x.relu(),
            Activation::Identity => x.clone(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "silu" => Some(Activation::Silu),
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Convolution with bias followed by an activation.
#[derive(Clone, Debug)]
pub struct Conv {
    pub spec: ConvSpec,
    pub weight: Tensor,
    pub bias: Tensor,
    pub act: Activation,
}

impl Conv {
    pub fn new<R: Rng + ?Sized>(spec: ConvSpec, act: Activation, rng: &mut R) -> Self {
        let fan_in = spec.in_channels * spec.taps();
        Self {
            weight: init_he(&spec.weight_shape(), fan_in, rng),
            bias: init_uniform(&[spec.out_channels], fan_in, rng),
            spec,
            act,
        }
    }

    /// Pre-activation output.
    pub fn linear(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weight, Some(&self.bias), &self.spec)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.act.apply(&self.linear(x)?))
    }
}

impl Module for Conv {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
