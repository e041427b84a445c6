use rand::Rng;

use super::{join, Activation, ChannelAttention, Conv, Module, SpatialAttention};
use crate::error::Result;
use crate::tensor::{concat, max_pool2d, ConvSpec, Tensor};

/// 1×1 conv then 3×3 conv, with an optional residual connection.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub cv1: Conv,
    pub cv2: Conv,
    pub shortcut: bool,
}

impl Bottleneck {
    pub fn new<R: Rng + ?Sized>(channels: usize, shortcut: bool, rng: &mut R) -> Self {
        Self {
            cv1: Conv::new(ConvSpec::new(channels, channels, 1, 1, 0), Activation::Silu, rng),
            cv2: Conv::new(ConvSpec::new(channels, channels, 3, 1, 1), Activation::Silu, rng),
            shortcut,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.cv2.forward(&self.cv1.forward(x)?)?;
        if self.shortcut {
            x.add(&y)
        } else {
            Ok(y)
        }
    }
}

impl Module for Bottleneck {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.cv1.visit(&join(prefix, "cv1"), f);
        self.cv2.visit(&join(prefix, "cv2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.cv1.visit_mut(&join(prefix, "cv1"), f);
        self.cv2.visit_mut(&join(prefix, "cv2"), f);
    }
}

/// C3 block with channel attention on the merged branches and spatial
/// attention on the output.
///
/// `x → [bottlenecks(cv1 x), cv2 x] → concat → channel attention → cv3 →
/// spatial attention`.
#[derive(Clone, Debug)]
pub struct ScaC3 {
    pub cv1: Conv,
    pub cv2: Conv,
    pub m: Vec<Bottleneck>,
    pub channel: ChannelAttention,
    pub cv3: Conv,
    pub spatial: SpatialAttention,
}

impl ScaC3 {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        depth: usize,
        shortcut: bool,
        rng: &mut R,
    ) -> Self {
        let hidden = (out_channels / 2).max(1);
        Self {
            cv1: Conv::new(ConvSpec::new(in_channels, hidden, 1, 1, 0), Activation::Silu, rng),
            cv2: Conv::new(ConvSpec::new(in_channels, hidden, 1, 1, 0), Activation::Silu, rng),
            m: (0..depth).map(|_| Bottleneck::new(hidden, shortcut, rng)).collect(),
            channel: ChannelAttention::new(2 * hidden, 2 * hidden, rng),
            cv3: Conv::new(ConvSpec::new(2 * hidden, out_channels, 1, 1, 0), Activation::Silu, rng),
            spatial: SpatialAttention::new(rng),
        }
    }

    /// Output of the two merged branches before any attention.
    pub fn merged(&self, x: &Tensor) -> Result<Tensor> {
        let mut a = self.cv1.forward(x)?;
        for b in &self.m {
            a = b.forward(&a)?;
        }
        concat(&[a, self.cv2.forward(x)?], 1)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let merged = self.merged(x)?;
        let weighted = self.channel.scale(&merged, &merged)?;
        self.spatial.forward(&self.cv3.forward(&weighted)?)
    }
}

impl Module for ScaC3 {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.cv1.visit(&join(prefix, "cv1"), f);
        self.cv2.visit(&join(prefix, "cv2"), f);
        for (i, b) in self.m.iter().enumerate() {
            b.visit(&join(prefix, &format!("m{i}")), f);
        }
        self.channel.visit(&join(prefix, "channel"), f);
        self.cv3.visit(&join(prefix, "cv3"), f);
        self.spatial.visit(&join(prefix, "spatial"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.cv1.visit_mut(&join(prefix, "cv1"), f);
        self.cv2.visit_mut(&join(prefix, "cv2"), f);
        for (i, b) in self.m.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("m{i}")), f);
        }
        self.channel.visit_mut(&join(prefix, "channel"), f);
        self.cv3.visit_mut(&join(prefix, "cv3"), f);
        self.spatial.visit_mut(&join(prefix, "spatial"), f);
    }
}

/// Spatial pyramid pooling, fast variant: three serial 5×5 max pools.
#[derive(Clone, Debug)]
pub struct Sppf {
    pub cv1: Conv,
    pub cv2: Conv,
    pub kernel: usize,
}

impl Sppf {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        let hidden = (in_channels / 2).max(1);
        Self {
            cv1: Conv::new(ConvSpec::new(in_channels, hidden, 1, 1, 0), Activation::Silu, rng),
            cv2: Conv::new(ConvSpec::new(4 * hidden, out_channels, 1, 1, 0), Activation::Silu, rng),
            kernel: 5,
        }
    }

    /// The input of the pyramid followed by the three pooled stages.
    pub fn pyramid(&self, x: &Tensor) -> Result<[Tensor; 4]> {
        let k = self.kernel;
        let y0 = self.cv1.forward(x)?;
        let y1 = max_pool2d(&y0, k, 1, k / 2)?;
        let y2 = max_pool2d(&y1, k, 1, k / 2)?;
        let y3 = max_pool2d(&y2, k, 1, k / 2)?;
        Ok([y0, y1, y2, y3])
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.cv2.forward(&concat(&self.pyramid(x)?, 1)?)
    }
}

impl Module for Sppf {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.cv1.visit(&join(prefix, "cv1"), f);
        self.cv2.visit(&join(prefix, "cv2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.cv1.visit_mut(&join(prefix, "cv1"), f);
        self.cv2.visit_mut(&join(prefix, "cv2"), f);
    }
}
