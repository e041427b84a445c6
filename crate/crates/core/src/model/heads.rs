use rand::Rng;

use super::{FeaturePyramid, ModelConfig, ANCHORS_PER_SCALE, STRIDES};
use crate::error::Result;
use crate::nn::{join, Activation, Conv, Module};
use crate::tensor::{upsample_nearest, ConvSpec, Tensor};

/// One 1×1 prediction conv per pyramid level.
#[derive(Clone, Debug)]
pub struct DetectHead {
    pub convs: Vec<Conv>,
}

impl DetectHead {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, in_channels: [usize; 3], rng: &mut R) -> Self {
        let per_anchor = 5 + config.class_count;
        let convs = in_channels
            .iter()
            .zip(STRIDES)
            .map(|(&c, stride)| {
                let mut conv = Conv::new(ConvSpec::new(c, config.detection_channels(), 1, 1, 0), Activation::Identity, rng);
                // Start objectness near the expected density of objects per
                // cell and class scores near uniform.
                let cells = (config.input_size as f64 / stride as f64).powi(2);
                let obj = (8.0 / cells).ln();
                let cls = (0.6 / (config.class_count as f64 - 0.99)).ln();
                let mut b = conv.bias.to_vec();
                for a in 0..ANCHORS_PER_SCALE {
                    b[a * per_anchor + 4] = obj;
                    for k in 0..config.class_count {
                        b[a * per_anchor + 5 + k] = cls;
                    }
                }
                conv.bias = Tensor::new(conv.bias.shape(), b).expect("same shape").requires_grad_();
                conv
            })
            .collect();
        Self { convs }
    }

    pub fn forward(&self, p: &FeaturePyramid) -> Result<Vec<Tensor>> {
        [&p.p3, &p.p4, &p.p5].iter().zip(&self.convs).map(|(x, c)| c.forward(x)).collect()
    }
}

impl Module for DetectHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&join(prefix, &format!("p{}", i + 3)), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("p{}", i + 3)), f);
        }
    }
}

/// Pixel decoder: lateral 1×1 projections of every level, fused from the
/// coarsest (1/32) to the finest (1/8) level by nearest upsampling, addition
/// and a 3×3 conv, then a 1×1 conv to per-class mask logits.
#[derive(Clone, Debug)]
pub struct SegHead {
    pub lateral: Vec<Conv>,
    pub smooth4: Conv,
    pub smooth3: Conv,
    pub out: Conv,
}

impl SegHead {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, in_channels: [usize; 3], width: usize, rng: &mut R) -> Self {
        let act = config.activation;
        Self {
            lateral: in_channels.iter().map(|&c| Conv::new(ConvSpec::new(c, width, 1, 1, 0), act, rng)).collect(),
            smooth4: Conv::new(ConvSpec::new(width, width, 3, 1, 1), act, rng),
            smooth3: Conv::new(ConvSpec::new(width, width, 3, 1, 1), act, rng),
            out: Conv::new(ConvSpec::new(width, config.class_count, 1, 1, 0), Activation::Identity, rng),
        }
    }

    pub fn forward(&self, p: &FeaturePyramid) -> Result<Tensor> {
        let f5 = self.lateral[2].forward(&p.p5)?;
        let f4 = self.smooth4.forward(&upsample_nearest(&f5, 2)?.add(&self.lateral[1].forward(&p.p4)?)?)?;
        let f3 = self.smooth3.forward(&upsample_nearest(&f4, 2)?.add(&self.lateral[0].forward(&p.p3)?)?)?;
        self.out.forward(&f3)
    }
}

impl Module for SegHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, c) in self.lateral.iter().enumerate() {
            c.visit(&join(prefix, &format!("lateral{}", i + 3)), f);
        }
        self.smooth4.visit(&join(prefix, "smooth4"), f);
        self.smooth3.visit(&join(prefix, "smooth3"), f);
        self.out.visit(&join(prefix, "out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, c) in self.lateral.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("lateral{}", i + 3)), f);
        }
        self.smooth4.visit_mut(&join(prefix, "smooth4"), f);
        self.smooth3.visit_mut(&join(prefix, "smooth3"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}
