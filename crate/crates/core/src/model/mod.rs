//! The full multi-task network: attention backbone, path-aggregation neck,
//! anchor-based detection head and pixel-decoder segmentation head.

mod checkpoint;
mod decode;
mod heads;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{join, Activation, CaConv, Conv, DeformableConv, Module, ScaC3, Sppf};
use crate::tensor::{concat, upsample_nearest, ConvSpec, Tensor};

pub use checkpoint::{declared_param_count, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use decode::{best_anchor, class_masks, decode_cell, encode_box, nms, DetectionBox, InstanceMask, MaskSet};
pub use heads::{DetectHead, SegHead};

pub const STRIDES: [usize; 3] = [8, 16, 32];
pub const ANCHORS_PER_SCALE: usize = 3;

/// Anchor sizes `(w, h)` in input pixels, three per detection layer from the
/// finest (stride 8) to the coarsest (stride 32).
pub const DEFAULT_ANCHORS: [[f64; 2]; 9] = [
    [10.0, 13.0],
    [16.0, 30.0],
    [33.0, 23.0],
    [30.0, 61.0],
    [62.0, 45.0],
    [59.0, 119.0],
    [116.0, 90.0],
    [156.0, 198.0],
    [373.0, 326.0],
];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_size: usize,
    pub width_multiplier: f64,
    pub class_count: usize,
    pub anchors: Vec<[f64; 2]>,
    /// Bottlenecks per attention C3 block.
    pub depth: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 640,
            width_multiplier: 0.5,
            class_count: 3,
            anchors: DEFAULT_ANCHORS.to_vec(),
            depth: 1,
            activation: Activation::Silu,
        }
    }
}

impl ModelConfig {
    pub fn detection_layers(&self) -> usize {
        STRIDES.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::Config(format!("input size {} is not a positive multiple of 32", self.input_size)));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return Err(Error::Config(format!("width multiplier {} must be positive", self.width_multiplier)));
        }
        if self.class_count == 0 {
            return Err(Error::Config("class count must be positive".into()));
        }
        if self.depth == 0 {
            return Err(Error::Config("depth must be positive".into()));
        }
        if self.anchors.len() != ANCHORS_PER_SCALE * self.detection_layers() {
            return Err(Error::Config(format!(
                "anchor table needs {} entries, got {}",
                ANCHORS_PER_SCALE * self.detection_layers(),
                self.anchors.len()
            )));
        }
        if self.anchors.iter().any(|a| !(a[0] > 0.0 && a[1] > 0.0)) {
            return Err(Error::Config("anchor sizes must be positive".into()));
        }
        Ok(())
    }

    /// Channel count for a nominal width, scaled by the multiplier and
    /// rounded to a multiple of 4.
    pub fn channels(&self, nominal: usize) -> usize {
        let scaled = nominal as f64 * self.width_multiplier;
        (((scaled / 4.0).round() as usize) * 4).max(4)
    }

    /// Anchors of one detection layer.
    pub fn layer_anchors(&self, layer: usize) -> &[[f64; 2]] {
        &self.anchors[layer * ANCHORS_PER_SCALE..(layer + 1) * ANCHORS_PER_SCALE]
    }

    /// Channels per detection output map: anchors × (4 box + 1 obj + classes).
    pub fn detection_channels(&self) -> usize {
        ANCHORS_PER_SCALE * (5 + self.class_count)
    }

    pub fn to_text(&self) -> String {
        let anchors: Vec<String> = self.anchors.iter().map(|a| format!("{},{}", a[0], a[1])).collect();
        format!(
            "input_size={}\nwidth_multiplier={}\nclass_count={}\ndepth={}\nactivation={}\nanchors={}\n",
            self.input_size,
            self.width_multiplier,
            self.class_count,
            self.depth,
            self.activation.name(),
            anchors.join(";")
        )
    }

    /// Parses `key=value` lines; unknown keys are ignored, missing keys keep
    /// their defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = ModelConfig::default();
        let bad = |k: &str, v: &str| Error::Config(format!("bad value for {k}: {v:?}"));
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("expected key=value, got {line:?}")))?;
            match k {
                "input_size" => c.input_size = v.parse().map_err(|_| bad(k, v))?,
                "width_multiplier" => c.width_multiplier = v.parse().map_err(|_| bad(k, v))?,
                "class_count" => c.class_count = v.parse().map_err(|_| bad(k, v))?,
                "depth" => c.depth = v.parse().map_err(|_| bad(k, v))?,
                "activation" => c.activation = Activation::parse(v).ok_or_else(|| bad(k, v))?,
                "anchors" => {
                    c.anchors = v
                        .split(';')
                        .map(|pair| {
                            let (w, h) = pair.split_once(',').ok_or_else(|| bad(k, v))?;
                            Ok([w.parse().map_err(|_| bad(k, v))?, h.parse().map_err(|_| bad(k, v))?])
                        })
                        .collect::<Result<_>>()?
                }
                _ => {}
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// Name and output shape of one traced layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub name: &'static str,
    pub shape: Vec<usize>,
}

/// Outputs of one forward pass before any decoding.
#[derive(Clone, Debug)]
pub struct RawPredictions {
    /// One map per detection layer, `N, 3·(5+N_c), S/stride, S/stride`.
    pub detection: Vec<Tensor>,
    /// Per-class mask logits at 1/8 scale, `N, N_c, S/8, S/8`.
    pub seg_logits: Tensor,
    pub input_size: usize,
}

impl RawPredictions {
    pub fn batch(&self) -> usize {
        self.seg_logits.shape()[0]
    }
}

/// Multi-scale features shared by both heads (1/8, 1/16, 1/32).
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub p3: Tensor,
    pub p4: Tensor,
    pub p5: Tensor,
}

#[derive(Clone, Debug)]
struct Stage {
    down: DeformableConv,
    block: ScaC3,
}

#[derive(Clone, Debug)]
struct Neck {
    reduce5: Conv,
    fuse4: ScaC3,
    reduce4: Conv,
    fuse3: ScaC3,
    down3: CaConv,
    fuse_n4: ScaC3,
    down4: CaConv,
    fuse_n5: ScaC3,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    stem: CaConv,
    stages: Vec<Stage>,
    sppf: Sppf,
    neck: Neck,
    pub detect: DetectHead,
    pub seg: SegHead,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let act = config.activation;
        let depth = config.depth;
        let ch: Vec<usize> = [64, 128, 256, 512, 1024].iter().map(|&n| config.channels(n)).collect();

        let stem = CaConv::new(ConvSpec::new(3, ch[0], 6, 2, 2), act, r);
        let stages = (0..4)
            .map(|i| Stage {
                down: DeformableConv::new(ConvSpec::new(ch[i], ch[i + 1], 3, 2, 1).with_floor(), act, r),
                block: ScaC3::new(ch[i + 1], ch[i + 1], depth, true, r),
            })
            .collect();
        let sppf = Sppf::new(ch[4], ch[4], r);
        let (c3, c4, c5) = (ch[2], ch[3], ch[4]);
        let neck = Neck {
            reduce5: Conv::new(ConvSpec::new(c5, c4, 1, 1, 0), act, r),
            fuse4: ScaC3::new(2 * c4, c4, depth, false, r),
            reduce4: Conv::new(ConvSpec::new(c4, c3, 1, 1, 0), act, r),
            fuse3: ScaC3::new(2 * c3, c3, depth, false, r),
            down3: CaConv::new(ConvSpec::new(c3, c3, 3, 2, 1).with_floor(), act, r),
            fuse_n4: ScaC3::new(2 * c3, c4, depth, false, r),
            down4: CaConv::new(ConvSpec::new(c4, c4, 3, 2, 1).with_floor(), act, r),
            fuse_n5: ScaC3::new(2 * c4, c5, depth, false, r),
        };
        let detect = DetectHead::new(&config, [c3, c4, c5], r);
        let seg = SegHead::new(&config, [c3, c4, c5], config.channels(128), r);
        Ok(Self { config, stem, stages, sppf, neck, detect, seg })
    }

    fn check_input(&self, image: &Tensor) -> Result<()> {
        let s = self.config.input_size;
        match *image.shape() {
            [_, 3, h, w] if h == s && w == s => Ok(()),
            ref got => Err(Error::shape("model input", got, &[0, 3, s, s])),
        }
    }

    /// Backbone and neck, optionally recording the backbone shape trace.
    pub fn features(&self, image: &Tensor, mut trace: Option<&mut Vec<LayerShape>>) -> Result<FeaturePyramid> {
        self.check_input(image)?;
        let mut record = |name: &'static str, t: &Tensor| {
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(LayerShape { name, shape: t.shape().to_vec() });
            }
        };
        let mut x = self.stem.forward(image)?;
        record("CA_Conv", &x);
        let mut taps = Vec::with_capacity(4);
        for stage in &self.stages {
            x = stage.down.forward(&x)?;
            record("DCNv2", &x);
            x = stage.block.forward(&x)?;
            record("SCA_C3", &x);
            taps.push(x.clone());
        }
        let p5 = self.sppf.forward(&x)?;
        record("SPPF", &p5);
        let (b3, b4) = (&taps[1], &taps[2]);

        let n = &self.neck;
        let l5 = n.reduce5.forward(&p5)?;
        let t4 = n.fuse4.forward(&concat(&[upsample_nearest(&l5, 2)?, b4.clone()], 1)?)?;
        let l4 = n.reduce4.forward(&t4)?;
        let p3 = n.fuse3.forward(&concat(&[upsample_nearest(&l4, 2)?, b3.clone()], 1)?)?;
        let p4 = n.fuse_n4.forward(&concat(&[n.down3.forward(&p3)?, l4], 1)?)?;
        let p5 = n.fuse_n5.forward(&concat(&[n.down4.forward(&p4)?, l5], 1)?)?;
        Ok(FeaturePyramid { p3, p4, p5 })
    }

    pub fn forward(&self, image: &Tensor) -> Result<RawPredictions> {
        self.forward_traced(image, None)
    }

    pub fn forward_traced(&self, image: &Tensor, trace: Option<&mut Vec<LayerShape>>) -> Result<RawPredictions> {
        let pyramid = self.features(image, trace)?;
        Ok(RawPredictions {
            detection: self.detect.forward(&pyramid)?,
            seg_logits: self.seg.forward(&pyramid)?,
            input_size: self.config.input_size,
        })
    }

    /// Backbone output shapes for one image, in layer order.
    pub fn shape_trace(&self, image: &Tensor) -> Result<Vec<LayerShape>> {
        let mut trace = Vec::new();
        self.features(image, Some(&mut trace))?;
        Ok(trace)
    }
}

impl Module for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, s) in self.stages.iter().enumerate() {
            s.down.visit(&join(prefix, &format!("stage{i}.down")), f);
            s.block.visit(&join(prefix, &format!("stage{i}.block")), f);
        }
        self.sppf.visit(&join(prefix, "sppf"), f);
        let n = &self.neck;
        let p = join(prefix, "neck");
        n.reduce5.visit(&join(&p, "reduce5"), f);
        n.fuse4.visit(&join(&p, "fuse4"), f);
        n.reduce4.visit(&join(&p, "reduce4"), f);
        n.fuse3.visit(&join(&p, "fuse3"), f);
        n.down3.visit(&join(&p, "down3"), f);
        n.fuse_n4.visit(&join(&p, "fuse_n4"), f);
        n.down4.visit(&join(&p, "down4"), f);
        n.fuse_n5.visit(&join(&p, "fuse_n5"), f);
        self.detect.visit(&join(prefix, "detect"), f);
        self.seg.visit(&join(prefix, "seg"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.down.visit_mut(&join(prefix, &format!("stage{i}.down")), f);
            s.block.visit_mut(&join(prefix, &format!("stage{i}.block")), f);
        }
        self.sppf.visit_mut(&join(prefix, "sppf"), f);
        let n = &mut self.neck;
        let p = join(prefix, "neck");
        n.reduce5.visit_mut(&join(&p, "reduce5"), f);
        n.fuse4.visit_mut(&join(&p, "fuse4"), f);
        n.reduce4.visit_mut(&join(&p, "reduce4"), f);
        n.fuse3.visit_mut(&join(&p, "fuse3"), f);
        n.down3.visit_mut(&join(&p, "down3"), f);
        n.fuse_n4.visit_mut(&join(&p, "fuse_n4"), f);
        n.down4.visit_mut(&join(&p, "down4"), f);
        n.fuse_n5.visit_mut(&join(&p, "fuse_n5"), f);
        self.detect.visit_mut(&join(prefix, "detect"), f);
        self.seg.visit_mut(&join(prefix, "seg"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(size: usize, width: f64) -> Model {
        Model::new(ModelConfig { input_size: size, width_multiplier: width, ..Default::default() }, 7).unwrap()
    }

    #[test]
    fn default_channels_follow_output_column() {
        let c = ModelConfig::default();
        let got: Vec<usize> = [64, 128, 256, 512, 1024].iter().map(|&n| c.channels(n)).collect();
        assert_eq!(got, vec![32, 64, 128, 256, 512]);
        assert_eq!(c.detection_channels(), 24);
    }

    #[test]
    fn pyramid_extents_for_several_sizes() {
        for size in [32, 64, 96] {
            let m = small(size, 0.125);
            let raw = m.forward(&Tensor::zeros(&[1, 3, size, size])).unwrap();
            for (t, s) in raw.detection.iter().zip(STRIDES) {
                assert_eq!(t.shape(), &[1, 24, size / s, size / s]);
            }
            assert_eq!(raw.seg_logits.shape(), &[1, 3, size / 8, size / 8]);
        }
    }

    #[test]
    fn wrong_input_extent_rejected() {
        let m = small(64, 0.125);
        assert!(m.forward(&Tensor::zeros(&[1, 3, 32, 32])).is_err());
        assert!(m.forward(&Tensor::zeros(&[1, 1, 64, 64])).is_err());
    }

    #[test]
    fn config_rejects_bad_values() {
        for c in [
            ModelConfig { input_size: 100, ..Default::default() },
            ModelConfig { width_multiplier: 0.0, ..Default::default() },
            ModelConfig { anchors: vec![[1.0, 1.0]; 8], ..Default::default() },
        ] {
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn config_text_round_trip() {
        let c = ModelConfig { width_multiplier: 0.3, depth: 2, activation: Activation::Relu, ..Default::default() };
        assert_eq!(ModelConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn parameter_count_monotone_in_width() {
        let counts: Vec<usize> = [0.125, 0.25, 0.5, 0.75]
            .iter()
            .map(|&w| small(64, w).parameter_count())
            .collect();
        assert!(counts.windows(2).all(|p| p[0] < p[1]), "{counts:?}");
    }
}
