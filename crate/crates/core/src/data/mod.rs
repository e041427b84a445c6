//! Samples, annotation ingestion, synthetic scenes and episodes,
//! augmentation and active labeling.

mod active;
mod annotations;
mod augment;
mod episode;
mod synth;

use image::RgbImage;

use crate::error::{Error, Result};
use crate::geometry::{BBox, BinaryMask, Class};
use crate::losses::GtBox;
use crate::metrics::GtObject;
use crate::model::{DetectionBox, InstanceMask};
use crate::tensor::Tensor;
use crate::warning::SceneObservation;

pub use active::{active_loop, active_select, image_features, ActiveReport, ActiveTrainer, FEATURE_SIDE};
pub use annotations::{load_annotations, parse_annotations, rasterize_polygon, AnnotationLoad};
pub use augment::{augment, blend, flip, Augment, BLEND_BETA};
pub use episode::{
    parse_episode, synth_episode, Drift, Episode, EpisodeFrame, EpisodeParams, FrameSource, Phase, EPISODE_MAGIC,
};
pub use synth::{synth_scene, NestParams, QrParams, SceneParams};

/// Category ids used by annotation files: 1 Nest, 2 QRcode, 3 House.
pub fn class_from_id(id: u64) -> Option<Class> {
    (1..=3).contains(&id).then(|| Class::from_index(id as usize - 1)).flatten()
}

pub fn class_id(class: Class) -> u64 {
    class.index() as u64 + 1
}

/// One annotated object: its box in pixels and its full-frame mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub class: Class,
    pub bbox: BBox,
    pub mask: BinaryMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    pub instances: Vec<Instance>,
}

impl Sample {
    pub fn width(&self) -> usize {
        self.image.width() as usize
    }

    pub fn height(&self) -> usize {
        self.image.height() as usize
    }

    /// Every mask matches the frame and every set pixel's center lies in its box.
    pub fn validate(&self) -> Result<()> {
        for (i, inst) in self.instances.iter().enumerate() {
            if inst.mask.width != self.width() || inst.mask.height != self.height() {
                return Err(Error::Geometry(format!("instance {i}: mask size differs from image")));
            }
            if !box_contains_mask(&inst.bbox, &inst.mask) {
                return Err(Error::Geometry(format!("instance {i}: mask extends outside its box")));
            }
        }
        Ok(())
    }

    pub fn gt_boxes(&self) -> Vec<GtBox> {
        self.instances.iter().map(|i| GtBox { class: i.class.index(), bbox: i.bbox }).collect()
    }

    pub fn gt_objects(&self) -> Vec<GtObject> {
        self.instances.iter().map(|i| GtObject { class: i.class.index(), bbox: i.bbox }).collect()
    }

    /// Union of instance masks per class.
    pub fn class_masks(&self) -> Vec<BinaryMask> {
        let mut out = vec![BinaryMask::new(self.width(), self.height()); Class::ALL.len()];
        for inst in &self.instances {
            out[inst.class.index()].union_with(&inst.mask);
        }
        out
    }

    /// Perception that reports the ground truth exactly, centered on the frame.
    pub fn oracle_observation(&self, timestamp: f64) -> SceneObservation {
        SceneObservation {
            detections: self
                .instances
                .iter()
                .map(|i| DetectionBox { class: i.class, score: 1.0, bbox: i.bbox })
                .collect(),
            masks: self
                .instances
                .iter()
                .map(|i| InstanceMask { class: i.class, score: 1.0, bbox: i.bbox, mask: i.mask.clone(), outside: false })
                .collect(),
            timestamp,
            center: (self.width() as f64 / 2.0, self.height() as f64 / 2.0),
        }
    }
}

pub(crate) fn box_contains_mask(bbox: &BBox, mask: &BinaryMask) -> bool {
    match mask.bounding_box() {
        None => true,
        Some(b) => b.x1 + 0.5 >= bbox.x1 && b.y1 + 0.5 >= bbox.y1 && b.x2 - 0.5 <= bbox.x2 && b.y2 - 0.5 <= bbox.y2,
    }
}

/// `1, 3, H, W` tensor with channels scaled to `[0, 1]`.
pub fn image_tensor(image: &RgbImage) -> Tensor {
    batch_tensor(std::slice::from_ref(image)).expect("single image batch")
}

/// Stacks equally sized images into an `N, 3, H, W` tensor.
pub fn batch_tensor(images: &[RgbImage]) -> Result<Tensor> {
    let (w, h) = images.first().map_or((0, 0), |i| (i.width() as usize, i.height() as usize));
    if images.iter().any(|i| i.width() as usize != w || i.height() as usize != h) {
        return Err(Error::InvalidArgument("batch images differ in size".into()));
    }
    let plane = w * h;
    let mut data = vec![0.0; images.len() * 3 * plane];
    for (n, img) in images.iter().enumerate() {
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[(n * 3 + c) * plane + i] = px.0[c] as f64 / 255.0;
            }
        }
    }
    Tensor::new(&[images.len(), 3, h, w], data)
}

/// `N, 3, H/s, W/s` segmentation targets sampled at the center pixel of
/// each `s × s` block.
pub fn mask_targets(samples: &[&Sample], stride: usize) -> Result<Tensor> {
    let (w, h) = samples.first().map_or((0, 0), |s| (s.width(), s.height()));
    if w % stride != 0 || h % stride != 0 {
        return Err(Error::InvalidArgument(format!("{w}x{h} frame is not a multiple of stride {stride}")));
    }
    let (gw, gh) = (w / stride, h / stride);
    let classes = Class::ALL.len();
    let mut data = vec![0.0; samples.len() * classes * gw * gh];
    for (n, s) in samples.iter().enumerate() {
        if s.width() != w || s.height() != h {
            return Err(Error::InvalidArgument("batch samples differ in size".into()));
        }
        for (c, mask) in s.class_masks().iter().enumerate() {
            for gy in 0..gh {
                for gx in 0..gw {
                    if mask.get(gx * stride + stride / 2, gy * stride + stride / 2) {
                        data[((n * classes + c) * gh + gy) * gw + gx] = 1.0;
                    }
                }
            }
        }
    }
    Tensor::new(&[samples.len(), classes, gh, gw], data)
}

/// Central `size × size` window of a sample. Boxes are clipped to the window
/// and instances left without pixels are dropped.
pub fn center_crop_sample(sample: &Sample, size: usize) -> Result<Sample> {
    let (r0, c0) = crate::warning::crop_origin(sample.height(), sample.width(), size)?;
    if (r0, c0) == (0, 0) && sample.width() == size && sample.height() == size {
        return Ok(sample.clone());
    }
    let image = image::imageops::crop_imm(&sample.image, c0 as u32, r0 as u32, size as u32, size as u32).to_image();
    let mut instances = Vec::new();
    for inst in &sample.instances {
        let mask = inst.mask.window(c0, r0, size, size)?;
        if mask.is_empty() {
            continue;
        }
        let bbox = inst.bbox.translate(-(c0 as f64), -(r0 as f64)).clip(size as f64, size as f64);
        instances.push(Instance { class: inst.class, bbox, mask });
    }
    Ok(Sample { image, instances })
}

/// A mixed set of episode scripts: no drift, steps of random size, slow
/// ramps, and steps landing exactly on the `d / l = δ` boundary.
pub fn scripted_episodes(count: usize, seed: u64) -> Vec<EpisodeParams> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let base = EpisodeParams { id: format!("ep{i:03}"), seed: rng.random(), ..Default::default() };
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            match i % 4 {
                0 => base,
                1 => {
                    let at = rng.random_range(10..30) as f64 / 10.0;
                    let mag = rng.random_range(4.0..36.0);
                    EpisodeParams { drift: Drift::Step { at, offset: (mag * angle.cos(), mag * angle.sin()) }, ..base }
                }
                2 => {
                    let start = rng.random_range(5..20) as f64 / 10.0;
                    let speed = rng.random_range(4.0..8.0);
                    EpisodeParams { drift: Drift::Ramp { start, velocity: (speed * angle.cos(), speed * angle.sin()) }, ..base }
                }
                _ => {
                    let at = rng.random_range(10..30) as f64 / 10.0;
                    let side = 2.0 * rng.random_range(10..20) as f64;
                    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    let offset = if rng.random_bool(0.5) { (sign * side * base.delta, 0.0) } else { (0.0, sign * side * base.delta) };
                    EpisodeParams { nest_side: (side, side), drift: Drift::Step { at, offset }, ..base }
                }
            }
        })
        .collect()
}
