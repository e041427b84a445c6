//! Adam with L2 weight decay, a cosine learning-rate schedule, and the
//! joint detection plus segmentation objective.

use std::collections::HashMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, batch_tensor, mask_targets, Augment, Sample};
use crate::error::{Error, Result};
use crate::losses::{detection_loss, segmentation_loss, DetLossWeights, FocalParams, SegLossWeights};
use crate::model::{Model, STRIDES};
use crate::nn::Module;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Learning rate reached at the last step.
    pub lr_floor: f64,
    pub weight_decay: f64,
    pub iters: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Probability of mirroring each image in a batch.
    pub flip_prob: f64,
    /// Probability of blending each image with another training image.
    pub blend_prob: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            lr_floor: 1e-5,
            weight_decay: 0.0005,
            iters: 300,
            batch_size: 8,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            flip_prob: 0.5,
            blend_prob: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr_floor >= 0.0
            && self.lr_floor <= self.lr
            && self.weight_decay >= 0.0
            && self.batch_size > 0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && (0.0..=1.0).contains(&self.flip_prob)
            && (0.0..=1.0).contains(&self.blend_prob);
        if !ok {
            return Err(Error::Config(format!("invalid training settings {self:?}")));
        }
        Ok(())
    }
}

/// Cosine decay from `lr` at step 0 to `floor` at step `total − 1`.
pub fn cosine_lr(step: usize, total: usize, lr: f64, floor: f64) -> f64 {
    if total <= 1 {
        return lr;
    }
    let progress = step.min(total - 1) as f64 / (total - 1) as f64;
    floor + 0.5 * (lr - floor) * (1.0 + (PI * progress).cos())
}

/// Adam on every parameter of a module. Weight decay is added to the
/// gradient as `λ·w`.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps: u32,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            weight_decay: config.weight_decay,
            steps: 0,
            moments: HashMap::new(),
        }
    }

    /// Applies one update with the gradients accumulated in `module` and
    /// replaces each parameter with a fresh leaf, which also clears its gradient.
    pub fn step(&mut self, module: &mut dyn Module, lr: f64) {
        self.steps += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.steps as i32);
        let c2 = 1.0 - b2.powi(self.steps as i32);
        let (eps, wd) = (self.eps, self.weight_decay);
        let moments = &mut self.moments;
        module.visit_mut("", &mut |name, p| {
            let Some(grad) = p.grad() else { return };
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            let mut data = p.to_vec();
            for i in 0..data.len() {
                let g = grad[i] + wd * data[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                data[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
            *p = Tensor::new(p.shape(), data).expect("same shape").requires_grad_();
        });
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub detection: f64,
    pub segmentation: f64,
}

pub const LOSS_CURVE_HEADER: &str = "step,lr,total,detection,segmentation";

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.lr, self.total, self.detection, self.segmentation)
    }
}

/// Detection and segmentation losses of a batch, each with its own weights.
pub fn batch_loss(model: &Model, batch: &[&Sample]) -> Result<(Tensor, f64, f64)> {
    let images: Vec<image::RgbImage> = batch.iter().map(|s| s.image.clone()).collect();
    let x = batch_tensor(&images)?;
    let raw = model.forward(&x)?;
    let targets: Vec<_> = batch.iter().map(|s| s.gt_boxes()).collect();
    let focal = FocalParams::default();
    let det = detection_loss(&raw.detection, &targets, &model.config, &DetLossWeights::for_config(&model.config), focal)?;
    let gt = mask_targets(batch, STRIDES[0])?;
    let seg = segmentation_loss(&raw.seg_logits, &gt, SegLossWeights::default(), focal)?;
    let total = det.total.add(&seg.total)?;
    Ok((total, det.total.item(), seg.total.item()))
}

/// Trains in place. `on_step` sees every completed step. A non-finite loss
/// stops training before the update, leaving the last good parameters in
/// `model`.
pub fn train<F>(model: &mut Model, samples: &[Sample], config: &TrainConfig, mut on_step: F) -> Result<Vec<StepLog>>
where
    F: FnMut(&StepLog),
{
    config.validate()?;
    if samples.is_empty() && config.iters > 0 {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.width() != model.config.input_size || s.height() != model.config.input_size) {
        return Err(Error::InvalidArgument(format!(
            "training images must be {0}x{0}, got {1}x{2}",
            model.config.input_size,
            s.width(),
            s.height()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config);
    let mut order: Vec<usize> = Vec::new();
    let mut logs = Vec::with_capacity(config.iters);
    for step in 0..config.iters {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size.min(samples.len()) {
            if order.is_empty() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut rng);
            }
            let i = order.pop().expect("refilled");
            let mut s = samples[i].clone();
            if rng.random_bool(config.flip_prob) {
                s = augment(&s, Augment::Flip, &mut rng)?;
            }
            if rng.random_bool(config.blend_prob) {
                let other = &samples[rng.random_range(0..samples.len())];
                s = augment(&s, Augment::Blend(other), &mut rng)?;
            }
            batch.push(s);
        }
        let refs: Vec<&Sample> = batch.iter().collect();
        let (loss, det, seg) = batch_loss(model, &refs)?;
        if !loss.item().is_finite() {
            return Err(Error::Diverged { step, loss: loss.item() });
        }
        loss.backward()?;
        let lr = cosine_lr(step, config.iters, config.lr, config.lr_floor);
        adam.step(model, lr);
        let log = StepLog { step, lr, total: loss.item(), detection: det, segmentation: seg };
        on_step(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Mean over ground-truth boxes of the best IoU reached by a same-class
/// detection; a box with no detection scores 0.
pub fn mean_best_iou(detections: &[Vec<crate::model::DetectionBox>], samples: &[Sample]) -> Option<f64> {
    let mut ious = Vec::new();
    for (dets, s) in detections.iter().zip(samples) {
        for inst in &s.instances {
            let best = dets
                .iter()
                .filter(|d| d.class == inst.class)
                .map(|d| d.bbox.iou(&inst.bbox))
                .fold(0.0, f64::max);
            ious.push(best);
        }
    }
    crate::metrics::mean(&ious)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 300, 0.001, 1e-5), 0.001);
        assert!((cosine_lr(299, 300, 0.001, 1e-5) - 1e-5).abs() < 1e-18);
        let mid = cosine_lr(150, 301, 0.001, 0.0);
        assert!((mid - 0.0005).abs() < 1e-15);
        let lrs: Vec<f64> = (0..300).map(|s| cosine_lr(s, 300, 0.001, 1e-5)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        for (s, &lr) in lrs.iter().enumerate() {
            let oracle = 1e-5 + (0.001 - 1e-5) * (1.0 + (PI * s as f64 / 299.0).cos()) / 2.0;
            assert!((lr - oracle).abs() < 1e-15);
        }
    }

    struct Quadratic {
        w: Tensor,
    }

    impl Module for Quadratic {
        fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
            f(&crate::nn::join(prefix, "w"), &self.w);
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
            f(&crate::nn::join(prefix, "w"), &mut self.w);
        }
    }

    #[test]
    fn adam_first_step_and_convergence() {
        let cfg = TrainConfig { weight_decay: 0.0, ..Default::default() };
        let mut q = Quadratic { w: Tensor::new(&[2], vec![3.0, -2.0]).unwrap().requires_grad_() };
        let mut adam = Adam::new(&cfg);
        q.w.mul(&q.w).unwrap().sum().backward().unwrap();
        adam.step(&mut q, 0.1);
        // The bias-corrected first step moves each weight by lr against its gradient sign.
        let w = q.w.to_vec();
        assert!((w[0] - 2.9).abs() < 1e-6 && (w[1] + 1.9).abs() < 1e-6);
        assert!(q.w.grad().is_none());
        for _ in 0..500 {
            q.w.mul(&q.w).unwrap().sum().backward().unwrap();
            adam.step(&mut q, 0.05);
        }
        assert!(q.w.data().iter().all(|v| v.abs() < 0.05));
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let cfg = TrainConfig { weight_decay: 0.5, ..Default::default() };
        let mut q = Quadratic { w: Tensor::new(&[1], vec![1.0]).unwrap().requires_grad_() };
        let mut adam = Adam::new(&cfg);
        q.w.mul_scalar(0.0).sum().backward().unwrap();
        adam.step(&mut q, 0.01);
        assert!(q.w.item() < 1.0);
    }
}
