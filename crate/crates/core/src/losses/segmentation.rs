use super::{bce_terms, focal_loss, FocalParams};
use crate::error::{Error, Result};
use crate::tensor::{concat, Tensor};

const DICE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegLossWeights {
    pub dice: f64,
    pub bce: f64,
    pub focal: f64,
}

impl Default for SegLossWeights {
    fn default() -> Self {
        Self { dice: 0.5, bce: 0.25, focal: 0.25 }
    }
}

#[derive(Clone, Debug)]
pub struct SegLossParts {
    pub dice: Tensor,
    pub bce: Tensor,
    pub focal: Tensor,
    pub total: Tensor,
}

/// Soft Dice loss `1 − 2TP / (2TP + FP + FN + ε)` with
/// `TP = Σ p·g`, `FP = Σ p·(1−g)`, `FN = Σ (1−p)·g`.
/// Two empty masks score 0.
pub fn dice_loss(probs: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if probs.shape() != gt.shape() {
        return Err(Error::shape("dice loss", probs.shape(), gt.shape()));
    }
    if gt.data().iter().all(|&g| g == 0.0) && probs.data().iter().all(|&p| p == 0.0) {
        return Ok(Tensor::scalar(0.0));
    }
    let tp2 = probs.mul(gt)?.sum().mul_scalar(2.0);
    // 2TP + FP + FN = Σp + Σg
    let denom = probs.sum().add(&gt.sum())?.add_scalar(DICE_EPS);
    Ok(tp2.div(&denom)?.neg().add_scalar(1.0))
}

/// Class-weighted BCE on logits with counts taken from `gt`.
pub fn weighted_bce(logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let pos = gt.data().iter().filter(|&&g| g > 0.5).count();
    let total = gt.numel();
    weighted_bce_counts(logits, gt, total, pos, total - pos)
}

/// `−(1/N) Σ [N/(2N₊)·g·log p + N/(2N₋)·(1−g)·log(1−p)]` on logits. A zero
/// count is raised to one (its term has no pixels anyway) with a warning.
pub fn weighted_bce_counts(logits: &Tensor, gt: &Tensor, total: usize, positive: usize, negative: usize) -> Result<Tensor> {
    if logits.shape() != gt.shape() {
        return Err(Error::shape("weighted bce", logits.shape(), gt.shape()));
    }
    if positive + negative != total || total == 0 {
        return Err(Error::InvalidArgument(format!(
            "inconsistent pixel counts: {positive} positive + {negative} negative != {total}"
        )));
    }
    let clamp = |count: usize, name: &str| {
        if count == 0 {
            log::warn!("weighted bce: no {name} pixels, clamping count to 1");
        }
        count.max(1) as f64
    };
    let w_pos = total as f64 / (2.0 * clamp(positive, "positive"));
    let w_neg = total as f64 / (2.0 * clamp(negative, "negative"));
    let weights = Tensor::new(gt.shape(), gt.data().iter().map(|&g| g * w_pos + (1.0 - g) * w_neg).collect())?;
    Ok(bce_terms(logits, gt)?.mul(&weights)?.mean())
}

/// `α₁·Dice + α₂·BCE + α₃·Focal` on `N, C, H, W` logits and binary targets.
///
/// Dice is taken per class over the whole batch and averaged over the
/// classes that occur in `gt`; classes absent from the ground truth are left
/// to the pixel-wise terms.
pub fn segmentation_loss(logits: &Tensor, gt: &Tensor, weights: SegLossWeights, focal: FocalParams) -> Result<SegLossParts> {
    let (n, c, h, w) = match *logits.shape() {
        [n, c, h, w] if gt.shape() == logits.shape() => (n, c, h, w),
        _ => return Err(Error::shape("segmentation loss", logits.shape(), gt.shape())),
    };
    let probs = logits.sigmoid();
    let plane = h * w;
    let mut dices = Vec::new();
    for k in 0..c {
        let idx: Vec<usize> = (0..n).flat_map(|b| ((b * c + k) * plane)..((b * c + k + 1) * plane)).collect();
        let g = Tensor::new(&[idx.len()], idx.iter().map(|&i| gt.data()[i]).collect())?;
        if g.data().iter().all(|&v| v == 0.0) {
            continue;
        }
        dices.push(dice_loss(&probs.gather(&idx)?, &g)?.reshape(&[1])?);
    }
    let dice = if dices.is_empty() { Tensor::scalar(0.0) } else { concat(&dices, 0)?.mean() };
    let bce = weighted_bce(logits, gt)?;
    let foc = focal_loss(logits, gt, focal)?;
    let total = dice.mul_scalar(weights.dice).add(&bce.mul_scalar(weights.bce))?.add(&foc.mul_scalar(weights.focal))?;
    Ok(SegLossParts { dice, bce, focal: foc, total })
}
