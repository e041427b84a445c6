//! Training objectives. Every loss is built from differentiable tensor ops
//! and works on logits.

mod detection;
mod segmentation;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use detection::{assign_targets, ciou_loss, ciou_value, detection_loss, Assignment, DetLossParts, DetLossWeights, GtBox};
pub use segmentation::{dice_loss, segmentation_loss, weighted_bce, weighted_bce_counts, SegLossParts, SegLossWeights};

/// Probabilities are clamped to `[EPS, 1 − EPS]` wherever they are used
/// directly rather than through logits.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    /// Weight applied to every term, positive and negative alike.
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { alpha: 0.25, gamma: 2.0 }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) || !(self.gamma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "focal parameters need alpha in (0, 1] and gamma >= 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// `−α (1 − p_t)^γ log p_t` for one probability, with `p` clamped to
/// `[1e-7, 1 − 1e-7]`.
pub fn focal_scalar(p: f64, target: bool, params: FocalParams) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let pt = if target { p } else { 1.0 - p };
    -params.alpha * (1.0 - pt).powf(params.gamma) * pt.ln()
}

/// Element-wise focal loss on logits, averaged over all elements.
///
/// With `z` the logit, `−log p_t = softplus(∓z)` and
/// `(1 − p_t)^γ = exp(−γ·softplus(±z))`, so the whole expression stays finite
/// for any logit.
pub fn focal_loss(logits: &Tensor, targets: &Tensor, params: FocalParams) -> Result<Tensor> {
    Ok(focal_terms(logits, targets, params)?.mean())
}

pub(crate) fn focal_terms(logits: &Tensor, targets: &Tensor, params: FocalParams) -> Result<Tensor> {
    params.validate()?;
    if logits.shape() != targets.shape() {
        return Err(Error::shape("focal loss", logits.shape(), targets.shape()));
    }
    let t = targets;
    let not_t = targets.neg().add_scalar(1.0);
    let sp_pos = logits.softplus();
    let sp_neg = logits.neg().softplus();
    // −log p_t
    let nll = t.mul(&sp_neg)?.add(&not_t.mul(&sp_pos)?)?;
    // −log(1 − p_t)
    let nll_other = t.mul(&sp_pos)?.add(&not_t.mul(&sp_neg)?)?;
    let modulator = nll_other.mul_scalar(-params.gamma).exp();
    Ok(modulator.mul(&nll)?.mul_scalar(params.alpha))
}

/// Binary cross-entropy on logits, element-wise.
pub(crate) fn bce_terms(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let not_t = targets.neg().add_scalar(1.0);
    targets.mul(&logits.neg().softplus())?.add(&not_t.mul(&logits.softplus())?)
}
