use image::{imageops, RgbImage};

use crate::error::Result;

/// Side of the grayscale thumbnail used as the selection feature.
pub const FEATURE_SIDE: u32 = 32;

/// Flattened `32 × 32` grayscale thumbnail scaled to `[0, 1]`.
pub fn image_features(image: &RgbImage) -> Vec<f64> {
    let gray = imageops::grayscale(image);
    let small = imageops::resize(&gray, FEATURE_SIDE, FEATURE_SIDE, imageops::FilterType::Triangle);
    small.pixels().map(|p| p.0[0] as f64 / 255.0).collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Index of the unlabeled vector with the largest mean Euclidean distance to
/// the labeled set; the lowest index wins ties. With nothing labeled every
/// candidate ties.
pub fn active_select(labeled: &[Vec<f64>], unlabeled: &[Vec<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, u) in unlabeled.iter().enumerate() {
        let score = if labeled.is_empty() {
            0.0
        } else {
            labeled.iter().map(|l| distance(u, l)).sum::<f64>() / labeled.len() as f64
        };
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((i, score));
        }
    }
    best.map(|(i, _)| i)
}

/// Retrains on a labeled subset and reports validation accuracy in `[0, 1]`.
pub trait ActiveTrainer {
    fn fit_and_score(&mut self, labeled: &[usize]) -> Result<f64>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActiveReport {
    /// Final labeled indices, initial set first then selections in order.
    pub labeled: Vec<usize>,
    pub selections: Vec<usize>,
    /// Validation accuracy after each training round, starting with the initial set.
    pub accuracies: Vec<f64>,
    /// Whether the accuracy threshold was exceeded before the pool ran out.
    pub converged: bool,
}

/// Trains on the labeled set and, until validation accuracy exceeds
/// `threshold`, moves the farthest pool element into it and retrains.
/// Indices refer to `features`.
pub fn active_loop<T: ActiveTrainer>(
    features: &[Vec<f64>],
    initial: &[usize],
    pool: &[usize],
    trainer: &mut T,
    threshold: f64,
) -> Result<ActiveReport> {
    let mut labeled = initial.to_vec();
    let mut pool = pool.to_vec();
    let mut report = ActiveReport { labeled: Vec::new(), selections: Vec::new(), accuracies: Vec::new(), converged: false };
    loop {
        let acc = trainer.fit_and_score(&labeled)?;
        report.accuracies.push(acc);
        if acc > threshold {
            report.converged = true;
            break;
        }
        let lab: Vec<Vec<f64>> = labeled.iter().map(|&i| features[i].clone()).collect();
        let unl: Vec<Vec<f64>> = pool.iter().map(|&i| features[i].clone()).collect();
        let Some(k) = active_select(&lab, &unl) else {
            log::warn!("active labeling stopped: pool exhausted at accuracy {acc}");
            break;
        };
        let chosen = pool.remove(k);
        labeled.push(chosen);
        report.selections.push(chosen);
    }
    report.labeled = labeled;
    Ok(report)
}
