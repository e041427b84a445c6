//! Finite-difference gradient checking.
//!
//! The numerical derivative uses the five-point central stencil
//! `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h` with `h = 1e-3`, whose
//! truncation error is O(h⁴). The error for one coordinate is
//! `|analytic − numeric| / max(|analytic|, |numeric|, 1e-6)`.

use rand::seq::index::sample;
use rand::Rng;

use super::Tensor;

pub const STEP: f64 = 1e-3;
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// (input index, flat element index, analytic, numeric) at the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheck {
    pub fn merge(&mut self, other: &GradCheck) {
        self.checked += other.checked;
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
            if other.worst.is_some() && other.max_rel_error >= self.max_rel_error {
                self.worst = other.worst;
            }
        }
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks every element of every input.
pub fn check_gradients(f: impl Fn(&[Tensor]) -> Tensor, inputs: &[Tensor]) -> GradCheck {
    let all: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.numel()).collect()).collect();
    check_at(&f, inputs, &all)
}

/// Checks up to `per_input` randomly chosen elements of each input.
pub fn check_gradients_sampled<R: Rng + ?Sized>(
    f: impl Fn(&[Tensor]) -> Tensor,
    inputs: &[Tensor],
    per_input: usize,
    rng: &mut R,
) -> GradCheck {
    let picks: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| {
            let n = t.numel();
            let mut idx = sample(rng, n, per_input.min(n)).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect();
    check_at(&f, inputs, &picks)
}

/// Central-difference derivative of `f` at `inputs` along one coordinate.
pub fn numeric_partial(f: &impl Fn(&[Tensor]) -> Tensor, inputs: &[Tensor], which: usize, index: usize) -> f64 {
    let eval = |delta: f64| {
        let mut moved: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();
        let mut data = moved[which].to_vec();
        data[index] += delta;
        moved[which] = Tensor::new(moved[which].shape(), data).expect("same shape");
        f(&moved).item()
    };
    let h = STEP;
    (-eval(2.0 * h) + 8.0 * eval(h) - 8.0 * eval(-h) + eval(-2.0 * h)) / (12.0 * h)
}

fn check_at(f: &impl Fn(&[Tensor]) -> Tensor, inputs: &[Tensor], picks: &[Vec<usize>]) -> GradCheck {
    let leaves: Vec<Tensor> = inputs.iter().map(|t| t.with_requires_grad(true)).collect();
    let loss = f(&leaves);
    loss.backward().expect("gradient check needs a scalar function");
    let mut report = GradCheck::default();
    for (which, idx) in picks.iter().enumerate() {
        let analytic = leaves[which].grad().unwrap_or_else(|| vec![0.0; leaves[which].numel()]);
        for &i in idx {
            let numeric = numeric_partial(f, inputs, which, i);
            let err = rel_error(analytic[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((which, i, analytic[i], numeric));
            }
        }
    }
    report
}
