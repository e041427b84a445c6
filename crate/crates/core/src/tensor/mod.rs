//! Dense tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted buffer of `f64` values in
//! row-major order. Feature maps are always laid out as `N, C, H, W`. Every
//! operation that has at least one input with `requires_grad` set records a
//! backward closure, so the tensors reachable from a loss form the graph that
//! [`Tensor::backward`] walks. Operations on tensors that do not require
//! gradients record nothing, and their intermediates are freed as soon as they
//! are dropped, which keeps inference memory flat.
//!
//! Gradients accumulate additively in the leaves. Call
//! [`Tensor::zero_grad`] between optimizer steps.

mod conv;
pub mod flops;
pub mod gradcheck;
mod ops;

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub use conv::{
    conv2d, deform_conv2d, max_pool2d, resize_bilinear, upsample_nearest, ConvSpec,
};
pub use ops::*;

/// Backward rule of one recorded operation.
pub(crate) trait Backward: Send + Sync {
    fn inputs(&self) -> Vec<Tensor>;

    /// Gradients with respect to each entry of `inputs()`, in order. Entries
    /// whose `needs` flag is false may be returned as `None`.
    fn grads(&self, out: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>>;
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    op: Option<Box<dyn Backward>>,
}

#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data[..8]", &preview)
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} holds {} values, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Self::leaf(shape.to_vec(), data, false))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::leaf(shape.to_vec(), vec![value; numel(shape)], false)
    }

    pub fn scalar(value: f64) -> Self {
        Self::leaf(vec![1], vec![value], false)
    }

    /// Standard-normal samples scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self::leaf(shape.to_vec(), data, false)
    }

    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape)).map(|_| rng.random_range(lo..hi)).collect();
        Self::leaf(shape.to_vec(), data, false)
    }

    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Self {
        Tensor(Arc::new(Node {
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            op: None,
        }))
    }

    /// Builds the result of an operation. The backward rule is kept only when
    /// some input participates in differentiation.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, op: impl Backward + 'static) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = op.inputs().iter().any(Tensor::requires_grad);
        Tensor(Arc::new(Node {
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            op: if requires_grad { Some(Box::new(op)) } else { None },
        }))
    }

    /// A new leaf holding the same values, participating in differentiation.
    pub fn requires_grad_(self) -> Self {
        self.with_requires_grad(true)
    }

    pub fn with_requires_grad(&self, requires_grad: bool) -> Self {
        Self::leaf(self.0.shape.clone(), self.0.data.clone(), requires_grad)
    }

    /// Leaf copy cut off from the graph.
    pub fn detach(&self) -> Self {
        self.with_requires_grad(false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    pub fn item(&self) -> f64 {
        self.0.data[0]
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    pub fn same_node(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }

    /// Reverse-mode sweep from a scalar. Every leaf with `requires_grad`
    /// reachable from `self` has d(self)/d(leaf) added to its gradient.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // Post-order DFS gives a topological order with inputs before outputs.
        let mut order: Vec<Tensor> = Vec::new();
        let mut seen: HashMap<usize, ()> = HashMap::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if seen.insert(t.key(), ()).is_some() {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.0.op {
                for input in op.inputs() {
                    if input.requires_grad() && !seen.contains_key(&input.key()) {
                        stack.push((input, false));
                    }
                }
            }
        }

        let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
        grads.insert(self.key(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.key()) else {
                continue;
            };
            match &t.0.op {
                None => {
                    let mut slot = t.0.grad.lock().expect("grad lock poisoned");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(op) => {
                    let inputs = op.inputs();
                    let needs: Vec<bool> = inputs.iter().map(Tensor::requires_grad).collect();
                    let input_grads = op.grads(t, &g, &needs);
                    for ((input, need), ig) in inputs.iter().zip(&needs).zip(input_grads) {
                        if !need {
                            continue;
                        }
                        let Some(ig) = ig else { continue };
                        match grads.get_mut(&input.key()) {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(input.key(), ig);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::new(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::ones(&[3]).requires_grad_();
        let y = x.mul_scalar(2.0);
        assert!(matches!(y.backward(), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn sum_gives_ones() {
        let x = Tensor::new(&[2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap().requires_grad_();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn square_sum_gives_twice_x() {
        let vals = vec![1.0, -2.0, 3.0, 0.5];
        let x = Tensor::new(&[4], vals.clone()).unwrap().requires_grad_();
        x.mul(&x).unwrap().sum().backward().unwrap();
        let want: Vec<f64> = vals.iter().map(|v| 2.0 * v).collect();
        assert_eq!(x.grad().unwrap(), want);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap().requires_grad_();
        let loss = x.sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0; 3]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn no_graph_without_requires_grad() {
        let x = Tensor::ones(&[3]);
        let y = x.mul_scalar(3.0).sum();
        assert!(y.is_leaf());
        assert!(!y.requires_grad());
    }

    #[test]
    fn shared_subexpression_gets_both_paths() {
        // loss = sum(y * y) with y = 3x: dl/dx = 18x
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap().requires_grad_();
        let y = x.mul_scalar(3.0);
        y.mul(&y).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![18.0, 36.0]);
    }
}
