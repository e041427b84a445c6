use rand::Rng;

use super::{init_uniform, init_zeros, join, Activation, Conv, Module};
use crate::error::{Error, Result};
use crate::tensor::{concat, conv2d, linear, pool_global_avg, ConvSpec, Tensor};

/// `S_c = σ(W·GAP(X) + b)`, one weight per output channel.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    /// `[C_out, C_in]`
    pub weight: Tensor,
    /// `[C_out]`
    pub bias: Tensor,
}

impl ChannelAttention {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        Self {
            weight: init_uniform(&[out_channels, in_channels], in_channels, rng),
            bias: init_zeros(&[out_channels]),
        }
    }

    /// Channel weights `N, C_out` computed from the pooled descriptor of `x`.
    pub fn weights(&self, x: &Tensor) -> Result<Tensor> {
        let pooled = pool_global_avg(x)?;
        Ok(linear(&pooled, &self.weight, Some(&self.bias))?.sigmoid())
    }

    /// Scales every channel of `features` by the weights computed from `source`.
    pub fn scale(&self, source: &Tensor, features: &Tensor) -> Result<Tensor> {
        let s = self.weights(source)?;
        let (n, c) = (s.shape()[0], s.shape()[1]);
        if features.shape().get(1) != Some(&c) {
            return Err(Error::shape("channel attention", features.shape(), s.shape()));
        }
        features.mul(&s.reshape(&[n, c, 1, 1])?)
    }
}

impl Module for ChannelAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Convolution whose output channels are re-weighted by channel attention on
/// its input: `Y = Conv(X) ⊙ S_c(X)`.
#[derive(Clone, Debug)]
pub struct CaConv {
    pub conv: Conv,
    pub attn: ChannelAttention,
}

impl CaConv {
    pub fn new<R: Rng + ?Sized>(spec: ConvSpec, act: Activation, rng: &mut R) -> Self {
        Self {
            attn: ChannelAttention::new(spec.in_channels, spec.out_channels, rng),
            conv: Conv::new(spec, act, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.conv.forward(x)?;
        self.attn.scale(x, &y)
    }
}

impl Module for CaConv {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.attn.visit(&join(prefix, "attn"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
    }
}

/// Spatial attention: channel-wise mean and max maps, a 1×1 conv down to one
/// channel, then a softmax over all H×W positions.
///
/// The gate applied to the features is `H·W·S_s`, the identity for a
/// uniform map.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    /// `[1, 2, 1, 1]`
    pub weight: Tensor,
    /// `[1]`
    pub bias: Tensor,
}

impl SpatialAttention {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            weight: init_uniform(&[1, 2, 1, 1], 2, rng),
            bias: init_zeros(&[1]),
        }
    }

    /// `N, 2, H, W` stack of the per-pixel channel mean and channel max.
    pub fn descriptor(x: &Tensor) -> Result<Tensor> {
        if x.ndim() != 4 {
            return Err(Error::InvalidArgument(format!(
                "spatial attention expects N,C,H,W, got {:?}",
                x.shape()
            )));
        }
        concat(&[x.mean_axis(1, true)?, x.max_axis(1, true)?], 1)
    }

    /// Softmax weights `N, 1, H, W`; they sum to one per image.
    pub fn weights(&self, x: &Tensor) -> Result<Tensor> {
        let v = Self::descriptor(x)?;
        let spec = ConvSpec::new(2, 1, 1, 1, 0);
        let logits = conv2d(&v, &self.weight, Some(&self.bias), &spec)?;
        let s = logits.shape().to_vec();
        logits.reshape(&[s[0], s[2] * s[3]])?.softmax(1)?.reshape(&s)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = self.weights(x)?;
        let positions = (x.shape()[2] * x.shape()[3]) as f64;
        x.mul(&s.mul_scalar(positions))
    }
}

impl Module for SpatialAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_gradients_sampled;
    use crate::tensor::sigmoid_f64;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_attention(mut ca: CaConv) -> CaConv {
        ca.attn.weight = Tensor::zeros(ca.attn.weight.shape());
        ca.attn.bias = Tensor::zeros(ca.attn.bias.shape());
        ca
    }

    #[test]
    fn zero_linear_transform_halves_output() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let ca = zero_attention(CaConv::new(ConvSpec::new(3, 4, 3, 1, 1), Activation::Silu, &mut r));
        let x = Tensor::randn(&[2, 3, 6, 6], 1.0, &mut r);
        let y = ca.forward(&x).unwrap();
        let conv = ca.conv.forward(&x).unwrap();
        for (a, b) in y.data().iter().zip(conv.data()) {
            assert_eq!(*a, 0.5 * b);
        }
    }

    #[test]
    fn first_layer_downsamples_640_to_320() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let ca = CaConv::new(ConvSpec::new(3, 32, 6, 2, 2), Activation::Silu, &mut r);
        let x = Tensor::zeros(&[1, 3, 640, 640]);
        assert_eq!(ca.forward(&x).unwrap().shape(), &[1, 32, 320, 320]);
    }

    #[test]
    fn matches_hand_composed_pipeline() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let (cin, cout, h, w) = (3, 5, 6, 7);
        let ca = CaConv::new(ConvSpec::new(cin, cout, 3, 1, 1), Activation::Silu, &mut r);
        let mut ca = ca;
        ca.attn.bias = Tensor::randn(&[cout], 0.5, &mut r);
        let x = Tensor::randn(&[2, cin, h, w], 1.0, &mut r);
        let y = ca.forward(&x).unwrap();
        let conv = ca.conv.forward(&x).unwrap();
        let (wd, bd) = (ca.attn.weight.data(), ca.attn.bias.data());
        for n in 0..2 {
            // GAP of the input
            let gap: Vec<f64> = (0..cin)
                .map(|c| x.data()[(n * cin + c) * h * w..][..h * w].iter().sum::<f64>() / (h * w) as f64)
                .collect();
            for o in 0..cout {
                let z: f64 = bd[o] + (0..cin).map(|i| wd[o * cin + i] * gap[i]).sum::<f64>();
                let s = sigmoid_f64(z);
                for p in 0..h * w {
                    let idx = (n * cout + o) * h * w + p;
                    assert!((y.data()[idx] - conv.data()[idx] * s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn constant_map_descriptor() {
        let x = Tensor::full(&[1, 4, 3, 3], 2.5);
        let v = SpatialAttention::descriptor(&x).unwrap();
        assert_eq!(v.shape(), &[1, 2, 3, 3]);
        assert!(v.data().iter().all(|&e| e == 2.5));
    }

    #[test]
    fn spatial_weights_sum_to_one() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let sa = SpatialAttention::new(&mut r);
        let x = Tensor::randn(&[3, 4, 9, 11], 2.0, &mut r);
        let s = sa.weights(&x).unwrap();
        for img in s.data().chunks(99) {
            assert!(img.iter().all(|&v| v >= 0.0));
            assert!((img.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_spatial_map_is_identity_gate() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let mut sa = SpatialAttention::new(&mut r);
        sa.weight = Tensor::zeros(&[1, 2, 1, 1]);
        let x = Tensor::randn(&[1, 3, 4, 4], 1.0, &mut r);
        let y = sa.forward(&x).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradcheck_attention_blocks() {
        for seed in 0..5 {
            let mut r = ChaCha8Rng::seed_from_u64(40 + seed);
            let ca = CaConv::new(ConvSpec::new(2, 3, 3, 2, 1), Activation::Silu, &mut r);
            let x = Tensor::randn(&[2, 2, 5, 5], 1.0, &mut r);
            let params = vec![x.clone(), ca.conv.weight.clone(), ca.conv.bias.clone(), ca.attn.weight.clone(), ca.attn.bias.clone()];
            let c = check_gradients_sampled(
                |v| {
                    let m = CaConv {
                        conv: Conv { weight: v[1].clone(), bias: v[2].clone(), ..ca.conv.clone() },
                        attn: ChannelAttention { weight: v[3].clone(), bias: v[4].clone() },
                    };
                    m.forward(&v[0]).unwrap().square().sum()
                },
                &params,
                12,
                &mut r,
            );
            assert!(c.max_rel_error < 1e-4, "ca_conv seed {seed}: {c:?}");

            let sa = SpatialAttention::new(&mut r);
            // Well separated channel values keep the channel max away from ties.
            let xs = Tensor::new(&[1, 3, 3, 3], {
                let mut v: Vec<f64> = (0..27).map(|i| i as f64 * 0.1 - 1.3).collect();
                rand::seq::SliceRandom::shuffle(v.as_mut_slice(), &mut r);
                v
            })
            .unwrap();
            let c = check_gradients_sampled(
                |v| {
                    let m = SpatialAttention { weight: v[1].clone(), bias: v[2].clone() };
                    m.forward(&v[0]).unwrap().square().sum()
                },
                &[xs, sa.weight.clone(), sa.bias.clone()],
                27,
                &mut r,
            );
            assert!(c.max_rel_error < 1e-4, "spatial seed {seed}: {c:?}");
        }
    }

    proptest! {
        #[test]
        fn channel_weights_open_interval_and_bias_shift(seed in 0u64..1000, shift in -3.0f64..3.0) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let mut ca = ChannelAttention::new(4, 6, &mut r);
            ca.bias = Tensor::randn(&[6], 1.0, &mut r);
            let x = Tensor::randn(&[1, 4, 3, 3], 1.0, &mut r);
            let s = ca.weights(&x).unwrap();
            prop_assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
            let argmax = |d: &[f64]| d.iter().enumerate().fold(0, |b, (i, &v)| if v > d[b] { i } else { b });
            let before = argmax(s.data());
            ca.bias = ca.bias.add_scalar(shift);
            let after = argmax(ca.weights(&x).unwrap().data());
            prop_assert_eq!(before, after);
        }
    }
}
