use rand::Rng;

use super::{init_he, init_uniform, init_zeros, join, Activation, Module};
use crate::error::Result;
use crate::tensor::{conv2d, deform_conv2d, ConvSpec, Tensor};

/// Modulated deformable convolution block. Sampling offsets and modulation
/// scalars are predicted from the input by plain convolutions sharing the
/// kernel geometry of the main one; both predictors start at zero, so a fresh
/// block samples the regular grid with every tap scaled by 0.5.
#[derive(Clone, Debug)]
pub struct DeformableConv {
    pub spec: ConvSpec,
    pub weight: Tensor,
    pub bias: Tensor,
    pub offset_weight: Tensor,
    pub offset_bias: Tensor,
    pub mask_weight: Tensor,
    pub mask_bias: Tensor,
    pub act: Activation,
}

impl DeformableConv {
    pub fn new<R: Rng + ?Sized>(spec: ConvSpec, act: Activation, rng: &mut R) -> Self {
        let taps = spec.taps();
        let fan_in = spec.in_channels * taps;
        let offset = spec.offset_spec();
        let mask = spec.mask_spec();
        Self {
            weight: init_he(&spec.weight_shape(), fan_in, rng),
            bias: init_uniform(&[spec.out_channels], fan_in, rng),
            offset_weight: init_zeros(&offset.weight_shape()),
            offset_bias: init_zeros(&[2 * taps]),
            mask_weight: init_zeros(&mask.weight_shape()),
            mask_bias: init_zeros(&[taps]),
            spec,
            act,
        }
    }

    /// Predicted `(Δy, Δx)` offsets, `N, 2k², H_out, W_out`.
    pub fn offsets(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.offset_weight, Some(&self.offset_bias), &self.spec.offset_spec())
    }

    /// Predicted modulation scalars in (0, 1), `N, k², H_out, W_out`.
    pub fn modulation(&self, x: &Tensor) -> Result<Tensor> {
        Ok(conv2d(x, &self.mask_weight, Some(&self.mask_bias), &self.spec.mask_spec())?.sigmoid())
    }

    /// Runs the main convolution with explicitly supplied offsets and mask.
    pub fn forward_with(&self, x: &Tensor, offsets: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let y = deform_conv2d(x, offsets, mask, &self.weight, Some(&self.bias), &self.spec)?;
        Ok(self.act.apply(&y))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let offsets = self.offsets(x)?;
        let mask = self.modulation(x)?;
        self.forward_with(x, &offsets, Some(&mask))
    }
}

impl ConvSpec {
    fn offset_spec(&self) -> ConvSpec {
        ConvSpec { out_channels: 2 * self.taps(), ..*self }
    }

    fn mask_spec(&self) -> ConvSpec {
        ConvSpec { out_channels: self.taps(), ..*self }
    }
}

impl Module for DeformableConv {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
        f(&join(prefix, "offset.weight"), &self.offset_weight);
        f(&join(prefix, "offset.bias"), &self.offset_bias);
        f(&join(prefix, "mask.weight"), &self.mask_weight);
        f(&join(prefix, "mask.bias"), &self.mask_bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
        f(&join(prefix, "offset.weight"), &mut self.offset_weight);
        f(&join(prefix, "offset.bias"), &mut self.offset_bias);
        f(&join(prefix, "mask.weight"), &mut self.mask_weight);
        f(&join(prefix, "mask.bias"), &mut self.mask_bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_gradients_sampled;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_offsets_unit_mask_equals_plain_conv() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let spec = ConvSpec::new(4, 6, 3, 2, 1).with_floor();
        let block = DeformableConv::new(spec, Activation::Silu, &mut r);
        let x = Tensor::randn(&[2, 4, 9, 9], 1.0, &mut r);
        let off = Tensor::zeros(&[2, 18, 5, 5]);
        let mask = Tensor::ones(&[2, 9, 5, 5]);
        let got = block.forward_with(&x, &off, Some(&mask)).unwrap();
        let plain = conv2d(&x, &block.weight, Some(&block.bias), &spec).unwrap().silu();
        assert_eq!(got.to_vec(), plain.to_vec());
    }

    #[test]
    fn fresh_block_is_half_scaled_conv() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let spec = ConvSpec::new(3, 2, 3, 1, 1);
        let block = DeformableConv::new(spec, Activation::Identity, &mut r);
        let x = Tensor::randn(&[1, 3, 5, 5], 1.0, &mut r);
        let got = block.forward(&x).unwrap();
        let conv = conv2d(&x, &block.weight, None, &spec).unwrap();
        let bias = block.bias.data();
        for (i, (g, c)) in got.data().iter().zip(conv.data()).enumerate() {
            assert!((g - (0.5 * c + bias[i / 25])).abs() < 1e-12);
        }
    }

    #[test]
    fn stride_two_downsamples_160_to_80() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let block = DeformableConv::new(ConvSpec::new(64, 128, 3, 2, 1).with_floor(), Activation::Silu, &mut r);
        let x = Tensor::randn(&[1, 64, 160, 160], 1.0, &mut r);
        assert_eq!(block.forward(&x).unwrap().shape(), &[1, 128, 80, 80]);
    }

    #[test]
    fn gradcheck_with_predicted_offsets() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let mut block = DeformableConv::new(ConvSpec::new(2, 3, 3, 1, 1), Activation::Silu, &mut r);
        // Non-zero offset predictor, small enough to keep samples off the grid lines.
        block.offset_bias = Tensor::full(&[18], 0.37);
        block.offset_weight = Tensor::rand_uniform(block.offset_weight.shape(), -0.02, 0.02, &mut r);
        block.mask_weight = Tensor::randn(block.mask_weight.shape(), 0.3, &mut r);
        let x = Tensor::rand_uniform(&[1, 2, 5, 5], -1.0, 1.0, &mut r);
        let mut inputs = vec![x];
        inputs.extend(block.parameters().into_iter().map(|(_, t)| t));
        let c = check_gradients_sampled(
            |v| {
                let mut b = block.clone();
                let mut i = 1;
                b.visit_mut("", &mut |_, t| {
                    *t = v[i].clone();
                    i += 1;
                });
                b.forward(&v[0]).unwrap().square().sum()
            },
            &inputs,
            6,
            &mut r,
        );
        assert!(c.max_rel_error < 1e-4, "{c:?}");
    }
}
