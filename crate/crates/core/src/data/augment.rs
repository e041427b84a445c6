use image::{imageops, Rgb, RgbImage};
use rand::Rng;
use rand_distr::{Beta, Distribution};

use super::{Instance, Sample};
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Shape parameter of the symmetric Beta distribution blend weights are drawn from.
pub const BLEND_BETA: f64 = 1.5;

pub enum Augment<'a> {
    Flip,
    Blend(&'a Sample),
}

pub fn augment<R: Rng>(sample: &Sample, kind: Augment<'_>, rng: &mut R) -> Result<Sample> {
    match kind {
        Augment::Flip => Ok(flip(sample)),
        Augment::Blend(other) => {
            let beta = Beta::new(BLEND_BETA, BLEND_BETA).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            blend(sample, other, beta.sample(rng))
        }
    }
}

/// Horizontal mirror of image, boxes and masks.
pub fn flip(sample: &Sample) -> Sample {
    let w = sample.width() as f64;
    Sample {
        image: imageops::flip_horizontal(&sample.image),
        instances: sample
            .instances
            .iter()
            .map(|i| Instance {
                class: i.class,
                bbox: BBox::new(w - i.bbox.x2, i.bbox.y1, w - i.bbox.x1, i.bbox.y2),
                mask: i.mask.flip_horizontal(),
            })
            .collect(),
    }
}

/// `λ·a + (1 − λ)·b` per pixel, keeping the annotations of both.
pub fn blend(a: &Sample, b: &Sample, lambda: f64) -> Result<Sample> {
    if a.image.dimensions() != b.image.dimensions() {
        return Err(Error::InvalidArgument("blended samples differ in size".into()));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("blend weight {lambda} outside [0, 1]")));
    }
    let image = RgbImage::from_fn(a.image.width(), a.image.height(), |x, y| {
        let (p, q) = (a.image.get_pixel(x, y).0, b.image.get_pixel(x, y).0);
        Rgb(std::array::from_fn(|c| (lambda * p[c] as f64 + (1.0 - lambda) * q[c] as f64).round() as u8))
    });
    Ok(Sample { image, instances: a.instances.iter().chain(&b.instances).cloned().collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_scene, SceneParams};
    use crate::geometry::{BinaryMask, Class};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene(seed: u64) -> Sample {
        synth_scene(&SceneParams::random(48, &mut ChaCha8Rng::seed_from_u64(seed))).unwrap()
    }

    #[test]
    fn double_flip_is_identity() {
        let s = scene(1);
        assert_eq!(flip(&flip(&s)), s);
    }

    #[test]
    fn flip_box_coordinates() {
        let mut s = Sample { image: RgbImage::new(100, 40), instances: Vec::new() };
        for (x, y, w, h) in [(0.0, 0.0, 10.0, 5.0), (30.0, 10.0, 25.0, 20.0), (90.0, 35.0, 10.0, 5.0)] {
            let bbox = BBox::new(x, y, x + w, y + h);
            let mut mask = BinaryMask::new(100, 40);
            mask.fill_box(&bbox);
            s.instances.push(Instance { class: Class::House, bbox, mask });
        }
        let f = flip(&s);
        for (a, b) in s.instances.iter().zip(&f.instances) {
            let (x, w) = (a.bbox.x1, a.bbox.width());
            assert_eq!(b.bbox.x1, 100.0 - x - w);
            assert_eq!((b.bbox.width(), b.bbox.y1, b.bbox.height()), (w, a.bbox.y1, a.bbox.height()));
            assert_eq!(b.mask.area(), a.mask.area());
        }
        f.validate().unwrap();
    }

    #[test]
    fn blend_endpoints_and_union() {
        let (a, b) = (scene(2), scene(3));
        let one = blend(&a, &b, 1.0).unwrap();
        assert_eq!(one.image, a.image);
        assert_eq!(one.instances.len(), a.instances.len() + b.instances.len());
        assert_eq!(blend(&a, &b, 0.0).unwrap().image, b.image);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mixed = augment(&a, Augment::Blend(&b), &mut rng).unwrap();
        assert_eq!(mixed.instances.len(), one.instances.len());
        assert!(blend(&a, &b, 1.5).is_err());
    }
}
