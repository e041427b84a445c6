//! Boxes, binary masks and the three target classes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Class {
    Nest,
    QrCode,
    House,
}

impl Class {
    pub const ALL: [Class; 3] = [Class::Nest, Class::QrCode, Class::House];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Class> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Nest => "Nest",
            Class::QrCode => "QRcode",
            Class::House => "House",
        }
    }
}

/// Axis-aligned box in pixel coordinates, corners `(x1, y1)`–`(x2, y2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_cxcywh(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn longer_side(&self) -> f64 {
        self.width().max(self.height())
    }

    pub fn to_cxcywh(&self) -> [f64; 4] {
        let (cx, cy) = self.center();
        [cx, cy, self.width(), self.height()]
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    /// Integer pixel range `[c0, c1) × [r0, r1)` of pixels whose centers lie
    /// inside the box, clipped to a `width × height` frame.
    pub fn pixel_range(&self, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let lo = |v: f64, n: usize| ((v - 0.5).ceil().max(0.0) as usize).min(n);
        let hi = |v: f64, n: usize| (((v - 0.5).floor() + 1.0).max(0.0) as usize).min(n);
        (lo(self.x1, width), lo(self.y1, height), hi(self.x2, width), hi(self.y2, height))
    }
}

/// Full-frame binary mask in row-major order.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![false; width * height] }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::Geometry(format!(
                "mask of {width}x{height} needs {} bits, got {}",
                width * height,
                bits.len()
            )));
        }
        Ok(Self { width, height, bits })
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Centroid of the set pixels, using pixel-center coordinates `(x+0.5, y+0.5)`.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    sx += x as f64 + 0.5;
                    sy += y as f64 + 0.5;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    /// Whether the pixel containing `(x, y)` is set; points outside are not.
    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        if x < 0.0 || y < 0.0 {
            return false;
        }
        let (px, py) = (x.floor() as usize, y.floor() as usize);
        px < self.width && py < self.height && self.get(px, py)
    }

    /// Clears every pixel whose center lies outside `bbox`.
    pub fn crop(&self, bbox: &BBox) -> BinaryMask {
        let mut out = BinaryMask::new(self.width, self.height);
        let (c0, r0, c1, r1) = bbox.pixel_range(self.width, self.height);
        for y in r0..r1 {
            for x in c0..c1 {
                out.set(x, y, self.get(x, y));
            }
        }
        out
    }

    pub fn fill_box(&mut self, bbox: &BBox) {
        let (c0, r0, c1, r1) = bbox.pixel_range(self.width, self.height);
        for y in r0..r1 {
            for x in c0..c1 {
                self.set(x, y, true);
            }
        }
    }

    pub fn union_with(&mut self, other: &BinaryMask) {
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(&a, &b)| a && b).count()
    }

    pub fn union_count(&self, other: &BinaryMask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(&a, &b)| a || b).count()
    }

    /// Tight bounding box of the set pixels.
    pub fn bounding_box(&self) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x0 != usize::MAX).then(|| BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64))
    }

    /// Sub-window `[x0, x0+w) × [y0, y0+h)` copied into a new mask.
    pub fn window(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<BinaryMask> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Geometry(format!(
                "window {w}x{h}+{x0}+{y0} outside {}x{} mask",
                self.width, self.height
            )));
        }
        let mut out = BinaryMask::new(w, h);
        for y in 0..h {
            for x in 0..w {
                out.set(x, y, self.get(x0 + x, y0 + y));
            }
        }
        Ok(out)
    }

    pub fn flip_horizontal(&self) -> BinaryMask {
        let mut out = BinaryMask::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(self.width - 1 - x, y, self.get(x, y));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn iou_of_half_overlap() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(5.0, 0.0, 15.0, 10.0);
        assert!((a.iou(&b) - 50.0 / 150.0).abs() < 1e-12);
        assert_eq!(a.iou(&BBox::new(20.0, 20.0, 30.0, 30.0)), 0.0);
    }

    #[test]
    fn centroid_of_rectangle() {
        let mut m = BinaryMask::new(10, 8);
        m.fill_box(&BBox::new(2.0, 1.0, 6.0, 5.0));
        assert_eq!(m.area(), 16);
        assert_eq!(m.centroid(), Some((4.0, 3.0)));
        assert_eq!(m.bounding_box(), Some(BBox::new(2.0, 1.0, 6.0, 5.0)));
    }

    proptest! {
        #[test]
        fn crop_is_idempotent_and_inside_box(
            seed in proptest::collection::vec(any::<bool>(), 64),
            x1 in -3.0f64..8.0, y1 in -3.0f64..8.0, w in 0.0f64..9.0, h in 0.0f64..9.0,
        ) {
            let m = BinaryMask::from_bits(8, 8, seed).unwrap();
            let b = BBox::new(x1, y1, x1 + w, y1 + h);
            let once = m.crop(&b);
            prop_assert_eq!(once.crop(&b), once.clone());
            for y in 0..8 {
                for x in 0..8 {
                    if once.get(x, y) {
                        prop_assert!(b.contains(x as f64 + 0.5, y as f64 + 0.5));
                    }
                }
            }
        }
    }
}
