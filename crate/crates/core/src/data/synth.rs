use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Instance, Sample};
use crate::error::{Error, Result};
use crate::geometry::{BBox, BinaryMask, Class};

const BACKGROUND: [f64; 3] = [92.0, 118.0, 74.0];
const HOUSE: [f64; 3] = [62.0, 56.0, 58.0];
const NEST: [f64; 3] = [242.0, 240.0, 232.0];
const QR_DARK: [f64; 3] = [18.0, 18.0, 18.0];
const QR_LIGHT: [f64; 3] = [236.0, 236.0, 236.0];

/// A white rectangle rotated about its center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NestParams {
    pub center: (f64, f64),
    pub size: (f64, f64),
    #[serde(default)]
    pub rotation_deg: f64,
}

/// An axis-aligned square checkerboard marker of `cells × cells` modules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QrParams {
    pub center: (f64, f64),
    pub side: f64,
    pub cells: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub width: usize,
    pub height: usize,
    /// Footprint `[x, y, w, h]` of the dark roof.
    pub house: Option<[f64; 4]>,
    pub nest: Option<NestParams>,
    pub qr: Option<QrParams>,
    pub illumination: f64,
    pub blur_radius: usize,
    /// Standard deviation of per-pixel noise, in units of full scale.
    pub noise: f64,
    pub seed: u64,
}

impl SceneParams {
    /// House, nest and marker laid out around the frame center.
    pub fn centered(size: usize, seed: u64) -> Self {
        let s = size as f64;
        let c = s / 2.0;
        let nest = (s * 0.2).round();
        let qr = (s * 0.1).round().max(4.0);
        Self {
            width: size,
            height: size,
            house: Some([(s * 0.15).round(), (s * 0.2).round(), (s * 0.7).round(), (s * 0.6).round()]),
            nest: Some(NestParams { center: (c, c), size: (nest, nest), rotation_deg: 0.0 }),
            qr: Some(QrParams { center: (c + nest / 2.0 + qr, c), side: qr, cells: 4 }),
            illumination: 1.0,
            blur_radius: 0,
            noise: 0.02,
            seed,
        }
    }

    /// Randomized layout for training data; every draw is valid.
    pub fn random<R: Rng>(size: usize, rng: &mut R) -> Self {
        let s = size as f64;
        loop {
            let hw = (s * rng.random_range(0.55..0.85)).round();
            let hh = (s * rng.random_range(0.55..0.85)).round();
            let hx = rng.random_range(0.0..=(s - hw)).round();
            let hy = rng.random_range(0.0..=(s - hh)).round();
            let nw = (s * rng.random_range(0.18..0.3)).round();
            let nh = (s * rng.random_range(0.18..0.3)).round();
            let nx = rng.random_range(hx + 1.0..(hx + hw - nw - 1.0).max(hx + 1.5)).round();
            let ny = rng.random_range(hy + 1.0..(hy + hh - nh - 1.0).max(hy + 1.5)).round();
            let nest = NestParams { center: (nx + nw / 2.0, ny + nh / 2.0), size: (nw, nh), rotation_deg: 0.0 };
            let qside = (s * rng.random_range(0.12..0.18)).round().max(4.0);
            let qr = rng.random_bool(0.7).then(|| QrParams {
                center: (rng.random_range(qside..s - qside).round(), rng.random_range(qside..s - qside).round()),
                side: qside,
                cells: 4,
            });
            let p = Self {
                width: size,
                height: size,
                house: Some([hx, hy, hw, hh]),
                nest: Some(nest),
                qr,
                illumination: rng.random_range(0.6..1.2),
                blur_radius: 0,
                noise: 0.02,
                seed: rng.random(),
            };
            let nest_box = BBox::new(nx, ny, nx + nw, ny + nh);
            let clear = p.qr.as_ref().is_none_or(|q| qr_box(q).intersection(&nest_box) == 0.0);
            if clear && p.validate().is_ok() {
                return p;
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Geometry(m));
        if self.width == 0 || self.height == 0 {
            return fail("empty frame".into());
        }
        if !(self.illumination > 0.0) || !(self.noise >= 0.0) {
            return fail(format!("illumination {} and noise {} out of range", self.illumination, self.noise));
        }
        let (w, h) = (self.width as f64, self.height as f64);
        let in_frame = |b: &BBox| b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= w && b.y2 <= h;
        if let Some(b) = self.house_box() {
            if !(b.width() > 0.0 && b.height() > 0.0) || !in_frame(&b) {
                return fail("house outside the frame".into());
            }
        }
        if let Some(n) = &self.nest {
            if !(n.size.0 > 0.0 && n.size.1 > 0.0) {
                return fail("nest has no area".into());
            }
            let corners = nest_corners(n);
            let env = BBox::new(
                corners.iter().map(|c| c.0).fold(f64::INFINITY, f64::min),
                corners.iter().map(|c| c.1).fold(f64::INFINITY, f64::min),
                corners.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max),
                corners.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max),
            );
            if !in_frame(&env) {
                return fail("nest outside the frame".into());
            }
            if let Some(house) = self.house_box() {
                if !corners.iter().all(|&(x, y)| x >= house.x1 && x <= house.x2 && y >= house.y1 && y <= house.y2) {
                    return fail("nest does not lie on the house".into());
                }
            }
        }
        if let Some(q) = &self.qr {
            if !(q.side > 0.0) || q.cells == 0 || !in_frame(&qr_box(q)) {
                return fail("marker outside the frame".into());
            }
        }
        Ok(())
    }

    fn house_box(&self) -> Option<BBox> {
        self.house.map(|[x, y, w, h]| BBox::new(x, y, x + w, y + h))
    }
}

fn nest_corners(n: &NestParams) -> [(f64, f64); 4] {
    let (s, c) = n.rotation_deg.to_radians().sin_cos();
    let (hw, hh) = (n.size.0 / 2.0, n.size.1 / 2.0);
    [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)].map(|(u, v)| (n.center.0 + u * c - v * s, n.center.1 + u * s + v * c))
}

fn qr_box(q: &QrParams) -> BBox {
    BBox::from_cxcywh(q.center.0, q.center.1, q.side, q.side)
}

/// Pixels whose centers fall in the rotated rectangle, half-open along both
/// of its axes.
fn nest_mask(n: &NestParams, width: usize, height: usize) -> BinaryMask {
    let (s, c) = n.rotation_deg.to_radians().sin_cos();
    let (hw, hh) = (n.size.0 / 2.0, n.size.1 / 2.0);
    let mut m = BinaryMask::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let (dx, dy) = (x as f64 + 0.5 - n.center.0, y as f64 + 0.5 - n.center.1);
            let u = dx * c + dy * s;
            let v = -dx * s + dy * c;
            if u >= -hw && u < hw && v >= -hh && v < hh {
                m.set(x, y, true);
            }
        }
    }
    m
}

fn box_mask(b: &BBox, width: usize, height: usize) -> BinaryMask {
    let mut m = BinaryMask::new(width, height);
    m.fill_box(b);
    m
}

/// Renders the scene and its exact annotations. The same parameters always
/// produce the same pixels.
pub fn synth_scene(params: &SceneParams) -> Result<Sample> {
    params.validate()?;
    let (w, h) = (params.width, params.height);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut px = vec![BACKGROUND; w * h];
    let mut instances = Vec::new();
    let paint = |mask: &BinaryMask, color: &dyn Fn(usize, usize) -> [f64; 3], px: &mut [[f64; 3]]| {
        for y in 0..h {
            for x in 0..w {
                if mask.get(x, y) {
                    px[y * w + x] = color(x, y);
                }
            }
        }
    };
    if let Some(b) = params.house_box() {
        let m = box_mask(&b, w, h);
        paint(&m, &|_, _| HOUSE, &mut px);
        instances.push(instance(Class::House, m)?);
    }
    let nest = params.nest.as_ref().map(|n| nest_mask(n, w, h));
    if let Some(q) = &params.qr {
        let b = qr_box(q);
        let m = box_mask(&b, w, h);
        if nest.as_ref().is_some_and(|n| n.intersection_count(&m) > 0) {
            return Err(Error::Geometry("marker overlaps the nest".into()));
        }
        let n = q.cells;
        let pattern: Vec<bool> = (0..n * n).map(|i| qr_module(i % n, i / n, n, &mut rng)).collect();
        let cell = q.side / n as f64;
        let color = |x: usize, y: usize| {
            let cx = (((x as f64 + 0.5 - b.x1) / cell) as usize).min(n - 1);
            let cy = (((y as f64 + 0.5 - b.y1) / cell) as usize).min(n - 1);
            if pattern[cy * n + cx] { QR_DARK } else { QR_LIGHT }
        };
        paint(&m, &color, &mut px);
        instances.push(instance(Class::QrCode, m)?);
    }
    if let Some(m) = nest {
        paint(&m, &|_, _| NEST, &mut px);
        instances.insert(0, instance(Class::Nest, m)?);
    }
    for p in px.iter_mut() {
        for v in p.iter_mut() {
            *v *= params.illumination;
        }
    }
    box_blur(&mut px, w, h, params.blur_radius);
    let noise = Normal::new(0.0, params.noise * 255.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut image = RgbImage::new(w as u32, h as u32);
    for (i, p) in px.iter().enumerate() {
        let mut out = [0u8; 3];
        for c in 0..3 {
            let n = if params.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            out[c] = (p[c] + n).round().clamp(0.0, 255.0) as u8;
        }
        image.put_pixel((i % w) as u32, (i / w) as u32, Rgb(out));
    }
    let sample = Sample { image, instances };
    sample.validate()?;
    Ok(sample)
}

/// Corner modules are dark like finder patterns; the rest are random.
fn qr_module(x: usize, y: usize, n: usize, rng: &mut ChaCha8Rng) -> bool {
    let corner = (x == 0 || x == n - 1) && (y == 0 || y == n - 1);
    let bit = rng.random_bool(0.5);
    corner || bit
}

fn instance(class: Class, mask: BinaryMask) -> Result<Instance> {
    let bbox = mask
        .bounding_box()
        .ok_or_else(|| Error::Geometry(format!("{} covers no pixel", class.name())))?;
    Ok(Instance { class, bbox, mask })
}

fn box_blur(px: &mut [[f64; 3]], w: usize, h: usize, r: usize) {
    if r == 0 {
        return;
    }
    let pass = |src: &[[f64; 3]], horizontal: bool| -> Vec<[f64; 3]> {
        let mut out = vec![[0.0; 3]; src.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 3];
                for d in -(r as isize)..=(r as isize) {
                    let (sx, sy) = if horizontal {
                        ((x as isize + d).clamp(0, w as isize - 1) as usize, y)
                    } else {
                        (x, (y as isize + d).clamp(0, h as isize - 1) as usize)
                    };
                    let s = src[sy * w + sx];
                    for c in 0..3 {
                        acc[c] += s[c];
                    }
                }
                out[y * w + x] = acc.map(|v| v / (2 * r + 1) as f64);
            }
        }
        out
    };
    let tmp = pass(px, true);
    px.copy_from_slice(&pass(&tmp, false));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warning::{decide, DeviationPolicy};

    #[test]
    fn deterministic_per_seed() {
        let p = SceneParams::centered(96, 11);
        let a = synth_scene(&p).unwrap();
        assert_eq!(a, synth_scene(&p).unwrap());
        let b = synth_scene(&SceneParams { seed: 12, ..p }).unwrap();
        assert_ne!(a.image, b.image);
    }

    #[test]
    fn centered_nest_is_on_course() {
        let s = synth_scene(&SceneParams::centered(640, 0)).unwrap();
        let nest = &s.instances[0];
        assert_eq!(nest.class, Class::Nest);
        assert_eq!(nest.mask.centroid(), Some((320.0, 320.0)));
        let e = decide(&s.oracle_observation(0.0), &DeviationPolicy::default());
        assert!(!e.deviating);
        assert_eq!(e.d, Some(0.0));
    }

    #[test]
    fn rotation_preserves_area() {
        let mut p = SceneParams::centered(200, 3);
        p.qr = None;
        p.nest = Some(NestParams { center: (100.0, 100.0), size: (60.0, 30.0), rotation_deg: 0.0 });
        let flat = synth_scene(&p).unwrap().instances[0].clone();
        p.nest.as_mut().unwrap().rotation_deg = 45.0;
        let turned = synth_scene(&p).unwrap().instances[0].clone();
        assert_eq!(flat.mask.area(), 1800);
        assert!((flat.bbox.width() / flat.bbox.height() - 2.0).abs() < 1e-12);
        // Extent of a 60×30 rectangle at 45°: (60 + 30)/√2 on both axes.
        let extent = 90.0 / 2f64.sqrt();
        assert!((turned.bbox.width() - extent).abs() <= 2.0 && (turned.bbox.height() - extent).abs() <= 2.0);
        let rel = (turned.mask.area() as f64 - 1800.0).abs() / 1800.0;
        assert!(rel < 0.02, "area {} vs 1800", turned.mask.area());
    }

    #[test]
    fn boxes_contain_masks_and_bad_geometry_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let s = synth_scene(&SceneParams::random(64, &mut rng)).unwrap();
            s.validate().unwrap();
            assert!(s.instances.iter().any(|i| i.class == Class::Nest));
        }
        let mut p = SceneParams::centered(64, 0);
        p.nest.as_mut().unwrap().center = (70.0, 32.0);
        assert!(synth_scene(&p).is_err());
        let mut p = SceneParams::centered(64, 0);
        p.qr.as_mut().unwrap().center = (32.0, 32.0);
        assert!(synth_scene(&p).is_err());
    }

    #[test]
    fn illumination_and_blur_change_pixels_only() {
        let p = SceneParams::centered(64, 9);
        let base = synth_scene(&p).unwrap();
        let dark = synth_scene(&SceneParams { illumination: 0.3, blur_radius: 2, ..p }).unwrap();
        assert_eq!(base.instances, dark.instances);
        let mean = |s: &Sample| s.image.pixels().map(|p| p.0[0] as f64).sum::<f64>();
        assert!(mean(&dark) < 0.5 * mean(&base));
    }
}
