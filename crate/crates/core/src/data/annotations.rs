//! JSON annotation files with `images`, `categories` and `annotations`
//! arrays. Boxes are `[x, y, w, h]` in pixels and each segmentation is a
//! list of polygons given as flat `[x1, y1, x2, y2, ...]` coordinate lists.

use std::collections::HashMap;
use std::path::Path;

use serde::Deserialize;

use super::{box_contains_mask, class_from_id, Instance, Sample};
use crate::error::{Error, Result};
use crate::geometry::{BBox, BinaryMask};

#[derive(Deserialize)]
struct File {
    #[serde(default)]
    images: Vec<ImageRecord>,
    #[serde(default)]
    categories: Vec<CategoryRecord>,
    #[serde(default)]
    annotations: Vec<AnnotationRecord>,
}

#[derive(Deserialize)]
struct ImageRecord {
    id: u64,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Deserialize)]
struct CategoryRecord {
    id: u64,
    #[allow(dead_code)]
    name: String,
}

#[derive(Deserialize)]
struct AnnotationRecord {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(default)]
    segmentation: Vec<Vec<f64>>,
}

/// Accepted samples in image order plus one diagnostic per rejected record.
#[derive(Debug, Default)]
pub struct AnnotationLoad {
    pub samples: Vec<Sample>,
    pub diagnostics: Vec<String>,
}

impl AnnotationLoad {
    pub fn summary(&self) -> String {
        format!("{} samples loaded, {} records rejected", self.samples.len(), self.diagnostics.len())
    }
}

/// Reads the annotation file and the images it names, resolved relative to
/// the file's directory.
pub fn load_annotations(path: &Path) -> Result<AnnotationLoad> {
    let text = std::fs::read_to_string(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    parse_annotations(&text, |name| {
        image::open(dir.join(name)).map(|i| i.to_rgb8()).map_err(|e| Error::Image(format!("{name}: {e}")))
    })
}

/// Parses annotation text, fetching each image through `open`.
pub fn parse_annotations<F>(text: &str, mut open: F) -> Result<AnnotationLoad>
where
    F: FnMut(&str) -> Result<image::RgbImage>,
{
    let file: File = serde_json::from_str(text).map_err(|e| Error::Annotation(e.to_string()))?;
    let mut out = AnnotationLoad::default();
    let known_categories: Vec<u64> = file.categories.iter().map(|c| c.id).collect();
    let mut index = HashMap::new();
    for (i, img) in file.images.iter().enumerate() {
        match open(&img.file_name) {
            Ok(pixels) if pixels.dimensions() == (img.width, img.height) => {
                index.insert(img.id, out.samples.len());
                out.samples.push(Sample { image: pixels, instances: Vec::new() });
            }
            Ok(pixels) => out.diagnostics.push(format!(
                "image {}: declared {}x{} but file is {}x{}",
                img.id,
                img.width,
                img.height,
                pixels.width(),
                pixels.height()
            )),
            Err(e) => out.diagnostics.push(format!("image record {i} (id {}): {e}", img.id)),
        }
    }
    for ann in &file.annotations {
        let Some(&slot) = index.get(&ann.image_id) else {
            out.diagnostics.push(format!("annotation {}: unknown image id {}", ann.id, ann.image_id));
            continue;
        };
        let class = match class_from_id(ann.category_id) {
            Some(c) if known_categories.is_empty() || known_categories.contains(&ann.category_id) => c,
            _ => {
                out.diagnostics.push(format!("annotation {}: unsupported category {}", ann.id, ann.category_id));
                continue;
            }
        };
        let sample = &mut out.samples[slot];
        match instance(ann, class, sample.width(), sample.height()) {
            Ok(inst) => sample.instances.push(inst),
            Err(e) => out.diagnostics.push(format!("annotation {}: {e}", ann.id)),
        }
    }
    Ok(out)
}

fn instance(ann: &AnnotationRecord, class: crate::geometry::Class, width: usize, height: usize) -> Result<Instance> {
    let [x, y, w, h] = ann.bbox;
    if !(w > 0.0 && h > 0.0) || ann.bbox.iter().any(|v| !v.is_finite()) {
        return Err(Error::Annotation(format!("degenerate box {:?}", ann.bbox)));
    }
    let bbox = BBox::new(x, y, x + w, y + h);
    let mut mask = BinaryMask::new(width, height);
    for poly in &ann.segmentation {
        mask.union_with(&rasterize_polygon(poly, width, height)?);
    }
    if !box_contains_mask(&bbox, &mask) {
        return Err(Error::Annotation("segmentation extends outside the box".into()));
    }
    Ok(Instance { class, bbox, mask })
}

/// Even-odd scanline fill: a pixel is set iff its center `(x+0.5, y+0.5)`
/// lies inside the polygon.
pub fn rasterize_polygon(coords: &[f64], width: usize, height: usize) -> Result<BinaryMask> {
    if coords.len() < 6 || coords.len() % 2 != 0 || coords.iter().any(|v| !v.is_finite()) {
        return Err(Error::Annotation(format!("invalid polygon with {} coordinates", coords.len())));
    }
    let pts: Vec<(f64, f64)> = coords.chunks(2).map(|p| (p[0], p[1])).collect();
    let twice_area: f64 = (0..pts.len())
        .map(|i| {
            let (a, b) = (pts[i], pts[(i + 1) % pts.len()]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum();
    if twice_area == 0.0 {
        return Err(Error::Annotation("polygon has zero area".into()));
    }
    let mut mask = BinaryMask::new(width, height);
    let mut xs = Vec::new();
    for row in 0..height {
        let yc = row as f64 + 0.5;
        xs.clear();
        for i in 0..pts.len() {
            let (a, b) = (pts[i], pts[(i + 1) % pts.len()]);
            if (a.1 <= yc) != (b.1 <= yc) {
                xs.push(a.0 + (yc - a.1) * (b.0 - a.0) / (b.1 - a.1));
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            let lo = ((pair[0] - 0.5).ceil().max(0.0) as usize).min(width);
            let hi = ((pair[1] - 0.5).ceil().max(0.0) as usize).min(width);
            for col in lo..hi {
                mask.set(col, row, true);
            }
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Class;
    use image::RgbImage;
    use proptest::prelude::*;

    /// Ray casting on each pixel center.
    fn inside(pts: &[(f64, f64)], x: f64, y: f64) -> bool {
        let mut c = false;
        let mut j = pts.len() - 1;
        for i in 0..pts.len() {
            let (xi, yi) = pts[i];
            let (xj, yj) = pts[j];
            if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                c = !c;
            }
            j = i;
        }
        c
    }

    fn oracle_area(coords: &[f64], w: usize, h: usize) -> usize {
        let pts: Vec<(f64, f64)> = coords.chunks(2).map(|p| (p[0], p[1])).collect();
        (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).filter(|&(x, y)| inside(&pts, x as f64 + 0.5, y as f64 + 0.5)).count()
    }

    fn fixture(cat: u64, poly: &str) -> String {
        format!(
            r#"{{"images":[{{"id":7,"file_name":"a.png","width":20,"height":16}}],
               "categories":[{{"id":1,"name":"Nest"}},{{"id":2,"name":"QRcode"}},{{"id":3,"name":"House"}},{{"id":7,"name":"Tree"}}],
               "annotations":[{{"id":1,"image_id":7,"category_id":{cat},"bbox":[2,1,14,12],"segmentation":[{poly}]}}]}}"#
        )
    }

    fn blank(_: &str) -> Result<RgbImage> {
        Ok(RgbImage::new(20, 16))
    }

    #[test]
    fn one_nest_polygon() {
        let poly = "[3.2,1.5,15.7,4.1,12.0,12.8,2.4,9.9]";
        let load = parse_annotations(&fixture(1, poly), blank).unwrap();
        assert_eq!(load.samples.len(), 1);
        assert!(load.diagnostics.is_empty(), "{:?}", load.diagnostics);
        let inst = &load.samples[0].instances[0];
        assert_eq!(inst.class, Class::Nest);
        let coords = [3.2, 1.5, 15.7, 4.1, 12.0, 12.8, 2.4, 9.9];
        assert_eq!(inst.mask.area(), oracle_area(&coords, 20, 16));
        load.samples[0].validate().unwrap();
    }

    #[test]
    fn empty_and_rejected_records() {
        let load = parse_annotations(r#"{"images":[],"categories":[],"annotations":[]}"#, blank).unwrap();
        assert!(load.samples.is_empty() && load.diagnostics.is_empty());
        let load = parse_annotations(&fixture(7, "[3,2,10,2,10,8]"), blank).unwrap();
        assert_eq!(load.samples[0].instances.len(), 0);
        assert_eq!(load.diagnostics.len(), 1);
        assert!(load.summary().contains("1 records rejected"));
        let bad_poly = parse_annotations(&fixture(1, "[3,2,10,2]"), blank).unwrap();
        assert_eq!(bad_poly.diagnostics.len(), 1);
        let dangling = r#"{"images":[],"categories":[],"annotations":[{"id":4,"image_id":9,"category_id":1,"bbox":[0,0,1,1]}]}"#;
        assert!(parse_annotations(dangling, blank).unwrap().diagnostics[0].contains("unknown image"));
        assert!(parse_annotations("{not json", blank).is_err());
    }

    #[test]
    fn loads_images_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        RgbImage::new(20, 16).save(dir.path().join("a.png")).unwrap();
        let path = dir.path().join("ann.json");
        std::fs::write(&path, fixture(3, "[2,1,16,1,16,13,2,13]")).unwrap();
        let load = load_annotations(&path).unwrap();
        assert_eq!(load.samples[0].instances[0].mask.area(), 14 * 12);
    }

    proptest! {
        #[test]
        fn scanline_matches_ray_casting(coords in proptest::collection::vec(0.0f64..24.0, 6..14)) {
            let coords = if coords.len() % 2 == 1 { &coords[..coords.len() - 1] } else { &coords[..] };
            if let Ok(m) = rasterize_polygon(coords, 24, 24) {
                prop_assert_eq!(m.area(), oracle_area(coords, 24, 24));
            }
        }
    }
}
