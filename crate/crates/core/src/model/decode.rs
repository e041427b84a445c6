use super::{Model, RawPredictions, ANCHORS_PER_SCALE, STRIDES};
use crate::error::{Error, Result};
use crate::geometry::{BBox, BinaryMask, Class};
use crate::tensor::{resize_bilinear, sigmoid_f64, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectionBox {
    pub class: Class,
    pub score: f64,
    pub bbox: BBox,
}

/// Binary mask of one detected instance, cropped to its box.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMask {
    pub class: Class,
    pub score: f64,
    pub bbox: BBox,
    pub mask: BinaryMask,
    /// The box lies entirely outside the frame, so the mask is empty.
    pub outside: bool,
}

pub type MaskSet = Vec<InstanceMask>;

/// Decodes one anchor's box logits `(tx, ty, tw, th)` at grid cell
/// `(gx, gy)` into `(cx, cy, w, h)` in input pixels.
pub fn decode_cell(t: [f64; 4], gx: usize, gy: usize, stride: f64, anchor: [f64; 2]) -> [f64; 4] {
    let cx = (2.0 * sigmoid_f64(t[0]) - 0.5 + gx as f64) * stride;
    let cy = (2.0 * sigmoid_f64(t[1]) - 0.5 + gy as f64) * stride;
    let w = (2.0 * sigmoid_f64(t[2])).powi(2) * anchor[0];
    let h = (2.0 * sigmoid_f64(t[3])).powi(2) * anchor[1];
    [cx, cy, w, h]
}

/// Inverse of [`decode_cell`]. `None` when the box cannot be produced from
/// this cell and anchor (center offset outside (−0.5, 1.5) cells, or size
/// outside (0, 4)× the anchor).
pub fn encode_box(b: [f64; 4], gx: usize, gy: usize, stride: f64, anchor: [f64; 2]) -> Option<[f64; 4]> {
    let logit = |p: f64| (p > 0.0 && p < 1.0).then(|| (p / (1.0 - p)).ln());
    Some([
        logit((b[0] / stride - gx as f64 + 0.5) / 2.0)?,
        logit((b[1] / stride - gy as f64 + 0.5) / 2.0)?,
        logit((b[2] / anchor[0]).sqrt() / 2.0)?,
        logit((b[3] / anchor[1]).sqrt() / 2.0)?,
    ])
}

/// Index of the anchor whose box, centered on the target, has the highest
/// IoU with a `w × h` target. Ties go to the lowest index.
pub fn best_anchor(w: f64, h: f64, anchors: &[[f64; 2]]) -> usize {
    let iou = |a: &[f64; 2]| {
        let inter = w.min(a[0]) * h.min(a[1]);
        inter / (w * h + a[0] * a[1] - inter)
    };
    let mut best = 0;
    for (i, a) in anchors.iter().enumerate() {
        if iou(a) > iou(&anchors[best]) {
            best = i;
        }
    }
    best
}

/// Per-class greedy non-maximum suppression. The result is sorted by score,
/// highest first; equal scores keep their input order.
pub fn nms(mut boxes: Vec<DetectionBox>, iou_threshold: f64) -> Vec<DetectionBox> {
    boxes.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<DetectionBox> = Vec::new();
    for b in boxes {
        if kept.iter().all(|k| k.class != b.class || k.bbox.iou(&b.bbox) <= iou_threshold) {
            kept.push(b);
        }
    }
    kept
}

impl Model {
    /// Candidate boxes of every image in the batch, thresholded on
    /// `objectness × best class probability` and passed through NMS.
    pub fn decode_detections(&self, raw: &RawPredictions, conf_threshold: f64, nms_iou: f64) -> Result<Vec<Vec<DetectionBox>>> {
        check_unit("confidence threshold", conf_threshold)?;
        check_unit("NMS IoU threshold", nms_iou)?;
        let nc = self.config.class_count;
        let per = 5 + nc;
        let size = raw.input_size as f64;
        let mut out = Vec::with_capacity(raw.batch());
        for b in 0..raw.batch() {
            let mut cands = Vec::new();
            for (layer, t) in raw.detection.iter().enumerate() {
                let (c, h, w) = (t.shape()[1], t.shape()[2], t.shape()[3]);
                let data = &t.data()[b * c * h * w..(b + 1) * c * h * w];
                let at = |ch: usize, y: usize, x: usize| data[(ch * h + y) * w + x];
                let stride = STRIDES[layer] as f64;
                for (a, anchor) in self.config.layer_anchors(layer).iter().enumerate().take(ANCHORS_PER_SCALE) {
                    let base = a * per;
                    for gy in 0..h {
                        for gx in 0..w {
                            let obj = sigmoid_f64(at(base + 4, gy, gx));
                            let (mut cls, mut p) = (0, f64::NEG_INFINITY);
                            for k in 0..nc {
                                let v = at(base + 5 + k, gy, gx);
                                if v > p {
                                    (cls, p) = (k, v);
                                }
                            }
                            let score = obj * sigmoid_f64(p);
                            if score < conf_threshold {
                                continue;
                            }
                            let tb = [at(base, gy, gx), at(base + 1, gy, gx), at(base + 2, gy, gx), at(base + 3, gy, gx)];
                            let [cx, cy, bw, bh] = decode_cell(tb, gx, gy, stride, *anchor);
                            let Some(class) = Class::from_index(cls) else { continue };
                            cands.push(DetectionBox {
                                class,
                                score,
                                bbox: BBox::from_cxcywh(cx, cy, bw, bh).clip(size, size),
                            });
                        }
                    }
                }
            }
            out.push(nms(cands, nms_iou));
        }
        Ok(out)
    }

    /// Per-class foreground maps of one image at input resolution.
    pub fn class_masks(&self, raw: &RawPredictions, image: usize) -> Result<Vec<BinaryMask>> {
        class_masks(&raw.seg_logits, image, raw.input_size)
    }

    /// Instance masks of one image: the foreground map of each box's class,
    /// cleared outside the box.
    pub fn decode_masks(&self, raw: &RawPredictions, image: usize, boxes: &[DetectionBox]) -> Result<MaskSet> {
        let maps = self.class_masks(raw, image)?;
        Ok(crop_instances(&maps, boxes))
    }
}

/// Thresholds bilinearly upsampled logits of one image at zero
/// (probability 0.5).
pub fn class_masks(seg_logits: &Tensor, image: usize, size: usize) -> Result<Vec<BinaryMask>> {
    let s = seg_logits.shape();
    if s.len() != 4 || image >= s[0] {
        return Err(Error::InvalidArgument(format!("no image {image} in mask logits of shape {s:?}")));
    }
    let plane = s[1] * s[2] * s[3];
    let one = Tensor::new(&[1, s[1], s[2], s[3]], seg_logits.data()[image * plane..(image + 1) * plane].to_vec())?;
    let up = resize_bilinear(&one, size, size)?;
    Ok(up
        .data()
        .chunks(size * size)
        .map(|c| BinaryMask { width: size, height: size, bits: c.iter().map(|&v| v > 0.0).collect() })
        .collect())
}

pub(crate) fn crop_instances(maps: &[BinaryMask], boxes: &[DetectionBox]) -> MaskSet {
    boxes
        .iter()
        .map(|d| {
            let frame = &maps[d.class.index()];
            let (w, h) = (frame.width as f64, frame.height as f64);
            let outside = d.bbox.x2 <= 0.0 || d.bbox.y2 <= 0.0 || d.bbox.x1 >= w || d.bbox.y1 >= h;
            let mask = if outside { BinaryMask::new(frame.width, frame.height) } else { frame.crop(&d.bbox) };
            InstanceMask { class: d.class, score: d.score, bbox: d.bbox, mask, outside }
        })
        .collect()
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} {v} outside [0, 1]")))
    }
}
