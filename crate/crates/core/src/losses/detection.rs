use std::f64::consts::PI;

use super::{focal_loss, FocalParams};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::model::{ModelConfig, ANCHORS_PER_SCALE, STRIDES};
use crate::tensor::{concat, Tensor};

const EPS: f64 = 1e-9;

/// A ground-truth box in input pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtBox {
    pub class: usize,
    pub bbox: BBox,
}

/// The four scalars that set the detection term weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetLossWeights {
    pub layers: usize,
    pub classes: usize,
    pub image_size: f64,
    pub model_size: f64,
}

impl DetLossWeights {
    pub fn for_config(config: &ModelConfig) -> Self {
        Self {
            layers: config.detection_layers(),
            classes: config.class_count,
            image_size: config.input_size as f64,
            model_size: config.input_size as f64,
        }
    }

    pub fn class_weight(&self) -> f64 {
        3.0 / self.layers as f64
    }

    pub fn obj_weight(&self) -> f64 {
        self.classes as f64 / self.layers as f64
    }

    pub fn box_weight(&self) -> f64 {
        (self.image_size / self.model_size).powi(2) * 3.0 / self.layers as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.classes == 0 || !(self.image_size > 0.0) || !(self.model_size > 0.0) {
            return Err(Error::InvalidArgument(format!("loss weight scalars must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// One (target, anchor, cell) pairing responsible for predicting a box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub image: usize,
    pub layer: usize,
    pub anchor: usize,
    pub gx: usize,
    pub gy: usize,
    pub target: usize,
}

/// Unweighted components and the weighted total.
#[derive(Clone, Debug)]
pub struct DetLossParts {
    pub class: Tensor,
    pub obj: Tensor,
    pub bbox: Tensor,
    pub total: Tensor,
    pub positives: usize,
}

impl DetLossParts {
    /// `w_class·L_class + w_obj·L_obj + w_box·L_box` for arbitrary weights.
    pub fn combine(&self, w_class: f64, w_obj: f64, w_box: f64) -> Result<Tensor> {
        self.class
            .mul_scalar(w_class)
            .add(&self.obj.mul_scalar(w_obj))?
            .add(&self.bbox.mul_scalar(w_box))
    }
}

/// Anchors whose width and height ratios to the target both lie in
/// `[1/4, 4]` are responsible for it, on the cell holding the target center
/// and on the nearer horizontal and vertical neighbour cells.
pub fn assign_targets(config: &ModelConfig, grids: &[(usize, usize)], targets: &[Vec<GtBox>]) -> Vec<Assignment> {
    let mut out = Vec::new();
    for (image, boxes) in targets.iter().enumerate() {
        for (layer, &(h, w)) in grids.iter().enumerate() {
            let stride = STRIDES[layer] as f64;
            for (ti, t) in boxes.iter().enumerate() {
                let (cx, cy) = t.bbox.center();
                let (tw, th) = (t.bbox.width(), t.bbox.height());
                let (fx, fy) = (cx / stride, cy / stride);
                if fx < 0.0 || fy < 0.0 || fx >= w as f64 || fy >= h as f64 {
                    continue;
                }
                let (gx, gy) = (fx.floor() as usize, fy.floor() as usize);
                let mut cells = vec![(gx, gy)];
                let nx = if fx.fract() < 0.5 { gx.checked_sub(1) } else { Some(gx + 1).filter(|&v| v < w) };
                let ny = if fy.fract() < 0.5 { gy.checked_sub(1) } else { Some(gy + 1).filter(|&v| v < h) };
                cells.extend(nx.map(|x| (x, gy)));
                cells.extend(ny.map(|y| (gx, y)));
                for (a, anchor) in config.layer_anchors(layer).iter().enumerate() {
                    let rw = tw / anchor[0];
                    let rh = th / anchor[1];
                    let ratio = rw.max(1.0 / rw).max(rh).max(1.0 / rh);
                    if ratio > 4.0 {
                        continue;
                    }
                    for &(x, y) in &cells {
                        out.push(Assignment { image, layer, anchor: a, gx: x, gy: y, target: ti });
                    }
                }
            }
        }
    }
    out
}

/// Detection objective over a batch. `raw` holds the per-layer maps
/// (`N, 3·(5+N_c), H, W`), `targets` the boxes of each image.
pub fn detection_loss(
    raw: &[Tensor],
    targets: &[Vec<GtBox>],
    config: &ModelConfig,
    weights: &DetLossWeights,
    focal: FocalParams,
) -> Result<DetLossParts> {
    weights.validate()?;
    if raw.len() != STRIDES.len() {
        return Err(Error::InvalidArgument(format!("expected {} detection maps, got {}", STRIDES.len(), raw.len())));
    }
    let nc = config.class_count;
    let per = 5 + nc;
    let n = raw[0].shape()[0];
    if targets.len() != n {
        return Err(Error::InvalidArgument(format!("{} target lists for a batch of {n}", targets.len())));
    }
    for t in targets.iter().flatten() {
        if !(t.bbox.width() > 0.0 && t.bbox.height() > 0.0) {
            return Err(Error::InvalidArgument(format!("degenerate target box {:?}", t.bbox)));
        }
        if t.class >= nc {
            return Err(Error::InvalidArgument(format!("target class {} out of range", t.class)));
        }
    }
    let mut grids = Vec::with_capacity(raw.len());
    for t in raw {
        match *t.shape() {
            [bn, c, h, w] if bn == n && c == ANCHORS_PER_SCALE * per => grids.push((h, w)),
            ref s => return Err(Error::shape("detection map", s, &[n, ANCHORS_PER_SCALE * per, 0, 0])),
        }
    }
    let assignments = assign_targets(config, &grids, targets);

    let mut obj_terms = Vec::with_capacity(raw.len());
    let (mut box_pred, mut box_gt): (Vec<[Tensor; 4]>, Vec<[Vec<f64>; 4]>) = (Vec::new(), Vec::new());
    let (mut cls_logits, mut cls_targets) = (Vec::new(), Vec::new());
    for (layer, t) in raw.iter().enumerate() {
        let (h, w) = grids[layer];
        let c = ANCHORS_PER_SCALE * per;
        let idx = |b: usize, a: usize, k: usize, y: usize, x: usize| ((b * c + a * per + k) * h + y) * w + x;

        let mut obj_idx = Vec::with_capacity(n * ANCHORS_PER_SCALE * h * w);
        for b in 0..n {
            for a in 0..ANCHORS_PER_SCALE {
                for y in 0..h {
                    for x in 0..w {
                        obj_idx.push(idx(b, a, 4, y, x));
                    }
                }
            }
        }
        let mut obj_t = vec![0.0; obj_idx.len()];
        let mine: Vec<&Assignment> = assignments.iter().filter(|s| s.layer == layer).collect();
        for s in &mine {
            obj_t[((s.image * ANCHORS_PER_SCALE + s.anchor) * h + s.gy) * w + s.gx] = 1.0;
        }
        let obj_logits = t.gather(&obj_idx)?;
        obj_terms.push(focal_loss(&obj_logits, &Tensor::new(&[obj_t.len()], obj_t)?, focal)?);

        if mine.is_empty() {
            continue;
        }
        let stride = STRIDES[layer] as f64;
        let anchors = config.layer_anchors(layer);
        let pick = |k: usize| -> Result<Tensor> { t.gather(&mine.iter().map(|s| idx(s.image, s.anchor, k, s.gy, s.gx)).collect::<Vec<_>>()) };
        let m = mine.len();
        let col = |f: &dyn Fn(&Assignment) -> f64| Tensor::new(&[m], mine.iter().map(|s| f(s)).collect()).expect("length m");
        let two_sig = |k: usize| -> Result<Tensor> { Ok(pick(k)?.sigmoid().mul_scalar(2.0)) };
        let cx = two_sig(0)?.add(&col(&|s| s.gx as f64 - 0.5))?.mul_scalar(stride);
        let cy = two_sig(1)?.add(&col(&|s| s.gy as f64 - 0.5))?.mul_scalar(stride);
        let bw = two_sig(2)?.square().mul(&col(&|s| anchors[s.anchor][0]))?;
        let bh = two_sig(3)?.square().mul(&col(&|s| anchors[s.anchor][1]))?;
        box_pred.push([cx, cy, bw, bh]);
        let gt: Vec<[f64; 4]> = mine.iter().map(|s| targets[s.image][s.target].bbox.to_cxcywh()).collect();
        box_gt.push([0, 1, 2, 3].map(|k| gt.iter().map(|g| g[k]).collect()));

        let mut ci = Vec::with_capacity(m * nc);
        let mut ct = Vec::with_capacity(m * nc);
        for s in &mine {
            let cls = targets[s.image][s.target].class;
            for k in 0..nc {
                ci.push(idx(s.image, s.anchor, 5 + k, s.gy, s.gx));
                ct.push((k == cls) as u8 as f64);
            }
        }
        cls_logits.push(t.gather(&ci)?);
        cls_targets.extend(ct);
    }

    let mut obj = obj_terms[0].clone();
    for o in &obj_terms[1..] {
        obj = obj.add(o)?;
    }
    let obj = obj.mul_scalar(1.0 / obj_terms.len() as f64);

    let (class, bbox) = if assignments.is_empty() {
        (Tensor::scalar(0.0), Tensor::scalar(0.0))
    } else {
        let cat = |k: usize| concat(&box_pred.iter().map(|p| p[k].clone()).collect::<Vec<_>>(), 0);
        let gcat = |k: usize| {
            let v: Vec<f64> = box_gt.iter().flat_map(|g| g[k].iter().copied()).collect();
            Tensor::new(&[v.len()], v)
        };
        let losses = ciou_columns([cat(0)?, cat(1)?, cat(2)?, cat(3)?], [gcat(0)?, gcat(1)?, gcat(2)?, gcat(3)?])?;
        let logits = concat(&cls_logits, 0)?;
        let class = focal_loss(&logits, &Tensor::new(&[cls_targets.len()], cls_targets)?, focal)?;
        (class, losses.mean())
    };
    let parts = DetLossParts { total: Tensor::scalar(0.0), class, obj, bbox, positives: assignments.len() };
    let total = parts.combine(weights.class_weight(), weights.obj_weight(), weights.box_weight())?;
    Ok(DetLossParts { total, ..parts })
}

/// `1 − CIoU` per row for boxes given as `[M, 4]` tensors of `(cx, cy, w, h)`.
pub fn ciou_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let m = match *pred.shape() {
        [m, 4] if gt.shape() == [m, 4] => m,
        _ => return Err(Error::shape("ciou loss", pred.shape(), gt.shape())),
    };
    let col = |t: &Tensor, k: usize| t.gather(&(0..m).map(|i| i * 4 + k).collect::<Vec<_>>());
    ciou_columns(
        [col(pred, 0)?, col(pred, 1)?, col(pred, 2)?, col(pred, 3)?],
        [col(gt, 0)?, col(gt, 1)?, col(gt, 2)?, col(gt, 3)?],
    )
}

/// CIoU between two `(cx, cy, w, h)` boxes:
/// `IoU − ρ²/c² − αv`, `v = (4/π²)(atan(w_g/h_g) − atan(w/h))²`,
/// `α = v / (1 − IoU + v)`.
pub fn ciou_value(p: [f64; 4], g: [f64; 4]) -> f64 {
    let t = |b: [f64; 4]| b.map(|v| Tensor::new(&[1], vec![v]).expect("one value"));
    let loss = ciou_columns(t(p), t(g)).expect("matching shapes");
    1.0 - loss.item()
}

fn ciou_columns(p: [Tensor; 4], g: [Tensor; 4]) -> Result<Tensor> {
    let [cx, cy, w, h] = p;
    let [gcx, gcy, gw, gh] = g;
    let (w, h) = (w.clamp_min(EPS), h.clamp_min(EPS));
    let half = |t: &Tensor| t.mul_scalar(0.5);
    let (x1, x2) = (cx.sub(&half(&w))?, cx.add(&half(&w))?);
    let (y1, y2) = (cy.sub(&half(&h))?, cy.add(&half(&h))?);
    let (gx1, gx2) = (gcx.sub(&half(&gw))?, gcx.add(&half(&gw))?);
    let (gy1, gy2) = (gcy.sub(&half(&gh))?, gcy.add(&half(&gh))?);

    let iw = x2.minimum(&gx2)?.sub(&x1.maximum(&gx1)?)?.clamp_min(0.0);
    let ih = y2.minimum(&gy2)?.sub(&y1.maximum(&gy1)?)?.clamp_min(0.0);
    let inter = iw.mul(&ih)?;
    let union = w.mul(&h)?.add(&gw.mul(&gh)?)?.sub(&inter)?.add_scalar(EPS);
    let iou = inter.div(&union)?;

    let cw = x2.maximum(&gx2)?.sub(&x1.minimum(&gx1)?)?;
    let chh = y2.maximum(&gy2)?.sub(&y1.minimum(&gy1)?)?;
    let c2 = cw.square().add(&chh.square())?.add_scalar(EPS);
    let rho2 = cx.sub(&gcx)?.square().add(&cy.sub(&gcy)?.square())?;

    let v = gw.div(&gh)?.atan().sub(&w.div(&h)?.atan())?.square().mul_scalar(4.0 / (PI * PI));
    let alpha = v.div(&iou.neg().add_scalar(1.0).add(&v)?.add_scalar(EPS))?;
    let ciou = iou.sub(&rho2.div(&c2)?)?.sub(&alpha.mul(&v)?)?;
    Ok(ciou.neg().add_scalar(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::focal_scalar;
    use crate::tensor::gradcheck::check_gradients;
    use crate::tensor::sigmoid_f64;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent scalar CIoU written directly from the corner formulas.
    fn ciou_oracle(a: [f64; 4], b: [f64; 4]) -> f64 {
        let (ax1, ax2, ay1, ay2) = (a[0] - a[2] / 2.0, a[0] + a[2] / 2.0, a[1] - a[3] / 2.0, a[1] + a[3] / 2.0);
        let (bx1, bx2, by1, by2) = (b[0] - b[2] / 2.0, b[0] + b[2] / 2.0, b[1] - b[3] / 2.0, b[1] + b[3] / 2.0);
        let inter = (ax2.min(bx2) - ax1.max(bx1)).max(0.0) * (ay2.min(by2) - ay1.max(by1)).max(0.0);
        let iou = inter / (a[2] * a[3] + b[2] * b[3] - inter);
        let c2 = (ax2.max(bx2) - ax1.min(bx1)).powi(2) + (ay2.max(by2) - ay1.min(by1)).powi(2);
        let rho2 = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
        let v = 4.0 / (PI * PI) * ((b[2] / b[3]).atan() - (a[2] / a[3]).atan()).powi(2);
        let alpha = if v == 0.0 { 0.0 } else { v / (1.0 - iou + v) };
        iou - rho2 / c2 - alpha * v
    }

    #[test]
    fn ciou_identity_and_disjoint() {
        let b = [5.0, 5.0, 10.0, 10.0];
        assert!((1.0 - ciou_value(b, b)).abs() < 1e-9);
        let far = [100.0, 100.0, 4.0, 20.0];
        assert!(1.0 - ciou_value(b, far) > 1.0);
    }

    #[test]
    fn ciou_matches_scalar_oracle() {
        let a = [5.0, 5.0, 10.0, 10.0];
        let b = [15.0, 5.0, 10.0, 10.0];
        // Touching boxes: IoU 0, ρ² = 100, c² = 20² + 10².
        assert!((ciou_oracle(a, b) - (-100.0 / 500.0)).abs() < 1e-12);
        assert!((ciou_value(a, b) - ciou_oracle(a, b)).abs() < 1e-9);
        let mut r = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            use rand::Rng;
            let mut bx = || [r.random_range(0.0..50.0), r.random_range(0.0..50.0), r.random_range(1.0..30.0), r.random_range(1.0..30.0)];
            let (p, g) = (bx(), bx());
            assert!((ciou_value(p, g) - ciou_oracle(p, g)).abs() < 1e-8);
        }
    }

    #[test]
    fn gradcheck_ciou() {
        let pred = Tensor::new(&[3, 4], vec![5.2, 5.1, 9.0, 11.0, 20.0, 8.0, 6.0, 3.0, 3.0, 4.0, 7.0, 2.5]).unwrap();
        let gt = Tensor::new(&[3, 4], vec![6.0, 4.5, 10.0, 10.0, 24.0, 9.5, 5.0, 5.0, 13.0, 2.0, 3.0, 3.0]).unwrap();
        let c = check_gradients(|v| ciou_loss(&v[0], &gt).unwrap().sum(), &[pred]);
        assert!(c.max_rel_error < 1e-4, "{c:?}");
    }

    #[test]
    fn default_weights_are_unity() {
        let w = DetLossWeights::for_config(&ModelConfig::default());
        assert_eq!((w.class_weight(), w.obj_weight(), w.box_weight()), (1.0, 1.0, 1.0));
        let w2 = DetLossWeights { image_size: 1280.0, ..w };
        assert_eq!(w2.box_weight(), 4.0);
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig { input_size: 64, ..Default::default() }
    }

    fn zero_raw(n: usize) -> Vec<Tensor> {
        STRIDES.iter().map(|s| Tensor::zeros(&[n, 24, 64 / s, 64 / s])).collect()
    }

    #[test]
    fn empty_targets_leave_only_objectness() {
        let config = tiny_config();
        let w = DetLossWeights::for_config(&config);
        let parts = detection_loss(&zero_raw(1), &[vec![]], &config, &w, FocalParams::default()).unwrap();
        assert_eq!(parts.positives, 0);
        let expected = w.obj_weight() * focal_scalar(0.5, false, FocalParams::default());
        assert!((parts.total.item() - expected).abs() < 1e-12);
    }

    #[test]
    fn assignment_uses_center_and_nearest_neighbours() {
        let config = tiny_config();
        let grids = [(8, 8), (4, 4), (2, 2)];
        // Center (21, 43) on stride 8 → cell (2, 5), fractions 0.625 and 0.375.
        let t = GtBox { class: 0, bbox: BBox::from_cxcywh(21.0, 43.0, 12.0, 14.0) };
        let a = assign_targets(&config, &grids, &[vec![t]]);
        let l0: Vec<(usize, usize, usize)> = a.iter().filter(|s| s.layer == 0).map(|s| (s.anchor, s.gx, s.gy)).collect();
        // Anchors (10,13), (16,30), (33,23) all within ratio 4 of 12×14.
        for anchor in 0..3 {
            for cell in [(2, 5), (3, 5), (2, 4)] {
                assert!(l0.contains(&(anchor, cell.0, cell.1)), "{anchor} {cell:?}");
            }
        }
        assert_eq!(l0.len(), 9);
        // (373,326) on the coarsest layer is far more than 4× the target.
        assert!(!a.iter().any(|s| s.layer == 2 && s.anchor == 2));
    }

    #[test]
    fn toy_total_equals_hand_summed_terms() {
        let config = tiny_config();
        let w = DetLossWeights::for_config(&config);
        let focal = FocalParams::default();
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let raw: Vec<Tensor> = STRIDES.iter().map(|s| Tensor::randn(&[1, 24, 64 / s, 64 / s], 0.5, &mut r)).collect();
        let t = GtBox { class: 2, bbox: BBox::from_cxcywh(36.0, 20.0, 40.0, 40.0) };
        let parts = detection_loss(&raw, &[vec![t]], &config, &w, focal).unwrap();
        let grids = [(8, 8), (4, 4), (2, 2)];
        let assigned = assign_targets(&config, &grids, &[vec![t]]);
        assert_eq!(parts.positives, assigned.len());

        let val = |layer: usize, ch: usize, y: usize, x: usize| {
            let (h, wd) = grids[layer];
            raw[layer].data()[(ch * h + y) * wd + x]
        };
        let (mut obj_sum, mut cls_sum, mut box_sum) = (0.0, 0.0, 0.0);
        for (layer, &(h, wd)) in grids.iter().enumerate() {
            let mut layer_sum = 0.0;
            for a in 0..3 {
                for y in 0..h {
                    for x in 0..wd {
                        let pos = assigned.iter().any(|s| s.layer == layer && s.anchor == a && s.gx == x && s.gy == y);
                        layer_sum += focal_scalar(sigmoid_f64(val(layer, a * 8 + 4, y, x)), pos, focal);
                    }
                }
            }
            obj_sum += layer_sum / (3 * h * wd) as f64;
        }
        for s in &assigned {
            let stride = STRIDES[s.layer] as f64;
            let anchor = config.layer_anchors(s.layer)[s.anchor];
            let sg = |k: usize| 2.0 * sigmoid_f64(val(s.layer, s.anchor * 8 + k, s.gy, s.gx));
            let p = [(sg(0) - 0.5 + s.gx as f64) * stride, (sg(1) - 0.5 + s.gy as f64) * stride, sg(2).powi(2) * anchor[0], sg(3).powi(2) * anchor[1]];
            box_sum += 1.0 - ciou_oracle(p, t.bbox.to_cxcywh());
            for k in 0..3 {
                cls_sum += focal_scalar(sigmoid_f64(val(s.layer, s.anchor * 8 + 5 + k, s.gy, s.gx)), k == 2, focal);
            }
        }
        let n = assigned.len() as f64;
        let expected = w.class_weight() * cls_sum / (3.0 * n) + w.obj_weight() * obj_sum / 3.0 + w.box_weight() * box_sum / n;
        assert!((parts.total.item() - expected).abs() < 1e-9, "{} vs {expected}", parts.total.item());

        // Doubling one weight adds exactly one more copy of its term.
        let doubled = parts.combine(2.0 * w.class_weight(), w.obj_weight(), w.box_weight()).unwrap();
        let diff = doubled.item() - parts.total.item();
        assert!((diff - w.class_weight() * parts.class.item()).abs() < 1e-12);
    }

    #[test]
    fn gradcheck_detection_loss() {
        let config = tiny_config();
        let w = DetLossWeights::for_config(&config);
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let raw: Vec<Tensor> = STRIDES.iter().map(|s| Tensor::randn(&[1, 24, 64 / s, 64 / s], 0.5, &mut r)).collect();
        let t = vec![vec![GtBox { class: 0, bbox: BBox::from_cxcywh(30.0, 27.0, 18.0, 22.0) }]];
        let c = crate::tensor::gradcheck::check_gradients_sampled(
            |v| detection_loss(v, &t, &config, &w, FocalParams::default()).unwrap().total,
            &raw,
            40,
            &mut r,
        );
        assert!(c.max_rel_error < 1e-4, "{c:?}");
    }
}
