//! Evaluation metrics: warning delay, episode accuracy and false-positive
//! rate, mask IoU, box AP and precision/recall/F1.

use std::fmt::Write as _;

use crate::geometry::{BBox, BinaryMask};
use crate::model::DetectionBox;

/// Ground truth and system output of one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeOutcome {
    pub id: String,
    /// Actual deviation onset, absent if the episode never deviates.
    pub onset: Option<f64>,
    /// First warning timestamp, absent if the system never warned.
    pub warning: Option<f64>,
}

impl EpisodeOutcome {
    pub fn delay(&self) -> Option<f64> {
        Some((self.onset? - self.warning?).abs())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AwdReport {
    /// Mean `|T − P|` over the included episodes; absent when none qualify.
    pub value: Option<f64>,
    pub included: usize,
    /// Episodes lacking an onset or a warning.
    pub excluded: Vec<String>,
}

pub fn awd(outcomes: &[EpisodeOutcome]) -> AwdReport {
    let (mut sum, mut n, mut excluded) = (0.0, 0, Vec::new());
    for o in outcomes {
        match o.delay() {
            Some(d) => {
                sum += d;
                n += 1;
            }
            None => excluded.push(o.id.clone()),
        }
    }
    AwdReport { value: (n > 0).then(|| sum / n as f64), included: n, excluded }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarningRates {
    pub acc: Option<f64>,
    pub fpr: Option<f64>,
}

/// An episode is labelled deviating iff it has an onset and classified
/// deviating iff the system warned.
pub fn warning_rates(outcomes: &[EpisodeOutcome]) -> WarningRates {
    let correct = outcomes.iter().filter(|o| o.onset.is_some() == o.warning.is_some()).count();
    let negatives: Vec<&EpisodeOutcome> = outcomes.iter().filter(|o| o.onset.is_none()).collect();
    let false_alarms = negatives.iter().filter(|o| o.warning.is_some()).count();
    WarningRates {
        acc: (!outcomes.is_empty()).then(|| correct as f64 / outcomes.len() as f64),
        fpr: (!negatives.is_empty()).then(|| false_alarms as f64 / negatives.len() as f64),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouReport {
    /// Per class; absent when the class occurs in neither prediction nor
    /// ground truth.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes present in the ground truth.
    pub miou: Option<f64>,
}

/// Class IoU accumulated over all images: `Σ|P∩G| / Σ|P∪G|`. Each image
/// supplies one mask per class.
pub fn iou_miou(preds: &[Vec<BinaryMask>], gts: &[Vec<BinaryMask>], classes: usize) -> IouReport {
    let mut per_class = Vec::with_capacity(classes);
    let mut present = Vec::new();
    for c in 0..classes {
        let (mut inter, mut union, mut gt_pixels) = (0usize, 0usize, 0usize);
        for (p, g) in preds.iter().zip(gts) {
            inter += p[c].intersection_count(&g[c]);
            union += p[c].union_count(&g[c]);
            gt_pixels += g[c].area();
        }
        let iou = (union > 0).then(|| inter as f64 / union as f64);
        if gt_pixels > 0 {
            present.push(iou.unwrap_or(0.0));
        }
        per_class.push(iou);
    }
    IouReport { per_class, miou: mean(&present) }
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// A ground-truth box with its class index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtObject {
    pub class: usize,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchConfig {
    pub iou_thresholds: Vec<f64>,
}

impl Default for MatchConfig {
    /// 0.50, 0.55, …, 0.95.
    fn default() -> Self {
        Self { iou_thresholds: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect() }
    }
}

/// Greedy matching within one image: predictions in descending score order
/// each take the unmatched ground truth of highest IoU (lowest index on
/// ties) if that IoU reaches the threshold. Returns, per prediction, the
/// matched ground-truth index.
pub fn greedy_match(preds: &[BBox], scores: &[f64], gts: &[BBox], threshold: f64) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut taken = vec![false; gts.len()];
    let mut out = vec![None; preds.len()];
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let iou = preds[i].iou(g);
            if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            out[i] = Some(j);
        }
    }
    out
}

/// Exact area under the precision envelope for score-ordered TP flags.
pub fn average_precision(tp_in_score_order: &[bool], total_gt: usize) -> f64 {
    if total_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp_in_score_order.len());
    let mut recall = Vec::with_capacity(tp_in_score_order.len());
    let mut tp = 0usize;
    for (i, &hit) in tp_in_score_order.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / total_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapReport {
    pub thresholds: Vec<f64>,
    /// `ap[t][c]`, absent for classes with neither predictions nor ground truth.
    pub ap: Vec<Vec<Option<f64>>>,
    /// Mean over classes, per threshold.
    pub map: Vec<Option<f64>>,
    pub map50_95: Option<f64>,
}

impl MapReport {
    pub fn map_at(&self, threshold: f64) -> Option<f64> {
        self.thresholds.iter().position(|t| (t - threshold).abs() < 1e-9).and_then(|i| self.map[i])
    }
}

/// AP of one class at one threshold over a set of images.
pub fn class_ap(preds: &[Vec<DetectionBox>], gts: &[Vec<GtObject>], class: usize, threshold: f64) -> Option<f64> {
    let mut hits: Vec<(f64, usize, usize, bool)> = Vec::new();
    let mut total_gt = 0;
    for (img, (p, g)) in preds.iter().zip(gts).enumerate() {
        let pc: Vec<&DetectionBox> = p.iter().filter(|d| d.class.index() == class).collect();
        let gc: Vec<BBox> = g.iter().filter(|o| o.class == class).map(|o| o.bbox).collect();
        total_gt += gc.len();
        let boxes: Vec<BBox> = pc.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = pc.iter().map(|d| d.score).collect();
        let m = greedy_match(&boxes, &scores, &gc, threshold);
        for (i, d) in pc.iter().enumerate() {
            hits.push((d.score, img, i, m[i].is_some()));
        }
    }
    if hits.is_empty() && total_gt == 0 {
        return None;
    }
    hits.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let flags: Vec<bool> = hits.iter().map(|h| h.3).collect();
    Some(average_precision(&flags, total_gt))
}

pub fn bbox_map(preds: &[Vec<DetectionBox>], gts: &[Vec<GtObject>], classes: usize, cfg: &MatchConfig) -> MapReport {
    let ap: Vec<Vec<Option<f64>>> = cfg
        .iou_thresholds
        .iter()
        .map(|&t| (0..classes).map(|c| class_ap(preds, gts, c, t)).collect())
        .collect();
    let map: Vec<Option<f64>> = ap.iter().map(|row| mean(&row.iter().flatten().copied().collect::<Vec<_>>())).collect();
    let map50_95 = if map.iter().all(Option::is_some) { mean(&map.iter().flatten().copied().collect::<Vec<_>>()) } else { None };
    MapReport { thresholds: cfg.iou_thresholds.clone(), ap, map, map50_95 }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prf1 {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

impl Prf1 {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            (Some(_), Some(_)) => Some(0.0),
            _ => None,
        };
        Self { tp, fp, fn_, precision, recall, f1 }
    }
}

/// Counts over all images and classes with per-class greedy matching.
pub fn prf1(preds: &[Vec<DetectionBox>], gts: &[Vec<GtObject>], classes: usize, iou_threshold: f64) -> Prf1 {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in preds.iter().zip(gts) {
        for c in 0..classes {
            let pc: Vec<&DetectionBox> = p.iter().filter(|d| d.class.index() == c).collect();
            let gc: Vec<BBox> = g.iter().filter(|o| o.class == c).map(|o| o.bbox).collect();
            let boxes: Vec<BBox> = pc.iter().map(|d| d.bbox).collect();
            let scores: Vec<f64> = pc.iter().map(|d| d.score).collect();
            let matched = greedy_match(&boxes, &scores, &gc, iou_threshold).iter().filter(|m| m.is_some()).count();
            tp += matched;
            fp += pc.len() - matched;
            fn_ += gc.len() - matched;
        }
    }
    Prf1::from_counts(tp, fp, fn_)
}

/// `key=value` lines; absent values are written as `absent`.
pub fn format_report(entries: &[(String, Option<f64>)]) -> String {
    let mut s = String::new();
    for (k, v) in entries {
        match v {
            Some(v) => writeln!(s, "{k}={v}").expect("string write"),
            None => writeln!(s, "{k}=absent").expect("string write"),
        }
    }
    s
}

pub const EPISODE_TABLE_HEADER: &str = "episode,onset,warning,delay,deviating,warned,processed_frames,frame_errors";

/// Comma-separated per-episode table with a fixed header row. `extra`
/// carries the processed-frame count and decision errors per episode.
pub fn format_episode_table(outcomes: &[EpisodeOutcome], extra: &[(usize, usize)]) -> String {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| v.to_string());
    let mut s = format!("{EPISODE_TABLE_HEADER}\n");
    for (o, (frames, errors)) in outcomes.iter().zip(extra) {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            o.id,
            opt(o.onset),
            opt(o.warning),
            opt(o.delay()),
            o.onset.is_some() as u8,
            o.warning.is_some() as u8,
            frames,
            errors
        )
        .expect("string write");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Class;
    use proptest::prelude::*;

    fn ep(id: &str, onset: Option<f64>, warning: Option<f64>) -> EpisodeOutcome {
        EpisodeOutcome { id: id.into(), onset, warning }
    }

    #[test]
    fn awd_examples() {
        assert_eq!(awd(&[ep("a", Some(2.0), Some(2.0))]).value, Some(0.0));
        let r = awd(&[ep("a", Some(5.0), Some(5.4)), ep("b", Some(9.0), Some(9.8)), ep("c", None, Some(1.0))]);
        assert!((r.value.unwrap() - 0.6).abs() < 1e-12);
        assert_eq!((r.included, r.excluded.clone()), (2, vec!["c".to_string()]));
        assert!((awd(&[ep("a", Some(10.0), Some(10.7))]).value.unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(awd(&[]).value, None);
    }

    #[test]
    fn rate_examples() {
        let all = [ep("a", Some(1.0), Some(1.0)), ep("b", None, None)];
        assert_eq!(warning_rates(&all), WarningRates { acc: Some(1.0), fpr: Some(0.0) });
        // 6 deviating all warned, 4 non-deviating with one false alarm.
        let mut v: Vec<EpisodeOutcome> = (0..6).map(|i| ep(&i.to_string(), Some(1.0), Some(1.1))).collect();
        v.push(ep("x", None, Some(2.0)));
        v.extend((0..3).map(|i| ep(&format!("n{i}"), None, None)));
        let r = warning_rates(&v);
        assert!((r.acc.unwrap() - 0.9).abs() < 1e-12 && (r.fpr.unwrap() - 0.25).abs() < 1e-12);
        let warn_all: Vec<EpisodeOutcome> = (0..4).map(|i| ep("w", (i < 2).then_some(1.0), Some(1.0))).collect();
        assert_eq!(warning_rates(&warn_all), WarningRates { acc: Some(0.5), fpr: Some(1.0) });
        assert_eq!(warning_rates(&[ep("a", Some(1.0), None)]).fpr, None);
    }

    #[test]
    fn iou_examples() {
        let mut a = BinaryMask::new(20, 10);
        a.fill_box(&BBox::new(0.0, 0.0, 10.0, 10.0));
        let mut b = BinaryMask::new(20, 10);
        b.fill_box(&BBox::new(5.0, 0.0, 15.0, 10.0));
        let empty = BinaryMask::new(20, 10);
        let r = iou_miou(&[vec![a.clone(), empty.clone()]], &[vec![b, empty.clone()]], 2);
        assert!((r.per_class[0].unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.per_class[1], None);
        assert!((r.miou.unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let same = iou_miou(&[vec![a.clone()]], &[vec![a]], 1);
        assert_eq!(same.miou, Some(1.0));
        let m = mean(&[0.963, 0.864, 0.762]).unwrap();
        assert!((m - 0.863).abs() < 5e-4);
    }

    fn det(class: Class, score: f64, bbox: BBox) -> DetectionBox {
        DetectionBox { class, score, bbox }
    }

    #[test]
    fn ap_trivial_cases() {
        let g = vec![vec![GtObject { class: 0, bbox: BBox::new(0.0, 0.0, 10.0, 10.0) }]];
        let exact = vec![vec![det(Class::Nest, 0.9, BBox::new(0.0, 0.0, 10.0, 10.0))]];
        assert_eq!(class_ap(&exact, &g, 0, 0.5), Some(1.0));
        // IoU 0.3 prediction.
        let weak = vec![vec![det(Class::Nest, 0.9, BBox::new(0.0, 0.0, 10.0, 3.0))]];
        assert_eq!(class_ap(&weak, &g, 0, 0.5), Some(0.0));
        assert_eq!(class_ap(&exact, &g, 1, 0.5), None);
        let report = bbox_map(&exact, &g, 3, &MatchConfig::default());
        assert_eq!(report.map50_95, Some(1.0));
        assert_eq!(report.thresholds.len(), 10);
    }

    #[test]
    fn ap_envelope_area() {
        // TP, FP, TP with 2 GT: points (0.5, 1), (0.5, 0.5), (1, 2/3).
        let ap = average_precision(&[true, false, true], 2);
        assert!((ap - (0.5 * 1.0 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn prf1_examples() {
        let r = Prf1::from_counts(8, 2, 2);
        assert!((r.precision.unwrap() - 0.8).abs() < 1e-12 && (r.recall.unwrap() - 0.8).abs() < 1e-12 && (r.f1.unwrap() - 0.8).abs() < 1e-12);
        let none = prf1(&[vec![]], &[vec![GtObject { class: 0, bbox: BBox::new(0.0, 0.0, 1.0, 1.0) }]], 3, 0.5);
        assert_eq!((none.precision, none.recall), (None, Some(0.0)));
        let g = vec![vec![GtObject { class: 2, bbox: BBox::new(0.0, 0.0, 4.0, 4.0) }]];
        let p = vec![vec![det(Class::House, 0.5, BBox::new(0.0, 0.0, 4.0, 4.0))]];
        let perfect = prf1(&p, &g, 3, 0.5);
        assert_eq!((perfect.precision, perfect.recall, perfect.f1), (Some(1.0), Some(1.0), Some(1.0)));
    }

    #[test]
    fn report_formats() {
        let s = format_report(&[("miou".into(), Some(0.5)), ("fpr".into(), None)]);
        assert_eq!(s, "miou=0.5\nfpr=absent\n");
        let t = format_episode_table(&[ep("e1", Some(3.0), Some(3.2))], &[(10, 0)]);
        let row = t.lines().nth(1).unwrap();
        assert!(row.starts_with("e1,3,3.2,0.2"));
        assert_eq!(t.lines().next().unwrap(), EPISODE_TABLE_HEADER);
    }

    proptest! {
        #[test]
        fn awd_translation_and_permutation_invariant(
            pairs in proptest::collection::vec((0.0f64..20.0, 0.0f64..20.0), 1..10),
            shift in -5.0f64..5.0,
        ) {
            let a: Vec<EpisodeOutcome> = pairs.iter().map(|&(t, p)| ep("e", Some(t), Some(p))).collect();
            let shifted: Vec<EpisodeOutcome> = pairs.iter().map(|&(t, p)| ep("e", Some(t + shift), Some(p + shift))).collect();
            let mut rev = a.clone();
            rev.reverse();
            let base = awd(&a).value.unwrap();
            prop_assert!((awd(&shifted).value.unwrap() - base).abs() < 1e-9);
            prop_assert!((awd(&rev).value.unwrap() - base).abs() < 1e-9);
        }

        #[test]
        fn greedy_matches_brute_force(
            gts in proptest::collection::vec((0.0f64..30.0, 0.0f64..30.0, 5.0f64..20.0, 5.0f64..20.0), 0..4),
            preds in proptest::collection::vec((0.0f64..30.0, 0.0f64..30.0, 5.0f64..20.0, 5.0f64..20.0, 0.0f64..1.0), 0..5),
            threshold in 0.3f64..0.9,
        ) {
            let g: Vec<BBox> = gts.iter().map(|&(x, y, w, h)| BBox::new(x, y, x + w, y + h)).collect();
            let p: Vec<BBox> = preds.iter().map(|&(x, y, w, h, _)| BBox::new(x, y, x + w, y + h)).collect();
            let s: Vec<f64> = preds.iter().map(|t| t.4).collect();
            let greedy = greedy_match(&p, &s, &g, threshold);
            let brute = brute_force_match(&p, &s, &g, threshold);
            prop_assert_eq!(greedy, brute);
        }
    }

    /// Enumerates every one-to-one assignment and keeps the one whose IoU
    /// vector, read in score order, is lexicographically largest.
    fn brute_force_match(preds: &[BBox], scores: &[f64], gts: &[BBox], threshold: f64) -> Vec<Option<usize>> {
        let mut order: Vec<usize> = (0..preds.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        fn rec(k: usize, order: &[usize], preds: &[BBox], gts: &[BBox], thr: f64, used: &mut Vec<bool>,
               cur: &mut Vec<Option<usize>>, best: &mut Option<(Vec<f64>, Vec<Option<usize>>)>) {
            if k == order.len() {
                let key: Vec<f64> = order.iter().map(|&i| cur[i].map_or(0.0, |j| preds[i].iou(&gts[j]))).collect();
                let better = match best {
                    None => true,
                    Some((b, _)) => key.iter().zip(b.iter()).find(|(x, y)| x != y).is_some_and(|(x, y)| x > y),
                };
                if better {
                    *best = Some((key, cur.clone()));
                }
                return;
            }
            let i = order[k];
            for j in 0..gts.len() {
                if !used[j] && preds[i].iou(&gts[j]) >= thr {
                    used[j] = true;
                    cur[i] = Some(j);
                    rec(k + 1, order, preds, gts, thr, used, cur, best);
                    cur[i] = None;
                    used[j] = false;
                }
            }
            rec(k + 1, order, preds, gts, thr, used, cur, best);
        }
        let mut best = None;
        rec(0, &order, preds, gts, threshold, &mut vec![false; gts.len()], &mut vec![None; preds.len()], &mut best);
        best.map(|b| b.1).unwrap_or_default()
    }

    /// Interpolated precision at each recall step, computed directly.
    fn brute_force_ap(flags: &[bool], total_gt: usize) -> f64 {
        let points: Vec<(f64, f64)> = (1..=flags.len())
            .map(|k| {
                let tp = flags[..k].iter().filter(|&&f| f).count() as f64;
                (tp / total_gt as f64, tp / k as f64)
            })
            .collect();
        let mut ap = 0.0;
        let mut prev = 0.0;
        for &(r, _) in &points {
            if r > prev {
                let p_interp = points.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
                ap += (r - prev) * p_interp;
                prev = r;
            }
        }
        ap
    }

    #[test]
    fn mixed_case_matches_brute_force() {
        let g = vec![
            GtObject { class: 0, bbox: BBox::new(0.0, 0.0, 10.0, 10.0) },
            GtObject { class: 0, bbox: BBox::new(20.0, 0.0, 30.0, 10.0) },
            GtObject { class: 0, bbox: BBox::new(0.0, 20.0, 10.0, 30.0) },
        ];
        let p = vec![
            det(Class::Nest, 0.9, BBox::new(1.0, 0.0, 11.0, 10.0)),
            det(Class::Nest, 0.8, BBox::new(0.0, 1.0, 10.0, 11.0)),
            det(Class::Nest, 0.7, BBox::new(20.0, 2.0, 30.0, 12.0)),
            det(Class::Nest, 0.6, BBox::new(40.0, 40.0, 50.0, 50.0)),
        ];
        let boxes: Vec<BBox> = p.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = p.iter().map(|d| d.score).collect();
        let gb: Vec<BBox> = g.iter().map(|o| o.bbox).collect();
        for t in MatchConfig::default().iou_thresholds {
            let m = greedy_match(&boxes, &scores, &gb, t);
            assert_eq!(m, brute_force_match(&boxes, &scores, &gb, t));
            let flags: Vec<bool> = m.iter().map(Option::is_some).collect();
            let ap = class_ap(&[p.clone()], &[g.clone()], 0, t).unwrap();
            assert!((ap - brute_force_ap(&flags, 3)).abs() < 1e-12, "t={t}");
        }
        // At 0.5: TP, FP (GT 0 taken), TP, FP over 3 GT.
        let ap50 = class_ap(&[p], &[g], 0, 0.5).unwrap();
        assert!((ap50 - (1.0 / 3.0 + (1.0 / 3.0) * (2.0 / 3.0))).abs() < 1e-12);
    }
}
