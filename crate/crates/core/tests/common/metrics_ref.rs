//! Slow, literal evaluation used as an oracle for the metrics module.

use std::cmp::Ordering;

use gazeteach::geometry::Roi2D;
use gazeteach::metrics::{Detection, GroundTruth};
use proptest::prelude::*;

pub fn ref_iou(a: &Roi2D, b: &Roi2D) -> f64 {
    let x0 = if a.x_min > b.x_min { a.x_min } else { b.x_min };
    let y0 = if a.y_min > b.y_min { a.y_min } else { b.y_min };
    let x1 = if a.x_max < b.x_max { a.x_max } else { b.x_max };
    let y1 = if a.y_max < b.y_max { a.y_max } else { b.y_max };
    let inter = if x1 > x0 && y1 > y0 { (x1 - x0) * (y1 - y0) } else { 0.0 };
    let area = |r: &Roi2D| (r.x_max - r.x_min) * (r.y_max - r.y_min);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn roi_key(r: &Roi2D) -> [f64; 4] {
    [r.x_min, r.y_min, r.x_max, r.y_max]
}

fn cmp4(a: [f64; 4], b: [f64; 4]) -> Ordering {
    for i in 0..4 {
        match a[i].partial_cmp(&b[i]).unwrap() {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

pub fn det_order(a: &Detection, b: &Detection) -> Ordering {
    b.score.partial_cmp(&a.score).unwrap().then(a.image_id.cmp(&b.image_id)).then(a.class.cmp(&b.class)).then(cmp4(roi_key(&a.roi), roi_key(&b.roi)))
}

fn gt_order(a: &GroundTruth, b: &GroundTruth) -> Ordering {
    a.image_id.cmp(&b.image_id).then(a.class.cmp(&b.class)).then(cmp4(roi_key(&a.roi), roi_key(&b.roi)))
}

/// True-positive flags of `dets` (any order) against `gts` for one class,
/// in descending score order, keeping at most `cap` detections per image.
pub fn ref_tp(dets: &[Detection], gts: &[GroundTruth], thr: f64, cap: usize) -> (Vec<bool>, usize) {
    let mut d: Vec<Detection> = dets.to_vec();
    d.sort_by(det_order);
    let mut g: Vec<GroundTruth> = gts.to_vec();
    g.sort_by(gt_order);
    let mut per_image: std::collections::BTreeMap<String, usize> = Default::default();
    d.retain(|x| {
        let n = per_image.entry(x.image_id.clone()).or_default();
        *n += 1;
        *n <= cap
    });
    let mut used = vec![false; g.len()];
    let mut tp = Vec::new();
    for det in &d {
        let mut best = None;
        let mut best_iou = -1.0;
        for (j, gt) in g.iter().enumerate() {
            if used[j] || gt.image_id != det.image_id {
                continue;
            }
            let v = ref_iou(&det.roi, &gt.roi);
            if v >= thr && v > best_iou {
                best = Some(j);
                best_iou = v;
            }
        }
        if let Some(j) = best {
            used[j] = true;
        }
        tp.push(best.is_some());
    }
    (tp, g.len())
}

pub fn ref_ap(tp: &[bool], n_gt: usize) -> f64 {
    let mut prec = Vec::new();
    let mut rec = Vec::new();
    let mut hits = 0.0;
    for (i, &t) in tp.iter().enumerate() {
        if t {
            hits += 1.0;
        }
        prec.push(hits / (i as f64 + 1.0));
        rec.push(hits / n_gt as f64);
    }
    let mut sum = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let mut best = 0.0;
        for k in 0..tp.len() {
            if rec[k] >= r && prec[k] > best {
                best = prec[k];
            }
        }
        sum += best;
    }
    sum / 101.0
}

pub fn thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Per-threshold AP of one class over all images.
pub fn ref_class_ap(dets: &[Detection], gts: &[GroundTruth], class: &str) -> Vec<f64> {
    let d: Vec<Detection> = dets.iter().filter(|x| x.class == class).cloned().collect();
    let g: Vec<GroundTruth> = gts.iter().filter(|x| x.class == class).cloned().collect();
    thresholds()
        .into_iter()
        .map(|t| {
            let (tp, n) = ref_tp(&d, &g, t, 100);
            ref_ap(&tp, n)
        })
        .collect()
}

pub fn instance() -> impl Strategy<Value = (Vec<Detection>, Vec<GroundTruth>)> {
    let roi = (0u8..8, 0u8..8, 1u8..5, 1u8..5).prop_map(|(x, y, w, h)| Roi2D::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64));
    let gt = (0u8..2, 0u8..2, roi.clone()).prop_map(|(i, c, roi)| GroundTruth { image_id: format!("img{i}"), class: format!("c{c}"), roi });
    let det = (0u8..2, 0u8..2, roi, 0u8..5).prop_map(|(i, c, roi, s)| Detection {
        image_id: format!("img{i}"),
        class: format!("c{c}"),
        roi,
        score: 0.1 + 0.2 * s as f64,
    });
    (prop::collection::vec(det, 0..=6), prop::collection::vec(gt, 1..=6))
}
