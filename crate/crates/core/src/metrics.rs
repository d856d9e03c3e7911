//! Box detection metrics in the COCO style: greedy matching at ten IoU
//! thresholds, 101-point interpolated AP and recall at detection caps.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::autolabel::RecordingSession;
use crate::geometry::Roi2D;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

pub const RECALL_POINTS: usize = 101;
pub const MAX_DETS: [usize; 3] = [1, 10, 100];

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("no ground truth to evaluate against")]
    NoGroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroundTruth {
    pub image_id: String,
    pub class: String,
    pub roi: Roi2D,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Detection {
    pub image_id: String,
    pub class: String,
    pub roi: Roi2D,
    pub score: f64,
}

/// Intersection over union; 0 when both boxes are empty.
pub fn iou(a: &Roi2D, b: &Roi2D) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

fn cmp_roi(a: &Roi2D, b: &Roi2D) -> Ordering {
    a.x_min.total_cmp(&b.x_min).then(a.y_min.total_cmp(&b.y_min)).then(a.x_max.total_cmp(&b.x_max)).then(a.y_max.total_cmp(&b.y_max))
}

/// Score descending, then image, class and coordinates. Makes every result
/// independent of input order.
pub fn cmp_detections(a: &Detection, b: &Detection) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.image_id.cmp(&b.image_id)).then_with(|| a.class.cmp(&b.class)).then_with(|| cmp_roi(&a.roi, &b.roi))
}

pub fn cmp_ground_truth(a: &GroundTruth, b: &GroundTruth) -> Ordering {
    a.image_id.cmp(&b.image_id).then_with(|| a.class.cmp(&b.class)).then_with(|| cmp_roi(&a.roi, &b.roi))
}

/// Greedy matching within one image and class. `dets` must be in
/// [`cmp_detections`] order. Each detection takes the unmatched ground truth
/// with the highest IoU at or above `threshold`, the lower index on ties.
pub fn greedy_match(dets: &[&Detection], gts: &[&GroundTruth], threshold: f64) -> Vec<Option<usize>> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let v = iou(&d.roi, &g.roi);
                if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            best.map(|(j, _)| {
                taken[j] = true;
                j
            })
        })
        .collect()
}

/// 101-point interpolated AP from true-positive flags in descending score
/// order. `None` without ground truth.
pub fn average_precision(tp: &[bool], n_gt: usize) -> Option<f64> {
    let curve = pr_curve(tp, n_gt)?;
    Some(curve.iter().map(|&(_, p)| p).sum::<f64>() / RECALL_POINTS as f64)
}

/// Interpolated precision at recall 0.00, 0.01, ..., 1.00.
pub fn pr_curve(tp: &[bool], n_gt: usize) -> Option<Vec<(f64, f64)>> {
    if n_gt == 0 {
        return None;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        recall.push(hits as f64 / n_gt as f64);
        precision.push(hits as f64 / (k + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    Some(
        (0..RECALL_POINTS)
            .map(|i| {
                let r = i as f64 / (RECALL_POINTS - 1) as f64;
                let idx = recall.partition_point(|&x| x < r);
                (r, precision.get(idx).copied().unwrap_or(0.0))
            })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub n_gt: usize,
    pub n_det: usize,
    /// AP at each of the ten thresholds.
    pub ap: Vec<f64>,
    pub ap_mean: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar1: f64,
    pub ar10: f64,
    pub ar100: f64,
    /// Interpolated precision-recall curve at IoU 0.5.
    pub pr50: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// Classes with at least one ground-truth box.
    pub classes: BTreeMap<String, ClassMetrics>,
    /// Detection classes without ground truth; excluded from the means.
    pub ignored_classes: Vec<String>,
    pub map: f64,
    pub map50: f64,
    pub map75: f64,
    pub mar1: f64,
    pub mar10: f64,
    pub mar100: f64,
}

impl EvalReport {
    pub fn summary(&self) -> String {
        let mut s = format!(
            "mAP {:.4}  mAP50 {:.4}  mAP75 {:.4}  mAR@1 {:.4}  mAR@10 {:.4}  mAR@100 {:.4}\n",
            self.map, self.map50, self.map75, self.mar1, self.mar10, self.mar100
        );
        for (c, m) in &self.classes {
            s.push_str(&format!("  {c}: gt {} det {} AP {:.4} AP50 {:.4} AR@100 {:.4}\n", m.n_gt, m.n_det, m.ap_mean, m.ap50, m.ar100));
        }
        s
    }

    /// One row per class plus an `all` row with the class means.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,n_gt,n_det,ap,ap50,ap75,ar1,ar10,ar100\n");
        for (c, m) in &self.classes {
            s.push_str(&format!("{c},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n", m.n_gt, m.n_det, m.ap_mean, m.ap50, m.ap75, m.ar1, m.ar10, m.ar100));
        }
        let n_gt: usize = self.classes.values().map(|m| m.n_gt).sum();
        let n_det: usize = self.classes.values().map(|m| m.n_det).sum();
        s.push_str(&format!("all,{n_gt},{n_det},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n", self.map, self.map50, self.map75, self.mar1, self.mar10, self.mar100));
        s
    }

    pub fn pr_csv(&self) -> String {
        let mut s = String::from("class,recall,precision\n");
        for (c, m) in &self.classes {
            for (r, p) in &m.pr50 {
                s.push_str(&format!("{c},{r:.2},{p:.6}\n"));
            }
        }
        s
    }
}

type Key<'a> = (&'a str, &'a str);

/// Evaluates detections against ground truth over all images and classes.
pub fn evaluate(dets: &[Detection], gts: &[GroundTruth]) -> Result<EvalReport, MetricsError> {
    if gts.is_empty() {
        return Err(MetricsError::NoGroundTruth);
    }
    let mut dets: Vec<&Detection> = dets.iter().collect();
    dets.sort_by(|a, b| cmp_detections(a, b));
    let mut gts: Vec<&GroundTruth> = gts.iter().collect();
    gts.sort_by(|a, b| cmp_ground_truth(a, b));

    let mut by_key_det: BTreeMap<Key, Vec<&Detection>> = BTreeMap::new();
    for d in &dets {
        by_key_det.entry((&d.class, &d.image_id)).or_default().push(d);
    }
    let mut by_key_gt: BTreeMap<Key, Vec<&GroundTruth>> = BTreeMap::new();
    for g in &gts {
        by_key_gt.entry((&g.class, &g.image_id)).or_default().push(g);
    }
    let gt_classes: BTreeSet<&str> = gts.iter().map(|g| g.class.as_str()).collect();
    let ignored: BTreeSet<String> = dets.iter().map(|d| d.class.as_str()).filter(|c| !gt_classes.contains(c)).map(String::from).collect();
    let thresholds = iou_thresholds();
    let max_cap = MAX_DETS[MAX_DETS.len() - 1];

    let mut classes = BTreeMap::new();
    for &class in &gt_classes {
        let images: BTreeSet<&str> = by_key_gt.keys().chain(by_key_det.keys()).filter(|(c, _)| *c == class).map(|&(_, i)| i).collect();
        let n_gt: usize = images.iter().map(|i| by_key_gt.get(&(class, i)).map_or(0, Vec::len)).sum();
        let n_det: usize = images.iter().map(|i| by_key_det.get(&(class, i)).map_or(0, Vec::len)).sum();
        let mut ap = Vec::with_capacity(thresholds.len());
        let mut recall_at = [Vec::new(), Vec::new(), Vec::new()];
        let mut pr50 = Vec::new();
        for (ti, &t) in thresholds.iter().enumerate() {
            // (detection, matched) for the AP pool, and per-image match flags
            let mut pool: Vec<(&Detection, bool)> = Vec::new();
            let mut matched_by_cap = [0usize; 3];
            for img in &images {
                let d = by_key_det.get(&(class, img)).map_or(&[][..], |v| &v[..]);
                let g = by_key_gt.get(&(class, img)).map_or(&[][..], |v| &v[..]);
                let d = &d[..d.len().min(max_cap)];
                let m = greedy_match(d, g, t);
                for (ci, &cap) in MAX_DETS.iter().enumerate() {
                    // with greedy matching, the matches of the top `cap`
                    // detections do not depend on later ones
                    matched_by_cap[ci] += m.iter().take(cap).filter(|x| x.is_some()).count();
                }
                pool.extend(d.iter().zip(&m).map(|(det, mm)| (*det, mm.is_some())));
            }
            pool.sort_by(|a, b| cmp_detections(a.0, b.0));
            let tp: Vec<bool> = pool.iter().map(|p| p.1).collect();
            ap.push(average_precision(&tp, n_gt).expect("class has ground truth"));
            if ti == 0 {
                pr50 = pr_curve(&tp, n_gt).expect("class has ground truth");
            }
            for ci in 0..3 {
                recall_at[ci].push(matched_by_cap[ci] as f64 / n_gt as f64);
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        classes.insert(
            class.to_string(),
            ClassMetrics {
                n_gt,
                n_det,
                ap_mean: mean(&ap),
                ap50: ap[0],
                ap75: ap[5],
                ar1: mean(&recall_at[0]),
                ar10: mean(&recall_at[1]),
                ar100: mean(&recall_at[2]),
                ap,
                pr50,
            },
        );
    }
    let over = |f: fn(&ClassMetrics) -> f64| {
        if classes.is_empty() {
            0.0
        } else {
            classes.values().map(f).sum::<f64>() / classes.len() as f64
        }
    };
    Ok(EvalReport {
        map: over(|m| m.ap_mean),
        map50: over(|m| m.ap50),
        map75: over(|m| m.ap75),
        mar1: over(|m| m.ar1),
        mar10: over(|m| m.ar10),
        mar100: over(|m| m.ar100),
        classes,
        ignored_classes: ignored.into_iter().collect(),
    })
}

// ---- text format ----

fn parse_fields(line_no: usize, line: &str, with_score: bool) -> Result<(String, String, Roi2D, Option<f64>), MetricsError> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    let want = if with_score { 7 } else { 6 };
    let err = |reason: String| MetricsError::Parse { line: line_no, reason };
    if fields.len() != want {
        return Err(err(format!("expected {want} comma-separated fields, found {}", fields.len())));
    }
    if fields[0].is_empty() || fields[1].is_empty() {
        return Err(err("empty image id or class".into()));
    }
    let num = |i: usize| {
        fields[i].parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| err(format!("field {} is not a finite number: {:?}", i + 1, fields[i])))
    };
    let roi = Roi2D::new(num(2)?, num(3)?, num(4)?, num(5)?);
    if !roi.is_valid() {
        return Err(err("box has min greater than max".into()));
    }
    let score = if with_score { Some(num(6)?) } else { None };
    if score.is_some_and(|s| !(0.0..=1.0).contains(&s)) {
        return Err(err("score must be within [0, 1]".into()));
    }
    Ok((fields[0].to_string(), fields[1].to_string(), roi, score))
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

/// `image_id,class,x_min,y_min,x_max,y_max` per line; `#` starts a comment.
pub fn parse_ground_truth(text: &str) -> Result<Vec<GroundTruth>, MetricsError> {
    content_lines(text).map(|(n, l)| parse_fields(n, l, false).map(|(image_id, class, roi, _)| GroundTruth { image_id, class, roi })).collect()
}

/// Like ground truth with a trailing `score` field.
pub fn parse_detections(text: &str) -> Result<Vec<Detection>, MetricsError> {
    content_lines(text).map(|(n, l)| parse_fields(n, l, true).map(|(image_id, class, roi, s)| Detection { image_id, class, roi, score: s.unwrap() })).collect()
}

pub fn format_ground_truth(gts: &[GroundTruth]) -> String {
    let mut s = String::from("# image_id,class,x_min,y_min,x_max,y_max\n");
    for g in gts {
        s.push_str(&format!("{},{},{},{},{},{}\n", g.image_id, g.class, g.roi.x_min, g.roi.y_min, g.roi.x_max, g.roi.y_max));
    }
    s
}

pub fn format_detections(dets: &[Detection]) -> String {
    let mut s = String::from("# image_id,class,x_min,y_min,x_max,y_max,score\n");
    for d in dets {
        s.push_str(&format!("{},{},{},{},{},{},{}\n", d.image_id, d.class, d.roi.x_min, d.roi.y_min, d.roi.x_max, d.roi.y_max, d.score));
    }
    s
}

/// Stored auto-labels as unit-score detections and the rendered object
/// boxes as ground truth, one image per stored frame.
pub fn auto_label_sets(sessions: &[RecordingSession]) -> (Vec<Detection>, Vec<GroundTruth>) {
    let (mut dets, mut gts) = (Vec::new(), Vec::new());
    for s in sessions {
        for f in &s.frames {
            let image_id = format!("{}/{:03}/{:06}", s.class_name, s.entity_id, f.index);
            if let Some(g) = f.gt_roi {
                gts.push(GroundTruth { image_id: image_id.clone(), class: s.class_name.clone(), roi: g });
            }
            dets.push(Detection { image_id, class: s.class_name.clone(), roi: f.roi, score: 1.0 });
        }
    }
    (dets, gts)
}
