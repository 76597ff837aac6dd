//! Rotated-box IoU and COCO-style average precision.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::scene_sim::GroundTruthBox;
use crate::tqa::Detection;

/// Corners of an oriented rectangle, counter-clockwise.
pub fn box_corners(cx: f64, cy: f64, l: f64, w: f64, theta: f64) -> [(f64, f64); 4] {
    let (s, c) = theta.sin_cos();
    let (hl, hw) = (l / 2.0, w / 2.0);
    [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(u, v)| (cx + c * u - s * v, cy + s * u + c * v))
}

/// Shoelace area (positive for counter-clockwise vertices).
pub fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n)
        .map(|i| {
            let (x0, y0) = poly[i];
            let (x1, y1) = poly[(i + 1) % n];
            x0 * y1 - x1 * y0
        })
        .sum();
    0.5 * twice
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Sutherland-Hodgman clip of `subject` against the convex CCW `clip`.
fn clip_polygon(subject: &[(f64, f64)], clip: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let p = input[j];
            let q = input[(j + 1) % input.len()];
            let (dp, dq) = (cross(a, b, p), cross(a, b, q));
            if dp >= 0.0 {
                out.push(p);
            }
            if (dp >= 0.0) != (dq >= 0.0) {
                let t = dp / (dp - dq);
                out.push((p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1)));
            }
        }
    }
    out
}

/// IoU of two oriented rectangles given as `(cx, cy, l, w, theta)`.
pub fn rotated_iou(a: BoxParams, b: BoxParams) -> f64 {
    let pa = box_corners(a.0, a.1, a.2, a.3, a.4);
    let pb = box_corners(b.0, b.1, b.2, b.3, b.4);
    let inter = polygon_area(&clip_polygon(&pa, &pb)).max(0.0);
    let union = a.2 * a.3 + b.2 * b.3 - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Detections and truths of one evaluated frame.
#[derive(Clone, Debug)]
pub struct FrameResult {
    pub detections: Vec<Detection>,
    pub truths: Vec<GroundTruthBox>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    /// percent, classes with at least one truth
    pub per_class_ap50: BTreeMap<String, f64>,
    pub map50: f64,
    pub map50_95: f64,
    pub n_images: usize,
    pub n_truths: usize,
}

type BoxParams = (f64, f64, f64, f64, f64);

struct Scored {
    score: f64,
    frame: usize,
    query: usize,
    geometry: BoxParams,
}

/// Greedy matching in descending score order; each detection takes the
/// unclaimed truth of highest IoU at or above `threshold`.
fn average_precision(scored: &[Scored], truths: &[Vec<BoxParams>], n_truths: usize, threshold: f64) -> f64 {
    let mut taken: Vec<Vec<bool>> = truths.iter().map(|t| vec![false; t.len()]).collect();
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(scored.len());
    let mut recall = Vec::with_capacity(scored.len());
    for (i, det) in scored.iter().enumerate() {
        let mut best: Option<(f64, usize)> = None;
        for (k, &tb) in truths[det.frame].iter().enumerate() {
            if taken[det.frame][k] {
                continue;
            }
            let iou = rotated_iou(det.geometry, tb);
            if iou >= threshold && best.is_none_or(|(b, _)| iou > b) {
                best = Some((iou, k));
            }
        }
        if let Some((_, k)) = best {
            taken[det.frame][k] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / n_truths as f64);
    }
    interpolated_ap(&precision, &recall)
}

/// 101-point interpolated AP from a precision/recall curve.
pub(crate) fn interpolated_ap(precision: &[f64], recall: &[f64]) -> f64 {
    let mut envelope = precision.to_vec();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    (0..=100)
        .map(|r| {
            let r = r as f64 / 100.0;
            let k = recall.partition_point(|&x| x < r);
            if k < envelope.len() {
                envelope[k]
            } else {
                0.0
            }
        })
        .sum::<f64>()
        / 101.0
}

/// Per-class AP at IoU 0.5 and mean AP over 0.50:0.05:0.95, in percent.
/// Each query contributes one detection of its most likely foreground class.
pub fn evaluate_ap(frames: &[FrameResult], num_classes: usize) -> Result<ApReport> {
    for f in frames {
        for t in &f.truths {
            t.validate()?;
        }
    }
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let n_truths: usize = frames.iter().map(|f| f.truths.len()).sum();
    let mut per_class_ap50 = BTreeMap::new();
    let mut sum50 = 0.0;
    let mut sum_all = 0.0;
    let mut classes = 0usize;
    for c in 0..num_classes {
        let truths: Vec<Vec<BoxParams>> = frames
            .iter()
            .map(|f| f.truths.iter().filter(|t| t.cls == c).map(|t| (t.cx, t.cy, t.l, t.w, t.theta)).collect())
            .collect();
        let count: usize = truths.iter().map(Vec::len).sum();
        if count == 0 {
            continue;
        }
        let mut scored = Vec::new();
        for (frame, f) in frames.iter().enumerate() {
            for (query, d) in f.detections.iter().enumerate() {
                let (cls, score) = d.best_class();
                if cls == c {
                    scored.push(Scored { score, frame, query, geometry: (d.cx, d.cy, d.l, d.w, d.heading()) });
                }
            }
        }
        scored.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.frame.cmp(&b.frame)).then(a.query.cmp(&b.query)));
        let aps: Vec<f64> = thresholds.iter().map(|&t| average_precision(&scored, &truths, count, t)).collect();
        let ap50 = 100.0 * aps[0];
        per_class_ap50.insert(c.to_string(), ap50);
        sum50 += ap50;
        sum_all += 100.0 * aps.iter().sum::<f64>() / aps.len() as f64;
        classes += 1;
    }
    let (map50, map50_95) = if classes == 0 { (0.0, 0.0) } else { (sum50 / classes as f64, sum_all / classes as f64) };
    Ok(ApReport { per_class_ap50, map50, map50_95, n_images: frames.len(), n_truths })
}
