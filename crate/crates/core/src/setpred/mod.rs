//! Set-prediction training: bipartite matching of queries to truths, the
//! focal / box / temporal-smoothness losses, and AP evaluation.

mod ap;
mod hungarian;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::{Graph, NumArray, ParamStore, Unary, Var};
use crate::scene_sim::GroundTruthBox;
use crate::tqa::Detection;

pub use ap::{box_corners, evaluate_ap, polygon_area, rotated_iou, ApReport, FrameResult};
pub use hungarian::{assignment_cost, hungarian};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// matching cost weight on `1 - p(class)`
    pub match_cls: f64,
    /// matching cost weight on the box distance
    pub match_box: f64,
    pub box_loss: f64,
    pub temporal: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// transition point of the smooth-L1 box loss, metres
    pub smooth_l1_beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            match_cls: 1.0,
            match_box: 1.0,
            box_loss: 5.0,
            temporal: 0.5,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            smooth_l1_beta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn problems(&self) -> Vec<String> {
        let fields = [
            ("loss.match_cls", self.match_cls),
            ("loss.match_box", self.match_box),
            ("loss.box_loss", self.box_loss),
            ("loss.temporal", self.temporal),
            ("loss.focal_gamma", self.focal_gamma),
        ];
        let mut bad: Vec<String> = fields.iter().filter(|(_, v)| !(*v >= 0.0)).map(|(n, _)| n.to_string()).collect();
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            bad.push("loss.focal_alpha".into());
        }
        if !(self.smooth_l1_beta > 0.0) {
            bad.push("loss.smooth_l1_beta".into());
        }
        bad
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MatchResult {
    /// `(query, truth)` sorted by query
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
}

/// Box distance used for matching: L1 on centre and size plus `1 - |cos|` of
/// the heading difference.
pub fn box_cost(d: &Detection, t: &GroundTruthBox) -> f64 {
    let (s, c) = t.theta.sin_cos();
    let cos_diff = d.cos * c + d.sin * s;
    (d.cx - t.cx).abs() + (d.cy - t.cy).abs() + (d.l - t.l).abs() + (d.w - t.w).abs() + (1.0 - cos_diff.abs())
}

/// `[M][n]` matching cost matrix.
pub fn cost_matrix(dets: &[Detection], truths: &[GroundTruthBox], w: &LossWeights) -> Vec<Vec<f64>> {
    dets.iter()
        .map(|d| {
            let p = d.probabilities();
            truths.iter().map(|t| w.match_cls * (1.0 - p[t.cls]) + w.match_box * box_cost(d, t)).collect()
        })
        .collect()
}

pub fn match_detections(dets: &[Detection], truths: &[GroundTruthBox], w: &LossWeights) -> MatchResult {
    let pairs = if truths.is_empty() { Vec::new() } else { hungarian(&cost_matrix(dets, truths, w)) };
    let matched: Vec<bool> = (0..dets.len()).map(|m| pairs.iter().any(|&(q, _)| q == m)).collect();
    let unmatched = (0..dets.len()).filter(|&m| !matched[m]).collect();
    MatchResult { pairs, unmatched }
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub cls: Var,
    pub boxes: Var,
    pub temporal: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    #[serde(rename = "box")]
    pub boxes: f64,
    #[serde(rename = "temp")]
    pub temporal: f64,
    pub total: f64,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossBreakdown {
        let v = |x: Var| g.value(x).data()[0];
        LossBreakdown { cls: v(self.cls), boxes: v(self.boxes), temporal: v(self.temporal), total: v(self.total) }
    }
}

/// Window loss on the final frame. `logits: [M, K + 1]`, `boxes`/`prev_boxes`:
/// decoded `[M, 6]`. The matching is a constant.
pub fn loss_graph(
    g: &mut Graph,
    logits: Var,
    boxes: Var,
    prev_boxes: Option<Var>,
    truths: &[GroundTruthBox],
    matching: &MatchResult,
    w: &LossWeights,
) -> Result<LossVars> {
    let (m, k1) = g.dims(logits);
    let background = k1 - 1;
    let norm = 1.0 / truths.len().max(1) as f64;

    let mut target = vec![background; m];
    for &(q, t) in &matching.pairs {
        target[q] = truths[t].cls;
    }
    let idx: std::sync::Arc<[u32]> = target.iter().enumerate().map(|(q, &c)| (q * k1 + c) as u32).collect();
    let logp = g.log_softmax_rows(logits);
    let logp_t = g.gather(logp, idx, m, 1);
    let p_t = g.unary(logp_t, Unary::Exp);
    let one_minus = g.affine(p_t, -1.0, 1.0);
    let modulating = g.unary(one_minus, Unary::Pow(w.focal_gamma));
    let alpha: Vec<f64> =
        target.iter().map(|&c| if c == background { 1.0 - w.focal_alpha } else { w.focal_alpha }).collect();
    let alpha = g.input(NumArray::matrix(m, 1, alpha));
    let per_query = g.mul(modulating, logp_t);
    let per_query = g.mul(per_query, alpha);
    let cls = g.sum(per_query);
    let cls = g.scale(cls, -norm);

    let (boxes_loss, temporal) = if matching.pairs.is_empty() {
        (g.input(NumArray::scalar(0.0)), g.input(NumArray::scalar(0.0)))
    } else {
        let qs: Vec<usize> = matching.pairs.iter().map(|&(q, _)| q).collect();
        let n = qs.len();
        let tgt: Vec<f64> = matching
            .pairs
            .iter()
            .flat_map(|&(_, t)| {
                let b = &truths[t];
                [b.cx, b.cy, b.l, b.w]
            })
            .collect();
        let dir: Vec<f64> = matching.pairs.iter().flat_map(|&(_, t)| {
            let (s, c) = truths[t].theta.sin_cos();
            [s, c]
        }).collect();
        let pred = g.select_rows(boxes, &qs);
        let geom = g.slice_cols(pred, 0, 4);
        let tgt = g.input(NumArray::matrix(n, 4, tgt));
        let diff = g.sub(geom, tgt);
        let l1 = g.unary(diff, Unary::SmoothL1(w.smooth_l1_beta));
        let l1 = g.sum(l1);
        let pdir = g.slice_cols(pred, 4, 2);
        let tdir = g.input(NumArray::matrix(n, 2, dir));
        let cosd = g.mul(pdir, tdir);
        let cosd = g.sum_cols(cosd);
        let cosd = g.unary(cosd, Unary::Abs);
        let head = g.affine(cosd, -1.0, 1.0);
        let head = g.sum(head);
        let total = g.add(l1, head);
        let boxes_loss = g.scale(total, norm);

        let temporal = match prev_boxes {
            Some(prev) => {
                let now = g.slice_cols(pred, 0, 2);
                let before = g.select_rows(prev, &qs);
                let before = g.slice_cols(before, 0, 2);
                let d = g.sub(now, before);
                let d = g.unary(d, Unary::Abs);
                let d = g.sum(d);
                g.scale(d, norm)
            }
            None => g.input(NumArray::scalar(0.0)),
        };
        (boxes_loss, temporal)
    };

    let wb = g.scale(boxes_loss, w.box_loss);
    let wt = g.scale(temporal, w.temporal);
    let total = g.add(cls, wb);
    let total = g.add(total, wt);
    Ok(LossVars { cls, boxes: boxes_loss, temporal, total })
}

fn detection_arrays(dets: &[Detection]) -> (NumArray, NumArray) {
    let k1 = dets.first().map_or(1, |d| d.logits.len());
    let logits = NumArray::matrix(dets.len(), k1, dets.iter().flat_map(|d| d.logits.iter().copied()).collect());
    let boxes = NumArray::matrix(dets.len(), 6, dets.iter().flat_map(|d| [d.cx, d.cy, d.l, d.w, d.sin, d.cos]).collect());
    (logits, boxes)
}

/// Array-level loss on detections of the final frame (and optionally the
/// previous frame's detections of the same queries).
pub fn compute_loss(
    dets: &[Detection],
    prev: Option<&[Detection]>,
    truths: &[GroundTruthBox],
    matching: &MatchResult,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let (l, b) = detection_arrays(dets);
    let (l, b) = (g.input(l), g.input(b));
    let p = prev.map(|p| {
        let (_, pb) = detection_arrays(p);
        g.input(pb)
    });
    Ok(loss_graph(&mut g, l, b, p, truths, matching, w)?.values(&g))
}
