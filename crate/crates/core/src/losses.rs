//! Box regression, contrastive alignment, and the weighted training objective.
//!
//! Every loss exists twice: a plain `f64` version used for matching, reporting and
//! as a test oracle, and a tape version that records the same arithmetic on a
//! [`Graph`] for backpropagation.

use crate::autodiff::{log_sum_exp, Graph, Mat, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::types::{BBox, NormBox};

/// Mean absolute difference over the four `(cx, cy, w, h)` coordinates.
pub fn l1_loss(pred: &NormBox, gt: &NormBox) -> f64 {
    pred.to_array()
        .iter()
        .zip(gt.to_array())
        .map(|(p, g)| (p - g).abs())
        .sum::<f64>()
        / 4.0
}

fn overlap(a1: f64, a2: f64, b1: f64, b2: f64) -> f64 {
    (a2.min(b2) - a1.max(b1)).max(0.0)
}

/// Generalized IoU of two corner boxes. Zero-area boxes are allowed as long as the
/// enclosing box has positive area.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = overlap(a.x1, a.x2, b.x1, b.x2) * overlap(a.y1, a.y2, b.y1, b.y2);
    let union = a.area() + b.area() - inter;
    let enclose = (a.x2.max(b.x2) - a.x1.min(b.x1)) * (a.y2.max(b.y2) - a.y1.min(b.y1));
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    if enclose > 0.0 {
        iou - (enclose - union) / enclose
    } else {
        iou
    }
}

/// `1 - GIoU`. The ground truth must have positive area.
pub fn giou_loss(pred: &BBox, gt: &BBox) -> Result<f64> {
    if !(gt.area() > 0.0) || !gt.is_valid() {
        return Err(Error::Annotation(format!("ground-truth box {gt:?} has no area")));
    }
    Ok(1.0 - giou(pred, gt))
}

fn corners(n: &NormBox) -> BBox {
    let [x1, y1, x2, y2] = n.corners();
    BBox { x1, y1, x2, y2 }
}

/// Matching cost of a normalized box against the target.
pub fn match_cost(pred: &NormBox, gt: &NormBox, cfg: &ModelConfig) -> Result<f64> {
    Ok(cfg.lambda_l1 * l1_loss(pred, gt) + cfg.lambda_giou * giou_loss(&corners(pred), &corners(gt))?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Positive query indices; a single entry for one target box.
    pub positives: Vec<usize>,
    /// Matching cost of every query.
    pub costs: Vec<f64>,
}

/// The query with the smallest matching cost is the positive; the first wins ties.
pub fn assign_positives(boxes: &[NormBox], gt: &NormBox, cfg: &ModelConfig) -> Result<MatchResult> {
    if boxes.is_empty() {
        return Err(Error::Matching("no queries to match".into()));
    }
    let costs = boxes
        .iter()
        .map(|b| match_cost(b, gt, cfg))
        .collect::<Result<Vec<f64>>>()?;
    let mut best = 0;
    for (i, c) in costs.iter().enumerate() {
        if *c < costs[best] {
            best = i;
        }
    }
    Ok(MatchResult {
        positives: vec![best],
        costs,
    })
}

fn check_contrastive(n: usize, positives: &[usize], tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if positives.is_empty() {
        return Err(Error::Matching("contrastive loss needs at least one positive".into()));
    }
    if let Some(p) = positives.iter().find(|&&p| p >= n) {
        return Err(Error::Matching(format!("positive index {p} out of range for {n} objects")));
    }
    Ok(())
}

/// Text-to-object softmax cross-entropy averaged over the positive objects.
///
/// Logits are raw dot products `t · o_j / tau`.
pub fn contrastive_loss(text: &[f64], objects: &Mat, positives: &[usize], tau: f64) -> Result<f64> {
    let (n, c) = objects.dim();
    check_contrastive(n, positives, tau)?;
    if text.len() != c {
        return Err(Error::Input(format!("text has {} dims, objects have {c}", text.len())));
    }
    let logits: Vec<f64> = objects
        .rows()
        .into_iter()
        .map(|o| o.iter().zip(text).map(|(a, b)| a * b).sum::<f64>() / tau)
        .collect();
    let lse = log_sum_exp(logits.iter().copied());
    Ok(positives.iter().map(|&j| lse - logits[j]).sum::<f64>() / positives.len() as f64)
}

/// `λ_giou · giou + λ_L1 · l1 + λ_cts · cts`.
pub fn total_loss(giou: f64, l1: f64, cts: f64, cfg: &ModelConfig) -> f64 {
    cfg.lambda_giou * giou + cfg.lambda_l1 * l1 + cfg.lambda_cts * cts
}

/// Per-component loss values for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub giou: f64,
    pub l1: f64,
    pub contrastive: f64,
    pub total: f64,
}

/// Tape L1 loss between one `(1, 4)` box row and a constant target.
pub fn tape_l1(g: &mut Graph<'_>, pred: Var, gt: &NormBox) -> Var {
    let target = g.constant(Mat::from_shape_vec((1, 4), gt.to_array().to_vec()).expect("1x4"));
    let d = g.sub(pred, target);
    let d = g.abs(d);
    g.mean_all(d)
}

/// Tape `1 - GIoU` between one `(1, 4)` center-size row and a constant target.
pub fn tape_giou_loss(g: &mut Graph<'_>, pred: Var, gt: &NormBox) -> Result<Var> {
    let gb = corners(gt);
    if !(gb.area() > 0.0) {
        return Err(Error::Annotation(format!("ground-truth box {gb:?} has no area")));
    }
    let col = |g: &mut Graph<'_>, i| g.slice_cols(pred, i, 1);
    let (cx, cy, w, h) = (col(g, 0), col(g, 1), col(g, 2), col(g, 3));
    let hw = g.scale(w, 0.5);
    let hh = g.scale(h, 0.5);
    let x1 = g.sub(cx, hw);
    let x2 = g.add(cx, hw);
    let y1 = g.sub(cy, hh);
    let y2 = g.add(cy, hh);
    let k = |g: &mut Graph<'_>, v: f64| g.constant(Mat::from_elem((1, 1), v));
    let (gx1, gy1, gx2, gy2) = (k(g, gb.x1), k(g, gb.y1), k(g, gb.x2), k(g, gb.y2));
    let zero = k(g, 0.0);

    let span = |g: &mut Graph<'_>, lo_a: Var, hi_a: Var, lo_b: Var, hi_b: Var, inner: bool| {
        if inner {
            let hi = g.minimum(hi_a, hi_b);
            let lo = g.maximum(lo_a, lo_b);
            let d = g.sub(hi, lo);
            g.maximum(d, zero)
        } else {
            let hi = g.maximum(hi_a, hi_b);
            let lo = g.minimum(lo_a, lo_b);
            g.sub(hi, lo)
        }
    };
    let iw = span(g, x1, x2, gx1, gx2, true);
    let ih = span(g, y1, y2, gy1, gy2, true);
    let inter = g.mul(iw, ih);
    let area = g.mul(w, h);
    let area = g.add_scalar(area, gb.area());
    let union = g.sub(area, inter);
    let iou = g.div(inter, union);
    let ew = span(g, x1, x2, gx1, gx2, false);
    let eh = span(g, y1, y2, gy1, gy2, false);
    let enclose = g.mul(ew, eh);
    let gap = g.sub(enclose, union);
    let penalty = g.div(gap, enclose);
    // 1 - (iou - penalty)
    let neg = g.sub(penalty, iou);
    Ok(g.add_scalar(neg, 1.0))
}

/// Tape contrastive loss. `text` is `(1, C)`, `objects` is `(N, C)`.
pub fn tape_contrastive(g: &mut Graph<'_>, text: Var, objects: Var, positives: &[usize], tau: f64) -> Result<Var> {
    check_contrastive(g.shape(objects).0, positives, tau)?;
    let logits = g.matmul_nt(text, objects);
    let logits = g.scale(logits, 1.0 / tau);
    let logp = g.log_softmax_rows(logits);
    let logp = g.transpose(logp);
    let picked = g.gather_rows(logp, positives);
    let mean = g.mean_all(picked);
    Ok(g.scale(mean, -1.0))
}

/// Object-to-text direction over a batch: row `i` of `objects` is matched with row
/// `i` of `texts` against every other text in the batch.
pub fn tape_object_to_text(g: &mut Graph<'_>, objects: Var, texts: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let n = g.shape(objects).0;
    if n == 0 || g.shape(texts).0 != n {
        return Err(Error::Matching("object and text batches must be equal and nonempty".into()));
    }
    let logits = g.matmul_nt(objects, texts);
    let logits = g.scale(logits, 1.0 / tau);
    let logp = g.log_softmax_rows(logits);
    let eye = g.constant(Mat::eye(n));
    let diag = g.mul(logp, eye);
    let s = g.sum_all(diag);
    Ok(g.scale(s, -1.0 / n as f64))
}

/// Weighted sum of three scalar tape losses.
pub fn tape_total(g: &mut Graph<'_>, giou: Var, l1: Var, cts: Var, cfg: &ModelConfig) -> Var {
    let a = g.scale(giou, cfg.lambda_giou);
    let b = g.scale(l1, cfg.lambda_l1);
    let c = g.scale(cts, cfg.lambda_cts);
    let ab = g.add(a, b);
    g.add(ab, c)
}
