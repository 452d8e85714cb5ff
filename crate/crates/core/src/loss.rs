//! Set-prediction losses: focal classification, L1 and GIoU box terms,
//! the matching cost, and the auxiliary terms on intermediate outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::global::GlobalOutput;
use crate::local::LocalOutput;
use crate::matching::{hungarian, Assignment, CostMatrix};
use crate::tensor::{sigmoid, Graph, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub aux_bbox: f64,
    pub aux_cls: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 2.0,
            l1: 5.0,
            giou: 2.0,
            aux_bbox: 0.25,
            aux_cls: 0.25,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("cls", self.cls),
            ("l1", self.l1),
            ("giou", self.giou),
            ("aux_bbox", self.aux_bbox),
            ("aux_cls", self.aux_cls),
            ("focal_gamma", self.focal_gamma),
        ];
        for (name, v) in all {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("loss.{name} must be a finite value >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(Error::Config("loss.focal_alpha must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Ground truth of one image: normalized `(cx, cy, w, h)` boxes and
/// zero-based class labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Targets {
    pub boxes: Vec<[f64; 4]>,
    pub labels: Vec<usize>,
}

impl Targets {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// The same boxes, all labelled class 0.
    pub fn class_agnostic(&self) -> Targets {
        Targets {
            boxes: self.boxes.clone(),
            labels: vec![0; self.boxes.len()],
        }
    }
}

fn ln_sigmoid(x: f64) -> f64 {
    crate::tensor::log_sigmoid(x)
}

/// Alpha-balanced focal loss of one logit against a 0/1 target.
pub fn focal_loss(logit: f64, target: bool, alpha: f64, gamma: f64) -> f64 {
    let p = sigmoid(logit);
    let (p_t, a_t, log_p_t) = if target {
        (p, alpha, ln_sigmoid(logit))
    } else {
        (1.0 - p, 1.0 - alpha, ln_sigmoid(-logit))
    };
    -a_t * (1.0 - p_t).powf(gamma) * log_p_t
}

/// Classification part of the matching cost: the focal loss for labelling
/// the logit positive minus that for labelling it negative.
pub fn focal_cost(logit: f64, alpha: f64, gamma: f64) -> f64 {
    focal_loss(logit, true, alpha, gamma) - focal_loss(logit, false, alpha, gamma)
}

/// `(cx, cy, w, h)` to `(x1, y1, x2, y2)`.
pub fn to_corners(b: [f64; 4]) -> [f64; 4] {
    [b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0]
}

fn corner_giou(a: [f64; 4], b: [f64; 4]) -> (f64, f64) {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |c: [f64; 4]| (c[2] - c[0]) * (c[3] - c[1]);
    let union = area(a) + area(b) - inter;
    let hull = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    let iou = inter / union;
    (iou, iou - (hull - union) / hull)
}

/// Intersection over union of two `(cx, cy, w, h)` boxes.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    corner_giou(to_corners(a), to_corners(b)).0
}

/// Generalized IoU of two `(cx, cy, w, h)` boxes, in `[-1, 1]`.
pub fn giou(a: [f64; 4], b: [f64; 4]) -> Result<f64> {
    for bx in [a, b] {
        if !(bx[2] > 0.0 && bx[3] > 0.0) {
            return Err(Error::Contract(format!("giou needs positive width and height, got {bx:?}")));
        }
    }
    Ok(corner_giou(to_corners(a), to_corners(b)).1)
}

/// Matching cost `cost[pred][gt]` from current logits `[n, K]` and boxes
/// `[n, 4]` (row-major values).
pub fn pairwise_cost(logits: &[f64], boxes: &[f64], k: usize, targets: &Targets, w: &LossWeights) -> Result<CostMatrix> {
    let n = boxes.len() / 4;
    if logits.len() != n * k {
        return Err(Error::Dimension {
            op: "pairwise_cost",
            lhs: vec![logits.len()],
            rhs: vec![n, k],
        });
    }
    let m = targets.len();
    let mut data = Vec::with_capacity(n * m);
    for i in 0..n {
        let pb = [boxes[4 * i], boxes[4 * i + 1], boxes[4 * i + 2], boxes[4 * i + 3]];
        for (tb, &label) in targets.boxes.iter().zip(&targets.labels) {
            if label >= k {
                return Err(Error::Contract(format!("label {label} out of range for {k} classes")));
            }
            let cls = focal_cost(logits[i * k + label], w.focal_alpha, w.focal_gamma);
            let l1: f64 = pb.iter().zip(tb).map(|(a, b)| (a - b).abs()).sum();
            let g = giou(pb, *tb)?;
            data.push(w.cls * cls + w.l1 * l1 + w.giou * (1.0 - g));
        }
    }
    CostMatrix::new(n, m, data)
}

/// Sum over all entries of the focal loss of `logits` against a constant
/// 0/1 target matrix of the same shape.
pub fn focal_sum<T: Real>(g: &mut Graph<'_, T>, logits: Var, target: &Tensor<T>, alpha: f64, gamma: f64) -> Result<Var> {
    let t = g.constant(target.clone());
    let one_minus_t = g.constant(target.map(|x| T::one() - x));
    let p = g.sigmoid(logits)?;
    let neg_logits = g.neg(logits)?;
    let ls_pos = g.log_sigmoid(logits)?;
    let ls_neg = g.log_sigmoid(neg_logits)?;
    let q = g.neg(p)?;
    let q = g.add_scalar(q, T::one())?;
    let (mod_pos, mod_neg) = if gamma == 0.0 {
        (None, None)
    } else {
        (Some(g.powf(q, T::cast(gamma))?), Some(g.powf(p, T::cast(gamma))?))
    };
    let mut pos = g.scale(ls_pos, T::cast(-alpha))?;
    if let Some(m) = mod_pos {
        pos = g.mul(pos, m)?;
    }
    let mut neg = g.scale(ls_neg, T::cast(alpha - 1.0))?;
    if let Some(m) = mod_neg {
        neg = g.mul(neg, m)?;
    }
    let pos = g.mul(pos, t)?;
    let neg = g.mul(neg, one_minus_t)?;
    let all = g.add(pos, neg)?;
    g.sum(all)
}

fn column<T: Real>(g: &mut Graph<'_, T>, b: Var, i: usize) -> Result<Var> {
    g.narrow(b, 1, i, 1)
}

/// Corners `(x1, y1, x2, y2)` of `[M, 4]` boxes, each `[M, 1]`.
fn corners<T: Real>(g: &mut Graph<'_, T>, b: Var) -> Result<[Var; 6]> {
    let cx = column(g, b, 0)?;
    let cy = column(g, b, 1)?;
    let w = column(g, b, 2)?;
    let h = column(g, b, 3)?;
    let hw = g.scale(w, T::cast(0.5))?;
    let hh = g.scale(h, T::cast(0.5))?;
    Ok([g.sub(cx, hw)?, g.sub(cy, hh)?, g.add(cx, hw)?, g.add(cy, hh)?, w, h])
}

/// Intersection length and hull length of two intervals per row.
fn overlap<T: Real>(g: &mut Graph<'_, T>, lo1: Var, lo2: Var, hi1: Var, hi2: Var) -> Result<(Var, Var)> {
    let hi_min = g.minimum(hi1, hi2)?;
    let lo_max = g.maximum(lo1, lo2)?;
    let inter = g.sub(hi_min, lo_max)?;
    let inter = g.relu(inter)?;
    let hi_max = g.maximum(hi1, hi2)?;
    let lo_min = g.minimum(lo1, lo2)?;
    Ok((inter, g.sub(hi_max, lo_min)?))
}

/// Row-wise GIoU of two `[M, 4]` box sets, `[M, 1]`.
pub fn giou_graph<T: Real>(g: &mut Graph<'_, T>, a: Var, b: Var) -> Result<Var> {
    let [ax1, ay1, ax2, ay2, aw, ah] = corners(g, a)?;
    let [bx1, by1, bx2, by2, bw, bh] = corners(g, b)?;
    let (iw, hw) = overlap(g, ax1, bx1, ax2, bx2)?;
    let (ih, hh) = overlap(g, ay1, by1, ay2, by2)?;
    let inter = g.mul(iw, ih)?;
    let area_a = g.mul(aw, ah)?;
    let area_b = g.mul(bw, bh)?;
    let union = g.add(area_a, area_b)?;
    let union = g.sub(union, inter)?;
    let hull = g.mul(hw, hh)?;
    let iou = g.div(inter, union)?;
    let gap = g.sub(hull, union)?;
    let pen = g.div(gap, hull)?;
    g.sub(iou, pen)
}

/// Summed L1 distance and summed `1 - GIoU` between matched predictions and
/// their ground truths, both divided by `max(1, n_gt)`.
pub fn box_terms<T: Real>(g: &mut Graph<'_, T>, boxes: Var, targets: &Targets, assign: &Assignment) -> Result<(Var, Var)> {
    if assign.pairs.is_empty() {
        let z = g.scalar(T::zero());
        return Ok((z, z));
    }
    let norm = T::cast(1.0 / targets.len().max(1) as f64);
    let preds: Vec<usize> = assign.pairs.iter().map(|&(p, _)| p).collect();
    let gts: Vec<f64> = assign.pairs.iter().flat_map(|&(_, t)| targets.boxes[t]).collect();
    let matched = g.index_select(boxes, &preds)?;
    let gt = g.constant(Tensor::from_f64([preds.len(), 4], &gts)?);
    let diff = g.sub(matched, gt)?;
    let diff = g.abs(diff)?;
    let l1 = g.sum(diff)?;
    let l1 = g.scale(l1, norm)?;
    let gi = giou_graph(g, matched, gt)?;
    let gi = g.sum(gi)?;
    let count = T::cast(preds.len() as f64);
    let one_minus = g.neg(gi)?;
    let one_minus = g.add_scalar(one_minus, count)?;
    let giou_loss = g.scale(one_minus, norm)?;
    Ok((l1, giou_loss))
}

/// Focal classification over all queries: matched ones toward their gt
/// label, everything else toward background; divided by `max(1, n_gt)`.
pub fn cls_term<T: Real>(g: &mut Graph<'_, T>, logits: Var, targets: &Targets, assign: &Assignment, w: &LossWeights) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    let (n, k) = (s[0], s[1]);
    let mut t = Tensor::<T>::zeros([n, k]);
    for &(p, gt) in &assign.pairs {
        t.data_mut()[p * k + targets.labels[gt]] = T::one();
    }
    let f = focal_sum(g, logits, &t, w.focal_alpha, w.focal_gamma)?;
    g.scale(f, T::cast(1.0 / targets.len().max(1) as f64))
}

/// Matching-loss terms of one stage.
#[derive(Clone, Copy, Debug)]
pub struct StageLoss {
    pub cls: Var,
    pub l1: Var,
    pub giou: Var,
}

/// Unweighted matching-loss terms for predictions `logits [n, K]` and
/// `boxes [n, 4]` under a given assignment.
pub fn stage_loss<T: Real>(
    g: &mut Graph<'_, T>,
    logits: Var,
    boxes: Var,
    targets: &Targets,
    assign: &Assignment,
    w: &LossWeights,
) -> Result<StageLoss> {
    let cls = cls_term(g, logits, targets, assign, w)?;
    let (l1, giou) = box_terms(g, boxes, targets, assign)?;
    Ok(StageLoss { cls, l1, giou })
}

/// Hungarian assignment of a stage's current predictions.
pub fn match_stage<T: Real>(g: &Graph<'_, T>, logits: Var, boxes: Var, targets: &Targets, w: &LossWeights) -> Result<Assignment> {
    let k = g.shape(logits)[1];
    let cost = pairwise_cost(&g.value(logits).to_f64_vec(), &g.value(boxes).to_f64_vec(), k, targets, w)?;
    hungarian(&cost)
}

/// The loss of one image. Values are unweighted sums over both stages;
/// `total` is their weighted combination.
#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub total: Var,
    pub l_cls: f64,
    pub l_l1: f64,
    pub l_giou: f64,
    pub l_aux_bbox: f64,
    pub l_aux_cls: f64,
    pub total_value: f64,
    pub global_assignment: Assignment,
    pub local_assignment: Assignment,
}

impl LossBreakdown {
    /// Weighted sum recomputed from the per-term values.
    pub fn recompose(&self, w: &LossWeights) -> f64 {
        w.cls * self.l_cls + w.l1 * self.l_l1 + w.giou * self.l_giou + w.aux_bbox * self.l_aux_bbox + w.aux_cls * self.l_aux_cls
    }
}

fn pair_sum<T: Real>(g: &mut Graph<'_, T>, a: Var, b: Var, weight: f64, parts: &mut Vec<(Var, f64)>) -> Result<f64> {
    let s = g.add(a, b)?;
    if weight != 0.0 {
        parts.push((s, weight));
    }
    Ok(g.value(s).item()?.f64())
}

/// Matching losses of both stages plus auxiliary box loss on the step-1
/// boxes and auxiliary classification on the step-2 logits of each stage.
/// Auxiliary terms reuse the stage's final assignment and are skipped when
/// their weight is zero.
pub fn total_loss<T: Real>(
    g: &mut Graph<'_, T>,
    global: &GlobalOutput,
    local: &LocalOutput,
    targets: &Targets,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let agnostic = targets.class_agnostic();
    let ga = match_stage(g, global.logits, global.boxes, &agnostic, w)?;
    let la = match_stage(g, local.logits, local.boxes, targets, w)?;
    let gs = stage_loss(g, global.logits, global.boxes, &agnostic, &ga, w)?;
    let ls = stage_loss(g, local.logits, local.boxes, targets, &la, w)?;

    let mut parts: Vec<(Var, f64)> = Vec::new();
    let l_cls = pair_sum(g, gs.cls, ls.cls, w.cls, &mut parts)?;
    let l_l1 = pair_sum(g, gs.l1, ls.l1, w.l1, &mut parts)?;
    let l_giou = pair_sum(g, gs.giou, ls.giou, w.giou, &mut parts)?;

    let mut l_aux_bbox = 0.0;
    if w.aux_bbox != 0.0 {
        let (g1, g2) = box_terms(g, global.step1_boxes, &agnostic, &ga)?;
        let (l1, l2) = box_terms(g, local.step1_boxes, targets, &la)?;
        let a = g.add(g1, g2)?;
        let b = g.add(l1, l2)?;
        l_aux_bbox = pair_sum(g, a, b, w.aux_bbox, &mut parts)?;
    }
    let mut l_aux_cls = 0.0;
    if w.aux_cls != 0.0 {
        let a = cls_term(g, global.step2_logits, &agnostic, &ga, w)?;
        let b = cls_term(g, local.step2_logits, targets, &la, w)?;
        l_aux_cls = pair_sum(g, a, b, w.aux_cls, &mut parts)?;
    }

    let mut total = g.scalar(T::zero());
    for (v, weight) in parts {
        let s = g.scale(v, T::cast(weight))?;
        total = g.add(total, s)?;
    }
    let total_value = g.value(total).item()?.f64();
    Ok(LossBreakdown {
        total,
        l_cls,
        l_l1,
        l_giou,
        l_aux_bbox,
        l_aux_cls,
        total_value,
        global_assignment: ga,
        local_assignment: la,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_examples() {
        assert!((focal_loss(0.0, true, 0.25, 2.0) - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!(focal_loss(40.0, true, 0.25, 2.0) < 1e-12);
        let x: f64 = 0.7;
        let bce = -ln_sigmoid(x);
        assert!((focal_loss(x, true, 0.5, 0.0) - 0.5 * bce).abs() < 1e-12);
    }

    #[test]
    fn giou_examples() {
        let a = [1.0, 1.0, 2.0, 2.0];
        let b = [2.0, 2.0, 2.0, 2.0];
        assert!((giou(a, b).unwrap() + 5.0 / 63.0).abs() < 1e-12);
        assert_eq!(giou(a, a).unwrap(), 1.0);
        assert!(giou([0.0, 0.0, 1.0, 1.0], [1e9, 1e9, 1.0, 1.0]).unwrap() < -0.999);
        assert!(giou([0.0, 0.0, 0.0, 1.0], a).is_err());
    }

    #[test]
    fn graph_giou_matches_scalar() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64([2, 4], &[1.0, 1.0, 2.0, 2.0, 0.3, 0.4, 0.2, 0.1]).unwrap());
        let b = g.constant(Tensor::from_f64([2, 4], &[2.0, 2.0, 2.0, 2.0, 0.35, 0.38, 0.3, 0.2]).unwrap());
        let v = giou_graph(&mut g, a, b).unwrap();
        let e0 = giou([1.0, 1.0, 2.0, 2.0], [2.0, 2.0, 2.0, 2.0]).unwrap();
        let e1 = giou([0.3, 0.4, 0.2, 0.1], [0.35, 0.38, 0.3, 0.2]).unwrap();
        assert!(g.value(v).max_abs_diff(&Tensor::from_f64([2, 1], &[e0, e1]).unwrap()) < 1e-12);
    }

    #[test]
    fn graph_focal_matches_scalar() {
        let mut g = Graph::<f64>::new();
        let logits = [-1.5, 0.0, 2.0, 0.3];
        let x = g.constant(Tensor::from_f64([2, 2], &logits).unwrap());
        let t = Tensor::from_f64([2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let s = focal_sum(&mut g, x, &t, 0.25, 2.0).unwrap();
        let expect: f64 = logits
            .iter()
            .zip([true, false, false, true])
            .map(|(&l, y)| focal_loss(l, y, 0.25, 2.0))
            .sum();
        assert!((g.value(s).item().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn identical_predictions_give_identical_cost_rows() {
        let t = Targets {
            boxes: vec![[0.5, 0.5, 0.2, 0.2], [0.3, 0.6, 0.1, 0.3]],
            labels: vec![0, 1],
        };
        let logits = [0.1, -0.2, 0.1, -0.2];
        let boxes = [0.4, 0.4, 0.3, 0.3, 0.4, 0.4, 0.3, 0.3];
        let c = pairwise_cost(&logits, &boxes, 2, &t, &LossWeights::default()).unwrap();
        assert_eq!(c.get(0, 0), c.get(1, 0));
        assert_eq!(c.get(0, 1), c.get(1, 1));
    }
}
