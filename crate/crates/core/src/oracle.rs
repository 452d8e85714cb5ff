//! Slow, direct reference implementations used to cross-check the fast
//! paths. Everything here works on plain `f64` data.

use crate::loss::{focal_loss, LossWeights};
use crate::tensor::Tensor;

/// Bilinear read of a `[C, H, W]` map at normalized `(x, y)` as a dense sum
/// of tent weights over every pixel; pixels outside the map count as zero.
pub fn bilinear(feat: &Tensor<f64>, x: f64, y: f64) -> Vec<f64> {
    let s = feat.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let px = x * w as f64 - 0.5;
    let py = y * h as f64 - 0.5;
    let mut out = vec![0.0; c];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let wx = (1.0 - (px - j as f64).abs()).max(0.0);
                let wy = (1.0 - (py - i as f64).abs()).max(0.0);
                out[ch] += wx * wy * feat.at(&[ch, i, j]);
            }
        }
    }
    out
}

/// Per-level weights for pyramid z values 2..5, without any stabilization.
pub fn level_weights(z_w: f64, z_h: f64) -> [f64; 4] {
    let mut out = [0.0; 4];
    for z in [z_w, z_h] {
        let e: Vec<f64> = (2..=5).map(|l| (-(l as f64 - z).powi(2) / 2.0).exp()).collect();
        let total: f64 = e.iter().sum();
        for (o, v) in out.iter_mut().zip(&e) {
            *o += v / total;
        }
    }
    out
}

/// Level-weighted read across four levels at one point.
pub fn bidirectional(levels: &[Tensor<f64>; 4], x: f64, y: f64, z_w: f64, z_h: f64) -> Vec<f64> {
    let w = level_weights(z_w, z_h);
    let mut out = vec![0.0; levels[0].shape()[0]];
    for (lvl, wj) in levels.iter().zip(w) {
        for (o, v) in out.iter_mut().zip(bilinear(lvl, x, y)) {
            *o += wj * v;
        }
    }
    out
}

/// Level index 0..3 for a box of `w_px x h_px` pixels.
pub fn roi_level(w_px: f64, h_px: f64, canonical: f64) -> usize {
    let k = 4.0 + ((w_px * h_px).sqrt() / canonical).log2();
    let k = k.floor().max(2.0).min(5.0);
    k as usize - 2
}

/// `S x S` bins (row-major, `[S*S][C]`) pooled from a normalized
/// `(cx, cy, w, h)` box clipped to the image, each bin the mean of a `r x r`
/// grid of bilinear reads.
pub fn roi_align(levels: &[Tensor<f64>; 4], image_size: (usize, usize), b: [f64; 4], s: usize, r: usize, canonical: f64) -> Vec<Vec<f64>> {
    let x1 = (b[0] - b[2] / 2.0).clamp(0.0, 1.0);
    let y1 = (b[1] - b[3] / 2.0).clamp(0.0, 1.0);
    let bw = ((b[0] + b[2] / 2.0).clamp(0.0, 1.0) - x1).max(1e-4);
    let bh = ((b[1] + b[3] / 2.0).clamp(0.0, 1.0) - y1).max(1e-4);
    let lvl = &levels[roi_level(bw * image_size.1 as f64, bh * image_size.0 as f64, canonical)];
    let mut bins = Vec::with_capacity(s * s);
    for iy in 0..s {
        for ix in 0..s {
            let mut acc = vec![0.0; lvl.shape()[0]];
            for sy in 0..r {
                for sx in 0..r {
                    let x = x1 + bw * (ix as f64 + (sx as f64 + 0.5) / r as f64) / s as f64;
                    let y = y1 + bh * (iy as f64 + (sy as f64 + 0.5) / r as f64) / s as f64;
                    for (a, v) in acc.iter_mut().zip(bilinear(lvl, x, y)) {
                        *a += v / (r * r) as f64;
                    }
                }
            }
            bins.push(acc);
        }
    }
    bins
}

fn corners(b: [f64; 4]) -> [f64; 4] {
    [b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0]
}

/// GIoU of two `(cx, cy, w, h)` boxes from areas of the intersection,
/// union and enclosing box.
pub fn giou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let (a, b) = (corners(a), corners(b));
    let inter = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0) * (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    let hull = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    inter / union - (hull - union) / hull
}

/// Matching cost of one prediction against one ground truth.
pub fn matching_cost(logits: &[f64], pred: [f64; 4], label: usize, target: [f64; 4], w: &LossWeights) -> f64 {
    let l = logits[label];
    let cls = focal_loss(l, true, w.focal_alpha, w.focal_gamma) - focal_loss(l, false, w.focal_alpha, w.focal_gamma);
    let l1: f64 = pred.iter().zip(&target).map(|(p, t)| (p - t).abs()).sum();
    w.cls * cls + w.l1 * l1 + w.giou * (1.0 - giou(pred, target))
}

/// Unweighted `(cls, l1, giou)` stage terms when prediction `pred` is the
/// only match, for the single ground truth `(target, label)`.
pub fn single_pair_stage_loss(logits: &[Vec<f64>], boxes: &[[f64; 4]], pred: usize, target: [f64; 4], label: usize, w: &LossWeights) -> (f64, f64, f64) {
    let mut cls = 0.0;
    for (i, row) in logits.iter().enumerate() {
        for (c, &l) in row.iter().enumerate() {
            cls += focal_loss(l, i == pred && c == label, w.focal_alpha, w.focal_gamma);
        }
    }
    let l1 = boxes[pred].iter().zip(&target).map(|(p, t)| (p - t).abs()).sum();
    (cls, l1, 1.0 - giou(boxes[pred], target))
}

/// Intersection over union of pixel `(x, y, w, h)` boxes.
fn iou_xywh(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = ((a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0])).max(0.0);
    let ih = ((a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    inter / (a[2] * a[3] + b[2] * b[3] - inter)
}

/// Single-class, single-image AP at one IoU threshold: greedy matching by
/// descending score, then 101-point precision where each recall point takes
/// the best precision at any rank reaching it.
pub fn average_precision(preds: &[([f64; 4], f64)], gts: &[[f64; 4]], thresh: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&i, &j| preds[j].1.total_cmp(&preds[i].1));
    let mut used = vec![false; gts.len()];
    let mut points = Vec::new();
    let mut tp = 0;
    for (rank, &i) in order.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            let o = iou_xywh(preds[i].0, *g);
            if !used[j] && o >= thresh && best.map_or(true, |(_, b)| o >= b) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
            tp += 1;
        }
        points.push((tp as f64 / gts.len() as f64, tp as f64 / (rank + 1) as f64));
    }
    let mut total = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        total += points
            .iter()
            .filter(|(rec, _)| *rec >= r - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
    }
    total / 101.0
}
