use serde::Serialize;

use crate::data::Scene;
use crate::error::Result;
use crate::loss::iou;
use crate::model::Detector;
use crate::tensor::ParamStore;

/// Matching thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

/// A scored box in pixel `(x, y, w, h)` on image `image`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub bbox: [f64; 4],
    pub class: usize,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtBox {
    pub image: usize,
    pub bbox: [f64; 4],
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// `None` for classes without ground truth.
    pub per_class_ap: Vec<Option<f64>>,
    pub images: usize,
    pub gts: usize,
    pub preds: usize,
}

fn xywh_to_cxcywh(b: [f64; 4]) -> [f64; 4] {
    [b[0] + b[2] / 2.0, b[1] + b[3] / 2.0, b[2], b[3]]
}

/// Greedy matching in descending score order; returns a TP flag per
/// prediction in that order.
fn match_class(preds: &[&ScoredBox], gts: &[&GtBox], thresh: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    preds
        .iter()
        .map(|p| {
            let mut best = None;
            let mut best_iou = thresh;
            for (j, g) in gts.iter().enumerate() {
                if used[j] || g.image != p.image {
                    continue;
                }
                let o = iou(xywh_to_cxcywh(p.bbox), xywh_to_cxcywh(g.bbox));
                if o >= best_iou {
                    best_iou = o;
                    best = Some(j);
                }
            }
            if let Some(j) = best {
                used[j] = true;
                true
            } else {
                false
            }
        })
        .collect()
}

/// 101-point interpolated precision over recall for a ranked TP sequence.
pub fn interpolated_ap(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        recall.push(hits as f64 / n_gt as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let r = r as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r - 1e-12);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

/// COCO-style AP over `num_classes` classes without NMS. Predictions below
/// `score_thresh` are ignored.
pub fn average_precision(preds: &[ScoredBox], gts: &[GtBox], num_classes: usize, images: usize, score_thresh: f64) -> EvalResult {
    let thresholds = iou_thresholds();
    let kept: Vec<&ScoredBox> = preds.iter().filter(|p| p.score >= score_thresh).collect();
    let mut per_threshold = vec![Vec::new(); thresholds.len()];
    let mut per_class_ap = vec![None; num_classes];
    for c in 0..num_classes {
        let class_gts: Vec<&GtBox> = gts.iter().filter(|g| g.class == c).collect();
        if class_gts.is_empty() {
            continue;
        }
        let mut class_preds: Vec<&ScoredBox> = kept.iter().copied().filter(|p| p.class == c).collect();
        class_preds.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut total = 0.0;
        for (ti, &t) in thresholds.iter().enumerate() {
            let ap = interpolated_ap(&match_class(&class_preds, &class_gts, t), class_gts.len());
            per_threshold[ti].push(ap);
            total += ap;
        }
        per_class_ap[c] = Some(total / thresholds.len() as f64);
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let ap = mean(&per_threshold.iter().map(|v| mean(v)).collect::<Vec<_>>());
    EvalResult {
        ap,
        ap50: mean(&per_threshold[0]),
        ap75: mean(&per_threshold[5]),
        per_class_ap,
        images,
        gts: gts.len(),
        preds: kept.len(),
    }
}

/// Runs the detector on every scene and scores its final-stage output.
pub fn evaluate_ap(detector: &Detector, params: &ParamStore<f32>, scenes: &[Scene], score_thresh: f64) -> Result<EvalResult> {
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for (i, scene) in scenes.iter().enumerate() {
        let image = scene.to_image()?;
        let (w, h) = (scene.width as f64, scene.height as f64);
        for d in detector.predict(params, &image)? {
            let [cx, cy, bw, bh] = d.bbox;
            preds.push(ScoredBox {
                image: i,
                bbox: [(cx - bw / 2.0) * w, (cy - bh / 2.0) * h, bw * w, bh * h],
                class: d.class,
                score: d.score,
            });
        }
        for a in &scene.annotations {
            gts.push(GtBox {
                image: i,
                bbox: a.bbox,
                class: a.category_id as usize - 1,
            });
        }
    }
    Ok(average_precision(&preds, &gts, detector.config.num_classes, scenes.len(), score_thresh))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(b: [f64; 4]) -> GtBox {
        GtBox { image: 0, bbox: b, class: 0 }
    }

    fn pred(b: [f64; 4], score: f64) -> ScoredBox {
        ScoredBox {
            image: 0,
            bbox: b,
            class: 0,
            score,
        }
    }

    #[test]
    fn exact_prediction_is_perfect() {
        let b = [2.0, 3.0, 10.0, 8.0];
        let r = average_precision(&[pred(b, 0.9)], &[gt(b)], 1, 1, 0.0);
        assert_eq!((r.ap, r.ap50, r.ap75), (1.0, 1.0, 1.0));
    }

    #[test]
    fn no_predictions_score_zero() {
        let r = average_precision(&[], &[gt([0.0, 0.0, 4.0, 4.0])], 1, 1, 0.0);
        assert_eq!(r.ap, 0.0);
    }

    #[test]
    fn trailing_false_positive_keeps_full_ap50() {
        let b = [2.0, 3.0, 10.0, 8.0];
        let r = average_precision(&[pred(b, 0.9), pred([40.0, 40.0, 5.0, 5.0], 0.5)], &[gt(b)], 1, 1, 0.0);
        assert_eq!(r.ap50, 1.0);
        let r = average_precision(&[pred([40.0, 40.0, 5.0, 5.0], 0.95), pred(b, 0.9)], &[gt(b)], 1, 1, 0.0);
        assert!((r.ap50 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn classes_without_gts_are_excluded() {
        let b = [2.0, 3.0, 10.0, 8.0];
        let r = average_precision(&[pred(b, 0.9)], &[gt(b)], 3, 1, 0.0);
        assert_eq!(r.per_class_ap, vec![Some(1.0), None, None]);
        assert_eq!(r.ap, 1.0);
    }
}
