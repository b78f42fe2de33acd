//! Mask AP over IoU thresholds 0.50:0.05:0.95 and ablation tables.

mod report;

pub use report::{ablation_report, per_class_csv, AblationRow, AblationTable, RunSummary};

use thiserror::Error;

use crate::net::Detection;
use crate::shapes::{Bitmask, SceneRecord, SplitConfig};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("mask dimensions differ: {0:?} vs {1:?}")]
    Dimensions((usize, usize), (usize, usize)),
    #[error("unknown class id {0}")]
    UnknownClass(usize),
    #[error("detection refers to image {0}, which is not in the ground truth")]
    UnknownImage(usize),
    #[error("baseline {0:?} not among the runs")]
    MissingBaseline(String),
    #[error("runs disagree on {0}")]
    Mismatch(String),
}

pub const RECALL_POINTS: usize = 101;

/// `0.50, 0.55, …, 0.95`.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| f64::from(50 + 5 * i) / 100.0).collect()
}

/// `|a ∩ b| / |a ∪ b|`, 0 when both are empty.
pub fn mask_iou(a: &Bitmask, b: &Bitmask) -> Result<f64, EvalError> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(EvalError::Dimensions((a.height(), a.width()), (b.height(), b.width())));
    }
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// AP from a prediction × ground-truth IoU matrix (`iou[p][g]`).
///
/// Predictions are visited by descending score (ties keep input order) and
/// each takes the unmatched ground truth with the highest IoU at or above
/// `threshold`, preferring the lower index on ties. Returns `None` when
/// there is no ground truth.
pub fn ap_from_iou(scores: &[f64], iou: &[Vec<f64>], num_gt: usize, threshold: f64) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut matched = vec![false; num_gt];
    let mut tp = 0usize;
    let mut curve: Vec<(usize, f64)> = Vec::with_capacity(order.len());
    for (rank, &p) in order.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (g, &v) in iou[p].iter().enumerate() {
            if !matched[g] && v >= threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            matched[g] = true;
            tp += 1;
        }
        curve.push((tp, tp as f64 / (rank + 1) as f64));
    }
    // interpolated precision: running max from the right
    for i in (0..curve.len().saturating_sub(1)).rev() {
        curve[i].1 = curve[i].1.max(curve[i + 1].1);
    }
    let mut sum = 0.0;
    let mut i = 0;
    for k in 0..RECALL_POINTS {
        // first prefix with recall >= k/100, compared exactly in integers
        while i < curve.len() && curve[i].0 * 100 < k * num_gt {
            i += 1;
        }
        if i == curve.len() {
            break;
        }
        sum += curve[i].1;
    }
    Some(sum / RECALL_POINTS as f64)
}

/// AP of scored masks against ground-truth masks of one class.
pub fn ap_single(predictions: &[(f64, &Bitmask)], gts: &[&Bitmask], threshold: f64) -> Result<Option<f64>, EvalError> {
    let iou = predictions
        .iter()
        .map(|(_, m)| gts.iter().map(|g| mask_iou(m, g)).collect::<Result<Vec<_>, _>>())
        .collect::<Result<Vec<_>, _>>()?;
    let scores: Vec<f64> = predictions.iter().map(|(s, _)| *s).collect();
    Ok(ap_from_iou(&scores, &iou, gts.len(), threshold))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    /// `ap[class][threshold]`; `None` for classes without ground truth.
    pub ap: Vec<Option<Vec<f64>>>,
    pub class_ap: Vec<Option<f64>>,
    pub ap_a: Option<f64>,
    pub ap_b: Option<f64>,
    pub images: usize,
    pub gt_instances: usize,
    pub predictions: usize,
}

fn set_mean(class_ap: &[Option<f64>], members: &[usize]) -> Option<f64> {
    let vals: Vec<f64> = members.iter().filter_map(|&c| class_ap.get(c).copied().flatten()).collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Mask AP per class and threshold, pooled over images, with A/B means.
pub fn coco_map(detections: &[Detection], truth: &[SceneRecord], split: &SplitConfig) -> Result<EvalReport, EvalError> {
    let c = split.num_classes();
    let thresholds = iou_thresholds();
    for d in detections {
        if d.category >= c {
            return Err(EvalError::UnknownClass(d.category));
        }
        if d.image_id >= truth.len() {
            return Err(EvalError::UnknownImage(d.image_id));
        }
    }
    for inst in truth.iter().flat_map(|s| &s.instances) {
        if inst.category >= c {
            return Err(EvalError::UnknownClass(inst.category));
        }
    }
    let mut ap = Vec::with_capacity(c);
    for class in 0..c {
        let gts: Vec<(usize, &Bitmask)> = truth
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.instances.iter().filter(|g| g.category == class).map(move |g| (i, &g.mask)))
            .collect();
        if gts.is_empty() {
            ap.push(None);
            continue;
        }
        let preds: Vec<&Detection> = detections.iter().filter(|d| d.category == class).collect();
        let scores: Vec<f64> = preds.iter().map(|d| f64::from(d.score)).collect();
        let iou = preds
            .iter()
            .map(|d| {
                gts.iter()
                    .map(|(img, g)| if *img == d.image_id { mask_iou(&d.mask, g) } else { Ok(0.0) })
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        let per_t: Vec<f64> = thresholds
            .iter()
            .map(|&t| ap_from_iou(&scores, &iou, gts.len(), t).expect("ground truth present"))
            .collect();
        ap.push(Some(per_t));
    }
    let class_ap: Vec<Option<f64>> =
        ap.iter().map(|v| v.as_ref().map(|xs| xs.iter().sum::<f64>() / xs.len() as f64)).collect();
    Ok(EvalReport {
        ap_a: set_mean(&class_ap, &split.a),
        ap_b: set_mean(&class_ap, &split.b),
        thresholds,
        ap,
        class_ap,
        images: truth.len(),
        gt_instances: truth.iter().map(|s| s.instances.len()).sum(),
        predictions: detections.len(),
    })
}
