//! COCO-style average precision and recall at fixed IoU thresholds.
//!
//! Single area range, crowd regions ignored, 101-point interpolated AP.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::iou;
use crate::model::{CategoryId, FusedOutputs, GroundTruth};

pub const RECALL_POINTS: usize = 101;

/// IoU thresholds 0.50, 0.55, ..., 0.95 used for the COCO headline AP.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub score: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Matched/unmatched outcome of one detection, keyed by its score.
#[derive(Debug, Clone, Copy)]
struct Outcome {
    score: f64,
    true_positive: bool,
}

/// Per-image greedy matching for one category: detections in score order
/// each take the unmatched ground-truth box of highest IoU >= `iou_t`.
fn match_category(
    dets: &FusedOutputs,
    gt: &GroundTruth,
    category: CategoryId,
    iou_t: f64,
    max_dets: Option<usize>,
) -> (Vec<Outcome>, usize) {
    let mut outcomes = Vec::new();
    let mut matched = 0;
    for (&image_id, image_dets) in dets {
        let truth: Vec<_> = gt
            .get(image_id)
            .iter()
            .filter(|g| g.category == category)
            .collect();
        if truth.is_empty()
            && !gt.images.contains_key(&image_id)
            && !gt.boxes.contains_key(&image_id)
        {
            // Detections on images unknown to the ground truth are ignored.
            continue;
        }
        let mut ranked: Vec<_> = image_dets
            .iter()
            .filter(|d| d.category == category)
            .collect();
        ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
        if let Some(k) = max_dets {
            ranked.truncate(k);
        }
        let mut taken = vec![false; truth.len()];
        for d in ranked {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in truth.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let u = iou(&d.bbox, &g.bbox);
                if u >= iou_t && best.is_none_or(|(_, bu)| u > bu) {
                    best = Some((j, u));
                }
            }
            if let Some((j, _)) = best {
                taken[j] = true;
                matched += 1;
            }
            outcomes.push(Outcome {
                score: d.score,
                true_positive: best.is_some(),
            });
        }
    }
    (outcomes, matched)
}

fn gt_count(gt: &GroundTruth, category: CategoryId) -> usize {
    gt.boxes
        .values()
        .flatten()
        .filter(|g| g.category == category)
        .count()
}

/// Categories with at least one ground-truth box, ascending.
fn gt_categories(gt: &GroundTruth) -> Result<BTreeSet<CategoryId>> {
    let cats: BTreeSet<_> = gt.boxes.values().flatten().map(|g| g.category).collect();
    if cats.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    Ok(cats)
}

/// Precision/recall after each detection, in global score order.
fn pr_curve(mut outcomes: Vec<Outcome>, n_gt: usize) -> Vec<PrPoint> {
    // Stable: ties keep image order, as COCO's mergesort does.
    outcomes.sort_by(|a, b| b.score.total_cmp(&a.score));
    let (mut tp, mut fp) = (0usize, 0usize);
    outcomes
        .iter()
        .map(|o| {
            if o.true_positive {
                tp += 1;
            } else {
                fp += 1;
            }
            PrPoint {
                score: o.score,
                precision: tp as f64 / (tp + fp) as f64,
                recall: tp as f64 / n_gt as f64,
            }
        })
        .collect()
}

/// 101-point interpolated AP of a precision/recall curve.
pub fn interpolated_ap(curve: &[PrPoint]) -> f64 {
    let mut precision: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for i in (1..precision.len()).rev() {
        precision[i - 1] = precision[i - 1].max(precision[i]);
    }
    let mut total = 0.0;
    let mut idx = 0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        while idx < curve.len() && curve[idx].recall < r {
            idx += 1;
        }
        if idx < curve.len() {
            total += precision[idx];
        }
    }
    total / RECALL_POINTS as f64
}

/// Precision/recall curve for one category.
pub fn category_pr_curve(
    dets: &FusedOutputs,
    gt: &GroundTruth,
    category: CategoryId,
    iou_t: f64,
) -> Vec<PrPoint> {
    let (outcomes, _) = match_category(dets, gt, category, iou_t, None);
    pr_curve(outcomes, gt_count(gt, category))
}

fn category_ap(dets: &FusedOutputs, gt: &GroundTruth, category: CategoryId, iou_t: f64) -> f64 {
    interpolated_ap(&category_pr_curve(dets, gt, category, iou_t))
}

fn category_ar(
    dets: &FusedOutputs,
    gt: &GroundTruth,
    category: CategoryId,
    iou_t: f64,
    max_dets: Option<usize>,
) -> f64 {
    let (_, matched) = match_category(dets, gt, category, iou_t, max_dets);
    matched as f64 / gt_count(gt, category) as f64
}

/// Mean over ground-truth categories of the 101-point interpolated AP.
pub fn ap_at_iou(dets: &FusedOutputs, gt: &GroundTruth, iou_t: f64) -> Result<f64> {
    let cats = gt_categories(gt)?;
    let sum: f64 = cats.iter().map(|&c| category_ap(dets, gt, c, iou_t)).sum();
    Ok(sum / cats.len() as f64)
}

/// Mean over ground-truth categories of the recall reached by the top
/// `max_dets` detections per image (all detections when `None`).
pub fn ar_at_iou(
    dets: &FusedOutputs,
    gt: &GroundTruth,
    iou_t: f64,
    max_dets: Option<usize>,
) -> Result<f64> {
    let cats = gt_categories(gt)?;
    let sum: f64 = cats
        .iter()
        .map(|&c| category_ar(dets, gt, c, iou_t, max_dets))
        .sum();
    Ok(sum / cats.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryEval {
    pub category: CategoryId,
    pub ground_truth: usize,
    pub detections: usize,
    pub ap_50: f64,
    pub ap_95: f64,
    pub ar_50: f64,
    pub ar_95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap_50: f64,
    pub ap_95: f64,
    pub ar_50: f64,
    pub ar_95: f64,
    /// Mean AP over IoU 0.50:0.05:0.95; informational.
    pub ap_coco: f64,
    pub detections: usize,
    pub ground_truth: usize,
    pub per_category: Vec<CategoryEval>,
}

pub fn evaluate(dets: &FusedOutputs, gt: &GroundTruth) -> Result<EvalReport> {
    let cats = gt_categories(gt)?;
    let thresholds = coco_iou_thresholds();
    let mut det_counts: BTreeMap<CategoryId, usize> = BTreeMap::new();
    for d in dets.values().flatten() {
        *det_counts.entry(d.category).or_default() += 1;
    }

    let per_category: Vec<CategoryEval> = cats
        .iter()
        .map(|&c| CategoryEval {
            category: c,
            ground_truth: gt_count(gt, c),
            detections: det_counts.get(&c).copied().unwrap_or(0),
            ap_50: category_ap(dets, gt, c, 0.50),
            ap_95: category_ap(dets, gt, c, 0.95),
            ar_50: category_ar(dets, gt, c, 0.50, None),
            ar_95: category_ar(dets, gt, c, 0.95, None),
        })
        .collect();
    let n = per_category.len() as f64;
    let mean = |f: fn(&CategoryEval) -> f64| per_category.iter().map(f).sum::<f64>() / n;

    let ap_coco = thresholds
        .iter()
        .map(|&t| {
            cats.iter()
                .map(|&c| category_ap(dets, gt, c, t))
                .sum::<f64>()
                / n
        })
        .sum::<f64>()
        / thresholds.len() as f64;

    Ok(EvalReport {
        ap_50: mean(|c| c.ap_50),
        ap_95: mean(|c| c.ap_95),
        ar_50: mean(|c| c.ar_50),
        ar_95: mean(|c| c.ar_95),
        ap_coco,
        detections: dets.values().map(Vec::len).sum(),
        ground_truth: gt.num_boxes(),
        per_category,
    })
}
