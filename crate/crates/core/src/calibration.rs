//! Expected Calibration Error over fused detections.
//!
//! Detections are turned into (confidence, correct) samples by classwise
//! greedy matching against ground truth. Samples are then binned into `M`
//! equal-width confidence intervals `((m-1)/M, m/M]`, with confidence 0
//! going to the first bin, and
//!
//! ```text
//! ECE = sum_m |b_m| / N * |acc(b_m) - conf(b_m)|
//! ```
//!
//! Empty bins carry zero weight and are skipped.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::iou;
use crate::model::{FusedOutputs, GroundTruth};

pub const DEFAULT_BINS: usize = 10;
pub const DEFAULT_MATCH_IOU: f64 = 0.5;

pub const RELIABILITY_CSV_HEADER: &str = "bin_low,bin_high,count,confidence,accuracy";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibratedSample {
    pub confidence: f64,
    pub correct: bool,
}

impl CalibratedSample {
    pub fn new(confidence: f64, correct: bool) -> Self {
        Self {
            confidence,
            correct,
        }
    }
}

/// Samples whose confidence falls in bin `index` (1-based).
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationBin {
    pub index: usize,
    pub low: f64,
    pub high: f64,
    pub members: Vec<CalibratedSample>,
}

/// Mean confidence of a bin, `None` when empty.
pub fn bin_confidence(bin: &CalibrationBin) -> Option<f64> {
    if bin.members.is_empty() {
        return None;
    }
    Some(bin.members.iter().map(|s| s.confidence).sum::<f64>() / bin.members.len() as f64)
}

/// Fraction of correct samples in a bin, `None` when empty.
pub fn bin_accuracy(bin: &CalibrationBin) -> Option<f64> {
    if bin.members.is_empty() {
        return None;
    }
    Some(bin.members.iter().filter(|s| s.correct).count() as f64 / bin.members.len() as f64)
}

fn bin_bounds(index: usize, bins: usize) -> (f64, f64) {
    ((index - 1) as f64 / bins as f64, index as f64 / bins as f64)
}

/// 1-based bin for a confidence, consistent with the bounds reported per bin.
pub fn bin_index(confidence: f64, bins: usize) -> usize {
    let mut m = ((confidence * bins as f64).ceil() as usize).clamp(1, bins);
    // ceil(c * M) can land one bin off when c sits on an edge.
    while m > 1 && confidence <= bin_bounds(m, bins).0 {
        m -= 1;
    }
    while m < bins && confidence > bin_bounds(m, bins).1 {
        m += 1;
    }
    m
}

/// Partitions samples into `bins` equal-width bins.
pub fn assign_bins(samples: &[CalibratedSample], bins: usize) -> Result<Vec<CalibrationBin>> {
    if bins == 0 {
        return Err(Error::Config("bin count must be positive".into()));
    }
    let mut out: Vec<CalibrationBin> = (1..=bins)
        .map(|index| {
            let (low, high) = bin_bounds(index, bins);
            CalibrationBin {
                index,
                low,
                high,
                members: Vec::new(),
            }
        })
        .collect();
    for s in samples {
        if !(0.0..=1.0).contains(&s.confidence) {
            return Err(Error::Data(format!(
                "confidence {} outside [0, 1]",
                s.confidence
            )));
        }
        out[bin_index(s.confidence, bins) - 1].members.push(*s);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    pub index: usize,
    pub low: f64,
    pub high: f64,
    pub count: usize,
    pub confidence: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bins: usize,
    pub samples: usize,
    pub ece: f64,
    pub per_bin: Vec<BinSummary>,
}

/// Expected Calibration Error over `bins` equal-width bins.
pub fn ece(samples: &[CalibratedSample], bins: usize) -> Result<CalibrationReport> {
    if samples.is_empty() {
        return Err(Error::NoSamples);
    }
    let n = samples.len() as f64;
    let binned = assign_bins(samples, bins)?;
    let mut total = 0.0;
    let per_bin = binned
        .iter()
        .map(|b| {
            let confidence = bin_confidence(b);
            let accuracy = bin_accuracy(b);
            if let (Some(c), Some(a)) = (confidence, accuracy) {
                total += b.members.len() as f64 / n * (a - c).abs();
            }
            BinSummary {
                index: b.index,
                low: b.low,
                high: b.high,
                count: b.members.len(),
                confidence,
                accuracy,
            }
        })
        .collect();
    Ok(CalibrationReport {
        bins,
        samples: samples.len(),
        ece: total.clamp(0.0, 1.0),
        per_bin,
    })
}

/// One reliability-diagram row per bin, empty bins included.
#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityRow {
    pub bin_low: f64,
    pub bin_high: f64,
    pub count: usize,
    pub confidence: Option<f64>,
    pub accuracy: Option<f64>,
}

pub fn reliability_data(report: &CalibrationReport) -> Vec<ReliabilityRow> {
    report
        .per_bin
        .iter()
        .map(|b| ReliabilityRow {
            bin_low: b.low,
            bin_high: b.high,
            count: b.count,
            confidence: b.confidence,
            accuracy: b.accuracy,
        })
        .collect()
}

/// CSV rendering; absent statistics are written as empty fields.
pub fn reliability_csv(rows: &[ReliabilityRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut out = String::from(RELIABILITY_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{:.6},{:.6},{},{},{}",
            r.bin_low,
            r.bin_high,
            r.count,
            opt(r.confidence),
            opt(r.accuracy)
        );
    }
    out
}

/// Classwise greedy matching of fused detections to ground truth.
///
/// Within each image, detections are visited in score order and take the
/// unmatched same-category ground-truth box of highest IoU, provided that
/// IoU reaches `match_iou`. Every detection yields one sample; samples come
/// out in image-id order.
pub fn match_detections(
    fused: &FusedOutputs,
    gt: &GroundTruth,
    match_iou: f64,
) -> Vec<CalibratedSample> {
    let mut samples = Vec::new();
    for (&image_id, dets) in fused {
        let truth = gt.get(image_id);
        let mut taken = vec![false; truth.len()];
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
        for i in order {
            let d = &dets[i];
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in truth.iter().enumerate() {
                if taken[j] || g.category != d.category {
                    continue;
                }
                let u = iou(&d.bbox, &g.bbox);
                if best.is_none_or(|(_, bu)| u > bu) {
                    best = Some((j, u));
                }
            }
            let correct = match best {
                Some((j, u)) if u >= match_iou => {
                    taken[j] = true;
                    true
                }
                _ => false,
            };
            samples.push(CalibratedSample::new(d.score, correct));
        }
    }
    samples
}
