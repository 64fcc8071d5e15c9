//! Decision fusion for ensemble detections: greedy NMS, Soft-NMS and
//! Weighted Boxes Fusion with per-cluster coordinate variance.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{iou, BBox};
use crate::model::{
    pool, rank_order, CategoryId, Detection, EnsembleOutputs, FusedDetection, FusedOutputs,
    GroundTruth, ImageId,
};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.50;
pub const DEFAULT_SOFT_SIGMA: f64 = 0.5;
pub const DEFAULT_SOFT_SCORE_FLOOR: f64 = 0.001;
pub const DEFAULT_WBF_SKIP_THRESHOLD: f64 = 0.20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMethod {
    Nms,
    SoftNms,
    Wbf,
}

impl FusionMethod {
    pub const ALL: [FusionMethod; 3] =
        [FusionMethod::Nms, FusionMethod::SoftNms, FusionMethod::Wbf];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMethod::Nms => "nms",
            FusionMethod::SoftNms => "softnms",
            FusionMethod::Wbf => "wbf",
        }
    }

    /// Human-readable name used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            FusionMethod::Nms => "NMS",
            FusionMethod::SoftNms => "Soft NMS",
            FusionMethod::Wbf => "WBF",
        }
    }
}

impl fmt::Display for FusionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nms" => Ok(FusionMethod::Nms),
            "softnms" | "soft-nms" | "soft_nms" => Ok(FusionMethod::SoftNms),
            "wbf" => Ok(FusionMethod::Wbf),
            other => Err(Error::Config(format!(
                "unknown fusion method '{other}' (expected nms, softnms or wbf)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoftMode {
    Linear,
    Gaussian,
}

impl FromStr for SoftMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(SoftMode::Linear),
            "gaussian" => Ok(SoftMode::Gaussian),
            other => Err(Error::Config(format!(
                "unknown soft-nms mode '{other}' (expected linear or gaussian)"
            ))),
        }
    }
}

impl fmt::Display for SoftMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SoftMode::Linear => "linear",
            SoftMode::Gaussian => "gaussian",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub method: FusionMethod,
    pub iou_threshold: f64,
    pub soft_sigma: f64,
    pub soft_mode: SoftMode,
    pub soft_score_floor: f64,
    pub wbf_skip_threshold: f64,
    pub conf_rescale: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            method: FusionMethod::Wbf,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            soft_sigma: DEFAULT_SOFT_SIGMA,
            soft_mode: SoftMode::Gaussian,
            soft_score_floor: DEFAULT_SOFT_SCORE_FLOOR,
            wbf_skip_threshold: DEFAULT_WBF_SKIP_THRESHOLD,
            conf_rescale: true,
        }
    }
}

impl FusionConfig {
    pub fn with_method(method: FusionMethod) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.iou_threshold;
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::Config(format!("iou_threshold {t} outside (0, 1]")));
        }
        if !(self.soft_sigma > 0.0 && self.soft_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "soft_sigma {} must be positive",
                self.soft_sigma
            )));
        }
        if !self.soft_score_floor.is_finite() {
            return Err(Error::Config("soft_score_floor must be finite".into()));
        }
        if !self.wbf_skip_threshold.is_finite() {
            return Err(Error::Config("wbf_skip_threshold must be finite".into()));
        }
        Ok(())
    }
}

/// Indices of `dets` in fusion order: rank order, then input position.
fn ranked_indices(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| rank_order(&dets[a], &dets[b]).then(a.cmp(&b)));
    order
}

fn sort_fused(out: &mut [FusedDetection]) {
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
}

/// Classwise greedy NMS. A candidate is suppressed when its IoU with a kept
/// box of the same category is strictly greater than `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<FusedDetection> {
    let order = ranked_indices(dets);
    let mut kept: Vec<&Detection> = Vec::new();
    for &i in &order {
        let cand = &dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.category == cand.category && iou(&k.bbox, &cand.bbox) > iou_threshold);
        if !suppressed {
            kept.push(cand);
        }
    }
    // Kept boxes are already in rank order.
    kept.into_iter().map(FusedDetection::singleton).collect()
}

/// Soft-NMS: overlapping same-category boxes have their scores decayed
/// instead of being removed, then dropped once below the score floor.
pub fn soft_nms(dets: &[Detection], config: &FusionConfig) -> Vec<FusedDetection> {
    let order = ranked_indices(dets);
    // (rank, current score) of boxes still in play.
    let mut live: Vec<(usize, f64)> = order
        .iter()
        .enumerate()
        .map(|(rank, &i)| (rank, dets[i].score))
        .filter(|&(_, s)| s >= config.soft_score_floor)
        .collect();
    let mut out = Vec::with_capacity(dets.len());

    while !live.is_empty() {
        let best = live
            .iter()
            .enumerate()
            .max_by(|(_, (ra, sa)), (_, (rb, sb))| sa.total_cmp(sb).then(rb.cmp(ra)))
            .map(|(pos, _)| pos)
            .expect("nonempty");
        let (rank, score) = live.swap_remove(best);
        let sel = &dets[order[rank]];
        let mut fused = FusedDetection::singleton(sel);
        fused.score = score;
        out.push(fused);

        live.retain_mut(|(r, s)| {
            let cand = &dets[order[*r]];
            if cand.category != sel.category {
                return true;
            }
            let u = iou(&sel.bbox, &cand.bbox);
            if u > 0.0 {
                *s *= match config.soft_mode {
                    SoftMode::Linear if u > config.iou_threshold => 1.0 - u,
                    SoftMode::Linear => 1.0,
                    SoftMode::Gaussian => (-(u * u) / config.soft_sigma).exp(),
                };
            }
            *s >= config.soft_score_floor
        });
    }
    sort_fused(&mut out);
    out
}

/// A set of matched boxes together with its running fused box.
#[derive(Debug, Clone)]
pub struct Cluster<'a> {
    pub members: Vec<&'a Detection>,
    pub fused: BBox,
}

impl<'a> Cluster<'a> {
    fn new(first: &'a Detection) -> Self {
        Self {
            members: vec![first],
            fused: first.bbox,
        }
    }

    pub fn category(&self) -> CategoryId {
        self.members[0].category
    }

    fn push(&mut self, det: &'a Detection) {
        self.members.push(det);
        self.fused = weighted_box(&self.members);
    }

    /// Fused detection for this cluster, with the optional `min(T, n) / n` rescale.
    pub fn to_fused(&self, n_models: usize, conf_rescale: bool) -> FusedDetection {
        let size = self.members.len();
        let mut score = self.members.iter().map(|d| d.score).sum::<f64>() / size as f64;
        if conf_rescale {
            score *= size.min(n_models) as f64 / n_models as f64;
        }
        FusedDetection {
            bbox: self.fused,
            category: self.category(),
            score: score.clamp(0.0, 1.0),
            variance: corner_variance(&self.members),
            cluster_size: size,
            source_model_ids: self.members.iter().map(|d| d.model_id).collect(),
        }
    }
}

/// Score-weighted average of member corners, clamped to the member hull.
fn weighted_box(members: &[&Detection]) -> BBox {
    let total: f64 = members.iter().map(|d| d.score).sum();
    let mut out = [0.0; 4];
    for (k, slot) in out.iter_mut().enumerate() {
        let (lo, hi) = members
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| {
                let c = d.bbox.corners()[k];
                (lo.min(c), hi.max(c))
            });
        let avg = if total > 0.0 {
            members
                .iter()
                .map(|d| d.score * d.bbox.corners()[k])
                .sum::<f64>()
                / total
        } else {
            members.iter().map(|d| d.bbox.corners()[k]).sum::<f64>() / members.len() as f64
        };
        *slot = avg.clamp(lo, hi);
    }
    out[2] = out[2].max(out[0]);
    out[3] = out[3].max(out[1]);
    BBox::from_corners_unchecked(out)
}

/// Unweighted population variance of each corner across members.
fn corner_variance(members: &[&Detection]) -> [f64; 4] {
    let n = members.len() as f64;
    let mut out = [0.0; 4];
    for (k, slot) in out.iter_mut().enumerate() {
        let first = members[0].bbox.corners()[k];
        if members.iter().all(|d| d.bbox.corners()[k] == first) {
            continue;
        }
        let mean = members.iter().map(|d| d.bbox.corners()[k]).sum::<f64>() / n;
        *slot = members
            .iter()
            .map(|d| (d.bbox.corners()[k] - mean).powi(2))
            .sum::<f64>()
            / n;
    }
    out
}

/// Builds WBF clusters for one category. `dets` must already be in fusion order.
pub fn wbf_clusters<'a>(dets: &[&'a Detection], iou_threshold: f64) -> Vec<Cluster<'a>> {
    let mut clusters: Vec<Cluster<'a>> = Vec::new();
    for &det in dets {
        let mut best: Option<(usize, f64)> = None;
        for (ci, c) in clusters.iter().enumerate() {
            let u = iou(&c.fused, &det.bbox);
            if u > iou_threshold && best.is_none_or(|(_, bu)| u > bu) {
                best = Some((ci, u));
            }
        }
        match best {
            Some((ci, _)) => clusters[ci].push(det),
            None => clusters.push(Cluster::new(det)),
        }
    }
    clusters
}

/// Weighted Boxes Fusion over detections pooled from `n_models` members.
pub fn wbf(dets: &[Detection], n_models: usize, config: &FusionConfig) -> Vec<FusedDetection> {
    let n_models = n_models.max(1);
    let order = ranked_indices(dets);
    let mut by_category: BTreeMap<CategoryId, Vec<&Detection>> = BTreeMap::new();
    for &i in &order {
        let d = &dets[i];
        if d.score > config.wbf_skip_threshold {
            by_category.entry(d.category).or_default().push(d);
        }
    }
    let mut out: Vec<FusedDetection> = by_category
        .values()
        .flat_map(|group| wbf_clusters(group, config.iou_threshold))
        .map(|c| c.to_fused(n_models, config.conf_rescale))
        .collect();
    sort_fused(&mut out);
    out
}

/// Fuses one image's pooled detections with the configured method.
pub fn fuse_image(
    dets: &[Detection],
    n_models: usize,
    config: &FusionConfig,
) -> Vec<FusedDetection> {
    match config.method {
        FusionMethod::Nms => nms(dets, config.iou_threshold),
        FusionMethod::SoftNms => soft_nms(dets, config),
        FusionMethod::Wbf => wbf(dets, n_models, config),
    }
}

/// Pools and fuses every image of the ensemble. Images listed in `gt` but
/// absent from every stream appear with an empty list. Images are processed
/// in parallel and merged by image id.
pub fn fuse(
    ensemble: &EnsembleOutputs,
    gt: Option<&GroundTruth>,
    config: &FusionConfig,
) -> Result<FusedOutputs> {
    config.validate()?;
    let mut ids = ensemble.image_ids();
    if let Some(gt) = gt {
        ids.extend(gt.image_ids());
    }
    let ids: Vec<ImageId> = ids.into_iter().collect();
    let fused: Vec<(ImageId, Vec<FusedDetection>)> = ids
        .par_iter()
        .map(|&id| {
            let pooled = pool(ensemble, id);
            (id, fuse_image(&pooled, ensemble.n_models(), config))
        })
        .collect();
    Ok(fused.into_iter().collect())
}
