//! Detection data model shared by the fusion, calibration and evaluation code.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::BBox;

pub type ImageId = u64;
pub type CategoryId = u64;
pub type ModelId = usize;

/// One box emitted by one ensemble member.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub category: CategoryId,
    pub score: f64,
    pub model_id: ModelId,
    pub image_id: ImageId,
}

impl Detection {
    pub fn new(
        bbox: BBox,
        category: CategoryId,
        score: f64,
        model_id: ModelId,
        image_id: ImageId,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Data(format!("score {score} outside [0, 1]")));
        }
        Ok(Self {
            bbox,
            category,
            score,
            model_id,
            image_id,
        })
    }
}

/// Ranking used everywhere a deterministic detection order is needed:
/// score descending, then model id ascending. Callers sort stably so that
/// input order breaks any remaining tie.
pub fn rank_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.model_id.cmp(&b.model_id))
}

/// All detections of one ensemble member, keyed by image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionStream {
    pub model_id: ModelId,
    pub images: BTreeMap<ImageId, Vec<Detection>>,
}

impl DetectionStream {
    pub fn new(model_id: ModelId) -> Self {
        Self {
            model_id,
            images: BTreeMap::new(),
        }
    }

    /// Appends a detection, retagging it with this stream's model id.
    pub fn push(&mut self, mut det: Detection) {
        det.model_id = self.model_id;
        self.images.entry(det.image_id).or_default().push(det);
    }

    pub fn len(&self) -> usize {
        self.images.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn detections(&self) -> impl Iterator<Item = &Detection> {
        self.images.values().flatten()
    }
}

/// Outputs of an `n`-member ensemble, one stream per member.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleOutputs {
    n_models: usize,
    streams: Vec<DetectionStream>,
}

impl EnsembleOutputs {
    /// Streams may be supplied in any order but their model ids must be
    /// exactly `0..streams.len()`.
    pub fn new(streams: Vec<DetectionStream>) -> Result<Self> {
        if streams.is_empty() {
            return Err(Error::Config("an ensemble needs at least one model".into()));
        }
        let n = streams.len();
        let mut seen = vec![false; n];
        for s in &streams {
            if s.model_id >= n || seen[s.model_id] {
                return Err(Error::Config(format!(
                    "model ids must be unique and contiguous from 0; got {} among {n} models",
                    s.model_id
                )));
            }
            seen[s.model_id] = true;
            if let Some(d) = s.detections().find(|d| d.model_id != s.model_id) {
                return Err(Error::Data(format!(
                    "stream {} contains a detection tagged with model {}",
                    s.model_id, d.model_id
                )));
            }
        }
        Ok(Self {
            n_models: n,
            streams,
        })
    }

    pub fn n_models(&self) -> usize {
        self.n_models
    }

    pub fn streams(&self) -> &[DetectionStream] {
        &self.streams
    }

    /// Every image id that appears in at least one stream.
    pub fn image_ids(&self) -> BTreeSet<ImageId> {
        self.streams
            .iter()
            .flat_map(|s| s.images.keys().copied())
            .collect()
    }

    pub fn total_detections(&self) -> usize {
        self.streams.iter().map(DetectionStream::len).sum()
    }
}

/// Concatenates every stream's detections for one image, ranked by
/// (score desc, model id asc, position within its stream asc).
pub fn pool(ensemble: &EnsembleOutputs, image_id: ImageId) -> Vec<Detection> {
    let mut keyed: Vec<(usize, &Detection)> = ensemble
        .streams
        .iter()
        .filter_map(|s| s.images.get(&image_id))
        .flat_map(|dets| dets.iter().enumerate())
        .collect();
    keyed.sort_by(|(ia, a), (ib, b)| rank_order(a, b).then(ia.cmp(ib)));
    keyed.into_iter().map(|(_, d)| d.clone()).collect()
}

/// A box produced by a fusion strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedDetection {
    pub bbox: BBox,
    pub category: CategoryId,
    pub score: f64,
    /// Population variance of (x1, y1, x2, y2) across the cluster members.
    pub variance: [f64; 4],
    pub cluster_size: usize,
    pub source_model_ids: BTreeSet<ModelId>,
}

impl FusedDetection {
    /// Wraps a single detection as a one-member cluster.
    pub fn singleton(det: &Detection) -> Self {
        Self {
            bbox: det.bbox,
            category: det.category,
            score: det.score,
            variance: [0.0; 4],
            cluster_size: 1,
            source_model_ids: BTreeSet::from([det.model_id]),
        }
    }

    /// Views the fused box as a plain detection of the lowest contributing model.
    pub fn to_detection(&self, image_id: ImageId) -> Detection {
        Detection {
            bbox: self.bbox,
            category: self.category,
            score: self.score,
            model_id: self.source_model_ids.first().copied().unwrap_or(0),
            image_id,
        }
    }
}

/// Fused detections per image. Images with nothing left are kept as empty lists.
pub type FusedOutputs = BTreeMap<ImageId, Vec<FusedDetection>>;

/// Lifts plain detections (for example a loaded results file) into singleton
/// fused detections, preserving per-image order.
pub fn detections_as_fused(stream: &DetectionStream) -> FusedOutputs {
    stream
        .images
        .iter()
        .map(|(&id, dets)| (id, dets.iter().map(FusedDetection::singleton).collect()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub bbox: BBox,
    pub category: CategoryId,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub width: f64,
    pub height: f64,
}

/// Ground-truth boxes per image, plus image sizes and category names when known.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub boxes: BTreeMap<ImageId, Vec<GtBox>>,
    pub images: BTreeMap<ImageId, ImageInfo>,
    pub categories: BTreeMap<CategoryId, String>,
}

impl GroundTruth {
    pub fn image_ids(&self) -> BTreeSet<ImageId> {
        self.boxes
            .keys()
            .chain(self.images.keys())
            .copied()
            .collect()
    }

    pub fn num_boxes(&self) -> usize {
        self.boxes.values().map(Vec::len).sum()
    }

    pub fn get(&self, image_id: ImageId) -> &[GtBox] {
        self.boxes.get(&image_id).map_or(&[], Vec::as_slice)
    }
}
