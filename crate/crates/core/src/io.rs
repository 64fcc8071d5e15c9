//! Readers and writers for COCO-style ground truth, detection results,
//! fused results and ensemble manifests.
//!
//! Boxes are `[x, y, width, height]` on disk and corner form in memory.
//! Every float written is rounded to six decimal places so output files
//! are stable byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionMethod, SoftMode};
use crate::geom::BBox;
use crate::model::{
    CategoryId, Detection, DetectionStream, EnsembleOutputs, FusedOutputs, GroundTruth, GtBox,
    ImageId, ImageInfo, ModelId,
};

pub const DECIMALS: i32 = 6;

/// Rounds to the serialization precision.
pub fn round6(v: f64) -> f64 {
    let scale = 10f64.powi(DECIMALS);
    let r = (v * scale).round() / scale;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

fn xywh_rounded(b: &BBox) -> [f64; 4] {
    let (x1, y1) = (round6(b.x1), round6(b.y1));
    [x1, y1, round6(round6(b.x2) - x1), round6(round6(b.y2) - y1)]
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("in-memory serialization");
    bytes.push(b'\n');
    bytes
}

/// Writes serializable `value` as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_bytes(path, &to_json_bytes(value))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: ImageId,
    #[serde(default)]
    pub width: f64,
    #[serde(default)]
    pub height: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file_name: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: ImageId,
    pub category_id: CategoryId,
    pub bbox: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: CategoryId,
    #[serde(default)]
    pub name: String,
}

/// Subset of the COCO annotation format used for ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoGroundTruth {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

fn bbox4(path: &Path, context: &str, raw: &[f64]) -> Result<[f64; 4]> {
    let arr: [f64; 4] = raw.try_into().map_err(|_| {
        Error::record(
            path,
            context,
            format!("bbox has {} values, expected 4", raw.len()),
        )
    })?;
    if arr.iter().any(|v| !v.is_finite()) {
        return Err(Error::record(path, context, "non-finite bbox value"));
    }
    Ok(arr)
}

pub fn parse_ground_truth(path: &Path, doc: CocoGroundTruth) -> Result<GroundTruth> {
    let mut gt = GroundTruth::default();
    for img in &doc.images {
        gt.images.insert(
            img.id,
            ImageInfo {
                width: img.width,
                height: img.height,
            },
        );
        gt.boxes.entry(img.id).or_default();
    }
    for c in doc.categories {
        gt.categories.insert(c.id, c.name);
    }
    for ann in &doc.annotations {
        let ctx = format!("annotation {}", ann.id);
        if !gt.images.contains_key(&ann.image_id) {
            return Err(Error::record(
                path,
                ctx,
                format!("references unknown image_id {}", ann.image_id),
            ));
        }
        let [x, y, w, h] = bbox4(path, &ctx, &ann.bbox)?;
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::record(
                path,
                ctx,
                format!("degenerate ground-truth box (width {w}, height {h})"),
            ));
        }
        let bbox =
            BBox::from_xywh(x, y, w, h).map_err(|e| Error::record(path, &ctx, e.to_string()))?;
        gt.boxes.entry(ann.image_id).or_default().push(GtBox {
            bbox,
            category: ann.category_id,
        });
    }
    Ok(gt)
}

pub fn load_ground_truth(path: impl AsRef<Path>) -> Result<GroundTruth> {
    let path = path.as_ref();
    parse_ground_truth(path, read_json(path)?)
}

/// Serializes ground truth back to COCO form; annotation ids are assigned
/// sequentially from 1 in (image id, stored order).
pub fn ground_truth_document(gt: &GroundTruth) -> CocoGroundTruth {
    let images = gt
        .image_ids()
        .into_iter()
        .map(|id| {
            let info = gt.images.get(&id).copied().unwrap_or(ImageInfo {
                width: 0.0,
                height: 0.0,
            });
            CocoImage {
                id,
                width: info.width,
                height: info.height,
                file_name: None,
            }
        })
        .collect();
    let mut annotations = Vec::new();
    for (&image_id, boxes) in &gt.boxes {
        for g in boxes {
            annotations.push(CocoAnnotation {
                id: annotations.len() as u64 + 1,
                image_id,
                category_id: g.category,
                bbox: xywh_rounded(&g.bbox).to_vec(),
            });
        }
    }
    let mut categories: Vec<CocoCategory> = gt
        .categories
        .iter()
        .map(|(&id, name)| CocoCategory {
            id,
            name: name.clone(),
        })
        .collect();
    if categories.is_empty() {
        let used: std::collections::BTreeSet<_> =
            gt.boxes.values().flatten().map(|g| g.category).collect();
        categories = used
            .into_iter()
            .map(|id| CocoCategory {
                id,
                name: format!("class_{id}"),
            })
            .collect();
    }
    CocoGroundTruth {
        images,
        annotations,
        categories,
    }
}

pub fn write_ground_truth(path: impl AsRef<Path>, gt: &GroundTruth) -> Result<()> {
    write_json(path.as_ref(), &ground_truth_document(gt))
}

/// One entry of a COCO results array. Extra keys (such as the fused
/// extension fields) are ignored on read.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: ImageId,
    pub category_id: CategoryId,
    pub bbox: Vec<f64>,
    pub score: f64,
}

pub fn parse_detections(
    path: &Path,
    records: Vec<DetectionRecord>,
    model_id: ModelId,
) -> Result<DetectionStream> {
    let mut stream = DetectionStream::new(model_id);
    for (i, r) in records.into_iter().enumerate() {
        let ctx = format!("record {i}");
        if !(0.0..=1.0).contains(&r.score) {
            return Err(Error::record(
                path,
                ctx,
                format!("score {} outside [0, 1]", r.score),
            ));
        }
        let [x, y, w, h] = bbox4(path, &ctx, &r.bbox)?;
        if w < 0.0 || h < 0.0 {
            return Err(Error::record(
                path,
                ctx,
                format!("negative box size (width {w}, height {h})"),
            ));
        }
        let bbox =
            BBox::from_xywh(x, y, w, h).map_err(|e| Error::record(path, &ctx, e.to_string()))?;
        stream.push(Detection {
            bbox,
            category: r.category_id,
            score: r.score,
            model_id,
            image_id: r.image_id,
        });
    }
    Ok(stream)
}

/// Loads a COCO results array as the stream of `model_id`, keeping file order.
pub fn load_detections(path: impl AsRef<Path>, model_id: ModelId) -> Result<DetectionStream> {
    let path = path.as_ref();
    parse_detections(path, read_json(path)?, model_id)
}

/// Results records for a stream, in (image id, stored order).
pub fn detection_records(stream: &DetectionStream) -> Vec<DetectionRecord> {
    stream
        .detections()
        .map(|d| DetectionRecord {
            image_id: d.image_id,
            category_id: d.category,
            bbox: xywh_rounded(&d.bbox).to_vec(),
            score: round6(d.score),
        })
        .collect()
}

pub fn write_detections(path: impl AsRef<Path>, stream: &DetectionStream) -> Result<()> {
    write_json(path.as_ref(), &detection_records(stream))
}

/// COCO results record extended with fusion provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusedRecord {
    pub image_id: ImageId,
    pub category_id: CategoryId,
    pub bbox: Vec<f64>,
    pub score: f64,
    pub variance: [f64; 4],
    pub cluster_size: usize,
    pub source_models: Vec<ModelId>,
}

/// Fused records sorted by (image id, score descending).
pub fn fused_records(fused: &FusedOutputs) -> Vec<FusedRecord> {
    let mut out = Vec::new();
    for (&image_id, dets) in fused {
        let mut ranked: Vec<_> = dets.iter().collect();
        ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
        out.extend(ranked.into_iter().map(|d| FusedRecord {
            image_id,
            category_id: d.category,
            bbox: xywh_rounded(&d.bbox).to_vec(),
            score: round6(d.score),
            variance: d.variance.map(round6),
            cluster_size: d.cluster_size,
            source_models: d.source_model_ids.iter().copied().collect(),
        }));
    }
    out
}

pub fn fused_json_bytes(fused: &FusedOutputs) -> Vec<u8> {
    to_json_bytes(&fused_records(fused))
}

pub fn write_fused(path: impl AsRef<Path>, fused: &FusedOutputs) -> Result<()> {
    write_bytes(path.as_ref(), &fused_json_bytes(fused))
}

/// Fusion settings a manifest may override; unset keys keep their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iou_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soft_sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soft_mode: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soft_score_floor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wbf_skip_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conf_rescale: Option<bool>,
}

impl FusionOverrides {
    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }

    /// Applies the set keys on top of `base`.
    pub fn apply(&self, base: FusionConfig) -> Result<FusionConfig> {
        let mut cfg = base;
        if let Some(m) = &self.method {
            cfg.method = m.parse::<FusionMethod>()?;
        }
        if let Some(m) = &self.soft_mode {
            cfg.soft_mode = m.parse::<SoftMode>()?;
        }
        if let Some(v) = self.iou_threshold {
            cfg.iou_threshold = v;
        }
        if let Some(v) = self.soft_sigma {
            cfg.soft_sigma = v;
        }
        if let Some(v) = self.soft_score_floor {
            cfg.soft_score_floor = v;
        }
        if let Some(v) = self.wbf_skip_threshold {
            cfg.wbf_skip_threshold = v;
        }
        if let Some(v) = self.conf_rescale {
            cfg.conf_rescale = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestModel {
    pub id: ModelId,
    pub path: PathBuf,
}

/// On-disk manifest describing an ensemble run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestDocument {
    pub ground_truth: PathBuf,
    pub models: Vec<ManifestModel>,
    #[serde(default, skip_serializing_if = "FusionOverrides::is_empty")]
    pub fusion: FusionOverrides,
}

/// A validated manifest with paths resolved against the manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleManifest {
    pub path: PathBuf,
    pub n_models: usize,
    /// `(model id, detections file)`, ordered by model id.
    pub models: Vec<(ModelId, PathBuf)>,
    pub ground_truth: PathBuf,
    pub fusion: FusionOverrides,
}

impl EnsembleManifest {
    pub fn from_document(path: &Path, doc: ManifestDocument) -> Result<Self> {
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        let resolve = |p: &Path| {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let n = doc.models.len();
        if n == 0 {
            return Err(Error::Config(format!(
                "{}: manifest lists no models",
                path.display()
            )));
        }
        let mut by_id: BTreeMap<ModelId, PathBuf> = BTreeMap::new();
        for m in &doc.models {
            if m.id >= n || by_id.insert(m.id, resolve(&m.path)).is_some() {
                return Err(Error::Config(format!(
                    "{}: model ids must be unique and contiguous from 0 (offending id {})",
                    path.display(),
                    m.id
                )));
            }
        }
        // Validate the overrides eagerly so a bad manifest fails before any work.
        doc.fusion.apply(FusionConfig::default())?;
        Ok(Self {
            path: path.to_path_buf(),
            n_models: n,
            models: by_id.into_iter().collect(),
            ground_truth: resolve(&doc.ground_truth),
            fusion: doc.fusion,
        })
    }

    pub fn load_ensemble(&self) -> Result<EnsembleOutputs> {
        let streams = self
            .models
            .iter()
            .map(|(id, p)| load_detections(p, *id))
            .collect::<Result<Vec<_>>>()?;
        EnsembleOutputs::new(streams)
    }

    pub fn load_ground_truth(&self) -> Result<GroundTruth> {
        load_ground_truth(&self.ground_truth)
    }

    /// Every file the manifest depends on, manifest first.
    pub fn input_files(&self) -> Vec<PathBuf> {
        let mut v = vec![self.path.clone(), self.ground_truth.clone()];
        v.extend(self.models.iter().map(|(_, p)| p.clone()));
        v
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<EnsembleManifest> {
    let path = path.as_ref();
    EnsembleManifest::from_document(path, read_json(path)?)
}
