//! Fusion, calibration and evaluation for ensembles of object detectors.
//!
//! Each ensemble member contributes one [`DetectionStream`]. Streams are
//! pooled per image and fused with greedy NMS, Soft-NMS or Weighted Boxes
//! Fusion ([`fusion`]); fused boxes carry the per-corner variance of the
//! boxes that produced them. Fused outputs are scored with COCO-style AP/AR
//! ([`eval`]) and Expected Calibration Error ([`calibration`]).

pub mod calibration;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geom;
pub mod io;
pub mod model;
pub mod report;
pub mod synth;

pub use calibration::{CalibratedSample, CalibrationBin, CalibrationReport};
pub use error::{Error, ErrorKind, Result};
pub use eval::EvalReport;
pub use fusion::{fuse, FusionConfig, FusionMethod, SoftMode};
pub use geom::{iou, BBox};
pub use model::{
    pool, CategoryId, Detection, DetectionStream, EnsembleOutputs, FusedDetection, FusedOutputs,
    GroundTruth, GtBox, ImageId, ImageInfo, ModelId,
};
pub use report::{ReportSettings, ReportTable, RunReport};
pub use synth::{SceneConfig, SynthConfig};
