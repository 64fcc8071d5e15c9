//! Per-method run reports: fuse, evaluate and calibrate one ensemble, and
//! render the results as JSON or an aligned text table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::calibration::{self, CalibrationReport};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport};
use crate::fusion::{self, FusionConfig};
use crate::model::{EnsembleOutputs, FusedOutputs, GroundTruth};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub aggregation: String,
    pub config: FusionConfig,
    pub eval: EvalReport,
    /// `None` when fusion left no detections to calibrate.
    pub calibration: Option<CalibrationReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub tool_version: String,
    pub n_models: usize,
    pub calibration_bins: usize,
    pub match_iou: f64,
    /// SHA-256 of every input file, keyed by path.
    pub input_digests: BTreeMap<String, String>,
    pub runs: Vec<RunReport>,
}

impl ReportTable {
    /// Copy without wall-clock fields, for byte-reproducible output.
    pub fn without_timing(&self) -> Self {
        let mut t = self.clone();
        t.runs.iter_mut().for_each(|r| r.fusion_seconds = None);
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportSettings {
    pub bins: usize,
    pub match_iou: f64,
}

impl Default for ReportSettings {
    fn default() -> Self {
        Self {
            bins: calibration::DEFAULT_BINS,
            match_iou: calibration::DEFAULT_MATCH_IOU,
        }
    }
}

/// Evaluation and calibration of already fused detections.
pub fn score_fused(
    fused: &FusedOutputs,
    gt: &GroundTruth,
    settings: &ReportSettings,
) -> Result<(EvalReport, Option<CalibrationReport>)> {
    let eval = eval::evaluate(fused, gt)?;
    let samples = calibration::match_detections(fused, gt, settings.match_iou);
    let calibration = match calibration::ece(&samples, settings.bins) {
        Ok(r) => Some(r),
        Err(Error::NoSamples) => None,
        Err(e) => return Err(e),
    };
    Ok((eval, calibration))
}

/// Fuses with `config`, then evaluates and calibrates the result.
pub fn run_method(
    ensemble: &EnsembleOutputs,
    gt: &GroundTruth,
    config: &FusionConfig,
    settings: &ReportSettings,
) -> Result<(RunReport, FusedOutputs)> {
    let start = Instant::now();
    let fused = fusion::fuse(ensemble, Some(gt), config)?;
    let seconds = start.elapsed().as_secs_f64();
    let (eval, calibration) = score_fused(&fused, gt, settings)?;
    let report = RunReport {
        aggregation: config.method.label().to_string(),
        config: *config,
        eval,
        calibration,
        fusion_seconds: Some(seconds),
    };
    Ok((report, fused))
}

/// One run per config, in the order given.
pub fn build_table(
    tool_version: &str,
    ensemble: &EnsembleOutputs,
    gt: &GroundTruth,
    configs: &[FusionConfig],
    settings: &ReportSettings,
    input_digests: BTreeMap<String, String>,
) -> Result<ReportTable> {
    for c in configs {
        c.validate()?;
    }
    let runs = configs
        .iter()
        .map(|c| run_method(ensemble, gt, c, settings).map(|(r, _)| r))
        .collect::<Result<Vec<_>>>()?;
    Ok(ReportTable {
        tool_version: tool_version.to_string(),
        n_models: ensemble.n_models(),
        calibration_bins: settings.bins,
        match_iou: settings.match_iou,
        input_digests,
        runs,
    })
}

/// Single-line echo of the effective fusion configuration.
pub fn config_echo(c: &FusionConfig) -> String {
    format!(
        "method={} iou_threshold={:.2} wbf_skip_threshold={:.2} soft_sigma={:.2} soft_mode={} soft_score_floor={:.3} conf_rescale={}",
        c.method, c.iou_threshold, c.wbf_skip_threshold, c.soft_sigma, c.soft_mode, c.soft_score_floor, c.conf_rescale
    )
}

/// Aligned text rendering: method, aggregation, AP, AR, ECE, time.
pub fn render_text(table: &ReportTable) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "detfuse {} | models: {} | ece bins: {} | match iou: {:.2}",
        table.tool_version, table.n_models, table.calibration_bins, table.match_iou
    );
    for r in &table.runs {
        let _ = writeln!(
            out,
            "config[{}]: {}",
            r.config.method,
            config_echo(&r.config)
        );
    }
    out.push('\n');
    let header = [
        "Ensemble method",
        "Aggregation",
        "AP@.50",
        "AP@.95",
        "AP@[.5:.95]",
        "AR@.50",
        "AR@.95",
        "ECE",
        "Time (s)",
    ];
    let rows: Vec<Vec<String>> = table
        .runs
        .iter()
        .map(|r| {
            vec![
                format!("Ensemble (n={})", table.n_models),
                r.aggregation.clone(),
                format!("{:.3}", r.eval.ap_50),
                format!("{:.3}", r.eval.ap_95),
                format!("{:.3}", r.eval.ap_coco),
                format!("{:.3}", r.eval.ar_50),
                format!("{:.3}", r.eval.ar_95),
                r.calibration
                    .as_ref()
                    .map_or_else(|| "-".to_string(), |c| format!("{:.3}", c.ece)),
                r.fusion_seconds
                    .map_or_else(|| "-".to_string(), |s| format!("{s:.3}")),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| {
            rows.iter()
                .map(|r| r[i].len())
                .chain([header[i].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (i, c) in cells.iter().enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            if i < 2 {
                let _ = write!(s, "{c:<w$}", w = widths[i]);
            } else {
                let _ = write!(s, "{c:>w$}", w = widths[i]);
            }
        }
        s.trim_end().to_string()
    };
    let _ = writeln!(out, "{}", line(header.to_vec()));
    for r in &rows {
        let _ = writeln!(out, "{}", line(r.iter().map(String::as_str).collect()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionMethod;
    use crate::synth::{self, SceneConfig, SynthConfig};

    fn fixture() -> (EnsembleOutputs, GroundTruth) {
        let gt = synth::random_scene(&SceneConfig {
            images: 6,
            boxes_per_image: 4,
            ..SceneConfig::default()
        })
        .unwrap();
        let ens = synth::generate(&gt, &SynthConfig::default()).unwrap();
        (ens, gt)
    }

    #[test]
    fn table_has_one_row_per_method() {
        let (ens, gt) = fixture();
        let configs: Vec<_> = FusionMethod::ALL
            .iter()
            .map(|&m| FusionConfig::with_method(m))
            .collect();
        let t = build_table(
            "0.0.0",
            &ens,
            &gt,
            &configs,
            &ReportSettings::default(),
            BTreeMap::new(),
        )
        .unwrap();
        assert_eq!(t.runs.len(), 3);
        let text = render_text(&t);
        assert!(text.contains("iou_threshold=0.50"));
        assert!(text.contains("wbf_skip_threshold=0.20"));
        for label in ["NMS", "Soft NMS", "WBF"] {
            assert!(text.contains(label));
        }
        let json = serde_json::to_string(&t.without_timing()).unwrap();
        assert!(!json.contains("fusion_seconds"));
    }

    #[test]
    fn empty_fusion_has_no_calibration() {
        let (ens, gt) = fixture();
        let cfg = FusionConfig {
            wbf_skip_threshold: 1.0,
            ..FusionConfig::with_method(FusionMethod::Wbf)
        };
        let (r, fused) = run_method(&ens, &gt, &cfg, &ReportSettings::default()).unwrap();
        assert!(fused.values().all(Vec::is_empty));
        assert!(r.calibration.is_none());
        assert_eq!(r.eval.ap_50, 0.0);
    }
}
