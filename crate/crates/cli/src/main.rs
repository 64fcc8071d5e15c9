use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use detfuse::calibration::{self, DEFAULT_BINS, DEFAULT_MATCH_IOU};
use detfuse::io::{self, EnsembleManifest};
use detfuse::model::detections_as_fused;
use detfuse::report::{self, ReportSettings};
use detfuse::synth::{self, SceneConfig, SynthConfig};
use detfuse::{fuse, Error, ErrorKind, FusedOutputs, FusionConfig, FusionMethod, SoftMode};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(
    name = "detfuse",
    version,
    about = "Fuse, evaluate and calibrate object detector ensembles"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fuse the ensemble described by a manifest into one detection file.
    Fuse {
        manifest: PathBuf,
        /// nms, softnms or wbf [default: wbf]
        #[arg(long)]
        method: Option<String>,
        #[command(flatten)]
        fusion: FusionFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// COCO-style AP/AR of a detection file against ground truth.
    Evaluate {
        fused: PathBuf,
        gt: PathBuf,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Expected calibration error and reliability-diagram data.
    Calibrate {
        fused: PathBuf,
        gt: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        #[arg(long, default_value_t = DEFAULT_MATCH_IOU)]
        match_iou: f64,
        #[arg(long)]
        out_report: Option<PathBuf>,
        #[arg(long)]
        out_reliability_csv: Option<PathBuf>,
    },
    /// Synthesize ensemble member outputs from ground truth.
    Synth {
        gt: PathBuf,
        #[arg(long, default_value_t = SynthConfig::default().n_models)]
        models: usize,
        #[arg(long, default_value_t = SynthConfig::default().seed)]
        seed: u64,
        /// Corner noise std-dev in pixels.
        #[arg(long, default_value_t = SynthConfig::default().coord_noise_sigma)]
        sigma: f64,
        /// Miscalibration exponent: confidence = quality^gamma.
        #[arg(long, default_value_t = SynthConfig::default().miscalibration_exponent)]
        gamma: f64,
        #[arg(long, default_value_t = SynthConfig::default().miss_rate)]
        miss_rate: f64,
        /// Mean false boxes per image and model.
        #[arg(long, default_value_t = SynthConfig::default().false_positive_rate)]
        fp_rate: f64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Generate a random ground-truth file.
    SynthGt {
        #[arg(long, default_value_t = SceneConfig::default().images)]
        images: usize,
        #[arg(long, default_value_t = SceneConfig::default().boxes_per_image)]
        boxes: usize,
        #[arg(long, default_value_t = SceneConfig::default().categories)]
        categories: u64,
        #[arg(long, default_value_t = SceneConfig::default().seed)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run several fusion methods and tabulate AP, AR and ECE.
    Report {
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "nms,softnms,wbf")]
        methods: Vec<String>,
        #[command(flatten)]
        fusion: FusionFlags,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        #[arg(long, default_value_t = DEFAULT_MATCH_IOU)]
        match_iou: f64,
        /// Include fusion wall-clock seconds in the JSON report.
        #[arg(long)]
        timing: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Overrides on top of the manifest's fusion settings.
#[derive(Args)]
struct FusionFlags {
    /// [default: 0.50]
    #[arg(long)]
    iou_thresh: Option<f64>,
    /// WBF elimination threshold [default: 0.20]
    #[arg(long)]
    wbf_skip: Option<f64>,
    /// [default: 0.5]
    #[arg(long)]
    soft_sigma: Option<f64>,
    /// linear or gaussian [default: gaussian]
    #[arg(long)]
    soft_mode: Option<String>,
    /// Do not scale WBF scores by the fraction of models in a cluster.
    #[arg(long)]
    no_conf_rescale: bool,
}

impl FusionFlags {
    fn apply(&self, mut cfg: FusionConfig) -> detfuse::Result<FusionConfig> {
        if let Some(v) = self.iou_thresh {
            cfg.iou_threshold = v;
        }
        if let Some(v) = self.wbf_skip {
            cfg.wbf_skip_threshold = v;
        }
        if let Some(v) = self.soft_sigma {
            cfg.soft_sigma = v;
        }
        if let Some(m) = &self.soft_mode {
            cfg.soft_mode = m.parse::<SoftMode>()?;
        }
        if self.no_conf_rescale {
            cfg.conf_rescale = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn effective_config(
    manifest: &EnsembleManifest,
    method: Option<&str>,
    flags: &FusionFlags,
) -> detfuse::Result<FusionConfig> {
    let mut cfg = manifest.fusion.apply(FusionConfig::default())?;
    if let Some(m) = method {
        cfg.method = m.parse::<FusionMethod>()?;
    }
    flags.apply(cfg)
}

fn load_fused(path: &Path) -> detfuse::Result<FusedOutputs> {
    Ok(detections_as_fused(&io::load_detections(path, 0)?))
}

fn sha256_file(path: &Path) -> detfuse::Result<String> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn run(command: Command) -> detfuse::Result<()> {
    match command {
        Command::Fuse {
            manifest,
            method,
            fusion,
            out,
        } => {
            let m = io::load_manifest(&manifest)?;
            let cfg = effective_config(&m, method.as_deref(), &fusion)?;
            let ensemble = m.load_ensemble()?;
            let gt = m.load_ground_truth()?;
            let fused = fuse(&ensemble, Some(&gt), &cfg)?;
            io::write_fused(&out, &fused)?;
            println!("config: {}", report::config_echo(&cfg));
            println!(
                "fused {} detections into {} from {} models",
                ensemble.total_detections(),
                fused.values().map(Vec::len).sum::<usize>(),
                ensemble.n_models()
            );
        }
        Command::Evaluate { fused, gt, out } => {
            let dets = load_fused(&fused)?;
            let gt = io::load_ground_truth(&gt)?;
            let r = detfuse::eval::evaluate(&dets, &gt)?;
            match out {
                Some(p) => {
                    io::write_json(&p, &r)?;
                    println!(
                        "ap_50={:.6} ap_95={:.6} ap_coco={:.6} ar_50={:.6} ar_95={:.6}",
                        r.ap_50, r.ap_95, r.ap_coco, r.ar_50, r.ar_95
                    );
                }
                None => println!(
                    "{}",
                    serde_json::to_string_pretty(&r).expect("report serializes")
                ),
            }
        }
        Command::Calibrate {
            fused,
            gt,
            bins,
            match_iou,
            out_report,
            out_reliability_csv,
        } => {
            if !(match_iou > 0.0 && match_iou <= 1.0) {
                return Err(Error::Config(format!(
                    "match IoU {match_iou} must be in (0, 1]"
                )));
            }
            let dets = load_fused(&fused)?;
            let gt = io::load_ground_truth(&gt)?;
            let samples = calibration::match_detections(&dets, &gt, match_iou);
            let r = calibration::ece(&samples, bins)?;
            if let Some(p) = out_report {
                io::write_json(&p, &r)?;
            }
            if let Some(p) = out_reliability_csv {
                let csv = calibration::reliability_csv(&calibration::reliability_data(&r));
                io::write_bytes(&p, csv.as_bytes())?;
            }
            println!("ece={:.6} samples={} bins={}", r.ece, r.samples, r.bins);
        }
        Command::Synth {
            gt,
            models,
            seed,
            sigma,
            gamma,
            miss_rate,
            fp_rate,
            out_dir,
        } => {
            let cfg = SynthConfig {
                n_models: models,
                seed,
                coord_noise_sigma: sigma,
                miscalibration_exponent: gamma,
                miss_rate,
                false_positive_rate: fp_rate,
                ..SynthConfig::default()
            };
            cfg.validate()?;
            let truth = io::load_ground_truth(&gt)?;
            let ensemble = synth::generate(&truth, &cfg)?;
            let manifest = synth::write_ensemble(&out_dir, &ensemble, &gt)?;
            println!(
                "wrote {} models ({} detections) and {}",
                ensemble.n_models(),
                ensemble.total_detections(),
                manifest.display()
            );
        }
        Command::SynthGt {
            images,
            boxes,
            categories,
            seed,
            out,
        } => {
            let gt = synth::random_scene(&SceneConfig {
                images,
                boxes_per_image: boxes,
                categories,
                seed,
                ..SceneConfig::default()
            })?;
            io::write_ground_truth(&out, &gt)?;
            println!(
                "wrote {} images, {} boxes to {}",
                gt.images.len(),
                gt.num_boxes(),
                out.display()
            );
        }
        Command::Report {
            manifest,
            methods,
            fusion,
            bins,
            match_iou,
            timing,
            out,
        } => {
            let m = io::load_manifest(&manifest)?;
            let configs = methods
                .iter()
                .map(|name| effective_config(&m, Some(name.trim()), &fusion))
                .collect::<detfuse::Result<Vec<_>>>()?;
            let settings = ReportSettings { bins, match_iou };
            let digests = m
                .input_files()
                .iter()
                .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
                .collect::<detfuse::Result<BTreeMap<_, _>>>()?;
            let ensemble = m.load_ensemble()?;
            let gt = m.load_ground_truth()?;
            let table = report::build_table(VERSION, &ensemble, &gt, &configs, &settings, digests)?;
            if let Some(p) = out {
                let stored = if timing {
                    table.clone()
                } else {
                    table.without_timing()
                };
                io::write_json(&p, &stored)?;
            }
            print!("{}", report::render_text(&table));
        }
    }
    Ok(())
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Io => 4,
    }
}

fn fail(kind: ErrorKind, message: &str) -> ExitCode {
    let line = message.lines().next().unwrap_or("").trim();
    let _ = writeln!(std::io::stderr(), "error[{}]: {line}", kind.as_str());
    ExitCode::from(exit_code(kind))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            return fail(ErrorKind::Config, msg.trim_start_matches("error: "));
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string()),
    }
}
