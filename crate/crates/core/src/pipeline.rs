//! End-to-end inference pipeline: for every input image, stitch (optionally
//! with TTA) each configured predictor, ensemble the results, track instances
//! and write the mask; when ground truth is present, score each image and
//! check it against its runtime budget. Per-image compute time is measured
//! around predict + track only, with disk I/O excluded, and both times are
//! reported.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{self, IoError};
use crate::metrics::{
    self, EvalReport, ImageEval, MatchOptions, MetricsError,
};
use crate::ports::{FramePort, NoisyFramePort};
use crate::raster::LabelMask;
use crate::stitcher::{self, PredictorPort, StitchConfig, StitchError};
use crate::tracker::{self, TrackConfig, TrackError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Io(#[from] IoError),
    #[error("{0}")]
    Stitch(#[from] StitchError),
    #[error("{0}")]
    Track(#[from] TrackError),
    #[error("{0}")]
    Metrics(#[from] MetricsError),
    #[error("predictor spec error: {0}")]
    Spec(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    StdIo(#[from] std::io::Error),
    #[error("image {name}: {message}")]
    Image { name: String, message: String },
}

/// Parsed predictor spec string.
///
/// * `oracle:<mask-path>` — flow target generated from a ground-truth mask.
/// * `oracle-noise:<mask-path>:<sigma>` — oracle plus seeded Gaussian noise.
/// * `tensor:<path>` — precomputed full-frame prediction CFT, windows cropped
///   from it.
///
/// Paths may point at a directory, in which case the file is resolved per
/// image by stem.
#[derive(Debug, Clone, PartialEq)]
pub enum PredictorSpec {
    Oracle { path: PathBuf },
    OracleNoise { path: PathBuf, sigma: f64 },
    Tensor { path: PathBuf },
}

impl PredictorSpec {
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        if let Some(rest) = text.strip_prefix("oracle-noise:") {
            let (path, sigma) = rest.rsplit_once(':').ok_or_else(|| {
                PipelineError::Spec(format!(
                    "expected oracle-noise:<path>:<sigma>, got {text:?}"
                ))
            })?;
            let sigma: f64 = sigma
                .parse()
                .map_err(|e| PipelineError::Spec(format!("bad sigma in {text:?}: {e}")))?;
            if sigma.is_nan() || sigma < 0.0 {
                return Err(PipelineError::Spec(format!("sigma must be >= 0 in {text:?}")));
            }
            Ok(PredictorSpec::OracleNoise {
                path: PathBuf::from(path),
                sigma,
            })
        } else if let Some(path) = text.strip_prefix("oracle:") {
            Ok(PredictorSpec::Oracle {
                path: PathBuf::from(path),
            })
        } else if let Some(path) = text.strip_prefix("tensor:") {
            Ok(PredictorSpec::Tensor {
                path: PathBuf::from(path),
            })
        } else {
            Err(PipelineError::Spec(format!(
                "unknown predictor spec {text:?} (expected oracle:, oracle-noise: or tensor:)"
            )))
        }
    }

    /// Build the port for one image. Directory paths resolve per stem.
    pub fn build_port(
        &self,
        stem: &str,
        image_dims: (usize, usize),
        seed: u64,
    ) -> Result<Box<dyn PredictorPort>, PipelineError> {
        match self {
            PredictorSpec::Oracle { path } | PredictorSpec::OracleNoise { path, .. } => {
                let resolved = resolve_for_stem(path, stem, &["png", "cft", "pgm"])?;
                let mask = io::read_mask(&resolved)?;
                if (mask.height(), mask.width()) != image_dims {
                    return Err(PipelineError::Spec(format!(
                        "oracle mask {} is {}x{}, image is {}x{}",
                        resolved.display(),
                        mask.height(),
                        mask.width(),
                        image_dims.0,
                        image_dims.1
                    )));
                }
                let port = FramePort::from_mask(&mask);
                match self {
                    PredictorSpec::OracleNoise { sigma, .. } => {
                        Ok(Box::new(NoisyFramePort::new(port, *sigma, seed)))
                    }
                    _ => Ok(Box::new(port)),
                }
            }
            PredictorSpec::Tensor { path } => {
                let resolved = resolve_for_stem(path, stem, &["cft"])?;
                let frame = io::read_raster(&resolved)?;
                if (frame.height(), frame.width()) != image_dims {
                    return Err(PipelineError::Spec(format!(
                        "tensor {} is {}x{}, image is {}x{}",
                        resolved.display(),
                        frame.height(),
                        frame.width(),
                        image_dims.0,
                        image_dims.1
                    )));
                }
                Ok(Box::new(FramePort::new(frame, true)?))
            }
        }
    }
}

fn resolve_for_stem(
    path: &Path,
    stem: &str,
    extensions: &[&str],
) -> Result<PathBuf, PipelineError> {
    if path.is_dir() {
        for ext in extensions {
            let candidate = path.join(format!("{stem}.{ext}"));
            if candidate.is_file() {
                return Ok(candidate);
            }
        }
        Err(PipelineError::Spec(format!(
            "no {stem}.{{{}}} under {}",
            extensions.join(","),
            path.display()
        )))
    } else {
        Ok(path.to_path_buf())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub input_dir: PathBuf,
    pub output_dir: PathBuf,
    /// Ground-truth mask directory; enables per-image scoring.
    pub gt_dir: Option<PathBuf>,
    /// Predictor specs; more than one means ensemble.
    pub predictors: Vec<String>,
    pub stitch: StitchConfig,
    pub track: TrackConfig,
    pub eval: MatchOptions,
    pub seed: u64,
    /// Nonzero process exit when an image exceeds its runtime budget.
    pub strict_budget: bool,
    /// Abort on the first per-image failure instead of recording it.
    pub fail_fast: bool,
    /// Image-level worker count; 1 processes images sequentially.
    pub jobs: usize,
    /// Extension for written masks: png, pgm or cft.
    pub mask_format: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input_dir: PathBuf::new(),
            output_dir: PathBuf::new(),
            gt_dir: None,
            predictors: Vec::new(),
            stitch: StitchConfig::default(),
            track: TrackConfig::default(),
            eval: MatchOptions::default(),
            seed: 0,
            strict_budget: false,
            fail_fast: false,
            jobs: 1,
            mask_format: "png".into(),
        }
    }
}

#[derive(Debug)]
pub struct PipelineOutcome {
    pub report: EvalReport,
    pub failed_images: usize,
    pub budget_violations: usize,
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("cft") | Some("png") | Some("pgm")
                )
        })
        .collect();
    files.sort();
    Ok(files)
}

fn stem_of(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image")
        .to_string()
}

fn process_image(
    cfg: &PipelineConfig,
    specs: &[PredictorSpec],
    index: usize,
    image_path: &Path,
) -> Result<ImageEval, PipelineError> {
    let stem = stem_of(image_path);
    let fail = |message: String| PipelineError::Image {
        name: stem.clone(),
        message,
    };

    let total_start = Instant::now();
    let image = io::read_image(image_path).map_err(|e| fail(e.to_string()))?;
    let dims = (image.height(), image.width());
    let port_seed = cfg.seed.wrapping_add(index as u64);
    let ports: Vec<Box<dyn PredictorPort>> = specs
        .iter()
        .map(|s| s.build_port(&stem, dims, port_seed))
        .collect::<Result<_, _>>()
        .map_err(|e| fail(e.to_string()))?;

    let compute_start = Instant::now();
    let predictions: Vec<_> = ports
        .iter()
        .map(|port| {
            if cfg.stitch.tta {
                stitcher::tta_merge(port.as_ref(), &image, &cfg.stitch)
            } else {
                stitcher::stitch(port.as_ref(), &image, &cfg.stitch)
            }
        })
        .collect::<Result<_, _>>()
        .map_err(|e: StitchError| fail(e.to_string()))?;
    let merged = if predictions.len() == 1 {
        predictions.into_iter().next().unwrap()
    } else {
        stitcher::ensemble(&predictions).map_err(|e| fail(e.to_string()))?
    };
    let mask = tracker::track(&merged, &cfg.track).map_err(|e| fail(e.to_string()))?;
    let wall_seconds = compute_start.elapsed().as_secs_f64();

    let out_path = cfg
        .output_dir
        .join(format!("{stem}.{}", cfg.mask_format));
    io::write_mask(&mask, &out_path).map_err(|e| fail(e.to_string()))?;

    let (f1, tp, fp, fn_) = match &cfg.gt_dir {
        Some(gt_dir) => {
            let gt_path = resolve_for_stem(gt_dir, &stem, &["png", "cft", "pgm"])
                .map_err(|e| fail(e.to_string()))?;
            let gt = io::read_mask(&gt_path).map_err(|e| fail(e.to_string()))?;
            let result =
                metrics::match_instances(&gt, &mask, &cfg.eval).map_err(|e| fail(e.to_string()))?;
            (
                Some(metrics::f1_score(&result)),
                result.tp,
                result.fp,
                result.fn_,
            )
        }
        None => (None, 0, 0, 0),
    };

    let tolerance_seconds = metrics::time_tolerance(dims.0, dims.1);
    Ok(ImageEval {
        name: stem,
        f1,
        tp,
        fp,
        fn_,
        wall_seconds,
        total_seconds: total_start.elapsed().as_secs_f64(),
        tolerance_seconds,
        within_budget: wall_seconds <= tolerance_seconds,
        timed: true,
        error: None,
    })
}

/// Run the full pipeline over a directory of images.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome, PipelineError> {
    cfg.stitch.validate()?;
    cfg.track.validate()?;
    if cfg.predictors.is_empty() {
        return Err(PipelineError::Config("at least one predictor is required".into()));
    }
    if !matches!(cfg.mask_format.as_str(), "png" | "pgm" | "cft") {
        return Err(PipelineError::Config(format!(
            "mask_format must be png, pgm or cft, got {:?}",
            cfg.mask_format
        )));
    }
    let specs: Vec<PredictorSpec> = cfg
        .predictors
        .iter()
        .map(|s| PredictorSpec::parse(s))
        .collect::<Result<_, _>>()?;
    std::fs::create_dir_all(&cfg.output_dir)?;

    let images = list_images(&cfg.input_dir)?;
    let jobs = cfg.jobs.max(1);

    let run_one = |(index, path): (usize, &PathBuf)| -> Result<ImageEval, PipelineError> {
        match process_image(cfg, &specs, index, path) {
            Ok(eval) => Ok(eval),
            Err(e) if cfg.fail_fast => Err(e),
            Err(e) => Ok(ImageEval {
                name: stem_of(path),
                f1: None,
                tp: 0,
                fp: 0,
                fn_: 0,
                wall_seconds: 0.0,
                total_seconds: 0.0,
                tolerance_seconds: 0.0,
                within_budget: true,
                timed: false,
                error: Some(e.to_string()),
            }),
        }
    };

    let evals: Vec<ImageEval> = if jobs == 1 {
        images
            .iter()
            .enumerate()
            .map(run_one)
            .collect::<Result<_, _>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        pool.install(|| {
            images
                .par_iter()
                .enumerate()
                .map(run_one)
                .collect::<Result<_, _>>()
        })?
    };

    let failed_images = evals.iter().filter(|e| e.error.is_some()).count();
    let budget_violations = evals
        .iter()
        .filter(|e| e.timed && !e.within_budget)
        .count();
    Ok(PipelineOutcome {
        report: EvalReport::new(&cfg.eval, evals),
        failed_images,
        budget_violations,
    })
}

/// Offline evaluation of predicted masks against ground truth, paired by file
/// stem. Predictions missing for a ground-truth stem count as empty masks.
pub fn evaluate_mask_dirs(
    gt_dir: &Path,
    pred_dir: &Path,
    opts: &MatchOptions,
) -> Result<EvalReport, PipelineError> {
    let gt_files = list_images(gt_dir)?;
    let mut evals = Vec::with_capacity(gt_files.len());
    for gt_path in &gt_files {
        let stem = stem_of(gt_path);
        let gt = io::read_mask(gt_path)?;
        let pred = match resolve_for_stem(pred_dir, &stem, &["png", "cft", "pgm"]) {
            Ok(p) => io::read_mask(&p)?,
            Err(_) => LabelMask::zeros(gt.height(), gt.width()),
        };
        let result = metrics::match_instances(&gt, &pred, opts)?;
        evals.push(ImageEval {
            name: stem,
            f1: Some(metrics::f1_score(&result)),
            tp: result.tp,
            fp: result.fp,
            fn_: result.fn_,
            wall_seconds: 0.0,
            total_seconds: 0.0,
            tolerance_seconds: metrics::time_tolerance(gt.height(), gt.width()),
            within_budget: true,
            timed: false,
            error: None,
        });
    }
    Ok(EvalReport::new(opts, evals))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_parsing() {
        assert_eq!(
            PredictorSpec::parse("oracle:/tmp/gt.png").unwrap(),
            PredictorSpec::Oracle {
                path: PathBuf::from("/tmp/gt.png")
            }
        );
        assert_eq!(
            PredictorSpec::parse("oracle-noise:/tmp/gt:0.25").unwrap(),
            PredictorSpec::OracleNoise {
                path: PathBuf::from("/tmp/gt"),
                sigma: 0.25
            }
        );
        assert_eq!(
            PredictorSpec::parse("tensor:preds").unwrap(),
            PredictorSpec::Tensor {
                path: PathBuf::from("preds")
            }
        );
        assert!(PredictorSpec::parse("model:weights.bin").is_err());
        assert!(PredictorSpec::parse("oracle-noise:/tmp/gt").is_err());
    }

    #[test]
    fn empty_input_dir_gives_empty_report() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in");
        std::fs::create_dir_all(&input).unwrap();
        let cfg = PipelineConfig {
            input_dir: input,
            output_dir: dir.path().join("out"),
            predictors: vec!["oracle:unused".into()],
            ..Default::default()
        };
        let outcome = run_pipeline(&cfg).unwrap();
        assert_eq!(outcome.report.images.len(), 0);
        assert_eq!(outcome.failed_images, 0);
    }

    #[test]
    fn config_requires_a_predictor() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig {
            input_dir: dir.path().to_path_buf(),
            output_dir: dir.path().join("out"),
            ..Default::default()
        };
        assert!(matches!(
            run_pipeline(&cfg),
            Err(PipelineError::Config(_))
        ));
    }
}
