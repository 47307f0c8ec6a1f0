//! `cellflow` — command-line front end for the segmentation engine.
//!
//! Subcommands cover the pipeline stages: `genflow` (mask → flow target),
//! `track` (flow prediction → mask), `infer` (windowed prediction assembly),
//! `eval` (mask scoring), `stats`, `augment`, `cluster`, `budget`, `synth`,
//! and `pipeline` (directory-level end-to-end run driven by a JSON config).

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cellflow_core::io;
use cellflow_core::labelops::{self, IntensityOptions};
use cellflow_core::metrics::{self, MatchOptions};
use cellflow_core::modality::{self, EmbeddingSet, KmeansConfig};
use cellflow_core::pipeline::{self, PipelineConfig, PredictorSpec};
use cellflow_core::raster::Prediction;
use cellflow_core::stitcher::{self, FlipSet, StitchConfig};
use cellflow_core::synth::{self, SynthSpec};
use cellflow_core::tracker::{self, TrackConfig};

#[derive(Parser)]
#[command(name = "cellflow", version, about = "Flow-based cell instance segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a flow target (cell_prob, dy, dx) from an instance mask.
    Genflow {
        #[arg(long)]
        mask: PathBuf,
        /// Output CFT path (3 channels).
        #[arg(long)]
        out: PathBuf,
    },
    /// Recover an instance mask from a 3-channel prediction tensor.
    Track(TrackArgs),
    /// Run windowed inference with a predictor spec and write the prediction.
    Infer(InferArgs),
    /// Score predicted masks against ground truth, paired by file stem.
    Eval {
        #[arg(long)]
        gt_dir: PathBuf,
        #[arg(long)]
        pred_dir: PathBuf,
        /// Output JSON report path.
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        /// Count pairs at exactly the threshold as matches.
        #[arg(long)]
        inclusive: bool,
        /// Print the micro-averaged F1 instead of the per-image mean.
        #[arg(long)]
        micro: bool,
    },
    /// Per-instance shape statistics as CSV (id,size,eccentricity,solidity).
    Stats {
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cell-wise intensity diversification of an image.
    Augment {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Probability that the transform fires.
        #[arg(long, default_value_t = 0.25)]
        p: f64,
        #[arg(long, default_value_t = 1.0)]
        lo: f64,
        #[arg(long, default_value_t = 1.7)]
        hi: f64,
    },
    /// Cluster embedding vectors and emit balanced sampling weights.
    Cluster {
        /// CSV (name,v1,v2,...) or CFT (rows x dims) embedding file.
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, default_value_t = 40)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 300)]
        max_iter: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Balance exponent: 1 = exact balance, 0 = natural frequency.
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the per-image runtime budget in seconds.
    Budget {
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
    },
    /// Generate a deterministic synthetic dataset (images + masks).
    Synth(SynthArgs),
    /// Run the full pipeline over a directory, driven by a JSON config.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct TrackArgs {
    /// Prediction tensor (CFT, 3 channels).
    #[arg(long)]
    pred: PathBuf,
    /// Output mask path (.png, .pgm or .cft).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.4)]
    error_threshold: f64,
    #[arg(long, default_value_t = 2000)]
    tile: usize,
    #[arg(long, default_value_t = 0.5)]
    prob_threshold: f32,
    /// Drop candidates smaller than this many pixels (0 = disabled).
    #[arg(long, default_value_t = 0)]
    min_size: usize,
    /// Treat channel 0 as logits and apply the logistic function first.
    #[arg(long)]
    logits: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    image: PathBuf,
    /// Predictor spec: oracle:<mask>, oracle-noise:<mask>:<sigma> or
    /// tensor:<path>. Repeat for an ensemble.
    #[arg(long = "predictor", required = true)]
    predictors: Vec<String>,
    /// Output prediction CFT.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    tta: bool,
    #[arg(long, default_value_t = 512)]
    window: usize,
    #[arg(long, default_value_t = 0.6)]
    overlap: f64,
    #[arg(long, default_value_t = 0.125)]
    sigma_scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    n_images: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 512)]
    height: usize,
    #[arg(long, default_value_t = 512)]
    width: usize,
    #[arg(long, default_value_t = 12)]
    blobs_min: usize,
    #[arg(long, default_value_t = 30)]
    blobs_max: usize,
    #[arg(long, default_value_t = 5.0)]
    radius_min: f64,
    #[arg(long, default_value_t = 24.0)]
    radius_max: f64,
    /// Fraction of cells placed touching an existing cell.
    #[arg(long, default_value_t = 0.25)]
    touching: f64,
    #[arg(long, default_value_t = 0.04)]
    noise: f64,
    /// Probability of a contamination smudge per image.
    #[arg(long, default_value_t = 0.1)]
    contamination: f64,
}

#[derive(Args)]
struct PipelineArgs {
    /// JSON config file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    input_dir: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    gt_dir: Option<PathBuf>,
    /// Predictor spec; repeat for an ensemble. Overrides the config list.
    #[arg(long = "predictor")]
    predictors: Vec<String>,
    #[arg(long)]
    tta: bool,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    overlap: Option<f64>,
    #[arg(long)]
    error_threshold: Option<f64>,
    #[arg(long)]
    tile: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Exit nonzero if any image exceeds its runtime budget.
    #[arg(long)]
    strict_budget: bool,
    /// Abort on the first failing image.
    #[arg(long)]
    fail_fast: bool,
    /// Image-level workers; defaults to $CELLFLOW_JOBS or 1.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    mask_format: Option<String>,
    /// Report JSON output path (defaults to <output_dir>/report.json).
    #[arg(long)]
    report: Option<PathBuf>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Genflow { mask, out } => {
            let mask = io::read_mask(&mask).context("reading mask")?;
            let target = cellflow_core::flowgen::label_to_flow(&mask);
            let raster = target.to_prediction().into_raster();
            io::write_raster(&raster, &out).context("writing flow target")?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Track(args) => run_track(args),
        Command::Infer(args) => run_infer(args),
        Command::Eval {
            gt_dir,
            pred_dir,
            report,
            iou,
            inclusive,
            micro,
        } => {
            let opts = MatchOptions {
                iou_threshold: iou,
                inclusive,
            };
            let result = pipeline::evaluate_mask_dirs(&gt_dir, &pred_dir, &opts)?;
            std::fs::write(&report, serde_json::to_string_pretty(&result)?)
                .context("writing report")?;
            let aggregate = if micro {
                result.aggregate.micro_f1
            } else {
                result.aggregate.mean_f1
            };
            match aggregate {
                Some(f1) => println!(
                    "{} images, {} F1 {f1:.4}",
                    result.images.len(),
                    if micro { "micro" } else { "mean" }
                ),
                None => println!("{} images, no evaluable pairs", result.images.len()),
            }
            Ok(())
        }
        Command::Stats { mask, out } => {
            let mask = io::read_mask(&mask).context("reading mask")?;
            let stats = labelops::shape_stats(&mask);
            std::fs::write(&out, labelops::stats_to_csv(&stats)).context("writing csv")?;
            println!("{} instances -> {}", stats.len(), out.display());
            Ok(())
        }
        Command::Augment {
            image,
            mask,
            seed,
            out,
            p,
            lo,
            hi,
        } => {
            let image = io::read_image(&image).context("reading image")?;
            let mask = io::read_mask(&mask).context("reading mask")?;
            let opts = IntensityOptions { p, lo, hi };
            let result = labelops::cell_intensity_diversify(&image, &mask, seed, &opts)?;
            io::write_raster(&result, &out).context("writing augmented image")?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Cluster {
            embeddings,
            k,
            seed,
            max_iter,
            tol,
            alpha,
            out,
        } => run_cluster(embeddings, k, seed, max_iter, tol, alpha, out),
        Command::Budget { height, width } => {
            println!("{}", metrics::time_tolerance(height, width));
            Ok(())
        }
        Command::Synth(args) => {
            let spec = SynthSpec {
                height: args.height,
                width: args.width,
                blob_count: (args.blobs_min, args.blobs_max),
                radius: (args.radius_min, args.radius_max),
                touching_fraction: args.touching,
                noise_sigma: args.noise,
                contamination: args.contamination,
            };
            let paths = synth::synth_dataset(&args.out_dir, args.n_images, args.seed, &spec)?;
            println!(
                "wrote {} image/mask pairs under {}",
                paths.len(),
                args.out_dir.display()
            );
            Ok(())
        }
        Command::Pipeline(args) => run_pipeline_cmd(args),
    }
}

fn run_track(args: TrackArgs) -> Result<()> {
    let raster = io::read_raster(&args.pred).context("reading prediction")?;
    // CFT carries no activation metadata: channel 0 is taken as an activated
    // probability unless --logits says otherwise.
    let pred = Prediction::from_raster_with_flags(raster, !args.logits, false)?;
    let pred = if args.logits { pred.activate() } else { pred };
    let cfg = TrackConfig {
        error_threshold: args.error_threshold,
        tile: args.tile,
        prob_threshold: args.prob_threshold,
        min_size: args.min_size,
        ..TrackConfig::default()
    };
    let mask = tracker::track(&pred, &cfg)?;
    io::write_mask(&mask, &args.out).context("writing mask")?;
    println!(
        "{} instances -> {}",
        mask.distinct_ids().len(),
        args.out.display()
    );
    Ok(())
}

fn run_infer(args: InferArgs) -> Result<()> {
    let image = io::read_image(&args.image).context("reading image")?;
    let stem = args
        .image
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image")
        .to_string();
    let cfg = StitchConfig {
        window: args.window,
        overlap: args.overlap,
        sigma_scale: args.sigma_scale,
        tta: args.tta,
        flips: FlipSet::default(),
    };
    let mut predictions = Vec::new();
    for spec_text in &args.predictors {
        let spec = PredictorSpec::parse(spec_text)?;
        let port = spec.build_port(&stem, (image.height(), image.width()), args.seed)?;
        let pred = if args.tta {
            stitcher::tta_merge(port.as_ref(), &image, &cfg)?
        } else {
            stitcher::stitch(port.as_ref(), &image, &cfg)?
        };
        predictions.push(pred);
    }
    let merged = if predictions.len() == 1 {
        predictions.pop().unwrap()
    } else {
        stitcher::ensemble(&predictions)?
    };
    io::write_raster(merged.raster(), &args.out).context("writing prediction")?;
    println!("wrote {}", args.out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_cluster(
    embeddings: PathBuf,
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
    alpha: f64,
    out: PathBuf,
) -> Result<()> {
    let ext = embeddings
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    let set = if ext == "cft" {
        let raster = io::read_raster(&embeddings).context("reading embedding tensor")?;
        EmbeddingSet::from_raster(&raster)?
    } else {
        let text = std::fs::read_to_string(&embeddings).context("reading embedding csv")?;
        EmbeddingSet::from_csv_str(&text)?
    };
    let model = modality::kmeans(
        &set,
        &KmeansConfig {
            k,
            seed,
            max_iter,
            tol,
        },
    )?;
    let weights = modality::amplified_weights_with_exponent(&model, alpha);
    let sizes = model.cluster_sizes();
    let k_eff = sizes.iter().filter(|&&s| s > 0).count();

    let samples: Vec<serde_json::Value> = set
        .names()
        .iter()
        .zip(&model.assignments)
        .zip(&weights)
        .map(|((name, &cluster), &weight)| {
            serde_json::json!({ "name": name, "cluster": cluster, "weight": weight })
        })
        .collect();
    let centroids: Vec<Vec<f64>> = (0..model.k).map(|j| model.centroid(j).to_vec()).collect();
    let doc = serde_json::json!({
        "k": model.k,
        "k_eff": k_eff,
        "inertia": model.inertia,
        "alpha": alpha,
        "cluster_sizes": sizes,
        "centroids": centroids,
        "samples": samples,
    });
    std::fs::write(&out, serde_json::to_string_pretty(&doc)?).context("writing cluster json")?;
    println!(
        "{} samples into {} clusters ({} nonempty), inertia {:.4}",
        set.len(),
        model.k,
        k_eff,
        model.inertia
    );
    Ok(())
}

fn run_pipeline_cmd(args: PipelineArgs) -> Result<()> {
    let mut cfg: PipelineConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text).context("parsing config json")?
        }
        None => PipelineConfig::default(),
    };

    if let Some(v) = args.input_dir {
        cfg.input_dir = v;
    }
    if let Some(v) = args.output_dir {
        cfg.output_dir = v;
    }
    if let Some(v) = args.gt_dir {
        cfg.gt_dir = Some(v);
    }
    if !args.predictors.is_empty() {
        cfg.predictors = args.predictors;
    }
    if args.tta {
        cfg.stitch.tta = true;
    }
    if let Some(v) = args.window {
        cfg.stitch.window = v;
    }
    if let Some(v) = args.overlap {
        cfg.stitch.overlap = v;
    }
    if let Some(v) = args.error_threshold {
        cfg.track.error_threshold = v;
    }
    if let Some(v) = args.tile {
        cfg.track.tile = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if args.strict_budget {
        cfg.strict_budget = true;
    }
    if args.fail_fast {
        cfg.fail_fast = true;
    }
    if let Some(v) = args.mask_format {
        cfg.mask_format = v;
    }
    cfg.jobs = args
        .jobs
        .or_else(|| {
            std::env::var("CELLFLOW_JOBS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(cfg.jobs.max(1));

    if cfg.input_dir.as_os_str().is_empty() {
        bail!("input_dir is required (config file or --input-dir)");
    }
    if cfg.output_dir.as_os_str().is_empty() {
        bail!("output_dir is required (config file or --output-dir)");
    }

    let outcome = pipeline::run_pipeline(&cfg)?;
    let report_path = args
        .report
        .unwrap_or_else(|| cfg.output_dir.join("report.json"));
    std::fs::write(&report_path, serde_json::to_string_pretty(&outcome.report)?)
        .context("writing report")?;

    for image in &outcome.report.images {
        match (&image.error, image.f1) {
            (Some(err), _) => println!("{}: ERROR {err}", image.name),
            (None, Some(f1)) => println!(
                "{}: F1 {f1:.4}, {:.2}s of {:.2}s budget{}",
                image.name,
                image.wall_seconds,
                image.tolerance_seconds,
                if image.within_budget { "" } else { " (OVER)" }
            ),
            (None, None) => println!(
                "{}: {:.2}s of {:.2}s budget{}",
                image.name,
                image.wall_seconds,
                image.tolerance_seconds,
                if image.within_budget { "" } else { " (OVER)" }
            ),
        }
    }
    if let Some(mean) = outcome.report.aggregate.mean_f1 {
        println!(
            "mean F1 {mean:.4} over {} evaluated images",
            outcome.report.aggregate.evaluated
        );
    }
    println!("report: {}", report_path.display());

    if outcome.failed_images > 0 {
        bail!("{} image(s) failed", outcome.failed_images);
    }
    if cfg.strict_budget && outcome.budget_violations > 0 {
        bail!(
            "{} image(s) exceeded the runtime budget",
            outcome.budget_violations
        );
    }
    Ok(())
}
