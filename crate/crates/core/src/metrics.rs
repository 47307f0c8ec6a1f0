//! Challenge-faithful evaluation: greedy instance matching at an IoU cut,
//! F1 scoring, the per-image runtime budget, and the two-term training loss
//! as a pure scoring function.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flowgen::FlowTarget;
use crate::raster::{LabelMask, Prediction};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("prediction must be activated before scoring")]
    NotActivated,
}

/// Matching policy. `inclusive` admits pairs at exactly the threshold; the
/// default keeps the strict `iou > threshold` reading.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MatchOptions {
    pub iou_threshold: f64,
    pub inclusive: bool,
}

impl Default for MatchOptions {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            inclusive: false,
        }
    }
}

/// Outcome of one-to-one instance matching.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    /// Unmatched ground-truth instances (false negatives).
    pub fn_: usize,
    /// Matched `(gt_id, pred_id, iou)` triples; each id appears at most once.
    pub pairs: Vec<(u32, u32, f64)>,
}

/// Match ground-truth and predicted instances one-to-one by IoU.
///
/// IoU comes from a joint co-occurrence histogram; admissible pairs are
/// greedily taken in descending IoU order (ties broken by ids). At thresholds
/// of 0.5 and above a pixel set can clear the cut with at most one
/// counterpart, so the greedy matching is the optimal one.
pub fn match_instances(
    gt: &LabelMask,
    pred: &LabelMask,
    opts: &MatchOptions,
) -> Result<MatchResult, MetricsError> {
    if gt.height() != pred.height() || gt.width() != pred.width() {
        return Err(MetricsError::DimensionMismatch(format!(
            "gt {}x{} vs pred {}x{}",
            gt.height(),
            gt.width(),
            pred.height(),
            pred.width()
        )));
    }

    let mut gt_sizes: HashMap<u32, u64> = HashMap::new();
    let mut pred_sizes: HashMap<u32, u64> = HashMap::new();
    let mut joint: HashMap<(u32, u32), u64> = HashMap::new();
    for (&g, &p) in gt.data().iter().zip(pred.data()) {
        if g != 0 {
            *gt_sizes.entry(g).or_insert(0) += 1;
        }
        if p != 0 {
            *pred_sizes.entry(p).or_insert(0) += 1;
        }
        if g != 0 && p != 0 {
            *joint.entry((g, p)).or_insert(0) += 1;
        }
    }

    let mut candidates: Vec<(u32, u32, f64)> = joint
        .iter()
        .filter_map(|(&(g, p), &inter)| {
            let union = gt_sizes[&g] + pred_sizes[&p] - inter;
            let iou = inter as f64 / union as f64;
            let admissible = if opts.inclusive {
                iou >= opts.iou_threshold
            } else {
                iou > opts.iou_threshold
            };
            admissible.then_some((g, p, iou))
        })
        .collect();
    candidates.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap()
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });

    let mut used_gt: HashSet<u32> = HashSet::new();
    let mut used_pred: HashSet<u32> = HashSet::new();
    let mut pairs = Vec::new();
    for (g, p, iou) in candidates {
        if used_gt.contains(&g) || used_pred.contains(&p) {
            continue;
        }
        used_gt.insert(g);
        used_pred.insert(p);
        pairs.push((g, p, iou));
    }

    let tp = pairs.len();
    Ok(MatchResult {
        tp,
        fp: pred_sizes.len() - tp,
        fn_: gt_sizes.len() - tp,
        pairs,
    })
}

/// `2tp / (2tp + fp + fn)`, defined as 1.0 for an empty-vs-empty image so
/// blank negative controls do not poison aggregates.
pub fn f1_score(m: &MatchResult) -> f64 {
    let denom = 2 * m.tp + m.fp + m.fn_;
    if denom == 0 {
        1.0
    } else {
        2.0 * m.tp as f64 / denom as f64
    }
}

/// Per-image runtime budget in seconds: 10 s up to one megapixel, then
/// 10 s per megapixel.
pub fn time_tolerance(height: usize, width: usize) -> f64 {
    let pixels = height as u64 * width as u64;
    if pixels <= 1_000_000 {
        10.0
    } else {
        pixels as f64 / 1_000_000.0 * 10.0
    }
}

/// Loss weighting. `flow_scale` multiplies the target flow before the MSE
/// term, for pipelines that train against scaled gradients; unit flows are
/// the stored convention.
#[derive(Debug, Clone, Copy)]
pub struct LossOptions {
    pub lambda: f64,
    pub flow_scale: f64,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            flow_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentationLoss {
    pub bce: f64,
    pub mse: f64,
    pub total: f64,
}

/// Binary cross-entropy on the probability channel plus weighted MSE on the
/// flow channels: `total = bce + lambda * mse`. Probabilities are clamped to
/// `[1e-7, 1 - 1e-7]` before the log.
pub fn segmentation_loss(
    pred: &Prediction,
    target: &FlowTarget,
    opts: &LossOptions,
) -> Result<SegmentationLoss, MetricsError> {
    if !pred.is_activated() {
        return Err(MetricsError::NotActivated);
    }
    let h = pred.height();
    let w = pred.width();
    if target.cell_prob.height() != h || target.cell_prob.width() != w {
        return Err(MetricsError::DimensionMismatch(format!(
            "prediction {}x{} vs target {}x{}",
            h,
            w,
            target.cell_prob.height(),
            target.cell_prob.width()
        )));
    }

    const EPS: f64 = 1e-7;
    let n = h * w;
    let mut bce_sum = 0.0f64;
    let mut mse_sum = 0.0f64;
    let data = pred.raster().data();
    for i in 0..n {
        let p = (data[3 * i] as f64).clamp(EPS, 1.0 - EPS);
        let y = target.cell_prob.data()[i] as f64;
        bce_sum -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();

        let tdy = target.flow.data()[2 * i] as f64 * opts.flow_scale;
        let tdx = target.flow.data()[2 * i + 1] as f64 * opts.flow_scale;
        mse_sum += (data[3 * i + 1] as f64 - tdy).powi(2);
        mse_sum += (data[3 * i + 2] as f64 - tdx).powi(2);
    }
    let bce = bce_sum / n as f64;
    let mse = mse_sum / (2 * n) as f64;
    Ok(SegmentationLoss {
        bce,
        mse,
        total: bce + opts.lambda * mse,
    })
}

/// Evaluation record for one image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageEval {
    pub name: String,
    /// None when the image could not be evaluated (no ground truth or error).
    pub f1: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Compute time (predict + track), excluding disk I/O.
    pub wall_seconds: f64,
    /// End-to-end time including I/O.
    pub total_seconds: f64,
    pub tolerance_seconds: f64,
    pub within_budget: bool,
    /// False when no timing was performed (e.g. offline mask evaluation).
    pub timed: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalAggregate {
    /// Mean of per-image F1 over evaluated images (per-case scoring).
    pub mean_f1: Option<f64>,
    /// F1 of the summed counts across images.
    pub micro_f1: Option<f64>,
    pub images: usize,
    pub evaluated: usize,
    pub all_within_budget: bool,
}

/// Versioned evaluation report; this is the JSON schema emitted by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub report_version: u32,
    pub iou_threshold: f64,
    pub inclusive_iou: bool,
    pub images: Vec<ImageEval>,
    pub aggregate: EvalAggregate,
}

impl EvalReport {
    pub fn new(opts: &MatchOptions, images: Vec<ImageEval>) -> Self {
        let evaluated: Vec<&ImageEval> = images.iter().filter(|i| i.f1.is_some()).collect();
        let mean_f1 = if evaluated.is_empty() {
            None
        } else {
            Some(evaluated.iter().map(|i| i.f1.unwrap()).sum::<f64>() / evaluated.len() as f64)
        };
        let micro_f1 = if evaluated.is_empty() {
            None
        } else {
            let tp: usize = evaluated.iter().map(|i| i.tp).sum();
            let fp: usize = evaluated.iter().map(|i| i.fp).sum();
            let fn_: usize = evaluated.iter().map(|i| i.fn_).sum();
            Some(f1_score(&MatchResult {
                tp,
                fp,
                fn_,
                pairs: Vec::new(),
            }))
        };
        let all_within_budget = images
            .iter()
            .filter(|i| i.timed)
            .all(|i| i.within_budget);
        let aggregate = EvalAggregate {
            mean_f1,
            micro_f1,
            images: images.len(),
            evaluated: evaluated.len(),
            all_within_budget,
        };
        EvalReport {
            report_version: 1,
            iou_threshold: opts.iou_threshold,
            inclusive_iou: opts.inclusive,
            images,
            aggregate,
        }
    }
}
