//! Whole-image prediction assembly over an abstract per-patch predictor:
//! overlapping window planning, Gaussian importance blending, flip-based
//! test-time augmentation with flow-sign correction, and model ensembling.
//!
//! Patch outputs are accumulated as importance-weighted sums in 64-bit
//! buffers and normalized by the accumulated weight, so the stitched value at
//! every pixel is a convex combination of the patch outputs covering it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{Prediction, Raster, CH_DX, CH_DY, CH_PROB};

#[derive(Debug, Error, PartialEq)]
pub enum StitchError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("ensemble needs at least one member")]
    EmptyEnsemble,
    #[error("predictor error: {0}")]
    Predictor(String),
}

/// One sliding window, in (possibly padded) frame coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub r0: usize,
    pub c0: usize,
    pub h: usize,
    pub w: usize,
}

/// Flip applied to the frame a patch was cut from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Flip {
    #[default]
    None,
    Horizontal,
    Vertical,
}

/// Location metadata handed to a predictor along with the pixel patch.
/// Content-driven predictors can ignore it; frame-backed ports (oracle
/// targets, precomputed tensors) use it to cut the matching region.
#[derive(Debug, Clone, Copy)]
pub struct PatchContext {
    pub window: Window,
    pub flip: Flip,
}

/// Per-patch prediction port: maps an `h x w x C` patch to an `h x w x 3`
/// raster of (cell logit/probability, dy, dx). Must be deterministic for a
/// fixed input and context.
pub trait PredictorPort: Sync {
    fn predict(&self, patch: &Raster, ctx: &PatchContext) -> Result<Raster, StitchError>;

    /// Whether channel 0 of the output is already an activated probability.
    fn activated(&self) -> bool;

    /// Expected input channel count, `None` for content-agnostic ports.
    fn input_channels(&self) -> Option<usize> {
        None
    }
}

/// Which flips participate in test-time augmentation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct FlipSet {
    pub horizontal: bool,
    pub vertical: bool,
}

impl Default for FlipSet {
    fn default() -> Self {
        Self {
            horizontal: true,
            vertical: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct StitchConfig {
    pub window: usize,
    /// Fraction of the window shared by adjacent patches.
    pub overlap: f64,
    /// Gaussian sigma as a fraction of the window side.
    pub sigma_scale: f64,
    pub tta: bool,
    pub flips: FlipSet,
}

impl Default for StitchConfig {
    fn default() -> Self {
        Self {
            window: 512,
            overlap: 0.6,
            sigma_scale: 0.125,
            tta: false,
            flips: FlipSet::default(),
        }
    }
}

impl StitchConfig {
    pub fn validate(&self) -> Result<(), StitchError> {
        if self.window == 0 {
            return Err(StitchError::InvalidConfig("window must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(StitchError::InvalidConfig(format!(
                "overlap must be in [0,1), got {}",
                self.overlap
            )));
        }
        if self.sigma_scale.is_nan() || self.sigma_scale <= 0.0 {
            return Err(StitchError::InvalidConfig(format!(
                "sigma_scale must be positive, got {}",
                self.sigma_scale
            )));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        ((self.window as f64 * (1.0 - self.overlap)).round() as usize).max(1)
    }
}

fn axis_starts(len: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut s = 0;
    while s + window < len {
        starts.push(s);
        s += stride;
    }
    starts.push(len - window);
    starts
}

/// Plan the window grid for an `h x w` image. Windows start at multiples of
/// the stride; the final window along each axis is clamped so it ends at the
/// (reflect-padded) frame end. Frames smaller than the window are treated as
/// padded up to the window size, so there is always at least one window.
pub fn plan_windows(h: usize, w: usize, cfg: &StitchConfig) -> Vec<Window> {
    let win = cfg.window;
    let ph = h.max(win);
    let pw = w.max(win);
    let stride = cfg.stride();
    let rows = axis_starts(ph, win, stride);
    let cols = axis_starts(pw, win, stride);
    let mut windows = Vec::with_capacity(rows.len() * cols.len());
    for &r0 in &rows {
        for &c0 in &cols {
            windows.push(Window {
                r0,
                c0,
                h: win,
                w: win,
            });
        }
    }
    windows
}

/// Separable Gaussian weight map peaking at 1.0 on the patch center and
/// floored at 1e-8 so accumulated weights never vanish.
pub fn gaussian_importance(h: usize, w: usize, sigma_scale: f64) -> Raster {
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let sy = sigma_scale * h as f64;
    let sx = sigma_scale * w as f64;
    let gy: Vec<f64> = (0..h)
        .map(|r| (-((r as f64 - cy).powi(2)) / (2.0 * sy * sy)).exp())
        .collect();
    let gx: Vec<f64> = (0..w)
        .map(|c| (-((c as f64 - cx).powi(2)) / (2.0 * sx * sx)).exp())
        .collect();
    let mut data = Vec::with_capacity(h * w);
    for row_g in &gy {
        for col_g in &gx {
            data.push((row_g * col_g).max(1e-8) as f32);
        }
    }
    Raster::new(h, w, 1, data).expect("importance grid")
}

/// Fold an index into `[0, n)` by mirror reflection about the edge samples,
/// handling pads wider than the source.
fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

fn reflect_pad(image: &Raster, ph: usize, pw: usize) -> Raster {
    let h = image.height();
    let w = image.width();
    let ch = image.channels();
    let mut data = Vec::with_capacity(ph * pw * ch);
    for r in 0..ph {
        let sr = reflect_index(r, h);
        for c in 0..pw {
            let sc = reflect_index(c, w);
            let base = (sr * w + sc) * ch;
            data.extend_from_slice(&image.data()[base..base + ch]);
        }
    }
    Raster::new(ph, pw, ch, data).expect("padded grid")
}

fn sigmoid_channel0(raster: &mut Raster) {
    let ch = raster.channels();
    for px in raster.data_mut().chunks_exact_mut(ch) {
        px[CH_PROB] = 1.0 / (1.0 + (-px[CH_PROB]).exp());
    }
}

/// How many windows are predicted in parallel before their results are
/// folded into the accumulators (bounds transient memory).
const PREDICT_CHUNK: usize = 16;

pub(crate) fn stitch_with_flip(
    port: &dyn PredictorPort,
    image: &Raster,
    cfg: &StitchConfig,
    flip: Flip,
) -> Result<Prediction, StitchError> {
    cfg.validate()?;
    let adapted_store;
    let image = match port.input_channels() {
        Some(want) if want != image.channels() => {
            if want == 1 {
                // multi-channel inputs collapse to their channel mean when a
                // single-channel view is required
                adapted_store = image.mean_channels();
                &adapted_store
            } else {
                return Err(StitchError::DimensionMismatch(format!(
                    "predictor expects {want} channels, image has {}",
                    image.channels()
                )));
            }
        }
        _ => image,
    };

    let h = image.height();
    let w = image.width();
    let win = cfg.window;
    let ph = h.max(win);
    let pw = w.max(win);
    let padded_store;
    let padded = if ph == h && pw == w {
        image
    } else {
        padded_store = reflect_pad(image, ph, pw);
        &padded_store
    };

    let windows = plan_windows(h, w, cfg);
    let importance = gaussian_importance(win, win, cfg.sigma_scale);

    let mut acc = vec![0.0f64; ph * pw * 3];
    let mut wacc = vec![0.0f64; ph * pw];

    for chunk in windows.chunks(PREDICT_CHUNK) {
        let outputs: Vec<Raster> = chunk
            .par_iter()
            .map(|&wdw| {
                let patch = padded.crop(wdw.r0, wdw.c0, wdw.h, wdw.w);
                let ctx = PatchContext { window: wdw, flip };
                let mut out = port.predict(&patch, &ctx)?;
                if out.height() != wdw.h || out.width() != wdw.w || out.channels() != 3 {
                    return Err(StitchError::DimensionMismatch(format!(
                        "predictor returned {}x{}x{} for a {}x{} window",
                        out.height(),
                        out.width(),
                        out.channels(),
                        wdw.h,
                        wdw.w
                    )));
                }
                if !port.activated() {
                    sigmoid_channel0(&mut out);
                }
                Ok(out)
            })
            .collect::<Result<_, _>>()?;

        let rmin = chunk.iter().map(|wd| wd.r0).min().unwrap();
        let rmax = chunk.iter().map(|wd| wd.r0 + wd.h).max().unwrap();
        acc[rmin * pw * 3..rmax * pw * 3]
            .par_chunks_mut(pw * 3)
            .zip(wacc[rmin * pw..rmax * pw].par_chunks_mut(pw))
            .enumerate()
            .for_each(|(ridx, (acc_row, wacc_row))| {
                let r = rmin + ridx;
                for (wdw, out) in chunk.iter().zip(&outputs) {
                    if r < wdw.r0 || r >= wdw.r0 + wdw.h {
                        continue;
                    }
                    let lr = r - wdw.r0;
                    let out_data = out.data();
                    let imp_data = importance.data();
                    for lc in 0..wdw.w {
                        let weight = imp_data[lr * wdw.w + lc] as f64;
                        let src = (lr * wdw.w + lc) * 3;
                        let dst = (wdw.c0 + lc) * 3;
                        acc_row[dst] += weight * out_data[src] as f64;
                        acc_row[dst + 1] += weight * out_data[src + 1] as f64;
                        acc_row[dst + 2] += weight * out_data[src + 2] as f64;
                        wacc_row[wdw.c0 + lc] += weight;
                    }
                }
            });
    }

    let mut blended = vec![0.0f32; ph * pw * 3];
    blended
        .par_chunks_mut(pw * 3)
        .enumerate()
        .for_each(|(r, row)| {
            for c in 0..pw {
                let weight = wacc[r * pw + c];
                for ch in 0..3 {
                    row[c * 3 + ch] = (acc[(r * pw + c) * 3 + ch] / weight) as f32;
                }
            }
        });

    let full = Raster::new(ph, pw, 3, blended).expect("padded grid");
    let cropped = if ph == h && pw == w {
        full
    } else {
        full.crop(0, 0, h, w)
    };
    Prediction::from_raster_with_flags(cropped, true, false)
        .map_err(|e| StitchError::DimensionMismatch(e.to_string()))
}

/// Stitch sliding-window predictions over the image with Gaussian importance
/// blending. The result is activated (probabilities in `[0, 1]`).
pub fn stitch(
    port: &dyn PredictorPort,
    image: &Raster,
    cfg: &StitchConfig,
) -> Result<Prediction, StitchError> {
    stitch_with_flip(port, image, cfg, Flip::None)
}

/// Test-time augmentation: stitch the identity view plus each enabled flip,
/// undo the flip on the outputs (negating dx under horizontal and dy under
/// vertical flips), and average the members.
pub fn tta_merge(
    port: &dyn PredictorPort,
    image: &Raster,
    cfg: &StitchConfig,
) -> Result<Prediction, StitchError> {
    if !cfg.tta {
        return Err(StitchError::InvalidConfig(
            "tta_merge requires cfg.tta to be enabled".into(),
        ));
    }
    let mut members = vec![Flip::None];
    if cfg.flips.horizontal {
        members.push(Flip::Horizontal);
    }
    if cfg.flips.vertical {
        members.push(Flip::Vertical);
    }

    let h = image.height();
    let w = image.width();
    let mut acc = vec![0.0f64; h * w * 3];
    for &flip in &members {
        let view_store;
        let view = match flip {
            Flip::None => image,
            Flip::Horizontal => {
                view_store = image.flip_horizontal();
                &view_store
            }
            Flip::Vertical => {
                view_store = image.flip_vertical();
                &view_store
            }
        };
        let pred = stitch_with_flip(port, view, cfg, flip)?;
        let raster = pred.into_raster();
        let restored = match flip {
            Flip::None => raster,
            Flip::Horizontal => raster.flip_horizontal(),
            Flip::Vertical => raster.flip_vertical(),
        };
        let data = restored.data();
        match flip {
            Flip::None => {
                for (a, &v) in acc.iter_mut().zip(data) {
                    *a += v as f64;
                }
            }
            Flip::Horizontal => {
                for (i, px) in data.chunks_exact(3).enumerate() {
                    acc[3 * i + CH_PROB] += px[CH_PROB] as f64;
                    acc[3 * i + CH_DY] += px[CH_DY] as f64;
                    acc[3 * i + CH_DX] -= px[CH_DX] as f64;
                }
            }
            Flip::Vertical => {
                for (i, px) in data.chunks_exact(3).enumerate() {
                    acc[3 * i + CH_PROB] += px[CH_PROB] as f64;
                    acc[3 * i + CH_DY] -= px[CH_DY] as f64;
                    acc[3 * i + CH_DX] += px[CH_DX] as f64;
                }
            }
        }
    }

    let scale = 1.0 / members.len() as f64;
    let data: Vec<f32> = acc.into_iter().map(|v| (v * scale) as f32).collect();
    let raster = Raster::new(h, w, 3, data).expect("image grid");
    Prediction::from_raster_with_flags(raster, true, false)
        .map_err(|e| StitchError::DimensionMismatch(e.to_string()))
}

/// Unweighted per-pixel mean of the member predictions.
pub fn ensemble(preds: &[Prediction]) -> Result<Prediction, StitchError> {
    let first = preds.first().ok_or(StitchError::EmptyEnsemble)?;
    let h = first.height();
    let w = first.width();
    for p in preds {
        if p.height() != h || p.width() != w {
            return Err(StitchError::DimensionMismatch(format!(
                "ensemble member {}x{} vs {}x{}",
                p.height(),
                p.width(),
                h,
                w
            )));
        }
    }
    if preds.len() == 1 {
        return Ok(first.clone());
    }
    let mut acc = vec![0.0f64; h * w * 3];
    for p in preds {
        for (a, &v) in acc.iter_mut().zip(p.raster().data()) {
            *a += v as f64;
        }
    }
    let scale = 1.0 / preds.len() as f64;
    let data: Vec<f32> = acc.into_iter().map(|v| (v * scale) as f32).collect();
    let raster = Raster::new(h, w, 3, data).expect("member grid");
    let activated = preds.iter().all(|p| p.is_activated());
    Prediction::from_raster_with_flags(raster, activated, false)
        .map_err(|e| StitchError::DimensionMismatch(e.to_string()))
}
