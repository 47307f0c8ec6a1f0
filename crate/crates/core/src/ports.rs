//! Concrete predictor ports for the stitcher.
//!
//! These back the CLI predictor specs: a frame-backed port serving crops of a
//! stored full-frame prediction (built from a ground-truth mask or loaded
//! from a tensor file), a noisy variant with seeded Gaussian perturbation,
//! and a constant port used for normalization checks. Frame-backed ports are
//! flip-aware: when the stitcher runs on a flipped frame, they serve exactly
//! what a flip-equivariant model would produce, including flow-sign changes.

use crate::flowgen::label_to_flow;
use crate::raster::{LabelMask, Raster, CH_DX, CH_DY, CH_PROB};
use crate::stitcher::{Flip, PatchContext, PredictorPort, StitchError};

/// Emits the same (prob, dy, dx) for every pixel of every patch.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPort {
    prob: f32,
    dy: f32,
    dx: f32,
}

impl ConstantPort {
    pub fn new(prob: f32, dy: f32, dx: f32) -> Self {
        Self { prob, dy, dx }
    }
}

impl PredictorPort for ConstantPort {
    fn predict(&self, patch: &Raster, _ctx: &PatchContext) -> Result<Raster, StitchError> {
        let h = patch.height();
        let w = patch.width();
        let mut data = Vec::with_capacity(h * w * 3);
        for _ in 0..h * w {
            data.push(self.prob);
            data.push(self.dy);
            data.push(self.dx);
        }
        Ok(Raster::new(h, w, 3, data).expect("patch grid"))
    }

    fn activated(&self) -> bool {
        true
    }
}

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

/// Serves window crops of a stored full-frame prediction.
///
/// The sampler folds padded coordinates back into the frame (mirroring the
/// stitcher's reflect padding) and, when the context says the frame was
/// flipped, reads the mirrored location with the matching flow-sign change.
#[derive(Debug, Clone)]
pub struct FramePort {
    frame: Raster,
    activated: bool,
}

impl FramePort {
    /// Wrap an existing full-frame prediction tensor.
    pub fn new(frame: Raster, activated: bool) -> Result<Self, StitchError> {
        if frame.channels() != 3 {
            return Err(StitchError::DimensionMismatch(format!(
                "frame prediction needs 3 channels, got {}",
                frame.channels()
            )));
        }
        Ok(Self { frame, activated })
    }

    /// Oracle port: the frame is the flow target generated from `mask`.
    pub fn from_mask(mask: &LabelMask) -> Self {
        let frame = label_to_flow(mask).to_prediction().into_raster();
        Self {
            frame,
            activated: true,
        }
    }

    pub fn frame(&self) -> &Raster {
        &self.frame
    }

    /// Frame value as seen through reflect padding and the given flip:
    /// `(prob, dy, dx)` at padded coordinates `(pr, pc)`.
    fn sample(&self, pr: usize, pc: usize, flip: Flip) -> (f32, f32, f32) {
        let h = self.frame.height();
        let w = self.frame.width();
        let fr = reflect_index(pr, h);
        let fc = reflect_index(pc, w);
        let (sr, sc) = match flip {
            Flip::None => (fr, fc),
            Flip::Horizontal => (fr, w - 1 - fc),
            Flip::Vertical => (h - 1 - fr, fc),
        };
        let base = (sr * w + sc) * 3;
        let data = self.frame.data();
        let (prob, mut dy, mut dx) = (data[base], data[base + 1], data[base + 2]);
        match flip {
            Flip::None => {}
            Flip::Horizontal => dx = -dx,
            Flip::Vertical => dy = -dy,
        }
        (prob, dy, dx)
    }
}

impl PredictorPort for FramePort {
    fn predict(&self, patch: &Raster, ctx: &PatchContext) -> Result<Raster, StitchError> {
        let h = patch.height();
        let w = patch.width();
        let mut data = Vec::with_capacity(h * w * 3);
        for lr in 0..h {
            for lc in 0..w {
                let (p, dy, dx) = self.sample(ctx.window.r0 + lr, ctx.window.c0 + lc, ctx.flip);
                data.push(p);
                data.push(dy);
                data.push(dx);
            }
        }
        Ok(Raster::new(h, w, 3, data).expect("patch grid"))
    }

    fn activated(&self) -> bool {
        self.activated
    }
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn unit_interval(bits: u64) -> f64 {
    (bits >> 11) as f64 / (1u64 << 53) as f64
}

/// Frame port plus per-pixel Gaussian perturbation.
///
/// Noise is a pure function of (seed, flip, window origin, padded pixel,
/// channel), so repeated runs are bit-identical while overlapping windows and
/// TTA members each see independent draws. The probability channel is clamped
/// back into `[0, 1]`.
#[derive(Debug, Clone)]
pub struct NoisyFramePort {
    inner: FramePort,
    sigma: f64,
    seed: u64,
}

impl NoisyFramePort {
    pub fn new(inner: FramePort, sigma: f64, seed: u64) -> Self {
        Self { inner, sigma, seed }
    }

    fn noise(&self, flip: Flip, window_key: u64, pr: usize, pc: usize, ch: usize) -> f64 {
        let flip_tag = match flip {
            Flip::None => 0u64,
            Flip::Horizontal => 1,
            Flip::Vertical => 2,
        };
        let mut state = splitmix(self.seed ^ 0xC3D1_9B1E_55AA_0F37);
        state = splitmix(state ^ flip_tag);
        state = splitmix(state ^ window_key);
        state = splitmix(state ^ ((pr as u64) << 32 | pc as u64));
        state = splitmix(state ^ ch as u64);
        let u1 = unit_interval(state).max(1e-15);
        let u2 = unit_interval(splitmix(state));
        self.sigma * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

impl PredictorPort for NoisyFramePort {
    fn predict(&self, patch: &Raster, ctx: &PatchContext) -> Result<Raster, StitchError> {
        let mut out = self.inner.predict(patch, ctx)?;
        let window_key = (ctx.window.r0 as u64) << 32 | ctx.window.c0 as u64;
        let h = out.height();
        let w = out.width();
        for lr in 0..h {
            for lc in 0..w {
                let pr = ctx.window.r0 + lr;
                let pc = ctx.window.c0 + lc;
                let base = (lr * w + lc) * 3;
                for ch in [CH_PROB, CH_DY, CH_DX] {
                    let noisy = out.data()[base + ch] as f64
                        + self.noise(ctx.flip, window_key, pr, pc, ch);
                    out.data_mut()[base + ch] = if ch == CH_PROB {
                        noisy.clamp(0.0, 1.0) as f32
                    } else {
                        noisy as f32
                    };
                }
            }
        }
        Ok(out)
    }

    fn activated(&self) -> bool {
        true
    }
}
