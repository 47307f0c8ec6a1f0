//! Core grid types shared by every stage of the pipeline.
//!
//! A [`Raster`] is a dense `H x W x C` grid of `f32`, stored row-major with
//! the channel index varying fastest: `value(r, c, ch) = data[(r*W + c)*C + ch]`.
//! A [`LabelMask`] is a `H x W` grid of `u32` instance ids where 0 means
//! background. Both are plain immutable values once built; operations on them
//! are pure functions, so they can be shared freely across threads.

use thiserror::Error;

/// Channel index of the cell probability in a [`Prediction`].
pub const CH_PROB: usize = 0;
/// Channel index of the vertical flow component (dy, y grows downward).
pub const CH_DY: usize = 1;
/// Channel index of the horizontal flow component (dx).
pub const CH_DX: usize = 2;

/// Largest instance id that survives a round trip through an f32 payload.
pub const MAX_FLOAT_MASK_ID: u32 = 1 << 24;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RasterError {
    #[error("raster dimensions must be at least 1x1x1, got {height}x{width}x{channels}")]
    ZeroDimension {
        height: usize,
        width: usize,
        channels: usize,
    },
    #[error("data length {actual} does not match {expected} (height*width*channels)")]
    DataLength { expected: usize, actual: usize },
    #[error("expected {expected} channels, got {actual}")]
    ChannelCount { expected: usize, actual: usize },
}

/// Dense `H x W x C` grid of 32-bit floats, row-major, channel-minor.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self, RasterError> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(RasterError::ZeroDimension {
                height,
                width,
                channels,
            });
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(RasterError::DataLength {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::new(height, width, channels, vec![0.0; height * width * channels])
            .expect("non-zero dimensions")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, r: usize, c: usize, ch: usize) -> usize {
        debug_assert!(r < self.height && c < self.width && ch < self.channels);
        (r * self.width + c) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize, ch: usize) -> f32 {
        self.data[self.index(r, c, ch)]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, ch: usize, value: f32) {
        let i = self.index(r, c, ch);
        self.data[i] = value;
    }

    /// Collapse to a single channel by averaging all channels per pixel.
    pub fn mean_channels(&self) -> Raster {
        if self.channels == 1 {
            return self.clone();
        }
        let mut out = vec![0.0f32; self.height * self.width];
        for (i, px) in self.data.chunks_exact(self.channels).enumerate() {
            let sum: f64 = px.iter().map(|&v| v as f64).sum();
            out[i] = (sum / self.channels as f64) as f32;
        }
        Raster::new(self.height, self.width, 1, out).expect("same pixel grid")
    }

    /// Copy the axis-aligned region starting at `(r0, c0)` with extent `h x w`.
    pub fn crop(&self, r0: usize, c0: usize, h: usize, w: usize) -> Raster {
        assert!(r0 + h <= self.height && c0 + w <= self.width, "crop out of bounds");
        let mut out = Vec::with_capacity(h * w * self.channels);
        for r in r0..r0 + h {
            let start = (r * self.width + c0) * self.channels;
            out.extend_from_slice(&self.data[start..start + w * self.channels]);
        }
        Raster::new(h, w, self.channels, out).expect("crop extent validated")
    }

    /// Mirror columns (flip about the vertical axis).
    pub fn flip_horizontal(&self) -> Raster {
        let mut out = self.clone();
        for r in 0..self.height {
            for c in 0..self.width {
                let src = (r * self.width + (self.width - 1 - c)) * self.channels;
                let dst = (r * self.width + c) * self.channels;
                out.data[dst..dst + self.channels]
                    .copy_from_slice(&self.data[src..src + self.channels]);
            }
        }
        out
    }

    /// Mirror rows (flip about the horizontal axis).
    pub fn flip_vertical(&self) -> Raster {
        let mut out = self.clone();
        let row = self.width * self.channels;
        for r in 0..self.height {
            let src = (self.height - 1 - r) * row;
            let dst = r * row;
            out.data[dst..dst + row].copy_from_slice(&self.data[src..src + row]);
        }
        out
    }
}

/// `H x W` grid of unsigned instance ids; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    data: Vec<u32>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, data: Vec<u32>) -> Result<Self, RasterError> {
        if height == 0 || width == 0 {
            return Err(RasterError::ZeroDimension {
                height,
                width,
                channels: 1,
            });
        }
        let expected = height * width;
        if data.len() != expected {
            return Err(RasterError::DataLength {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![0; height * width]).expect("non-zero dimensions")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> u32 {
        debug_assert!(r < self.height && c < self.width);
        self.data[r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, id: u32) {
        debug_assert!(r < self.height && c < self.width);
        self.data[r * self.width + c] = id;
    }

    /// Largest id present, 0 for an all-background mask.
    pub fn max_id(&self) -> u32 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Distinct nonzero ids in ascending order.
    pub fn distinct_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.data.iter().copied().filter(|&v| v != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Remap nonzero ids onto contiguous `1..=K`, assigning new ids in
    /// ascending order of the original ids. Background stays 0. Idempotent.
    pub fn relabel_sequential(&self) -> LabelMask {
        let ids = self.distinct_ids();
        if ids.is_empty() {
            return self.clone();
        }
        let already = ids
            .iter()
            .enumerate()
            .all(|(i, &id)| id == (i as u32) + 1);
        if already {
            return self.clone();
        }
        // Dense table when ids are small, otherwise binary search per pixel.
        let max = *ids.last().unwrap() as usize;
        let data = if max <= 4 * self.data.len() {
            let mut table = vec![0u32; max + 1];
            for (i, &id) in ids.iter().enumerate() {
                table[id as usize] = (i as u32) + 1;
            }
            self.data.iter().map(|&v| table[v as usize]).collect()
        } else {
            self.data
                .iter()
                .map(|&v| {
                    if v == 0 {
                        0
                    } else {
                        ids.binary_search(&v).expect("id collected above") as u32 + 1
                    }
                })
                .collect()
        };
        LabelMask {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// One record per distinct nonzero id, ascending by id.
    pub fn extract_instances(&self) -> Vec<InstanceRecord> {
        let mut by_id: std::collections::BTreeMap<u32, InstanceAccum> =
            std::collections::BTreeMap::new();
        for r in 0..self.height {
            for c in 0..self.width {
                let id = self.data[r * self.width + c];
                if id == 0 {
                    continue;
                }
                let acc = by_id.entry(id).or_default();
                acc.count += 1;
                acc.sum_r += r as f64;
                acc.sum_c += c as f64;
                acc.r0 = acc.r0.min(r);
                acc.c0 = acc.c0.min(c);
                acc.r1 = acc.r1.max(r);
                acc.c1 = acc.c1.max(c);
            }
        }
        by_id
            .into_iter()
            .map(|(id, a)| InstanceRecord {
                id,
                pixel_count: a.count,
                centroid: (a.sum_r / a.count as f64, a.sum_c / a.count as f64),
                bbox: (a.r0, a.c0, a.r1, a.c1),
            })
            .collect()
    }

    pub fn flip_horizontal(&self) -> LabelMask {
        let mut out = self.clone();
        for r in 0..self.height {
            for c in 0..self.width {
                out.data[r * self.width + c] = self.data[r * self.width + (self.width - 1 - c)];
            }
        }
        out
    }

    pub fn flip_vertical(&self) -> LabelMask {
        let mut out = self.clone();
        for r in 0..self.height {
            let src = (self.height - 1 - r) * self.width;
            let dst = r * self.width;
            out.data[dst..dst + self.width].copy_from_slice(&self.data[src..src + self.width]);
        }
        out
    }
}

struct InstanceAccum {
    count: usize,
    sum_r: f64,
    sum_c: f64,
    r0: usize,
    c0: usize,
    r1: usize,
    c1: usize,
}

// bbox mins start at MAX so the first member pixel initializes them.
impl Default for InstanceAccum {
    fn default() -> Self {
        Self {
            count: 0,
            sum_r: 0.0,
            sum_c: 0.0,
            r0: usize::MAX,
            c0: usize::MAX,
            r1: 0,
            c1: 0,
        }
    }
}

/// Per-instance bookkeeping: pixel count, centroid and inclusive bbox.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRecord {
    pub id: u32,
    pub pixel_count: usize,
    /// Mean of member pixel coordinates, `(row, col)`.
    pub centroid: (f64, f64),
    /// Inclusive bounds `(r0, c0, r1, c1)`.
    pub bbox: (usize, usize, usize, usize),
}

/// A 3-channel raster carrying `(cell probability, dy, dx)` per pixel.
///
/// The flags record which post-processing steps have been applied:
/// `activated` means channel 0 holds probabilities in `[0, 1]`;
/// `normalized` means flow vectors have magnitude at most `1 + 1e-5`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    raster: Raster,
    activated: bool,
    normalized: bool,
}

impl Prediction {
    /// Wrap a raw 3-channel raster; both flags start unset.
    pub fn from_raster(raster: Raster) -> Result<Self, RasterError> {
        if raster.channels() != 3 {
            return Err(RasterError::ChannelCount {
                expected: 3,
                actual: raster.channels(),
            });
        }
        Ok(Self {
            raster,
            activated: false,
            normalized: false,
        })
    }

    /// Wrap a raster whose flags are already known (e.g. oracle outputs).
    pub fn from_raster_with_flags(
        raster: Raster,
        activated: bool,
        normalized: bool,
    ) -> Result<Self, RasterError> {
        let mut p = Self::from_raster(raster)?;
        p.activated = activated;
        p.normalized = normalized;
        Ok(p)
    }

    pub fn raster(&self) -> &Raster {
        &self.raster
    }

    pub fn into_raster(self) -> Raster {
        self.raster
    }

    pub fn height(&self) -> usize {
        self.raster.height()
    }

    pub fn width(&self) -> usize {
        self.raster.width()
    }

    pub fn is_activated(&self) -> bool {
        self.activated
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    #[inline]
    pub fn prob(&self, r: usize, c: usize) -> f32 {
        self.raster.get(r, c, CH_PROB)
    }

    #[inline]
    pub fn flow(&self, r: usize, c: usize) -> (f32, f32) {
        (self.raster.get(r, c, CH_DY), self.raster.get(r, c, CH_DX))
    }

    /// Apply the logistic function to channel 0 unless already activated.
    pub fn activate(mut self) -> Prediction {
        if self.activated {
            return self;
        }
        let channels = self.raster.channels();
        for px in self.raster.data_mut().chunks_exact_mut(channels) {
            px[CH_PROB] = 1.0 / (1.0 + (-px[CH_PROB]).exp());
        }
        self.activated = true;
        self
    }

    /// Rescale each flow vector to unit length; vectors with magnitude below
    /// `1e-12` become zero. Idempotent on already-normalized fields.
    pub fn normalize_flows(mut self) -> Prediction {
        let channels = self.raster.channels();
        for px in self.raster.data_mut().chunks_exact_mut(channels) {
            let dy = px[CH_DY] as f64;
            let dx = px[CH_DX] as f64;
            let mag = (dy * dy + dx * dx).sqrt();
            if mag > 1e-12 {
                px[CH_DY] = (dy / mag) as f32;
                px[CH_DX] = (dx / mag) as f32;
            } else {
                px[CH_DY] = 0.0;
                px[CH_DX] = 0.0;
            }
        }
        self.normalized = true;
        self
    }

    /// Split into the probability channel and the 2-channel flow field.
    pub fn split(&self) -> (Raster, Raster) {
        let h = self.height();
        let w = self.width();
        let mut prob = Vec::with_capacity(h * w);
        let mut flow = Vec::with_capacity(h * w * 2);
        for px in self.raster.data().chunks_exact(3) {
            prob.push(px[CH_PROB]);
            flow.push(px[CH_DY]);
            flow.push(px[CH_DX]);
        }
        (
            Raster::new(h, w, 1, prob).expect("same grid"),
            Raster::new(h, w, 2, flow).expect("same grid"),
        )
    }
}
