//! Instance recovery from a predicted flow field.
//!
//! Four steps, composed by [`track`]: every foreground pixel follows the flow
//! for a fixed number of Euler steps ([`follow_flows`]); the endpoint
//! histogram's local peaks become seeds ([`seed_peaks`]); pixels cluster onto
//! seeds by endpoint proximity, with stragglers attached to the nearest
//! already-assigned endpoint until convergence ([`expand_masks`]); finally
//! candidates whose flow disagrees with the flow regenerated from their own
//! shape are discarded ([`filter_instances`]). Large frames are processed in
//! non-overlapping tiles with instances merged across seams.
//!
//! Everything here is bit-deterministic for fixed inputs and configuration:
//! all tie-breaks are explicit and parallel reductions happen in fixed order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flowgen;
use crate::raster::{LabelMask, Prediction, Raster};

#[derive(Debug, Error, PartialEq)]
pub enum TrackError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("prediction must be activated before tracking")]
    NotActivated,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Tracking parameters. Defaults follow the reference configuration:
/// probability cut 0.5, 200 unit steps, flow-error cutoff 0.4 and
/// 2000-pixel tiles for whole-slide frames.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackConfig {
    pub prob_threshold: f32,
    pub n_iters: usize,
    pub step: f32,
    pub peak_min_count: u32,
    pub merge_radius: f32,
    pub error_threshold: f64,
    pub tile: usize,
    /// Drop candidates smaller than this many pixels before the flow-error
    /// filter. 0 disables the size gate.
    pub min_size: usize,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            prob_threshold: 0.5,
            n_iters: 200,
            step: 1.0,
            peak_min_count: 10,
            merge_radius: 2.0,
            error_threshold: 0.4,
            tile: 2000,
            min_size: 0,
        }
    }
}

impl TrackConfig {
    pub fn validate(&self) -> Result<(), TrackError> {
        if self.prob_threshold.is_nan() || self.prob_threshold <= 0.0 || self.prob_threshold >= 1.0 {
            return Err(TrackError::InvalidConfig(format!(
                "prob_threshold must be in (0,1), got {}",
                self.prob_threshold
            )));
        }
        if self.error_threshold.is_nan() || self.error_threshold <= 0.0 {
            return Err(TrackError::InvalidConfig(format!(
                "error_threshold must be positive, got {}",
                self.error_threshold
            )));
        }
        if self.tile < 256 {
            return Err(TrackError::InvalidConfig(format!(
                "tile must be at least 256, got {}",
                self.tile
            )));
        }
        if self.n_iters == 0 || self.step <= 0.0 {
            return Err(TrackError::InvalidConfig(
                "n_iters and step must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Endpoints of the flow integration: final (y, x) per pixel, plus the
/// foreground indicator (background pixels map to themselves).
#[derive(Debug, Clone)]
pub struct FlowEndpoints {
    positions: Raster,
    foreground: Vec<bool>,
}

impl FlowEndpoints {
    pub fn positions(&self) -> &Raster {
        &self.positions
    }

    pub fn is_foreground(&self, r: usize, c: usize) -> bool {
        self.foreground[r * self.positions.width() + c]
    }

    #[inline]
    fn endpoint(&self, i: usize) -> (f32, f32) {
        (self.positions.data()[2 * i], self.positions.data()[2 * i + 1])
    }
}

/// Integrate every foreground pixel along the flow field for `n_iters`
/// fixed-size Euler steps with nearest-neighbor flow lookup, clamping
/// positions to the frame.
pub fn follow_flows(pred: &Prediction, cfg: &TrackConfig) -> FlowEndpoints {
    let h = pred.height();
    let w = pred.width();
    let data = pred.raster().data();
    let max_y = (h - 1) as f32;
    let max_x = (w - 1) as f32;

    let mut positions = vec![0.0f32; h * w * 2];
    let mut foreground = vec![false; h * w];

    positions
        .par_chunks_mut(w * 2)
        .zip(foreground.par_chunks_mut(w))
        .enumerate()
        .for_each(|(r, (pos_row, fg_row))| {
            for c in 0..w {
                let base = (r * w + c) * 3;
                let mut y = r as f32;
                let mut x = c as f32;
                if data[base] >= cfg.prob_threshold {
                    fg_row[c] = true;
                    for _ in 0..cfg.n_iters {
                        // nearest-neighbor lookup; positions stay clamped so
                        // the +0.5 truncation is exact round-half-up
                        let ri = (y + 0.5) as usize;
                        let ci = (x + 0.5) as usize;
                        let fbase = (ri * w + ci) * 3;
                        let dy = data[fbase + 1];
                        let dx = data[fbase + 2];
                        if dy == 0.0 && dx == 0.0 {
                            break;
                        }
                        y = (y + cfg.step * dy).clamp(0.0, max_y);
                        x = (x + cfg.step * dx).clamp(0.0, max_x);
                    }
                }
                pos_row[2 * c] = y;
                pos_row[2 * c + 1] = x;
            }
        });

    FlowEndpoints {
        positions: Raster::new(h, w, 2, positions).expect("prediction grid"),
        foreground,
    }
}

/// A histogram peak used to initialize one mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seed {
    pub row: usize,
    pub col: usize,
    pub count: u32,
}

/// Peaks of the 2-D endpoint histogram: bins that dominate their 3x3
/// neighborhood and collect at least `peak_min_count` endpoints. Peaks closer
/// than `merge_radius` (Chebyshev) collapse onto the stronger one; ties keep
/// the lexicographically smaller (row, col).
pub fn seed_peaks(endpoints: &FlowEndpoints, cfg: &TrackConfig) -> Vec<Seed> {
    let h = endpoints.positions.height();
    let w = endpoints.positions.width();
    let mut hist = vec![0u32; h * w];
    for i in 0..h * w {
        if !endpoints.foreground[i] {
            continue;
        }
        let (y, x) = endpoints.endpoint(i);
        let r = (y + 0.5) as usize;
        let c = (x + 0.5) as usize;
        hist[r.min(h - 1) * w + c.min(w - 1)] += 1;
    }

    let mut candidates: Vec<Seed> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let count = hist[r * w + c];
            if count < cfg.peak_min_count {
                continue;
            }
            let mut is_peak = true;
            'scan: for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let nr = r as i64 + dr;
                    let nc = c as i64 + dc;
                    if nr < 0 || nr >= h as i64 || nc < 0 || nc >= w as i64 {
                        continue;
                    }
                    if hist[nr as usize * w + nc as usize] > count {
                        is_peak = false;
                        break 'scan;
                    }
                }
            }
            if is_peak {
                candidates.push(Seed { row: r, col: c, count });
            }
        }
    }

    candidates.sort_by(|a, b| {
        b.count
            .cmp(&a.count)
            .then(a.row.cmp(&b.row))
            .then(a.col.cmp(&b.col))
    });

    let mut seeds: Vec<Seed> = Vec::new();
    for cand in candidates {
        let absorbed = seeds.iter().any(|s| {
            let dr = (s.row as i64 - cand.row as i64).unsigned_abs();
            let dc = (s.col as i64 - cand.col as i64).unsigned_abs();
            (dr.max(dc) as f32) < cfg.merge_radius
        });
        if !absorbed {
            seeds.push(cand);
        }
    }
    seeds
}

/// Grid index over assigned endpoints for nearest-neighbor queries.
struct EndpointGrid {
    w: usize,
    h: usize,
    cells: Vec<Vec<u32>>,
}

impl EndpointGrid {
    fn new(h: usize, w: usize) -> Self {
        Self {
            w,
            h,
            cells: vec![Vec::new(); h * w],
        }
    }

    fn insert(&mut self, y: f32, x: f32, pixel: u32) {
        let r = ((y + 0.5) as usize).min(self.h - 1);
        let c = ((x + 0.5) as usize).min(self.w - 1);
        self.cells[r * self.w + c].push(pixel);
    }

    /// Visit candidate pixels whose endpoint bin lies within `radius` cells.
    fn near(&self, y: f32, x: f32, radius: f32, mut visit: impl FnMut(u32)) {
        let r = ((y + 0.5) as usize).min(self.h - 1) as i64;
        let c = ((x + 0.5) as usize).min(self.w - 1) as i64;
        let reach = radius.ceil() as i64 + 1;
        for nr in (r - reach).max(0)..=(r + reach).min(self.h as i64 - 1) {
            for nc in (c - reach).max(0)..=(c + reach).min(self.w as i64 - 1) {
                for &p in &self.cells[nr as usize * self.w + nc as usize] {
                    visit(p);
                }
            }
        }
    }
}

/// Remove candidate instances whose measured flow error exceeds
/// `error_threshold` (and, when `min_size > 0`, candidates smaller than
/// `min_size` pixels); survivors are relabeled sequentially.
pub fn filter_instances(
    mask: &LabelMask,
    pred: &Prediction,
    cfg: &TrackConfig,
) -> Result<LabelMask, TrackError> {
    if mask.height() != pred.height() || mask.width() != pred.width() {
        return Err(TrackError::DimensionMismatch(format!(
            "mask {}x{} vs prediction {}x{}",
            mask.height(),
            mask.width(),
            pred.height(),
            pred.width()
        )));
    }

    let mut work = mask.clone();
    if cfg.min_size > 0 {
        let records = work.extract_instances();
        let drop: Vec<u32> = records
            .iter()
            .filter(|rec| rec.pixel_count < cfg.min_size)
            .map(|rec| rec.id)
            .collect();
        if !drop.is_empty() {
            let dropset: std::collections::HashSet<u32> = drop.into_iter().collect();
            for v in work.data_mut() {
                if dropset.contains(v) {
                    *v = 0;
                }
            }
        }
    }

    let (_, flow) = pred.split();
    let errors = flowgen::flow_error(&work, &flow).expect("dims checked above");
    let keep: std::collections::HashSet<u32> = errors
        .iter()
        .filter(|&(_, &err)| err <= cfg.error_threshold)
        .map(|(&id, _)| id)
        .collect();
    for v in work.data_mut() {
        if *v != 0 && !keep.contains(v) {
            *v = 0;
        }
    }
    Ok(work.relabel_sequential())
}

fn track_single_tile(pred: &Prediction, cfg: &TrackConfig) -> Result<LabelMask, TrackError> {
    let endpoints = follow_flows(pred, cfg);
    let seeds = seed_peaks(&endpoints, cfg);
    let mask = expand_masks(&endpoints, &seeds, cfg);
    filter_instances(&mask, pred, cfg)
}

/// Grow masks from seeds: a foreground pixel takes the id of the nearest seed
/// within `merge_radius` (Chebyshev) of its endpoint; remaining foreground
/// pixels repeatedly join the cluster of the nearest assigned endpoint within
/// `3 * merge_radius` (Euclidean) until nothing changes, evaluated in
/// synchronous rounds. Foreground that never attaches stays background.
pub fn expand_masks(
    endpoints: &FlowEndpoints,
    seeds: &[Seed],
    cfg: &TrackConfig,
) -> LabelMask {
    let h = endpoints.positions.height();
    let w = endpoints.positions.width();
    let mut mask = LabelMask::zeros(h, w);
    if seeds.is_empty() {
        return mask;
    }

    let mut seed_grid: std::collections::HashMap<(usize, usize), Vec<usize>> =
        std::collections::HashMap::new();
    for (s_idx, s) in seeds.iter().enumerate() {
        seed_grid.entry((s.row, s.col)).or_default().push(s_idx);
    }

    let mut unassigned: Vec<u32> = Vec::new();
    let labels = mask.data_mut();
    let mut grid = EndpointGrid::new(h, w);
    let reach = cfg.merge_radius.ceil() as i64 + 1;

    #[allow(clippy::needless_range_loop)]
    for i in 0..h * w {
        if !endpoints.foreground[i] {
            continue;
        }
        let (y, x) = endpoints.endpoint(i);
        let r = ((y + 0.5) as usize).min(h - 1) as i64;
        let c = ((x + 0.5) as usize).min(w - 1) as i64;
        let mut best: Option<(f32, usize)> = None;
        for nr in (r - reach).max(0)..=(r + reach).min(h as i64 - 1) {
            for nc in (c - reach).max(0)..=(c + reach).min(w as i64 - 1) {
                if let Some(idxs) = seed_grid.get(&(nr as usize, nc as usize)) {
                    for &s_idx in idxs {
                        let s = &seeds[s_idx];
                        let dy = y - s.row as f32;
                        let dx = x - s.col as f32;
                        if dy.abs().max(dx.abs()) <= cfg.merge_radius {
                            let d2 = dy * dy + dx * dx;
                            if best.is_none_or(|(bd, bi)| d2 < bd || (d2 == bd && s_idx < bi)) {
                                best = Some((d2, s_idx));
                            }
                        }
                    }
                }
            }
        }
        match best {
            Some((_, s_idx)) => {
                labels[i] = s_idx as u32 + 1;
                grid.insert(y, x, i as u32);
            }
            None => unassigned.push(i as u32),
        }
    }

    let reach = 3.0 * cfg.merge_radius;
    let reach2 = reach * reach;
    while !unassigned.is_empty() {
        let mut newly: Vec<(u32, u32)> = Vec::new();
        let mut still: Vec<u32> = Vec::new();
        for &p in &unassigned {
            let (y, x) = endpoints.endpoint(p as usize);
            let mut best: Option<(f32, u32, u32)> = None;
            grid.near(y, x, reach, |q| {
                let (qy, qx) = endpoints.endpoint(q as usize);
                let dy = y - qy;
                let dx = x - qx;
                let d2 = dy * dy + dx * dx;
                let better = d2 <= reach2
                    && best.is_none_or(|(bd, bq, _)| d2 < bd || (d2 == bd && q < bq));
                if better {
                    best = Some((d2, q, labels[q as usize]));
                }
            });
            match best {
                Some((_, _, label)) => newly.push((p, label)),
                None => still.push(p),
            }
        }
        if newly.is_empty() {
            break;
        }
        for &(p, label) in &newly {
            labels[p as usize] = label;
            let (y, x) = endpoints.endpoint(p as usize);
            grid.insert(y, x, p);
        }
        unassigned = still;
    }

    mask
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n as u32).collect(),
        }
    }

    fn find(&mut self, v: u32) -> u32 {
        let mut root = v;
        while self.parent[root as usize] != root {
            root = self.parent[root as usize];
        }
        let mut cur = v;
        while self.parent[cur as usize] != root {
            let next = self.parent[cur as usize];
            self.parent[cur as usize] = root;
            cur = next;
        }
        root
    }

    /// Union keeping the smaller id as root, so relabeling is deterministic.
    fn union(&mut self, a: u32, b: u32) {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra == rb {
            return;
        }
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi as usize] = lo;
    }
}

/// Full tracking pipeline. Frames larger than `cfg.tile` along either axis
/// are processed per non-overlapping tile (ids offset to stay unique), then
/// instances whose dilation-by-1 overlaps a counterpart across a tile seam
/// are merged. The prediction must be activated; flows are normalized here
/// if the caller has not done so.
pub fn track(pred: &Prediction, cfg: &TrackConfig) -> Result<LabelMask, TrackError> {
    cfg.validate()?;
    if !pred.is_activated() {
        return Err(TrackError::NotActivated);
    }
    let normalized_holder;
    let pred = if pred.is_normalized() {
        pred
    } else {
        normalized_holder = pred.clone().normalize_flows();
        &normalized_holder
    };

    let h = pred.height();
    let w = pred.width();
    if h.max(w) <= cfg.tile {
        return track_single_tile(pred, cfg);
    }

    let tiles_r = h.div_ceil(cfg.tile);
    let tiles_c = w.div_ceil(cfg.tile);
    let mut tile_rects = Vec::new();
    for tr in 0..tiles_r {
        for tc in 0..tiles_c {
            let r0 = tr * cfg.tile;
            let c0 = tc * cfg.tile;
            let th = (h - r0).min(cfg.tile);
            let tw = (w - c0).min(cfg.tile);
            tile_rects.push((r0, c0, th, tw));
        }
    }

    let locals: Vec<Result<LabelMask, TrackError>> = tile_rects
        .par_iter()
        .map(|&(r0, c0, th, tw)| {
            let crop = pred.raster().crop(r0, c0, th, tw);
            let tile_pred = Prediction::from_raster_with_flags(
                crop,
                pred.is_activated(),
                pred.is_normalized(),
            )
            .expect("crop keeps channels");
            track_single_tile(&tile_pred, cfg)
        })
        .collect();

    let mut global = LabelMask::zeros(h, w);
    let mut offset = 0u32;
    for (rect, local) in tile_rects.iter().zip(locals) {
        let local = local?;
        let &(r0, c0, th, tw) = rect;
        let mut tile_max = 0u32;
        for lr in 0..th {
            for lc in 0..tw {
                let id = local.get(lr, lc);
                if id != 0 {
                    global.set(r0 + lr, c0 + lc, id + offset);
                    tile_max = tile_max.max(id);
                }
            }
        }
        offset += tile_max;
    }

    // merge instances whose 1-px dilation crosses a seam into a counterpart
    let mut uf = UnionFind::new(offset as usize + 1);
    for tc in 1..tiles_c {
        let c = tc * cfg.tile;
        for r in 0..h {
            let a = global.get(r, c - 1);
            if a == 0 {
                continue;
            }
            for dr in -1i64..=1 {
                let nr = r as i64 + dr;
                if nr < 0 || nr >= h as i64 {
                    continue;
                }
                let b = global.get(nr as usize, c);
                if b != 0 {
                    uf.union(a, b);
                }
            }
        }
    }
    for tr in 1..tiles_r {
        let r = tr * cfg.tile;
        for c in 0..w {
            let a = global.get(r - 1, c);
            if a == 0 {
                continue;
            }
            for dc in -1i64..=1 {
                let nc = c as i64 + dc;
                if nc < 0 || nc >= w as i64 {
                    continue;
                }
                let b = global.get(r, nc as usize);
                if b != 0 {
                    uf.union(a, b);
                }
            }
        }
    }

    for v in global.data_mut() {
        if *v != 0 {
            *v = uf.find(*v);
        }
    }
    Ok(global.relabel_sequential())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowgen::label_to_flow;

    fn disc_mask(h: usize, w: usize, cy: f64, cx: f64, radius: f64, id: u32) -> LabelMask {
        let mut m = LabelMask::zeros(h, w);
        for r in 0..h {
            for c in 0..w {
                if (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2) <= radius * radius {
                    m.set(r, c, id);
                }
            }
        }
        m
    }

    fn iou(a: &LabelMask, a_id: u32, b: &LabelMask, b_id: u32) -> f64 {
        let mut inter = 0usize;
        let mut a_n = 0usize;
        let mut b_n = 0usize;
        for i in 0..a.data().len() {
            let in_a = a.data()[i] == a_id;
            let in_b = b.data()[i] == b_id;
            if in_a {
                a_n += 1;
            }
            if in_b {
                b_n += 1;
            }
            if in_a && in_b {
                inter += 1;
            }
        }
        inter as f64 / (a_n + b_n - inter) as f64
    }

    #[test]
    fn zero_flow_keeps_pixels_in_place() {
        let mut raster = Raster::zeros(6, 6, 3);
        for r in 0..6 {
            for c in 0..6 {
                raster.set(r, c, 0, 1.0);
            }
        }
        let pred = Prediction::from_raster_with_flags(raster, true, true).unwrap();
        let endpoints = follow_flows(&pred, &TrackConfig::default());
        for r in 0..6 {
            for c in 0..6 {
                let i = r * 6 + c;
                assert_eq!(endpoints.endpoint(i), (r as f32, c as f32));
            }
        }
    }

    #[test]
    fn disc_endpoints_converge_to_center() {
        let mask = disc_mask(24, 24, 11.0, 11.0, 8.0, 1);
        let pred = label_to_flow(&mask).to_prediction();
        let cfg = TrackConfig::default();
        let endpoints = follow_flows(&pred, &cfg);
        for r in 0..24 {
            for c in 0..24 {
                if mask.get(r, c) == 0 {
                    continue;
                }
                let (y, x) = endpoints.endpoint(r * 24 + c);
                let dy = (y - 11.0).abs();
                let dx = (x - 11.0).abs();
                assert!(
                    dy.max(dx) <= cfg.merge_radius,
                    "pixel ({r},{c}) ended at ({y},{x})"
                );
            }
        }
    }

    #[test]
    fn no_foreground_means_no_seeds() {
        let pred =
            Prediction::from_raster_with_flags(Raster::zeros(8, 8, 3), true, true).unwrap();
        let cfg = TrackConfig::default();
        let endpoints = follow_flows(&pred, &cfg);
        assert!(seed_peaks(&endpoints, &cfg).is_empty());
    }

    #[test]
    fn disc_produces_one_seed_near_center() {
        let mask = disc_mask(24, 24, 11.0, 11.0, 8.0, 1);
        let pred = label_to_flow(&mask).to_prediction();
        let cfg = TrackConfig::default();
        let endpoints = follow_flows(&pred, &cfg);
        let seeds = seed_peaks(&endpoints, &cfg);
        assert_eq!(seeds.len(), 1);
        let s = seeds[0];
        assert!(
            (s.row as f32 - 11.0).abs().max((s.col as f32 - 11.0).abs()) <= cfg.merge_radius
        );
    }

    #[test]
    fn two_discs_produce_two_seeds_and_two_clusters() {
        let mut mask = disc_mask(32, 48, 15.0, 12.0, 7.0, 1);
        let other = disc_mask(32, 48, 15.0, 34.0, 7.0, 2);
        for (i, &v) in other.data().iter().enumerate() {
            if v != 0 {
                mask.data_mut()[i] = v;
            }
        }
        let pred = label_to_flow(&mask).to_prediction();
        let cfg = TrackConfig::default();
        let endpoints = follow_flows(&pred, &cfg);
        let seeds = seed_peaks(&endpoints, &cfg);
        assert_eq!(seeds.len(), 2);
        let recovered = expand_masks(&endpoints, &seeds, &cfg);
        assert_eq!(recovered.distinct_ids().len(), 2);
    }

    #[test]
    fn disc_round_trip_iou() {
        let mask = disc_mask(24, 24, 11.0, 11.0, 8.0, 1);
        let pred = label_to_flow(&mask).to_prediction();
        let cfg = TrackConfig::default();
        let endpoints = follow_flows(&pred, &cfg);
        let seeds = seed_peaks(&endpoints, &cfg);
        let recovered = expand_masks(&endpoints, &seeds, &cfg);
        assert_eq!(recovered.distinct_ids(), vec![1]);
        assert!(iou(&mask, 1, &recovered, 1) >= 0.95);
    }

    #[test]
    fn empty_seed_list_yields_background() {
        let mask = disc_mask(16, 16, 8.0, 8.0, 5.0, 1);
        let pred = label_to_flow(&mask).to_prediction();
        let cfg = TrackConfig::default();
        let endpoints = follow_flows(&pred, &cfg);
        let recovered = expand_masks(&endpoints, &[], &cfg);
        assert_eq!(recovered.max_id(), 0);
    }

    #[test]
    fn touching_squares_recover_two_instances() {
        // two 16x16 squares sharing a vertical boundary in a 16x32 frame
        let mut mask = LabelMask::zeros(16, 32);
        for r in 0..16 {
            for c in 0..16 {
                mask.set(r, c, 1);
            }
            for c in 16..32 {
                mask.set(r, c, 2);
            }
        }
        let pred = label_to_flow(&mask).to_prediction();
        let cfg = TrackConfig::default();
        let recovered = track(&pred, &cfg).unwrap();
        let ids = recovered.distinct_ids();
        assert_eq!(ids.len(), 2, "expected two instances, got {ids:?}");

        let fg_total = mask.data().iter().filter(|&&v| v != 0).count();
        let covered = recovered.data().iter().filter(|&&v| v != 0).count();
        assert!(covered as f64 >= 0.9 * fg_total as f64);

        // recovered boundary stays within 1 px of the true split at c=16
        for i in 0..recovered.data().len() {
            let c = i % 32;
            let id = recovered.data()[i];
            if id == 0 {
                continue;
            }
            let true_side = if c < 16 { 1 } else { 2 };
            let rec_side = if id == recovered.get(0, 0) { 1 } else { 2 };
            if (c as i64 - 16).abs() > 1 {
                assert_eq!(
                    rec_side, true_side,
                    "pixel at col {c} crossed more than 1 px over the boundary"
                );
            }
        }
    }

    #[test]
    fn oracle_instances_survive_filter() {
        let mask = disc_mask(24, 24, 11.0, 11.0, 8.0, 1);
        let pred = label_to_flow(&mask).to_prediction();
        let cfg = TrackConfig::default();
        let filtered = filter_instances(&mask, &pred, &cfg).unwrap();
        assert_eq!(filtered.distinct_ids().len(), 1);
    }

    #[test]
    fn zero_flow_instances_are_filtered() {
        let mask = disc_mask(24, 24, 11.0, 11.0, 8.0, 1);
        let target = label_to_flow(&mask);
        // zero-flow prediction: probability from the mask, flow all zero
        let mut raster = Raster::zeros(24, 24, 3);
        for i in 0..24 * 24 {
            raster.data_mut()[3 * i] = target.cell_prob.data()[i];
        }
        let pred = Prediction::from_raster_with_flags(raster, true, true).unwrap();
        let zero_err = flowgen::flow_error(&mask, &Raster::zeros(24, 24, 2)).unwrap()[&1];
        assert!(zero_err > 0.4, "adversarial error must exceed threshold");
        let cfg = TrackConfig::default();
        let filtered = filter_instances(&mask, &pred, &cfg).unwrap();
        assert_eq!(filtered.max_id(), 0);

        // an infinite threshold keeps the mask (up to relabeling)
        let lax = TrackConfig {
            error_threshold: f64::INFINITY,
            ..TrackConfig::default()
        };
        let kept = filter_instances(&mask, &pred, &lax).unwrap();
        assert_eq!(kept, mask.relabel_sequential());
    }

    #[test]
    fn all_background_tracks_to_empty_mask() {
        let pred =
            Prediction::from_raster_with_flags(Raster::zeros(32, 32, 3), true, true).unwrap();
        let mask = track(&pred, &TrackConfig::default()).unwrap();
        assert_eq!(mask.max_id(), 0);
    }

    #[test]
    fn track_requires_activation() {
        let pred = Prediction::from_raster(Raster::zeros(8, 8, 3)).unwrap();
        assert_eq!(
            track(&pred, &TrackConfig::default()),
            Err(TrackError::NotActivated)
        );
    }

    #[test]
    fn track_is_deterministic() {
        let mut mask = disc_mask(48, 48, 14.0, 14.0, 9.0, 1);
        let other = disc_mask(48, 48, 33.0, 31.0, 11.0, 2);
        for (i, &v) in other.data().iter().enumerate() {
            if v != 0 && mask.data()[i] == 0 {
                mask.data_mut()[i] = v;
            }
        }
        let pred = label_to_flow(&mask).to_prediction();
        let cfg = TrackConfig::default();
        let a = track(&pred, &cfg).unwrap();
        let b = track(&pred, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn no_instance_spans_subthreshold_pixels() {
        let mask = disc_mask(32, 32, 15.0, 15.0, 10.0, 1);
        let pred = label_to_flow(&mask).to_prediction();
        let cfg = TrackConfig::default();
        let recovered = track(&pred, &cfg).unwrap();
        for i in 0..recovered.data().len() {
            if recovered.data()[i] != 0 {
                assert!(pred.raster().data()[3 * i] >= cfg.prob_threshold);
            }
        }
    }

    #[test]
    fn config_validation() {
        let bad_prob = TrackConfig {
            prob_threshold: 1.5,
            ..TrackConfig::default()
        };
        assert!(bad_prob.validate().is_err());
        let bad_tile = TrackConfig {
            tile: 100,
            ..TrackConfig::default()
        };
        assert!(bad_tile.validate().is_err());
        let bad_err = TrackConfig {
            error_threshold: 0.0,
            ..TrackConfig::default()
        };
        assert!(bad_err.validate().is_err());
        assert!(TrackConfig::default().validate().is_ok());
    }
}
