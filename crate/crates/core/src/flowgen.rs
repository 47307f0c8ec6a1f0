//! Ground-truth flow generation: per-cell pseudo-diffusion heat maps and the
//! normalized gradient fields derived from them, plus the flow-error measure
//! used to accept or reject candidate cells.
//!
//! Heat is injected at a stable interior point of each instance (the member
//! pixel nearest the coordinate-wise median) and repeatedly averaged over the
//! 5-point stencil restricted to the instance, so the resulting scalar field
//! peaks at the source and decays toward the boundary. Its normalized spatial
//! gradient points at the source from every member pixel, which is exactly
//! the property the tracker inverts.

use std::collections::BTreeMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::raster::{LabelMask, Prediction, Raster};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FlowError {
    #[error("instance id {0} not present in mask")]
    MissingInstance(u32),
    #[error("dimension mismatch: mask is {mask_h}x{mask_w}, field is {field_h}x{field_w}x{field_c}")]
    DimensionMismatch {
        mask_h: usize,
        mask_w: usize,
        field_h: usize,
        field_w: usize,
        field_c: usize,
    },
}

/// Training/oracle target generated from an instance mask.
///
/// `cell_prob` is 1 exactly on nonzero mask pixels; `flow` holds `(dy, dx)`
/// unit vectors (zero on background and at stationary points); `heat` keeps
/// the log-conditioned diffusion scalar for inspection.
#[derive(Debug, Clone)]
pub struct FlowTarget {
    pub cell_prob: Raster,
    pub flow: Raster,
    pub heat: Raster,
}

impl FlowTarget {
    /// Pack into the 3-channel prediction layout. Oracle targets are both
    /// activated (probabilities are 0/1) and normalized (unit flows).
    pub fn to_prediction(&self) -> Prediction {
        let h = self.cell_prob.height();
        let w = self.cell_prob.width();
        let mut data = Vec::with_capacity(h * w * 3);
        for i in 0..h * w {
            data.push(self.cell_prob.data()[i]);
            data.push(self.flow.data()[2 * i]);
            data.push(self.flow.data()[2 * i + 1]);
        }
        let raster = Raster::new(h, w, 3, data).expect("same grid");
        Prediction::from_raster_with_flags(raster, true, true).expect("three channels")
    }
}

/// Diffusion heat over one instance's padded bounding box.
#[derive(Debug, Clone)]
pub struct HeatPatch {
    /// Image row of the patch's top-left corner (bbox origin minus padding,
    /// clamped in local coordinates: the patch always has a 1-px border).
    pub r0: isize,
    /// Image column of the patch's top-left corner.
    pub c0: isize,
    pub heat: Raster,
}

struct Instance {
    id: u32,
    bbox: (usize, usize, usize, usize),
    pixels: Vec<(usize, usize)>,
}

fn collect_instances(mask: &LabelMask) -> Vec<Instance> {
    let mut by_id: BTreeMap<u32, Instance> = BTreeMap::new();
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            let id = mask.get(r, c);
            if id == 0 {
                continue;
            }
            let inst = by_id.entry(id).or_insert_with(|| Instance {
                id,
                bbox: (r, c, r, c),
                pixels: Vec::new(),
            });
            inst.bbox.0 = inst.bbox.0.min(r);
            inst.bbox.1 = inst.bbox.1.min(c);
            inst.bbox.2 = inst.bbox.2.max(r);
            inst.bbox.3 = inst.bbox.3.max(c);
            inst.pixels.push((r, c));
        }
    }
    by_id.into_values().collect()
}

fn median_of(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn center_of(pixels: &[(usize, usize)]) -> (usize, usize) {
    let med_r = median_of(pixels.iter().map(|&(r, _)| r as f64).collect());
    let med_c = median_of(pixels.iter().map(|&(_, c)| c as f64).collect());
    let mut best = pixels[0];
    let mut best_d = f64::INFINITY;
    for &(r, c) in pixels {
        let d = (r as f64 - med_r).powi(2) + (c as f64 - med_c).powi(2);
        // ties resolve to the lexicographically smallest member pixel
        if d < best_d || (d == best_d && (r, c) < best) {
            best = (r, c);
            best_d = d;
        }
    }
    best
}

/// Diffusion source point: the member pixel of `id` closest (Euclidean) to the
/// coordinate-wise median of the instance's pixels. Lies inside the instance
/// even for concave shapes.
pub fn cell_center(mask: &LabelMask, id: u32) -> Result<(usize, usize), FlowError> {
    let pixels: Vec<(usize, usize)> = (0..mask.height())
        .flat_map(|r| (0..mask.width()).map(move |c| (r, c)))
        .filter(|&(r, c)| mask.get(r, c) == id && id != 0)
        .collect();
    if pixels.is_empty() {
        return Err(FlowError::MissingInstance(id));
    }
    Ok(center_of(&pixels))
}

struct PatchLayout {
    r0: isize,
    c0: isize,
    h: usize,
    w: usize,
}

impl PatchLayout {
    fn for_bbox(bbox: (usize, usize, usize, usize)) -> Self {
        let (r0, c0, r1, c1) = bbox;
        Self {
            r0: r0 as isize - 1,
            c0: c0 as isize - 1,
            h: r1 - r0 + 3,
            w: c1 - c0 + 3,
        }
    }

    #[inline]
    fn local(&self, r: usize, c: usize) -> usize {
        let lr = (r as isize - self.r0) as usize;
        let lc = (c as isize - self.c0) as usize;
        lr * self.w + lc
    }
}

fn diffusion_iters(bbox: (usize, usize, usize, usize)) -> usize {
    let bh = (bbox.2 - bbox.0 + 1) as f64;
    let bw = (bbox.3 - bbox.1 + 1) as f64;
    let diag = (bh * bh + bw * bw).sqrt();
    ((2.0 * diag).ceil() as usize).max(20)
}

/// Raw diffusion in f64 over the instance's padded bbox. The returned heat is
/// pre-log; `member` marks patch cells that belong to the instance.
fn diffuse(inst: &Instance) -> (PatchLayout, Vec<f64>, Vec<bool>) {
    let layout = PatchLayout::for_bbox(inst.bbox);
    let n = layout.h * layout.w;
    let mut member = vec![false; n];
    for &(r, c) in &inst.pixels {
        member[layout.local(r, c)] = true;
    }
    let (cr, cc) = center_of(&inst.pixels);
    let center = layout.local(cr, cc);
    let iters = diffusion_iters(inst.bbox);

    let w = layout.w;
    let mut heat = vec![0.0f64; n];
    let mut next = vec![0.0f64; n];
    for _ in 0..iters {
        heat[center] += 1.0;
        for i in 0..n {
            if member[i] {
                // 5-point stencil; out-of-instance cells hold 0 so the fixed
                // 1/5 divisor bleeds heat out at the boundary
                let sum = heat[i] + heat[i - 1] + heat[i + 1] + heat[i - w] + heat[i + w];
                next[i] = sum / 5.0;
            } else {
                next[i] = 0.0;
            }
        }
        std::mem::swap(&mut heat, &mut next);
    }
    (layout, heat, member)
}

/// Pseudo-diffusion heat for one instance over its padded bbox, returned as
/// `log(1 + heat)` for numeric conditioning.
pub fn pseudo_diffusion(mask: &LabelMask, id: u32) -> Result<HeatPatch, FlowError> {
    if id == 0 {
        return Err(FlowError::MissingInstance(0));
    }
    let inst = collect_instances(mask)
        .into_iter()
        .find(|i| i.id == id)
        .ok_or(FlowError::MissingInstance(id))?;
    let (layout, heat, _) = diffuse(&inst);
    let data: Vec<f32> = heat.iter().map(|&h| (1.0 + h).ln() as f32).collect();
    Ok(HeatPatch {
        r0: layout.r0,
        c0: layout.c0,
        heat: Raster::new(layout.h, layout.w, 1, data).expect("padded bbox is non-empty"),
    })
}

struct InstanceField {
    pixels: Vec<(usize, usize, f32, f32, f32)>, // (r, c, dy, dx, log-heat)
}

fn instance_flow(inst: &Instance) -> InstanceField {
    let (layout, heat, member) = diffuse(inst);
    let w = layout.w;
    let log_heat: Vec<f64> = heat.iter().map(|&h| (1.0 + h).ln()).collect();
    let mut pixels = Vec::with_capacity(inst.pixels.len());
    for &(r, c) in &inst.pixels {
        let i = layout.local(r, c);
        let grad = |lo: usize, hi: usize| -> f64 {
            match (member[lo], member[hi]) {
                (true, true) => (log_heat[hi] - log_heat[lo]) / 2.0,
                // one-sided difference when the opposite neighbor is outside
                (false, true) => log_heat[hi] - log_heat[i],
                (true, false) => log_heat[i] - log_heat[lo],
                (false, false) => 0.0,
            }
        };
        let dy = grad(i - w, i + w);
        let dx = grad(i - 1, i + 1);
        let mag = (dy * dy + dx * dx).sqrt();
        let (udy, udx) = if mag > 1e-12 {
            ((dy / mag) as f32, (dx / mag) as f32)
        } else {
            (0.0, 0.0)
        };
        pixels.push((r, c, udy, udx, log_heat[i] as f32));
    }
    InstanceField { pixels }
}

/// Convert an instance mask into its flow target: indicator probabilities,
/// per-instance unit gradient flows, and the diffusion heat. Instances are
/// processed independently (parallel, disjoint writes), so the result is
/// invariant under id permutation and unaffected by other instances.
pub fn label_to_flow(mask: &LabelMask) -> FlowTarget {
    let h = mask.height();
    let w = mask.width();
    let mut cell_prob = vec![0.0f32; h * w];
    for (i, &id) in mask.data().iter().enumerate() {
        if id != 0 {
            cell_prob[i] = 1.0;
        }
    }

    let instances = collect_instances(mask);
    let fields: Vec<InstanceField> = instances.par_iter().map(instance_flow).collect();

    let mut flow = vec![0.0f32; h * w * 2];
    let mut heat = vec![0.0f32; h * w];
    for field in &fields {
        for &(r, c, dy, dx, lh) in &field.pixels {
            let i = r * w + c;
            flow[2 * i] = dy;
            flow[2 * i + 1] = dx;
            heat[i] = lh;
        }
    }

    FlowTarget {
        cell_prob: Raster::new(h, w, 1, cell_prob).expect("mask grid"),
        flow: Raster::new(h, w, 2, flow).expect("mask grid"),
        heat: Raster::new(h, w, 1, heat).expect("mask grid"),
    }
}

/// Mean squared difference between a predicted flow field and the ideal flow
/// regenerated from each instance in isolation, keyed by instance id. Both
/// channels are summed per pixel before averaging over member pixels.
pub fn flow_error(
    mask: &LabelMask,
    flow_pred: &Raster,
) -> Result<BTreeMap<u32, f64>, FlowError> {
    if flow_pred.channels() != 2
        || flow_pred.height() != mask.height()
        || flow_pred.width() != mask.width()
    {
        return Err(FlowError::DimensionMismatch {
            mask_h: mask.height(),
            mask_w: mask.width(),
            field_h: flow_pred.height(),
            field_w: flow_pred.width(),
            field_c: flow_pred.channels(),
        });
    }
    let instances = collect_instances(mask);
    let errors: Vec<(u32, f64)> = instances
        .par_iter()
        .map(|inst| {
            let field = instance_flow(inst);
            let mut sum = 0.0f64;
            for &(r, c, dy, dx, _) in &field.pixels {
                let pdy = flow_pred.get(r, c, 0) as f64;
                let pdx = flow_pred.get(r, c, 1) as f64;
                sum += (pdy - dy as f64).powi(2) + (pdx - dx as f64).powi(2);
            }
            (inst.id, sum / field.pixels.len() as f64)
        })
        .collect();
    Ok(errors.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(rows: &[&[u32]]) -> LabelMask {
        let h = rows.len();
        let w = rows[0].len();
        let data: Vec<u32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        LabelMask::new(h, w, data).unwrap()
    }

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

    #[test]
    fn center_of_full_square_is_middle() {
        let m = mask_from(&[&[1, 1, 1], &[1, 1, 1], &[1, 1, 1]]);
        assert_eq!(cell_center(&m, 1).unwrap(), (1, 1));
    }

    #[test]
    fn center_of_l_shape_is_median_corner() {
        // pixels {(0,0),(1,0),(2,0),(2,1),(2,2)}: medians (2, 0)
        let m = mask_from(&[&[1, 0, 0], &[1, 0, 0], &[1, 1, 1]]);
        assert_eq!(cell_center(&m, 1).unwrap(), (2, 0));
    }

    #[test]
    fn center_of_single_pixel_is_itself() {
        let mut m = LabelMask::zeros(4, 4);
        m.set(2, 3, 9);
        assert_eq!(cell_center(&m, 9).unwrap(), (2, 3));
    }

    #[test]
    fn center_of_missing_instance_errors() {
        let m = LabelMask::zeros(4, 4);
        assert_eq!(cell_center(&m, 1), Err(FlowError::MissingInstance(1)));
    }

    #[test]
    fn single_pixel_heat_is_positive_only_there() {
        let mut m = LabelMask::zeros(5, 5);
        m.set(2, 2, 1);
        let patch = pseudo_diffusion(&m, 1).unwrap();
        for lr in 0..patch.heat.height() {
            for lc in 0..patch.heat.width() {
                let r = patch.r0 + lr as isize;
                let c = patch.c0 + lc as isize;
                let v = patch.heat.get(lr, lc, 0);
                if (r, c) == (2, 2) {
                    assert!(v > 0.0);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn line_heat_decreases_from_center() {
        let m = mask_from(&[&[1, 1, 1, 1, 1]]);
        let patch = pseudo_diffusion(&m, 1).unwrap();
        // patch has a 1-px pad: line pixels sit at local row 1, cols 1..=5
        let vals: Vec<f32> = (1..=5).map(|lc| patch.heat.get(1, lc, 0)).collect();
        assert!(vals[2] > vals[1] && vals[1] > vals[0]);
        assert!(vals[2] > vals[3] && vals[3] > vals[4]);
        assert_eq!(vals[1], vals[3]);
    }

    #[test]
    fn heat_positive_on_random_connected_blobs() {
        // grow random 4-connected blobs and verify every member heats up
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        for _ in 0..25 {
            let mut m = LabelMask::zeros(15, 15);
            let mut frontier = vec![(7usize, 7usize)];
            m.set(7, 7, 1);
            let target = 10 + (next() % 120) as usize;
            let mut count = 1;
            while count < target && !frontier.is_empty() {
                let pick = (next() % frontier.len() as u64) as usize;
                let (r, c) = frontier[pick];
                let dirs = [(-1i32, 0i32), (1, 0), (0, -1), (0, 1)];
                let (dr, dc) = dirs[(next() % 4) as usize];
                let nr = r as i32 + dr;
                let nc = c as i32 + dc;
                if (0..15).contains(&nr) && (0..15).contains(&nc) {
                    let (nr, nc) = (nr as usize, nc as usize);
                    if m.get(nr, nc) == 0 {
                        m.set(nr, nc, 1);
                        frontier.push((nr, nc));
                        count += 1;
                        continue;
                    }
                }
                frontier.swap_remove(pick);
                frontier.push((r, c));
                if frontier.len() > 4 * count {
                    frontier.truncate(count);
                }
            }
            let patch = pseudo_diffusion(&m, 1).unwrap();
            for r in 0..15 {
                for c in 0..15 {
                    if m.get(r, c) == 1 {
                        let lr = (r as isize - patch.r0) as usize;
                        let lc = (c as isize - patch.c0) as usize;
                        assert!(
                            patch.heat.get(lr, lc, 0) > 0.0,
                            "heat must reach every member pixel"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn empty_mask_gives_zero_target() {
        let target = label_to_flow(&LabelMask::zeros(8, 8));
        assert!(target.cell_prob.data().iter().all(|&v| v == 0.0));
        assert!(target.flow.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn disc_flow_points_toward_center() {
        let m = disc_mask(20, 20, 9.0, 9.0, 8.0, 1);
        let target = label_to_flow(&m);
        let mut checked = 0;
        for r in 0..20usize {
            for c in 0..20usize {
                if m.get(r, c) == 0 {
                    continue;
                }
                let to_center = (9.0 - r as f64, 9.0 - c as f64);
                let dist = (to_center.0.powi(2) + to_center.1.powi(2)).sqrt();
                if dist < 1.5 {
                    continue; // center area has a stationary point
                }
                let dy = target.flow.get(r, c, 0) as f64;
                let dx = target.flow.get(r, c, 1) as f64;
                assert!(
                    dy * to_center.0 + dx * to_center.1 > 0.0,
                    "flow at ({r},{c}) points away from center"
                );
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn flow_magnitudes_are_bounded() {
        let m = disc_mask(16, 16, 7.0, 8.0, 6.0, 3);
        let target = label_to_flow(&m);
        for i in 0..16 * 16 {
            let dy = target.flow.data()[2 * i] as f64;
            let dx = target.flow.data()[2 * i + 1] as f64;
            assert!((dy * dy + dx * dx).sqrt() <= 1.0 + 1e-5);
        }
    }

    #[test]
    fn instance_flows_are_local() {
        let mut both = LabelMask::zeros(24, 24);
        for (r, c) in [(4usize, 4usize), (5, 4), (4, 5), (5, 5)] {
            both.set(r, c, 1);
        }
        for r in 14..20 {
            for c in 14..20 {
                both.set(r, c, 2);
            }
        }
        let full = label_to_flow(&both);
        let mut only_second = both.clone();
        for v in only_second.data_mut() {
            if *v == 1 {
                *v = 0;
            }
        }
        let solo = label_to_flow(&only_second);
        for r in 14..20 {
            for c in 14..20 {
                assert_eq!(full.flow.get(r, c, 0).to_bits(), solo.flow.get(r, c, 0).to_bits());
                assert_eq!(full.flow.get(r, c, 1).to_bits(), solo.flow.get(r, c, 1).to_bits());
            }
        }
    }

    #[test]
    fn flow_error_of_oracle_is_zero() {
        let m = disc_mask(20, 20, 9.0, 9.0, 7.0, 1);
        let target = label_to_flow(&m);
        let errs = flow_error(&m, &target.flow).unwrap();
        assert!(errs[&1] < 1e-6);
    }

    #[test]
    fn flow_error_scales_quadratically() {
        let m = disc_mask(20, 20, 9.0, 9.0, 7.0, 1);
        let target = label_to_flow(&m);
        let zero = Raster::zeros(20, 20, 2);
        let zero_err = flow_error(&m, &zero).unwrap()[&1];

        // mean of ||ideal||^2 over member pixels
        let mut sum = 0.0f64;
        let mut n = 0usize;
        for r in 0..20usize {
            for c in 0..20usize {
                if m.get(r, c) != 0 {
                    sum += (target.flow.get(r, c, 0) as f64).powi(2)
                        + (target.flow.get(r, c, 1) as f64).powi(2);
                    n += 1;
                }
            }
        }
        assert!((zero_err - sum / n as f64).abs() < 1e-9);

        let mut negated = target.flow.clone();
        for v in negated.data_mut() {
            *v = -*v;
        }
        let neg_err = flow_error(&m, &negated).unwrap()[&1];
        assert!((neg_err - 4.0 * zero_err).abs() < 1e-6);
    }

    #[test]
    fn flow_error_rejects_bad_dims() {
        let m = LabelMask::zeros(4, 4);
        let bad = Raster::zeros(4, 4, 3);
        assert!(matches!(
            flow_error(&m, &bad),
            Err(FlowError::DimensionMismatch { .. })
        ));
    }
}
