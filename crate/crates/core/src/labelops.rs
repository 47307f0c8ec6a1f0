//! Label transforms and shape analytics: boundary exclusion, per-cell
//! intensity diversification, and instance shape statistics (size,
//! eccentricity as the short/long axis ratio, solidity against the convex
//! hull of pixel squares).

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use thiserror::Error;

use crate::raster::{LabelMask, Raster};

#[derive(Debug, Error, PartialEq)]
pub enum LabelOpsError {
    #[error("dimension mismatch: image {image_h}x{image_w} vs mask {mask_h}x{mask_w}")]
    DimensionMismatch {
        image_h: usize,
        image_w: usize,
        mask_h: usize,
        mask_w: usize,
    },
}

/// Clear every instance pixel whose 4-neighborhood leaves the instance: a
/// neighbor with a different nonzero id, a background neighbor, or the frame
/// edge. This is a 1-px inner-boundary removal; interiors survive untouched.
pub fn boundary_exclusion(mask: &LabelMask) -> LabelMask {
    let h = mask.height();
    let w = mask.width();
    let mut out = mask.clone();
    for r in 0..h {
        for c in 0..w {
            let id = mask.get(r, c);
            if id == 0 {
                continue;
            }
            let mut boundary = r == 0 || r == h - 1 || c == 0 || c == w - 1;
            if !boundary {
                boundary = mask.get(r - 1, c) != id
                    || mask.get(r + 1, c) != id
                    || mask.get(r, c - 1) != id
                    || mask.get(r, c + 1) != id;
            }
            if boundary {
                out.set(r, c, 0);
            }
        }
    }
    out
}

/// Options for [`cell_intensity_diversify`].
#[derive(Debug, Clone, Copy)]
pub struct IntensityOptions {
    /// Probability that the transform fires at all (one draw per call).
    pub p: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Default for IntensityOptions {
    fn default() -> Self {
        Self {
            p: 0.25,
            lo: 1.0,
            hi: 1.7,
        }
    }
}

/// Scale each cell's pixels by an independently drawn factor in `[lo, hi]`.
///
/// With probability `p` (single seeded draw) the transform fires; each
/// instance then draws its factor in ascending id order, so output is
/// bit-reproducible for a fixed seed. Background pixels are never touched and
/// the result is clipped to the image's pre-transform maximum.
pub fn cell_intensity_diversify(
    image: &Raster,
    mask: &LabelMask,
    seed: u64,
    opts: &IntensityOptions,
) -> Result<Raster, LabelOpsError> {
    if image.height() != mask.height() || image.width() != mask.width() {
        return Err(LabelOpsError::DimensionMismatch {
            image_h: image.height(),
            image_w: image.width(),
            mask_h: mask.height(),
            mask_w: mask.width(),
        });
    }
    let mut rng = StdRng::seed_from_u64(seed);
    if rng.random::<f64>() >= opts.p {
        return Ok(image.clone());
    }
    let pre_max = image.data().iter().copied().fold(f32::MIN, f32::max);

    let ids = mask.distinct_ids();
    let mut factor = std::collections::HashMap::with_capacity(ids.len());
    for id in ids {
        let f = opts.lo + (opts.hi - opts.lo) * rng.random::<f64>();
        factor.insert(id, f as f32);
    }

    let channels = image.channels();
    let mut out = image.clone();
    for (i, &id) in mask.data().iter().enumerate() {
        if id == 0 {
            continue;
        }
        let f = factor[&id];
        let base = i * channels;
        for ch in 0..channels {
            let v = out.data()[base + ch] * f;
            out.data_mut()[base + ch] = v.min(pre_max);
        }
    }
    Ok(out)
}

/// Per-instance shape summary.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeStats {
    pub id: u32,
    pub size: usize,
    /// Short axis over long axis, from the coordinate covariance eigenvalues:
    /// `sqrt(lambda2 / lambda1)`; 1.0 for degenerate single points.
    pub eccentricity: f64,
    /// Pixel count over convex-hull area, hull taken over pixel corner points.
    pub solidity: f64,
}

/// Compute size, eccentricity and solidity for every instance, ascending by id.
pub fn shape_stats(mask: &LabelMask) -> Vec<ShapeStats> {
    let mut pixels_by_id: std::collections::BTreeMap<u32, Vec<(usize, usize)>> =
        std::collections::BTreeMap::new();
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            let id = mask.get(r, c);
            if id != 0 {
                pixels_by_id.entry(id).or_default().push((r, c));
            }
        }
    }
    pixels_by_id
        .into_iter()
        .map(|(id, pixels)| {
            let size = pixels.len();
            ShapeStats {
                id,
                size,
                eccentricity: eccentricity_of(&pixels),
                solidity: size as f64 / hull_area_of(&pixels),
            }
        })
        .collect()
}

fn eccentricity_of(pixels: &[(usize, usize)]) -> f64 {
    let n = pixels.len() as f64;
    let mean_r = pixels.iter().map(|&(r, _)| r as f64).sum::<f64>() / n;
    let mean_c = pixels.iter().map(|&(_, c)| c as f64).sum::<f64>() / n;
    let mut srr = 0.0;
    let mut scc = 0.0;
    let mut src = 0.0;
    for &(r, c) in pixels {
        let dr = r as f64 - mean_r;
        let dc = c as f64 - mean_c;
        srr += dr * dr;
        scc += dc * dc;
        src += dr * dc;
    }
    let (a, b, d) = (srr / n, src / n, scc / n);
    let trace = a + d;
    let gap = ((a - d).powi(2) + 4.0 * b * b).sqrt();
    let l1 = 0.5 * (trace + gap);
    let l2 = (0.5 * (trace - gap)).max(0.0);
    if l1 <= 0.0 {
        1.0
    } else {
        (l2 / l1).sqrt()
    }
}

/// Convex hull area over the corner points of member pixel squares, so a
/// single pixel has hull area exactly 1.
fn hull_area_of(pixels: &[(usize, usize)]) -> f64 {
    let mut points: Vec<(i64, i64)> = Vec::with_capacity(pixels.len() * 4);
    for &(r, c) in pixels {
        let (r, c) = (r as i64, c as i64);
        points.push((c, r));
        points.push((c + 1, r));
        points.push((c, r + 1));
        points.push((c + 1, r + 1));
    }
    points.sort_unstable();
    points.dedup();

    // monotone chain
    let cross = |o: (i64, i64), a: (i64, i64), b: (i64, i64)| -> i64 {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut lower: Vec<(i64, i64)> = Vec::new();
    for &p in &points {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(i64, i64)> = Vec::new();
    for &p in points.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);

    // shoelace; hull corners are integers so the doubled area is exact
    let mut doubled = 0i64;
    for i in 0..lower.len() {
        let (x0, y0) = lower[i];
        let (x1, y1) = lower[(i + 1) % lower.len()];
        doubled += x0 * y1 - x1 * y0;
    }
    (doubled.abs() as f64) / 2.0
}

/// CSV rendering of shape statistics: `id,size,eccentricity,solidity`.
pub fn stats_to_csv(stats: &[ShapeStats]) -> String {
    let mut out = String::from("id,size,eccentricity,solidity\n");
    for s in stats {
        out.push_str(&format!(
            "{},{},{},{}\n",
            s.id, s.size, s.eccentricity, s.solidity
        ));
    }
    out
}
