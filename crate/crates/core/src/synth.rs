//! Deterministic synthetic blob datasets: elliptical cells with optional
//! touching pairs, flat per-cell intensities over a dark background, additive
//! Gaussian pixel noise, and optional contamination smudges that appear in
//! the image but not in the mask. Used by the round-trip harnesses and the
//! `synth` CLI command.

use std::path::{Path, PathBuf};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::io::{self, IoError};
use crate::raster::{LabelMask, Raster};

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    /// Inclusive range for the number of cells per image.
    pub blob_count: (usize, usize),
    /// Inclusive range for the long semi-axis, in pixels.
    pub radius: (f64, f64),
    /// Fraction of cells (beyond the first) placed in contact with an
    /// existing cell.
    pub touching_fraction: f64,
    /// Additive Gaussian pixel noise.
    pub noise_sigma: f64,
    /// Probability of one contamination smudge per image (image-only, never
    /// in the mask).
    pub contamination: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            height: 512,
            width: 512,
            blob_count: (12, 30),
            radius: (5.0, 24.0),
            touching_fraction: 0.25,
            noise_sigma: 0.04,
            contamination: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthImage {
    pub image: Raster,
    pub mask: LabelMask,
}

fn gauss(rng: &mut StdRng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-15);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos_t: f64,
    sin_t: f64,
}

impl Ellipse {
    fn contains(&self, r: usize, c: usize) -> bool {
        let dr = r as f64 - self.cy;
        let dc = c as f64 - self.cx;
        let u = self.cos_t * dc + self.sin_t * dr;
        let v = -self.sin_t * dc + self.cos_t * dr;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    fn bbox(&self, h: usize, w: usize) -> (usize, usize, usize, usize) {
        let reach = self.a.ceil() + 1.0;
        let r0 = (self.cy - reach).floor().max(0.0) as usize;
        let c0 = (self.cx - reach).floor().max(0.0) as usize;
        let r1 = ((self.cy + reach).ceil() as usize).min(h - 1);
        let c1 = ((self.cx + reach).ceil() as usize).min(w - 1);
        (r0, c0, r1, c1)
    }
}

fn raster_ellipse(e: &Ellipse, mask: &LabelMask) -> Vec<(usize, usize)> {
    let (r0, c0, r1, c1) = e.bbox(mask.height(), mask.width());
    let mut pixels = Vec::new();
    for r in r0..=r1 {
        for c in c0..=c1 {
            if e.contains(r, c) && mask.get(r, c) == 0 {
                pixels.push((r, c));
            }
        }
    }
    pixels
}

/// Largest 4-connected component, ties resolved toward the component
/// containing the lexicographically smallest pixel.
fn largest_component(pixels: &[(usize, usize)]) -> Vec<(usize, usize)> {
    if pixels.is_empty() {
        return Vec::new();
    }
    let set: std::collections::HashSet<(usize, usize)> = pixels.iter().copied().collect();
    let mut visited: std::collections::HashSet<(usize, usize)> = Default::default();
    let mut best: Vec<(usize, usize)> = Vec::new();
    let mut sorted = pixels.to_vec();
    sorted.sort_unstable();
    for &start in &sorted {
        if visited.contains(&start) {
            continue;
        }
        let mut component = vec![start];
        let mut queue = vec![start];
        visited.insert(start);
        while let Some((r, c)) = queue.pop() {
            let neighbors = [
                (r.wrapping_sub(1), c),
                (r + 1, c),
                (r, c.wrapping_sub(1)),
                (r, c + 1),
            ];
            for n in neighbors {
                if set.contains(&n) && visited.insert(n) {
                    component.push(n);
                    queue.push(n);
                }
            }
        }
        if component.len() > best.len() {
            best = component;
        }
    }
    best
}

fn touches_existing(pixels: &[(usize, usize)], mask: &LabelMask) -> bool {
    let h = mask.height();
    let w = mask.width();
    pixels.iter().any(|&(r, c)| {
        (r > 0 && mask.get(r - 1, c) != 0)
            || (r + 1 < h && mask.get(r + 1, c) != 0)
            || (c > 0 && mask.get(r, c - 1) != 0)
            || (c + 1 < w && mask.get(r, c + 1) != 0)
    })
}

fn random_ellipse(rng: &mut StdRng, spec: &SynthSpec, cy: f64, cx: f64) -> Ellipse {
    let a = spec.radius.0 + (spec.radius.1 - spec.radius.0) * rng.random::<f64>();
    let b = a * (0.7 + 0.3 * rng.random::<f64>());
    let theta = std::f64::consts::PI * rng.random::<f64>();
    Ellipse {
        cy,
        cx,
        a,
        b,
        cos_t: theta.cos(),
        sin_t: theta.sin(),
    }
}

/// Generate one image + mask pair. Deterministic for a fixed spec and seed.
pub fn generate_image(spec: &SynthSpec, seed: u64) -> SynthImage {
    let h = spec.height;
    let w = spec.width;
    let mut rng = StdRng::seed_from_u64(seed);
    let mut mask = LabelMask::zeros(h, w);

    let span = spec.blob_count.1.saturating_sub(spec.blob_count.0);
    let n_blobs = spec.blob_count.0
        + if span > 0 {
            rng.random_range(0..=span)
        } else {
            0
        };
    let n_touch = ((n_blobs.saturating_sub(1)) as f64 * spec.touching_fraction).round() as usize;
    let n_free = n_blobs - n_touch;

    let mut next_id = 1u32;
    let mut centroids: Vec<(f64, f64)> = Vec::new();
    let mut bboxes: Vec<(usize, usize, usize, usize)> = Vec::new();

    let claim = |pixels: &[(usize, usize)],
                     mask: &mut LabelMask,
                     centroids: &mut Vec<(f64, f64)>,
                     bboxes: &mut Vec<(usize, usize, usize, usize)>,
                     id: u32| {
        let mut bbox = (usize::MAX, usize::MAX, 0usize, 0usize);
        for &(r, c) in pixels {
            mask.set(r, c, id);
            bbox.0 = bbox.0.min(r);
            bbox.1 = bbox.1.min(c);
            bbox.2 = bbox.2.max(r);
            bbox.3 = bbox.3.max(c);
        }
        centroids.push((
            pixels.iter().map(|p| p.0 as f64).sum::<f64>() / pixels.len() as f64,
            pixels.iter().map(|p| p.1 as f64).sum::<f64>() / pixels.len() as f64,
        ));
        bboxes.push(bbox);
    };

    // free cells: rejected unless fully clear of existing cells
    for _ in 0..n_free {
        for _attempt in 0..60 {
            let margin = spec.radius.1 + 2.0;
            if h as f64 <= 2.0 * margin || w as f64 <= 2.0 * margin {
                break;
            }
            let cy = margin + (h as f64 - 2.0 * margin) * rng.random::<f64>();
            let cx = margin + (w as f64 - 2.0 * margin) * rng.random::<f64>();
            let e = random_ellipse(&mut rng, spec, cy, cx);
            let pixels = raster_ellipse(&e, &mask);
            let ideal = std::f64::consts::PI * e.a * e.b;
            if (pixels.len() as f64) < 0.9 * ideal || pixels.len() < 13 {
                continue;
            }
            if touches_existing(&pixels, &mask) {
                continue;
            }
            claim(&pixels, &mut mask, &mut centroids, &mut bboxes, next_id);
            next_id += 1;
            break;
        }
    }

    // touching cells: seeded against the boundary of an existing cell
    for _ in 0..n_touch {
        if next_id == 1 {
            break;
        }
        for _attempt in 0..60 {
            let target = rng.random_range(1..next_id);
            let (tb_r0, tb_c0, tb_r1, tb_c1) = bboxes[(target - 1) as usize];
            let boundary: Vec<(usize, usize)> = {
                let mut b = Vec::new();
                for r in tb_r0..=tb_r1 {
                    for c in tb_c0..=tb_c1 {
                        if mask.get(r, c) != target {
                            continue;
                        }
                        let edge = r == 0
                            || r == h - 1
                            || c == 0
                            || c == w - 1
                            || mask.get(r - 1, c) != target
                            || mask.get(r + 1, c) != target
                            || mask.get(r, c - 1) != target
                            || mask.get(r, c + 1) != target;
                        if edge {
                            b.push((r, c));
                        }
                    }
                }
                b
            };
            if boundary.is_empty() {
                break;
            }
            let (br, bc) = boundary[rng.random_range(0..boundary.len())];
            let (tc_r, tc_c) = centroids[(target - 1) as usize];
            let dir_r = br as f64 - tc_r;
            let dir_c = bc as f64 - tc_c;
            let norm = (dir_r * dir_r + dir_c * dir_c).sqrt().max(1e-9);
            let e = {
                let a = spec.radius.0 + (spec.radius.1 - spec.radius.0) * rng.random::<f64>();
                let dist = a * 0.8 + 1.0;
                let cy = (br as f64 + dir_r / norm * dist).clamp(0.0, h as f64 - 1.0);
                let cx = (bc as f64 + dir_c / norm * dist).clamp(0.0, w as f64 - 1.0);
                let mut e = random_ellipse(&mut rng, spec, cy, cx);
                e.a = a;
                e.b = a * (0.7 + 0.3 * rng.random::<f64>());
                e
            };
            let pixels = largest_component(&raster_ellipse(&e, &mask));
            let ideal = std::f64::consts::PI * e.a * e.b;
            if (pixels.len() as f64) < 0.5 * ideal || pixels.len() < 25 {
                continue;
            }
            if !touches_existing(&pixels, &mask) {
                continue;
            }
            claim(&pixels, &mut mask, &mut centroids, &mut bboxes, next_id);
            next_id += 1;
            break;
        }
    }

    // render: flat per-cell intensity over a dark background
    let mut image = vec![0.08f32; h * w];
    let n_cells = (next_id - 1) as usize;
    let intensities: Vec<f32> = (0..n_cells)
        .map(|_| 0.45 + 0.5 * rng.random::<f64>() as f32)
        .collect();
    for (v, &id) in image.iter_mut().zip(mask.data()) {
        if id != 0 {
            *v = intensities[(id - 1) as usize];
        }
    }

    // contamination smudge: bright region in the image, absent from the mask
    if rng.random::<f64>() < spec.contamination {
        let cy = h as f64 * rng.random::<f64>();
        let cx = w as f64 * rng.random::<f64>();
        let e = random_ellipse(&mut rng, spec, cy, cx);
        let (r0, c0, r1, c1) = e.bbox(h, w);
        for r in r0..=r1 {
            for c in c0..=c1 {
                if e.contains(r, c) {
                    image[r * w + c] = (image[r * w + c] + 0.3).min(1.0);
                }
            }
        }
    }

    if spec.noise_sigma > 0.0 {
        for v in image.iter_mut() {
            *v = (*v + (spec.noise_sigma * gauss(&mut rng)) as f32).clamp(0.0, 1.0);
        }
    }

    SynthImage {
        image: Raster::new(h, w, 1, image).expect("image grid"),
        mask,
    }
}

fn image_seed(dataset_seed: u64, index: usize) -> u64 {
    let mut z = dataset_seed ^ (index as u64).wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Write `n_images` image/mask pairs under `dir/images` and `dir/masks`,
/// pairing files by stem (`img_0000.cft` / `img_0000.png`). Masks fall back
/// to CFT when ids exceed the 16-bit PNG range.
pub fn synth_dataset(
    dir: impl AsRef<Path>,
    n_images: usize,
    seed: u64,
    spec: &SynthSpec,
) -> Result<Vec<(PathBuf, PathBuf)>, IoError> {
    let dir = dir.as_ref();
    let images_dir = dir.join("images");
    let masks_dir = dir.join("masks");
    std::fs::create_dir_all(&images_dir)?;
    std::fs::create_dir_all(&masks_dir)?;
    let mut paths = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let sample = generate_image(spec, image_seed(seed, i));
        let stem = format!("img_{i:04}");
        let image_path = images_dir.join(format!("{stem}.cft"));
        io::write_raster(&sample.image, &image_path)?;
        let mask_path = if sample.mask.max_id() < 65536 {
            masks_dir.join(format!("{stem}.png"))
        } else {
            masks_dir.join(format!("{stem}.cft"))
        };
        io::write_mask(&sample.mask, &mask_path)?;
        paths.push((image_path, mask_path));
    }
    Ok(paths)
}
