//! Synthetic piecewise-planar disparity scenes with analytic ground-truth
//! normals, plus hole-mask sampling and a seeded training stream.
//!
//! Planes are the one surface family whose disparity normals are spatially
//! constant, so every region interior carries an exact oracle for the
//! normal operator, the attention branch and the losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::{DisparityImage, HoleMask, NormalMap};

/// Axis-aligned rectangle: rows `top..top+height`, cols `left..left+width`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, i: usize, j: usize) -> bool {
        i >= self.top && i < self.top + self.height && j >= self.left && j < self.left + self.width
    }
}

/// Fronto-parallel box: constant disparity over its rectangle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxSpec {
    pub rect: Rect,
    pub disparity: f64,
}

/// Slanted wall: disparity linear in the column, `start + slope*(j - left)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WallSpec {
    pub rect: Rect,
    pub start: f64,
    pub col_slope: f64,
}

/// Scene description. The ground plane covers the whole image with
/// `d = row_slope * i + intercept`; boxes and walls composite on top with
/// nearest-surface-wins (larger disparity is nearer).
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub ground_row_slope: f64,
    pub ground_intercept: f64,
    pub boxes: Vec<BoxSpec>,
    pub walls: Vec<WallSpec>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn flat(height: usize, width: usize, disparity: f64) -> Self {
        SceneSpec {
            height,
            width,
            ground_row_slope: 0.0,
            ground_intercept: disparity,
            boxes: Vec::new(),
            walls: Vec::new(),
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

/// A synthesised scene: composited disparity, analytic normals of the
/// noise-free surfaces, and a per-pixel surface label (0 = ground, then
/// boxes, then walls in spec order).
#[derive(Clone, Debug)]
pub struct Scene {
    pub disparity: DisparityImage,
    pub gt_normals: NormalMap,
    pub labels: Vec<u16>,
}

impl Scene {
    /// Pixels whose full 3x3 neighbourhood carries one surface label; the
    /// normal stencil straddles a depth jump everywhere else.
    pub fn interior_mask(&self) -> Vec<bool> {
        let h = self.disparity.height();
        let w = self.disparity.width();
        let mut out = vec![false; h * w];
        for i in 1..h.saturating_sub(1) {
            for j in 1..w.saturating_sub(1) {
                let l = self.labels[i * w + j];
                let mut uniform = true;
                'scan: for di in 0..3 {
                    for dj in 0..3 {
                        if self.labels[(i + di - 1) * w + (j + dj - 1)] != l {
                            uniform = false;
                            break 'scan;
                        }
                    }
                }
                out[i * w + j] = uniform;
            }
        }
        out
    }
}

fn plane_normal(a: f64, b: f64) -> [f64; 3] {
    let len = (1.0 + a * a + b * b).sqrt();
    [-a / len, -b / len, 1.0 / len]
}

/// Composite the scene: per pixel the nearest surface (largest disparity)
/// wins; seeded Gaussian noise is added afterwards and clamped at zero.
pub fn synth_scene(spec: &SceneSpec) -> Result<Scene> {
    if spec.height < 3 || spec.width < 3 {
        return Err(Error::spec("scene must be at least 3x3"));
    }
    if !spec.noise_sigma.is_finite() || spec.noise_sigma < 0.0 {
        return Err(Error::spec("noise sigma must be finite and non-negative"));
    }
    let (h, w) = (spec.height, spec.width);
    let mut values = vec![0.0; h * w];
    let mut labels = vec![0u16; h * w];
    let mut normals = vec![0.0; 3 * h * w];
    let plane = h * w;

    let ground_n = plane_normal(spec.ground_row_slope, 0.0);
    for i in 0..h {
        for j in 0..w {
            let idx = i * w + j;
            let mut best = spec.ground_row_slope * i as f64 + spec.ground_intercept;
            let mut label = 0u16;
            let mut n = ground_n;
            for (b, bx) in spec.boxes.iter().enumerate() {
                if bx.rect.contains(i, j) && bx.disparity > best {
                    best = bx.disparity;
                    label = 1 + b as u16;
                    n = [0.0, 0.0, 1.0];
                }
            }
            for (wi, wall) in spec.walls.iter().enumerate() {
                if wall.rect.contains(i, j) {
                    let d = wall.start + wall.col_slope * (j - wall.rect.left) as f64;
                    if d > best {
                        best = d;
                        label = 1 + spec.boxes.len() as u16 + wi as u16;
                        n = plane_normal(0.0, wall.col_slope);
                    }
                }
            }
            if best < 0.0 {
                return Err(Error::spec(format!(
                    "negative disparity {} at pixel ({},{})",
                    best, i, j
                )));
            }
            values[idx] = best;
            labels[idx] = label;
            normals[idx] = n[0];
            normals[plane + idx] = n[1];
            normals[2 * plane + idx] = n[2];
        }
    }

    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let gauss = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| Error::spec(format!("noise distribution: {}", e)))?;
        for v in &mut values {
            *v = (*v + gauss.sample(&mut rng)).max(0.0);
        }
    }

    Ok(Scene {
        disparity: DisparityImage::from_values(h, w, values)?,
        gt_normals: NormalMap::new(h, w, normals)?,
        labels,
    })
}

/// Margin kept between a sampled hole and the image border, so the normal
/// stencil and at least a sliver of background survive around the hole.
pub const MASK_MARGIN: usize = 1;

/// Square hole of side `hole`, uniformly placed with a 1-pixel border
/// margin.
pub fn synth_mask(size: usize, hole: usize, seed: u64) -> Result<HoleMask> {
    if hole == 0 {
        return Err(Error::spec("hole size must be positive"));
    }
    if hole + 2 * MASK_MARGIN > size {
        return Err(Error::spec(format!(
            "hole {} with margin {} does not fit in image {}",
            hole, MASK_MARGIN, size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = MASK_MARGIN;
    let hi = size - hole - MASK_MARGIN; // inclusive
    let top = rng.gen_range(lo..=hi);
    let left = rng.gen_range(lo..=hi);
    HoleMask::square(size, size, top, left, hole)
}

/// Randomised piecewise-planar scene for training streams: a sloped ground,
/// one to three boxes and up to two slanted walls.
pub fn random_scene_spec(height: usize, width: usize, seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ground_row_slope = rng.gen_range(0.05..0.5);
    let ground_intercept = rng.gen_range(1.0..8.0);
    let mut boxes = Vec::new();
    for _ in 0..rng.gen_range(1..=3) {
        let bh = rng.gen_range(height / 6..height / 2);
        let bw = rng.gen_range(width / 6..width / 2);
        let top = rng.gen_range(0..height - bh);
        let left = rng.gen_range(0..width - bw);
        let near = ground_row_slope * height as f64 + ground_intercept;
        boxes.push(BoxSpec {
            rect: Rect { top, left, height: bh, width: bw },
            disparity: rng.gen_range(near * 0.5..near * 1.5),
        });
    }
    let mut walls = Vec::new();
    for _ in 0..rng.gen_range(0..=2) {
        let wh = rng.gen_range(height / 4..height);
        let ww = rng.gen_range(width / 4..width / 2);
        let top = rng.gen_range(0..height - wh);
        let left = rng.gen_range(0..width - ww);
        let start = rng.gen_range(2.0..12.0);
        let max_slope = start / ww as f64; // keep disparity non-negative
        walls.push(WallSpec {
            rect: Rect { top, left, height: wh, width: ww },
            start,
            col_slope: rng.gen_range(-max_slope..1.0),
        });
    }
    SceneSpec {
        height,
        width,
        ground_row_slope,
        ground_intercept,
        boxes,
        walls,
        noise_sigma: 0.0,
        seed,
    }
}

/// Deterministic stream of (scene disparity, hole mask) training pairs.
pub struct SyntheticStream {
    size: usize,
    hole: usize,
    sigma: f64,
    seed: u64,
    next: u64,
}

impl SyntheticStream {
    pub fn new(size: usize, hole: usize, sigma: f64, seed: u64) -> Self {
        SyntheticStream { size, hole, sigma, seed, next: 0 }
    }
}

impl Iterator for SyntheticStream {
    type Item = (DisparityImage, HoleMask);

    fn next(&mut self) -> Option<Self::Item> {
        let n = self.next;
        self.next += 1;
        let mut spec = random_scene_spec(self.size, self.size, self.seed.wrapping_add(n));
        spec.noise_sigma = self.sigma;
        let scene = synth_scene(&spec).expect("randomised scene specs are valid");
        let mask = synth_mask(self.size, self.hole, self.seed ^ (n.wrapping_mul(0x9e3779b9)))
            .expect("hole fits by construction");
        Some((scene.disparity, mask))
    }
}
