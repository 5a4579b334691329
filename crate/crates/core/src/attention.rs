//! Surface attention: match hole (foreground) windows against known
//! background patches on disparity+normal features, propagate scores across
//! neighbouring pixels, and transfer the winning patches back into the hole.
//!
//! The branch is a deterministic forward refinement with no learned
//! parameters. Argmax transfer is piecewise constant, so no gradients flow
//! through it; blend mode is available for comparison.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::image::{HoleMask, Region};
use crate::normals::normals_from_raw;
use crate::tensor::Tensor;

/// Guard on the cosine norms; a zero-norm window against a zero-norm patch
/// scores 0 rather than dividing by zero.
const COS_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransferMode {
    /// Write the highest-scored patch (the documented default).
    Argmax,
    /// Softmax-weighted blend of all patches.
    Blend,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionConfig {
    /// Background patch side length (odd).
    pub patch: usize,
    /// Propagation kernel size (odd).
    pub k: usize,
    /// Temperature multiplier on cosine scores.
    pub softmax_scale: f64,
    /// Background patch sampling stride.
    pub stride: usize,
    pub transfer: TransferMode,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            patch: 3,
            k: 3,
            softmax_scale: 10.0,
            stride: 1,
            transfer: TransferMode::Argmax,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch.is_multiple_of(2) {
            return Err(Error::contract("attention patch size must be odd"));
        }
        if self.k.is_multiple_of(2) {
            return Err(Error::contract("attention propagation kernel must be odd"));
        }
        if self.softmax_scale <= 0.0 {
            return Err(Error::contract("softmax scale must be positive"));
        }
        if self.stride == 0 {
            return Err(Error::contract("patch stride must be positive"));
        }
        Ok(())
    }
}

/// One background patch: its feature window and the image coordinate of its
/// centre pixel.
#[derive(Clone, Debug)]
pub struct Patch {
    pub center: (usize, usize),
    pub data: Vec<f64>,
    norm: f64,
}

/// Per-foreground-pixel score rows over the extracted patches. Rows are
/// indexed row-major over the foreground window.
#[derive(Clone, Debug)]
pub struct ScoreMatrix {
    pub fg: Region,
    pub img_h: usize,
    pub img_w: usize,
    pub n_patches: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn n_rows(&self) -> usize {
        self.fg.height * self.fg.width
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.n_patches..(r + 1) * self.n_patches]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.n_patches..(r + 1) * self.n_patches]
    }

    /// Image coordinate of a row index.
    pub fn pixel(&self, r: usize) -> (usize, usize) {
        (self.fg.top + r / self.fg.width, self.fg.left + r % self.fg.width)
    }
}

/// Outcome of the attention pipeline over one foreground window.
#[derive(Clone, Debug)]
pub struct AttentionResult {
    /// Renormalised score rows (each sums to 1).
    pub scores: ScoreMatrix,
    /// Winning patch per foreground pixel.
    pub argmax_index: Vec<usize>,
    /// Stamped reconstruction over `region`.
    pub transferred: Tensor,
    /// Stamp region: the foreground box dilated by the patch radius,
    /// clipped to the image.
    pub region: Region,
}

/// Collect every patch whose window lies fully inside the image and fully in
/// the background, sampled at `cfg.stride`, row-major by centre.
pub fn extract_patches(
    features: &Tensor,
    mask: &HoleMask,
    cfg: &AttentionConfig,
) -> Result<Vec<Patch>> {
    cfg.validate()?;
    let (c, h, w) = features.dims3()?;
    if mask.height() != h || mask.width() != w {
        return Err(Error::dimension("mask dimensions do not match features"));
    }
    let r = cfg.patch / 2;
    if h < cfg.patch || w < cfg.patch {
        return Err(Error::domain("image smaller than one patch"));
    }
    let mut patches = Vec::new();
    let mut i = r;
    while i + r < h {
        let mut j = r;
        while j + r < w {
            let mut in_background = true;
            'window: for di in 0..cfg.patch {
                for dj in 0..cfg.patch {
                    if mask.is_hole(i + di - r, j + dj - r) {
                        in_background = false;
                        break 'window;
                    }
                }
            }
            if in_background {
                let mut data = Vec::with_capacity(c * cfg.patch * cfg.patch);
                for ch in 0..c {
                    for di in 0..cfg.patch {
                        let row = (ch * h + i + di - r) * w + j - r;
                        data.extend_from_slice(&features.data()[row..row + cfg.patch]);
                    }
                }
                let norm = data.iter().map(|v| v * v).sum::<f64>().sqrt();
                patches.push(Patch { center: (i, j), data, norm });
            }
            j += cfg.stride;
        }
        i += cfg.stride;
    }
    if patches.is_empty() {
        return Err(Error::domain("hole covers image: no fully-background patch"));
    }
    Ok(patches)
}

/// Feature window centred on an image pixel, zero-filled outside the image.
fn window_at(features: &Tensor, i: usize, j: usize, patch: usize) -> Vec<f64> {
    let (c, h, w) = features.dims3().expect("CHW features");
    let r = (patch / 2) as isize;
    let mut data = Vec::with_capacity(c * patch * patch);
    for ch in 0..c {
        for di in -r..=r {
            for dj in -r..=r {
                let y = i as isize + di;
                let x = j as isize + dj;
                if y < 0 || y >= h as isize || x < 0 || x >= w as isize {
                    data.push(0.0);
                } else {
                    data.push(features.data()[(ch * h + y as usize) * w + x as usize]);
                }
            }
        }
    }
    data
}

/// Softmax rows of temperature-scaled cosine similarities between each
/// foreground window and every patch.
pub fn attention_scores(
    features: &Tensor,
    fg: &Region,
    patches: &[Patch],
    cfg: &AttentionConfig,
) -> Result<ScoreMatrix> {
    cfg.validate()?;
    if patches.is_empty() {
        return Err(Error::domain("attention_scores: no patches"));
    }
    let (_, h, w) = features.dims3()?;
    let n_patches = patches.len();
    let n_rows = fg.height * fg.width;
    let mut data = vec![0.0; n_rows * n_patches];

    // Flatten the patches into one contiguous matrix so the dot loop walks
    // linear memory.
    let dim = patches[0].data.len();
    let mut pmat = Vec::with_capacity(n_patches * dim);
    let mut pnorm_inv = Vec::with_capacity(n_patches);
    for p in patches {
        pmat.extend_from_slice(&p.data);
        pnorm_inv.push(1.0 / (p.norm + COS_EPS));
    }

    for row in 0..n_rows {
        let i = fg.top + row / fg.width;
        let j = fg.left + row % fg.width;
        let win = window_at(features, i, j, cfg.patch);
        let wnorm = win.iter().map(|v| v * v).sum::<f64>().sqrt();
        let wscale = cfg.softmax_scale / (wnorm + COS_EPS);
        let scores = &mut data[row * n_patches..(row + 1) * n_patches];
        for (q, s) in scores.iter_mut().enumerate() {
            let prow = &pmat[q * dim..(q + 1) * dim];
            let mut dot = 0.0;
            for (a, b) in win.iter().zip(prow) {
                dot += a * b;
            }
            *s = wscale * dot * pnorm_inv[q];
        }
        softmax_in_place(scores);
    }
    Ok(ScoreMatrix { fg: *fg, img_h: h, img_w: w, n_patches, data })
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Left-right then top-down score propagation: pixel p gathers, for patch q,
/// the scores its k-window neighbours assigned to the correspondingly
/// shifted patches. Adjacent pixels thereby inherit their neighbours'
/// matches. `k = 1` is the identity.
pub fn propagate_scores(scores: &ScoreMatrix, patches: &[Patch], k: usize) -> Result<ScoreMatrix> {
    if k.is_multiple_of(2) {
        return Err(Error::contract("propagation kernel must be odd"));
    }
    if patches.len() != scores.n_patches {
        return Err(Error::contract("patch list does not match score matrix"));
    }
    if k == 1 {
        return Ok(scores.clone());
    }
    let r = (k / 2) as isize;
    let index_of: HashMap<(usize, usize), usize> =
        patches.iter().enumerate().map(|(q, p)| (p.center, q)).collect();

    // Per (shift, patch) lookup tables; usize::MAX marks a missing patch.
    let np = scores.n_patches;
    let shifts: Vec<isize> = (-r..=r).collect();
    let table = |vertical: bool| -> Vec<usize> {
        let mut t = vec![usize::MAX; shifts.len() * np];
        for (si, &s) in shifts.iter().enumerate() {
            for (q, p) in patches.iter().enumerate() {
                let (ci, cj) = p.center;
                let (ni, nj) = if vertical {
                    (ci as isize + s, cj as isize)
                } else {
                    (ci as isize, cj as isize + s)
                };
                if ni >= 0 && nj >= 0 {
                    if let Some(&qs) = index_of.get(&(ni as usize, nj as usize)) {
                        t[si * np + q] = qs;
                    }
                }
            }
        }
        t
    };

    let fg = scores.fg;
    let pass = |src: &ScoreMatrix, vertical: bool, table: &[usize]| -> ScoreMatrix {
        let mut out = src.clone();
        for row in 0..src.n_rows() {
            let (pi, pj) = (row / fg.width, row % fg.width);
            let dst = out.row_mut(row);
            for v in dst.iter_mut() {
                *v = 0.0;
            }
            for (si, &t) in shifts.iter().enumerate() {
                let (ni, nj) = if vertical {
                    (pi as isize + t, pj as isize)
                } else {
                    (pi as isize, pj as isize + t)
                };
                if ni < 0 || ni >= fg.height as isize || nj < 0 || nj >= fg.width as isize {
                    continue;
                }
                let neighbour = src.row(ni as usize * fg.width + nj as usize);
                let shifted = &table[si * np..(si + 1) * np];
                for (d, &qs) in dst.iter_mut().zip(shifted) {
                    if qs != usize::MAX {
                        *d += neighbour[qs];
                    }
                }
            }
        }
        out
    };

    let horizontal = pass(scores, false, &table(false));
    Ok(pass(&horizontal, true, &table(true)))
}

/// Renormalise rows, pick winners, and stamp patches around each foreground
/// pixel with overlap averaging. Returns the stamped buffer over the
/// radius-dilated foreground box (background pixels are handled by the
/// caller, which only reads hole pixels out of it).
pub fn transfer(
    scores: &ScoreMatrix,
    patches: &[Patch],
    cfg: &AttentionConfig,
) -> Result<(Region, Tensor, Vec<usize>, ScoreMatrix)> {
    if patches.is_empty() {
        return Err(Error::domain("transfer: no patches"));
    }
    let c = patches[0].data.len() / (cfg.patch * cfg.patch);
    let r = cfg.patch / 2;
    let mut normalised = scores.clone();
    let mut argmax = Vec::with_capacity(scores.n_rows());
    for row in 0..scores.n_rows() {
        let data = normalised.row_mut(row);
        let sum: f64 = data.iter().sum();
        if sum > 0.0 {
            for v in data.iter_mut() {
                *v /= sum;
            }
        }
        let best = data
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite scores"))
            .map(|(q, _)| q)
            .unwrap_or(0);
        argmax.push(best);
    }

    let region = scores.fg.dilate_clipped(r, scores.img_h, scores.img_w);
    let (rh, rw) = (region.height, region.width);
    let mut acc = vec![0.0; c * rh * rw];
    let mut count = vec![0usize; rh * rw];
    let mut blend = vec![0.0; c * cfg.patch * cfg.patch];

    for row in 0..scores.n_rows() {
        let (i, j) = scores.pixel(row);
        let stamp: &[f64] = match cfg.transfer {
            TransferMode::Argmax => &patches[argmax[row]].data,
            TransferMode::Blend => {
                blend.iter_mut().for_each(|v| *v = 0.0);
                let weights = normalised.row(row);
                for (q, p) in patches.iter().enumerate() {
                    let wq = weights[q];
                    if wq == 0.0 {
                        continue;
                    }
                    for (b, v) in blend.iter_mut().zip(&p.data) {
                        *b += wq * v;
                    }
                }
                &blend
            }
        };
        for di in 0..cfg.patch {
            for dj in 0..cfg.patch {
                let y = i as isize + di as isize - r as isize;
                let x = j as isize + dj as isize - r as isize;
                if y < 0 || y >= scores.img_h as isize || x < 0 || x >= scores.img_w as isize {
                    continue;
                }
                let (ry, rx) = (y as usize - region.top, x as usize - region.left);
                for ch in 0..c {
                    acc[(ch * rh + ry) * rw + rx] += stamp[(ch * cfg.patch + di) * cfg.patch + dj];
                }
                count[ry * rw + rx] += 1;
            }
        }
    }
    for ry in 0..rh {
        for rx in 0..rw {
            let n = count[ry * rw + rx];
            if n > 1 {
                for ch in 0..c {
                    acc[(ch * rh + ry) * rw + rx] /= n as f64;
                }
            }
        }
    }
    let transferred = Tensor::new(vec![c, rh, rw], acc)?;
    Ok((region, transferred, argmax, normalised))
}

/// Full pipeline on a coarse disparity stage: compute normals, concatenate,
/// extract background patches, score, propagate, transfer. Hole pixels of
/// the returned \[4,H,W\] features are replaced by the transferred patches;
/// background pixels pass through unchanged.
pub fn surface_attention(
    coarse: &Tensor,
    mask: &HoleMask,
    cfg: &AttentionConfig,
) -> Result<(Tensor, Option<AttentionResult>)> {
    let (c, h, w) = coarse.dims3()?;
    if c != 1 {
        return Err(Error::dimension("surface_attention expects a [1,H,W] coarse stage"));
    }
    let normals = normals_from_raw(h, w, coarse.data())?;
    let mut feat = Vec::with_capacity(4 * h * w);
    feat.extend_from_slice(coarse.data());
    feat.extend_from_slice(normals.components());
    let features = Tensor::new(vec![4, h, w], feat)?;

    if mask.is_empty_hole() {
        return Ok((features, None));
    }
    let patches = extract_patches(&features, mask, cfg)?;
    let fg = mask.bbox().expect("non-empty hole");
    let raw = attention_scores(&features, &fg, &patches, cfg)?;
    let propagated = propagate_scores(&raw, &patches, cfg.k)?;
    let (region, transferred, argmax, normalised) = transfer(&propagated, &patches, cfg)?;

    let mut out = features.clone();
    let (rh, rw) = (region.height, region.width);
    for i in 0..h {
        for j in 0..w {
            if !mask.is_hole(i, j) {
                continue;
            }
            let (ry, rx) = (i - region.top, j - region.left);
            for ch in 0..4 {
                out.data_mut()[(ch * h + i) * w + j] =
                    transferred.data()[(ch * rh + ry) * rw + rx];
            }
        }
    }
    let result = AttentionResult {
        scores: normalised,
        argmax_index: argmax,
        transferred,
        region,
    };
    Ok((out, Some(result)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_features(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
        let data = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![c, h, w], data).unwrap()
    }

    #[test]
    fn patch_count_on_full_background() {
        let features = Tensor::full(vec![1, 5, 5], 1.0);
        let mask = HoleMask::empty(5, 5);
        let cfg = AttentionConfig::default();
        let patches = extract_patches(&features, &mask, &cfg).unwrap();
        assert_eq!(patches.len(), 9);
        assert_eq!(patches[0].center, (1, 1));
        assert_eq!(patches[8].center, (3, 3));
    }

    #[test]
    fn single_corner_patch_survives() {
        // Hole everywhere except a 3x3 corner.
        let mut hole = vec![true; 6 * 6];
        for i in 0..3 {
            for j in 0..3 {
                hole[i * 6 + j] = false;
            }
        }
        let mask = HoleMask::new(6, 6, hole).unwrap();
        let features = Tensor::full(vec![1, 6, 6], 1.0);
        let patches = extract_patches(&features, &mask, &AttentionConfig::default()).unwrap();
        assert_eq!(patches.len(), 1);
        assert_eq!(patches[0].center, (1, 1));
    }

    #[test]
    fn full_hole_is_domain_error() {
        let mask = HoleMask::new(5, 5, vec![true; 25]).unwrap();
        let features = Tensor::full(vec![1, 5, 5], 1.0);
        assert!(matches!(
            extract_patches(&features, &mask, &AttentionConfig::default()),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn patch_set_matches_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for seed in 0..5u64 {
            let mut mrng = ChaCha8Rng::seed_from_u64(seed);
            let (h, w) = (9, 10);
            let hole: Vec<bool> = (0..h * w).map(|_| mrng.gen_bool(0.25)).collect();
            let mask = HoleMask::new(h, w, hole.clone()).unwrap();
            let features = rand_features(&mut rng, 2, h, w);
            let cfg = AttentionConfig { stride: 2, ..AttentionConfig::default() };
            let got = extract_patches(&features, &mask, &cfg);

            // Brute-force enumeration of valid centres.
            let mut want = Vec::new();
            for i in (1..h - 1).step_by(2) {
                for j in (1..w - 1).step_by(2) {
                    let mut ok = true;
                    for di in 0..3 {
                        for dj in 0..3 {
                            if hole[(i + di - 1) * w + (j + dj - 1)] {
                                ok = false;
                            }
                        }
                    }
                    if ok {
                        want.push((i, j));
                    }
                }
            }
            match got {
                Ok(ps) => {
                    assert_eq!(ps.iter().map(|p| p.center).collect::<Vec<_>>(), want);
                }
                Err(_) => assert!(want.is_empty()),
            }
        }
    }

    #[test]
    fn score_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let h = 12;
        let w = 12;
        let features = rand_features(&mut rng, 1, h, w);
        let mask = HoleMask::square(h, w, 4, 8, 3).unwrap();
        let cfg = AttentionConfig::default();
        let patches = extract_patches(&features, &mask, &cfg).unwrap();
        let fg = mask.bbox().unwrap();
        let scores = attention_scores(&features, &fg, &patches, &cfg).unwrap();
        for row in 0..scores.n_rows() {
            let s: f64 = scores.row(row).iter().sum();
            assert!((s - 1.0).abs() <= 1e-9);
            assert!(scores.row(row).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn identical_patches_give_uniform_rows() {
        let features = Tensor::full(vec![1, 8, 8], 2.0);
        let mask = HoleMask::square(8, 8, 3, 3, 2).unwrap();
        let cfg = AttentionConfig::default();
        let patches = extract_patches(&features, &mask, &cfg).unwrap();
        let fg = mask.bbox().unwrap();
        let scores = attention_scores(&features, &fg, &patches, &cfg).unwrap();
        let n = patches.len() as f64;
        for row in 0..scores.n_rows() {
            for &v in scores.row(row) {
                assert!((v - 1.0 / n).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scores_match_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let (h, w) = (10, 10);
        let features = rand_features(&mut rng, 4, h, w);
        let mask = HoleMask::square(h, w, 3, 3, 3).unwrap();
        let cfg = AttentionConfig::default();
        let patches = extract_patches(&features, &mask, &cfg).unwrap();
        let fg = mask.bbox().unwrap();
        let scores = attention_scores(&features, &fg, &patches, &cfg).unwrap();

        for row in 0..scores.n_rows() {
            let (i, j) = scores.pixel(row);
            let win = window_at(&features, i, j, 3);
            let wn = win.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut want: Vec<f64> = patches
                .iter()
                .map(|p| {
                    let dot: f64 = win.iter().zip(&p.data).map(|(a, b)| a * b).sum();
                    cfg.softmax_scale * dot / ((wn + COS_EPS) * (p.norm + COS_EPS))
                })
                .collect();
            let m = want.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = want.iter().map(|v| (v - m).exp()).sum();
            for v in want.iter_mut() {
                *v = (*v - m).exp() / z;
            }
            for (a, b) in scores.row(row).iter().zip(&want) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn propagation_k1_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let (h, w) = (9, 9);
        let features = rand_features(&mut rng, 1, h, w);
        let mask = HoleMask::square(h, w, 3, 3, 3).unwrap();
        let cfg = AttentionConfig::default();
        let patches = extract_patches(&features, &mask, &cfg).unwrap();
        let fg = mask.bbox().unwrap();
        let scores = attention_scores(&features, &fg, &patches, &cfg).unwrap();
        let same = propagate_scores(&scores, &patches, 1).unwrap();
        for row in 0..scores.n_rows() {
            assert_eq!(scores.row(row), same.row(row));
        }
    }

    #[test]
    fn propagation_two_pixel_trace() {
        // Two horizontally adjacent fg pixels, each matching horizontally
        // adjacent patches with full confidence. After k = 3 propagation each
        // row gains its neighbour's (shifted) evidence: mass doubles.
        let (h, w) = (8, 12);
        let features = Tensor::full(vec![1, h, w], 1.0);
        let mask = HoleMask::square(h, w, 3, 3, 1).unwrap(); // placeholder mask
        let cfg = AttentionConfig::default();
        let patches = extract_patches(&features, &mask, &cfg).unwrap();
        // Foreground: two pixels side by side.
        let fg = Region { top: 4, left: 5, height: 1, width: 2 };
        let index_of = |center: (usize, usize)| -> usize {
            patches.iter().position(|p| p.center == center).unwrap()
        };
        let q0 = index_of((1, 1));
        let q1 = index_of((1, 2));
        let mut data = vec![0.0; 2 * patches.len()];
        data[q0] = 1.0; // pixel (4,5) matches patch (1,1)
        data[patches.len() + q1] = 1.0; // pixel (4,6) matches patch (1,2)
        let scores =
            ScoreMatrix { fg, img_h: h, img_w: w, n_patches: patches.len(), data };
        let prop = propagate_scores(&scores, &patches, 3).unwrap();
        // Both rows keep their own best patch, now with strictly more mass.
        let best0 = prop.row(0).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let best1 = prop.row(1).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(prop.row(0)[q0], best0);
        assert_eq!(prop.row(1)[q1], best1);
        assert!(best0 > 1.0 && best1 > 1.0);
        assert_eq!(best0, 2.0);
        assert_eq!(best1, 2.0);
    }

    #[test]
    fn propagation_matches_shift_and_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        let (h, w) = (10, 11);
        let features = rand_features(&mut rng, 2, h, w);
        let mask = HoleMask::square(h, w, 4, 4, 3).unwrap();
        let cfg = AttentionConfig::default();
        let patches = extract_patches(&features, &mask, &cfg).unwrap();
        let fg = mask.bbox().unwrap();
        let scores = attention_scores(&features, &fg, &patches, &cfg).unwrap();
        let got = propagate_scores(&scores, &patches, 3).unwrap();

        // Direct two-pass shift-and-sum with a plain map lookup.
        let lookup: HashMap<(usize, usize), usize> =
            patches.iter().enumerate().map(|(q, p)| (p.center, q)).collect();
        let np = patches.len();
        let nr = scores.n_rows();
        let shift = |q: usize, di: isize, dj: isize| -> Option<usize> {
            let (ci, cj) = patches[q].center;
            let (ni, nj) = (ci as isize + di, cj as isize + dj);
            if ni < 0 || nj < 0 {
                None
            } else {
                lookup.get(&(ni as usize, nj as usize)).copied()
            }
        };
        let mut h_pass = vec![0.0; nr * np];
        for row in 0..nr {
            let (pi, pj) = (row / fg.width, row % fg.width);
            for q in 0..np {
                let mut acc = 0.0;
                for t in -1isize..=1 {
                    let nj = pj as isize + t;
                    if nj < 0 || nj >= fg.width as isize {
                        continue;
                    }
                    if let Some(qs) = shift(q, 0, t) {
                        acc += scores.row(pi * fg.width + nj as usize)[qs];
                    }
                }
                h_pass[row * np + q] = acc;
            }
        }
        let mut v_pass = vec![0.0; nr * np];
        for row in 0..nr {
            let (pi, pj) = (row / fg.width, row % fg.width);
            for q in 0..np {
                let mut acc = 0.0;
                for t in -1isize..=1 {
                    let ni = pi as isize + t;
                    if ni < 0 || ni >= fg.height as isize {
                        continue;
                    }
                    if let Some(qs) = shift(q, t, 0) {
                        acc += h_pass[(ni as usize * fg.width + pj) * np + qs];
                    }
                }
                v_pass[row * np + q] = acc;
            }
        }
        for row in 0..nr {
            for q in 0..np {
                assert!((got.row(row)[q] - v_pass[row * np + q]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transfer_single_pixel_stamps_whole_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let (h, w) = (9, 9);
        let features = rand_features(&mut rng, 2, h, w);
        let mask = HoleMask::square(h, w, 4, 4, 1).unwrap();
        let cfg = AttentionConfig::default();
        let patches = extract_patches(&features, &mask, &cfg).unwrap();
        let fg = mask.bbox().unwrap();
        let scores = attention_scores(&features, &fg, &patches, &cfg).unwrap();
        let (region, out, argmax, _) = transfer(&scores, &patches, &cfg).unwrap();
        assert_eq!(region, Region { top: 3, left: 3, height: 3, width: 3 });
        let p = &patches[argmax[0]];
        for ch in 0..2 {
            for di in 0..3 {
                for dj in 0..3 {
                    assert_eq!(
                        out.data()[(ch * 3 + di) * 3 + dj],
                        p.data[(ch * 3 + di) * 3 + dj]
                    );
                }
            }
        }
    }

    #[test]
    fn transfer_uniform_scores_identical_patches_tile_average() {
        let (h, w) = (10, 10);
        let features = Tensor::full(vec![1, h, w], 3.0);
        let mask = HoleMask::square(h, w, 4, 4, 2).unwrap();
        let cfg = AttentionConfig { transfer: TransferMode::Blend, ..AttentionConfig::default() };
        let patches = extract_patches(&features, &mask, &cfg).unwrap();
        let fg = mask.bbox().unwrap();
        let scores = attention_scores(&features, &fg, &patches, &cfg).unwrap();
        let (_, out, _, _) = transfer(&scores, &patches, &cfg).unwrap();
        // All patches identical and constant: every covered cell averages 3.
        for &v in out.data() {
            assert!((v - 3.0).abs() < 1e-12);
        }
    }

    /// Build features whose hole content is an exact translate of visible
    /// background; returns (features, mask, column offset).
    fn translated_copy_features(seed: u64) -> (Tensor, HoleMask, isize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (20, 24);
        let mut f = rand_features(&mut rng, 1, h, w);
        let mask = HoleMask::square(h, w, 6, 12, 6).unwrap();
        let dj = -8isize;
        for i in 6..12 {
            for j in 12..18 {
                let src = (i, (j as isize + dj) as usize);
                let v = f.data()[src.0 * w + src.1];
                f.data_mut()[i * w + j] = v;
            }
        }
        (f, mask, dj)
    }

    #[test]
    fn exact_copy_recovers_translation_on_interior() {
        for seed in [1u64, 2, 3] {
            let (features, mask, dj) = translated_copy_features(seed);
            let cfg = AttentionConfig::default();
            let patches = extract_patches(&features, &mask, &cfg).unwrap();
            let fg = mask.bbox().unwrap();
            let scores = attention_scores(&features, &fg, &patches, &cfg).unwrap();
            let (_, _, argmax, _) = transfer(&scores, &patches, &cfg).unwrap();
            let interior = mask.eroded(1);
            assert!(!interior.is_empty());
            for (i, j) in interior {
                let row = (i - fg.top) * fg.width + (j - fg.left);
                let want_center = (i, (j as isize + dj) as usize);
                assert_eq!(
                    patches[argmax[row]].center,
                    want_center,
                    "pixel ({},{}) matched {:?}",
                    i,
                    j,
                    patches[argmax[row]].center
                );
            }
        }
    }

    #[test]
    fn translated_copy_reconstructs_region_exactly() {
        let (features, mask, _) = translated_copy_features(9);
        let cfg = AttentionConfig::default();
        let patches = extract_patches(&features, &mask, &cfg).unwrap();
        let fg = mask.bbox().unwrap();
        let scores = attention_scores(&features, &fg, &patches, &cfg).unwrap();
        let (region, out, _, _) = transfer(&scores, &patches, &cfg).unwrap();
        // Pixels two deep into the hole: every stamp covering them comes
        // from an exactly-matched neighbour, so the overlap average
        // reproduces the translated content exactly.
        for (i, j) in mask.eroded(2) {
            let got = out.data()[(i - region.top) * region.width + (j - region.left)];
            let want = features.data()[i * features.shape()[2] + j];
            assert!((got - want).abs() < 1e-9, "({},{}): {} vs {}", i, j, got, want);
        }
    }

    #[test]
    fn surface_attention_empty_mask_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let coarse = {
            let data = (0..8 * 8).map(|_| rng.gen_range(0.0..5.0)).collect();
            Tensor::new(vec![1, 8, 8], data).unwrap()
        };
        let mask = HoleMask::empty(8, 8);
        let (out, res) = surface_attention(&coarse, &mask, &AttentionConfig::default()).unwrap();
        assert!(res.is_none());
        assert_eq!(out.shape(), &[4, 8, 8]);
        assert_eq!(&out.data()[..64], coarse.data());
    }

    #[test]
    fn surface_attention_recovers_plane_normals_in_hole() {
        // A hole occluding part of a plane whose remainder is visible: the
        // transferred normals over the hole must match the plane's analytic
        // normal, since every background patch carries it.
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        for _ in 0..5 {
            let (h, w) = (20, 20);
            let a = rng.gen_range(0.2..1.0);
            let b = rng.gen_range(0.2..1.0);
            let base = 30.0;
            let mut values = vec![0.0; h * w];
            for i in 0..h {
                for j in 0..w {
                    values[i * w + j] = base + a * i as f64 + b * j as f64;
                }
            }
            let coarse = Tensor::new(vec![1, h, w], values).unwrap();
            let mask = HoleMask::square(h, w, 7, 7, 6).unwrap();
            let (out, res) = surface_attention(&coarse, &mask, &AttentionConfig::default()).unwrap();
            assert!(res.is_some());
            let len = (1.0 + a * a + b * b).sqrt();
            let want = [-a / len, -b / len, 1.0 / len];
            let plane = h * w;
            let mut close = 0;
            let mut total = 0;
            for i in 0..h {
                for j in 0..w {
                    if !mask.is_hole(i, j) {
                        continue;
                    }
                    total += 1;
                    let ok = (0..3).all(|c| {
                        (out.data()[(c + 1) * plane + i * w + j] - want[c]).abs() <= 0.05
                    });
                    if ok {
                        close += 1;
                    }
                }
            }
            assert!(
                close * 10 >= total * 9,
                "only {}/{} hole normals within 0.05 of the plane normal",
                close,
                total
            );
        }
    }

    #[test]
    fn surface_attention_never_modifies_background() {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let coarse = {
            let data = (0..16 * 16).map(|_| rng.gen_range(0.0..5.0)).collect();
            Tensor::new(vec![1, 16, 16], data).unwrap()
        };
        let mask = HoleMask::square(16, 16, 5, 5, 4).unwrap();
        let (out, res) = surface_attention(&coarse, &mask, &AttentionConfig::default()).unwrap();
        assert!(res.is_some());
        let h = 16;
        for i in 0..h {
            for j in 0..h {
                if !mask.is_hole(i, j) {
                    assert_eq!(out.data()[i * h + j], coarse.data()[i * h + j]);
                }
            }
        }
        // Score rows (renormalised) are distributions.
        let r = res.unwrap();
        for row in 0..r.scores.n_rows() {
            let s: f64 = r.scores.row(row).iter().sum();
            assert!((s - 1.0).abs() <= 1e-9);
        }
    }
}
