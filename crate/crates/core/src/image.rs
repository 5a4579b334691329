//! Image-domain value types: disparity maps, normal maps and hole masks.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// H x W grid of non-negative disparity values with a per-pixel validity
/// flag (`false` marks unknown/shadow pixels).
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityImage {
    height: usize,
    width: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl DisparityImage {
    pub fn new(height: usize, width: usize, values: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if values.len() != height * width || valid.len() != height * width {
            return Err(Error::dimension(format!(
                "disparity buffers must be {}x{}={} elements",
                height,
                width,
                height * width
            )));
        }
        for (v, ok) in values.iter().zip(&valid) {
            if *ok && (!v.is_finite() || *v < 0.0) {
                return Err(Error::domain(format!("valid disparity must be finite and >= 0, got {}", v)));
            }
        }
        Ok(DisparityImage { height, width, values, valid })
    }

    /// All pixels valid.
    pub fn from_values(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(height, width, values, vec![true; n])
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        DisparityImage {
            height,
            width,
            values: vec![value; height * width],
            valid: vec![true; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.width + j] = v;
    }

    pub fn is_valid(&self, i: usize, j: usize) -> bool {
        self.valid[i * self.width + j]
    }

    pub fn set_valid(&mut self, i: usize, j: usize, ok: bool) {
        self.valid[i * self.width + j] = ok;
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    /// \[1,H,W\] tensor of the raw values.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.height, self.width], self.values.clone()).expect("shape")
    }
}

/// H x W field of unit surface-normal vectors, stored planar:
/// channel 0 = n_x (row direction), 1 = n_y (column direction), 2 = n_z.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalMap {
    height: usize,
    width: usize,
    vectors: Vec<f64>,
}

impl NormalMap {
    pub fn new(height: usize, width: usize, vectors: Vec<f64>) -> Result<Self> {
        if vectors.len() != 3 * height * width {
            return Err(Error::dimension(format!(
                "normal map needs 3x{}x{} values, got {}",
                height,
                width,
                vectors.len()
            )));
        }
        Ok(NormalMap { height, width, vectors })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn components(&self) -> &[f64] {
        &self.vectors
    }

    pub fn normal_at(&self, i: usize, j: usize) -> [f64; 3] {
        let plane = self.height * self.width;
        let idx = i * self.width + j;
        [self.vectors[idx], self.vectors[plane + idx], self.vectors[2 * plane + idx]]
    }

    /// \[3,H,W\] tensor of the components.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![3, self.height, self.width], self.vectors.clone()).expect("shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::dimension(format!("normal map tensor needs 3 channels, got {}", c)));
        }
        NormalMap::new(h, w, t.data().to_vec())
    }
}

/// Binary H x W mask: `true` marks the hole (region to reconstruct),
/// `false` the known background.
#[derive(Clone, Debug, PartialEq)]
pub struct HoleMask {
    height: usize,
    width: usize,
    hole: Vec<bool>,
}

/// Bounding box in image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn contains(&self, i: usize, j: usize) -> bool {
        i >= self.top && i < self.top + self.height && j >= self.left && j < self.left + self.width
    }

    /// Grow by `r` on every side, clipped to an H x W image.
    pub fn dilate_clipped(&self, r: usize, h: usize, w: usize) -> Region {
        let top = self.top.saturating_sub(r);
        let left = self.left.saturating_sub(r);
        let bottom = (self.top + self.height + r).min(h);
        let right = (self.left + self.width + r).min(w);
        Region { top, left, height: bottom - top, width: right - left }
    }
}

impl HoleMask {
    pub fn new(height: usize, width: usize, hole: Vec<bool>) -> Result<Self> {
        if hole.len() != height * width {
            return Err(Error::dimension("hole mask buffer does not match dimensions"));
        }
        Ok(HoleMask { height, width, hole })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        HoleMask { height, width, hole: vec![false; height * width] }
    }

    /// Square hole with the given top-left corner.
    pub fn square(height: usize, width: usize, top: usize, left: usize, side: usize) -> Result<Self> {
        if top + side > height || left + side > width {
            return Err(Error::spec("hole exceeds image bounds"));
        }
        let mut hole = vec![false; height * width];
        for i in top..top + side {
            for j in left..left + side {
                hole[i * width + j] = true;
            }
        }
        Ok(HoleMask { height, width, hole })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_hole(&self, i: usize, j: usize) -> bool {
        self.hole[i * self.width + j]
    }

    pub fn flags(&self) -> &[bool] {
        &self.hole
    }

    pub fn hole_count(&self) -> usize {
        self.hole.iter().filter(|&&h| h).count()
    }

    pub fn is_empty_hole(&self) -> bool {
        self.hole_count() == 0
    }

    /// Bounding box of the hole, if any.
    pub fn bbox(&self) -> Option<Region> {
        let (mut top, mut left) = (usize::MAX, usize::MAX);
        let (mut bottom, mut right) = (0usize, 0usize);
        let mut any = false;
        for i in 0..self.height {
            for j in 0..self.width {
                if self.hole[i * self.width + j] {
                    any = true;
                    top = top.min(i);
                    left = left.min(j);
                    bottom = bottom.max(i);
                    right = right.max(j);
                }
            }
        }
        any.then(|| Region { top, left, height: bottom - top + 1, width: right - left + 1 })
    }

    /// Hole pixels whose full (2r+1)-window lies inside the hole.
    pub fn eroded(&self, r: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.height {
            for j in 0..self.width {
                if !self.is_hole(i, j) {
                    continue;
                }
                let ri = r as isize;
                let mut interior =
                    i as isize - ri >= 0
                        && i + r < self.height
                        && j as isize - ri >= 0
                        && j + r < self.width;
                if interior {
                    'scan: for di in -ri..=ri {
                        for dj in -ri..=ri {
                            let y = (i as isize + di) as usize;
                            let x = (j as isize + dj) as usize;
                            if !self.is_hole(y, x) {
                                interior = false;
                                break 'scan;
                            }
                        }
                    }
                }
                if interior {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// \[1,H,W\] tensor with 1.0 on the hole.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.hole.iter().map(|&h| if h { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![1, self.height, self.width], data).expect("shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disparity_rejects_negative_valid_pixels() {
        assert!(DisparityImage::from_values(2, 2, vec![0.0, 1.0, -1.0, 2.0]).is_err());
        // Negative behind an invalid flag is tolerated.
        assert!(DisparityImage::new(2, 2, vec![0.0, 1.0, -1.0, 2.0], vec![true, true, false, true])
            .is_ok());
    }

    #[test]
    fn bbox_and_erosion() {
        let m = HoleMask::square(8, 8, 2, 3, 4).unwrap();
        let b = m.bbox().unwrap();
        assert_eq!(b, Region { top: 2, left: 3, height: 4, width: 4 });
        let inner = m.eroded(1);
        assert_eq!(inner.len(), 4); // 2x2 core of a 4x4 hole
        assert!(HoleMask::empty(4, 4).bbox().is_none());
    }

    #[test]
    fn hole_fraction_is_exact() {
        let m = HoleMask::square(10, 10, 1, 1, 5).unwrap();
        assert_eq!(m.hole_count(), 25);
    }
}
