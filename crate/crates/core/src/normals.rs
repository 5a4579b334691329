//! Disparity-gradient surface normals.
//!
//! Per pixel, the disparity gradients along the row and column axes span two
//! vectors (1,0,G_i) and (0,1,G_j) lying in the local surface plane; their
//! cross product (-G_i, -G_j, 1), normalised, is the surface normal. The
//! normals live in disparity space on purpose: no camera parameters are
//! involved, and the z component is always positive.
//!
//! Two equivalent routes are provided: a plain per-pixel function and a
//! graph operation realised as two fixed-kernel convolutions, so the normals
//! can sit inside a differentiable loss.

use crate::error::{Error, Result};
use crate::graph::{Graph, Padding, Var};
use crate::image::{DisparityImage, NormalMap};
use crate::tensor::Tensor;

/// Guard added to the normalisation denominator. The unnormalised z
/// component is 1, so the norm is always >= 1 and the guard only keeps the
/// differentiable path uniform with other guarded divisions.
pub const NORM_EPS: f64 = 1e-8;

fn check_min_size(h: usize, w: usize) -> Result<()> {
    if h < 3 || w < 3 {
        return Err(Error::dimension(format!(
            "normal computation needs at least 3x3 pixels, got {}x{}",
            h, w
        )));
    }
    Ok(())
}

/// Central-difference gradients with replicate borders, on a raw buffer.
/// Row gradient first (along i), then column gradient (along j).
pub(crate) fn gradients_raw(h: usize, w: usize, values: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let at = |i: isize, j: isize| -> f64 {
        let ci = i.clamp(0, h as isize - 1) as usize;
        let cj = j.clamp(0, w as isize - 1) as usize;
        values[ci * w + cj]
    };
    let mut gi = vec![0.0; h * w];
    let mut gj = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let (si, sj) = (i as isize, j as isize);
            gi[i * w + j] = (at(si + 1, sj) - at(si - 1, sj)) * 0.5;
            gj[i * w + j] = (at(si, sj + 1) - at(si, sj - 1)) * 0.5;
        }
    }
    (gi, gj)
}

/// Per-pixel unit normals from precomputed gradients.
pub(crate) fn normals_raw(h: usize, w: usize, gi: &[f64], gj: &[f64]) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0; 3 * plane];
    for idx in 0..plane {
        let vx = -gi[idx];
        let vy = -gj[idx];
        let vz = 1.0;
        let norm = ((vx * vx + vy * vy) + vz * vz).sqrt();
        let den = norm + NORM_EPS;
        out[idx] = vx / den;
        out[plane + idx] = vy / den;
        out[2 * plane + idx] = vz / den;
    }
    out
}

/// Central-difference disparity gradients (replicate borders).
pub fn disparity_gradients(d: &DisparityImage) -> Result<(Vec<f64>, Vec<f64>)> {
    check_min_size(d.height(), d.width())?;
    Ok(gradients_raw(d.height(), d.width(), d.values()))
}

/// Unit surface normals of a disparity image.
pub fn normals_from_disparity(d: &DisparityImage) -> Result<NormalMap> {
    let (gi, gj) = disparity_gradients(d)?;
    NormalMap::new(d.height(), d.width(), normals_raw(d.height(), d.width(), &gi, &gj))
}

/// Normals for a raw buffer that may contain values a `DisparityImage`
/// would reject (e.g. slightly negative network output).
pub fn normals_from_raw(h: usize, w: usize, values: &[f64]) -> Result<NormalMap> {
    check_min_size(h, w)?;
    let (gi, gj) = gradients_raw(h, w, values);
    NormalMap::new(h, w, normals_raw(h, w, &gi, &gj))
}

/// Differentiable twin of [`normals_from_disparity`]: two fixed-kernel
/// convolutions ([-1/2, 0, 1/2] along each axis, replicate padding) followed
/// by elementwise normalisation. Produces values identical to the plain
/// function.
pub fn normals_op(g: &mut Graph, d: Var) -> Result<Var> {
    let (c, h, w) = g.value(d).dims3()?;
    if c != 1 {
        return Err(Error::dimension(format!("normals_op expects 1 channel, got {}", c)));
    }
    check_min_size(h, w)?;

    let ki = g.constant(Tensor::new(vec![1, 1, 3, 1], vec![-0.5, 0.0, 0.5])?);
    let kj = g.constant(Tensor::new(vec![1, 1, 1, 3], vec![-0.5, 0.0, 0.5])?);
    let gi = g.conv2d(d, ki, 1, Padding::replicate_rect(1, 0))?;
    let gj = g.conv2d(d, kj, 1, Padding::replicate_rect(0, 1))?;

    let vx = g.mul_scalar(gi, -1.0)?;
    let vy = g.mul_scalar(gj, -1.0)?;
    let vz = g.constant(Tensor::full(vec![1, h, w], 1.0));

    let xx = g.mul(vx, vx)?;
    let yy = g.mul(vy, vy)?;
    let zz = g.mul(vz, vz)?;
    let xy = g.add(xx, yy)?;
    let sq = g.add(xy, zz)?;
    let norm = g.sqrt(sq)?;
    let den = g.add_scalar(norm, NORM_EPS)?;

    let v = g.concat(&[vx, vy, vz])?;
    let den3 = g.concat(&[den, den, den])?;
    g.div(v, den3)
}
