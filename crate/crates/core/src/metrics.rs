//! Evaluation metrics: pixel-wise MSE and Vectorial Error, plus histogram
//! distances (Jensen-Shannon, Kullback-Leibler, Wasserstein, intersection,
//! correlation) over disparity values and surface-normal components.
//!
//! Divergences use natural logarithms (JS is bounded by ln 2) and an
//! epsilon-smoothed renormalisation so empty bins never produce infinities.

use crate::error::{Error, Result};
use crate::image::{DisparityImage, HoleMask, NormalMap};
use crate::normals::normals_from_disparity;

/// Smoothing added to both histograms before KL/JS.
const SMOOTH_EPS: f64 = 1e-12;

/// Default bin count for disparity histograms.
pub const DEFAULT_DEPTH_BINS: usize = 256;
/// Default bin count per normal-component histogram.
pub const DEFAULT_SURFACE_BINS: usize = 64;

/// Binned empirical distribution: `edges` has one more entry than `mass`,
/// `mass` sums to 1 whenever any sample landed.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    edges: Vec<f64>,
    mass: Vec<f64>,
    count: usize,
}

impl Histogram {
    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn bins(&self) -> usize {
        self.mass.len()
    }

    pub fn bin_width(&self) -> f64 {
        self.edges[1] - self.edges[0]
    }

    pub fn from_mass(edges: Vec<f64>, mass: Vec<f64>, count: usize) -> Result<Self> {
        if edges.len() != mass.len() + 1 {
            return Err(Error::contract("histogram edges must be one longer than mass"));
        }
        Ok(Histogram { edges, mass, count })
    }
}

/// Uniform-bin histogram over `[lo, hi]`; out-of-range values are clamped
/// into the end bins. An empty value list yields zero mass everywhere with
/// `count() == 0` so callers can flag it.
pub fn histogram(values: &[f64], bins: usize, range: (f64, f64)) -> Result<Histogram> {
    let (lo, hi) = range;
    if bins == 0 {
        return Err(Error::contract("histogram needs at least one bin"));
    }
    if !lo.is_finite() || !hi.is_finite() || lo >= hi {
        return Err(Error::contract(format!("histogram range must satisfy lo < hi, got [{}, {}]", lo, hi)));
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|b| lo + width * b as f64).collect();
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = ((v - lo) / width).floor();
        let idx = (b as isize).clamp(0, bins as isize - 1) as usize;
        counts[idx] += 1;
    }
    let n = values.len();
    let mass = if n == 0 {
        vec![0.0; bins]
    } else {
        counts.iter().map(|&c| c as f64 / n as f64).collect()
    };
    Ok(Histogram { edges, mass, count: n })
}

fn check_same_edges(p: &Histogram, q: &Histogram) -> Result<()> {
    if p.edges != q.edges {
        return Err(Error::contract("histogram edges differ"));
    }
    Ok(())
}

fn smoothed(mass: &[f64]) -> Vec<f64> {
    let total: f64 = mass.iter().map(|m| m + SMOOTH_EPS).sum();
    mass.iter().map(|m| (m + SMOOTH_EPS) / total).collect()
}

/// Kullback-Leibler divergence KL(p || q), natural log, epsilon-smoothed.
pub fn kl_divergence(p: &Histogram, q: &Histogram) -> Result<f64> {
    check_same_edges(p, q)?;
    let ps = smoothed(p.mass());
    let qs = smoothed(q.mass());
    Ok(ps.iter().zip(&qs).map(|(a, b)| a * (a / b).ln()).sum())
}

/// Jensen-Shannon divergence, symmetric and bounded by ln 2.
pub fn js_divergence(p: &Histogram, q: &Histogram) -> Result<f64> {
    check_same_edges(p, q)?;
    let m_mass: Vec<f64> =
        p.mass().iter().zip(q.mass()).map(|(a, b)| 0.5 * (a + b)).collect();
    let m = Histogram { edges: p.edges.clone(), mass: m_mass, count: p.count + q.count };
    Ok(0.5 * kl_divergence(p, &m)? + 0.5 * kl_divergence(q, &m)?)
}

/// 1-d Wasserstein distance between the binned distributions:
/// sum over bins of |CDF_p - CDF_q| times the bin width.
pub fn wasserstein_1d(p: &Histogram, q: &Histogram) -> Result<f64> {
    check_same_edges(p, q)?;
    let w = p.bin_width();
    let mut cp = 0.0;
    let mut cq = 0.0;
    let mut total = 0.0;
    for (a, b) in p.mass().iter().zip(q.mass()) {
        cp += a;
        cq += b;
        total += (cp - cq).abs() * w;
    }
    Ok(total)
}

/// Histogram intersection: sum of bin-wise minima, in [0, 1].
pub fn hist_intersection(p: &Histogram, q: &Histogram) -> Result<f64> {
    check_same_edges(p, q)?;
    Ok(p.mass().iter().zip(q.mass()).map(|(a, b)| a.min(*b)).sum())
}

/// Pearson correlation of the two mass vectors, in [-1, 1]. A zero-variance
/// mass vector has no defined correlation and is reported as a domain error.
pub fn hist_correlation(p: &Histogram, q: &Histogram) -> Result<f64> {
    check_same_edges(p, q)?;
    let n = p.bins() as f64;
    let mp = p.mass().iter().sum::<f64>() / n;
    let mq = q.mass().iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vp = 0.0;
    let mut vq = 0.0;
    for (a, b) in p.mass().iter().zip(q.mass()) {
        cov += (a - mp) * (b - mq);
        vp += (a - mp) * (a - mp);
        vq += (b - mq) * (b - mq);
    }
    if vp == 0.0 || vq == 0.0 {
        return Err(Error::domain("histogram correlation undefined for zero-variance mass"));
    }
    Ok(cov / (vp.sqrt() * vq.sqrt()))
}

/// Mean squared disparity difference over the region.
pub fn mse(x: &DisparityImage, y: &DisparityImage, region: &HoleMask) -> Result<f64> {
    if x.height() != y.height()
        || x.width() != y.width()
        || region.height() != x.height()
        || region.width() != x.width()
    {
        return Err(Error::dimension("mse: image/region dimensions differ"));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..x.height() {
        for j in 0..x.width() {
            if region.is_hole(i, j) {
                let d = x.get(i, j) - y.get(i, j);
                sum += d * d;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::domain("mse: empty region"));
    }
    Ok(sum / n as f64)
}

/// Mean per-pixel component-wise L1 difference of normal maps over the
/// region: the metric twin of the vectorial loss.
pub fn vectorial_error(xn: &NormalMap, yn: &NormalMap, region: &HoleMask) -> Result<f64> {
    if xn.height() != yn.height()
        || xn.width() != yn.width()
        || region.height() != xn.height()
        || region.width() != xn.width()
    {
        return Err(Error::dimension("vectorial_error: dimensions differ"));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..xn.height() {
        for j in 0..xn.width() {
            if region.is_hole(i, j) {
                let a = xn.normal_at(i, j);
                let b = yn.normal_at(i, j);
                sum += (a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs();
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::domain("vectorial_error: empty region"));
    }
    Ok(sum / n as f64)
}

/// One row of distribution distances.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DistanceSet {
    pub js: f64,
    pub kl: f64,
    pub wasserstein: f64,
    pub intersection: f64,
    /// `None` when either histogram has zero variance across bins.
    pub correlation: Option<f64>,
}

/// Full evaluation of one image pair: pixel metrics plus depth and surface
/// distribution distances.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub mse: f64,
    pub ve: f64,
    pub depth: DistanceSet,
    pub surface: DistanceSet,
    pub depth_bins: usize,
    pub surface_bins: usize,
}

fn distance_set(p: &Histogram, q: &Histogram) -> Result<DistanceSet> {
    Ok(DistanceSet {
        js: js_divergence(p, q)?,
        kl: kl_divergence(p, q)?,
        wasserstein: wasserstein_1d(p, q)?,
        intersection: hist_intersection(p, q)?,
        correlation: match hist_correlation(p, q) {
            Ok(c) => Some(c),
            Err(Error::Domain(_)) => None,
            Err(e) => return Err(e),
        },
    })
}

fn region_values(d: &DisparityImage, region: &HoleMask) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..d.height() {
        for j in 0..d.width() {
            if region.is_hole(i, j) {
                out.push(d.get(i, j));
            }
        }
    }
    out
}

fn region_normal_components(n: &NormalMap, region: &HoleMask) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..n.height() {
        for j in 0..n.width() {
            if region.is_hole(i, j) {
                let v = n.normal_at(i, j);
                out.extend_from_slice(&v);
            }
        }
    }
    out
}

/// Compute every metric for a ground-truth/generated pair over the region.
/// Depth histograms use `depth_bins` over the observed min/max of the
/// ground-truth crop; surface histograms pool the three normal components
/// into `surface_bins` over [-1, 1]. KL is reported as KL(gt || gen).
pub fn evaluate_pair(
    gt: &DisparityImage,
    gen: &DisparityImage,
    region: &HoleMask,
    depth_bins: usize,
    surface_bins: usize,
) -> Result<MetricReport> {
    let gt_n = normals_from_disparity(gt)?;
    let gen_n = normals_from_disparity(gen)?;

    let mse_v = mse(gt, gen, region)?;
    let ve_v = vectorial_error(&gt_n, &gen_n, region)?;

    let gt_depth = region_values(gt, region);
    let gen_depth = region_values(gen, region);
    let lo = gt_depth.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = gt_depth.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // Degenerate (constant) crops still need a valid range.
    let (lo, hi) = if lo < hi { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
    let hp = histogram(&gt_depth, depth_bins, (lo, hi))?;
    let hq = histogram(&gen_depth, depth_bins, (lo, hi))?;
    let depth = distance_set(&hp, &hq)?;

    let sp = histogram(&region_normal_components(&gt_n, region), surface_bins, (-1.0, 1.0))?;
    let sq = histogram(&region_normal_components(&gen_n, region), surface_bins, (-1.0, 1.0))?;
    let surface = distance_set(&sp, &sq)?;

    Ok(MetricReport { mse: mse_v, ve: ve_v, depth, surface, depth_bins, surface_bins })
}

// ── Report emitters ─────────────────────────────────────────────────

fn fmt_corr(c: Option<f64>) -> String {
    match c {
        Some(v) => format!("{:.6}", v),
        None => "undefined".to_string(),
    }
}

/// Pixel-metric table (label, MSE, VE) as CSV; `header` lines are echoed as
/// comments for reproducibility.
pub fn pixel_table_csv(rows: &[(String, f64, f64)], header: &[String]) -> String {
    let mut out = String::new();
    for h in header {
        out.push_str(&format!("# {}\n", h));
    }
    out.push_str("label,mse,ve\n");
    for (label, mse, ve) in rows {
        out.push_str(&format!("{},{:.6},{:.6}\n", label, mse, ve));
    }
    out
}

/// Distribution-distance table as CSV, five metrics x (depth, surface).
pub fn distance_table_csv(rows: &[(String, MetricReport)], header: &[String]) -> String {
    let mut out = String::new();
    for h in header {
        out.push_str(&format!("# {}\n", h));
    }
    out.push_str(
        "label,js_depth,js_surface,kl_depth,kl_surface,wasserstein_depth,wasserstein_surface,\
         intersection_depth,intersection_surface,correlation_depth,correlation_surface\n",
    );
    for (label, r) in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}\n",
            label,
            r.depth.js,
            r.surface.js,
            r.depth.kl,
            r.surface.kl,
            r.depth.wasserstein,
            r.surface.wasserstein,
            r.depth.intersection,
            r.surface.intersection,
            fmt_corr(r.depth.correlation),
            fmt_corr(r.surface.correlation),
        ));
    }
    out
}

/// Distribution-distance table as a markdown grid.
pub fn distance_table_markdown(rows: &[(String, MetricReport)], header: &[String]) -> String {
    let mut out = String::new();
    for h in header {
        out.push_str(&format!("> {}\n", h));
    }
    out.push('\n');
    out.push_str(
        "| | Jensen-Shannon | | Kullback-Leibler | | Wasserstein | | Hist. Intersection | | Hist. Correlation | |\n",
    );
    out.push_str("|---|---|---|---|---|---|---|---|---|---|---|\n");
    out.push_str(
        "| | Depth | Surface | Depth | Surface | Depth | Surface | Depth | Surface | Depth | Surface |\n",
    );
    for (label, r) in rows {
        out.push_str(&format!(
            "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.5} | {:.5} | {:.4} | {:.4} | {} | {} |\n",
            label,
            r.depth.js,
            r.surface.js,
            r.depth.kl,
            r.surface.kl,
            r.depth.wasserstein,
            r.surface.wasserstein,
            r.depth.intersection,
            r.surface.intersection,
            fmt_corr(r.depth.correlation),
            fmt_corr(r.surface.correlation),
        ));
    }
    out
}
