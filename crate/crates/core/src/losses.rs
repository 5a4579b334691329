//! Training objectives: L1, vectorial (normal-map) loss, WGAN-GP critic
//! loss and the composite generator loss.
//!
//! The gradient penalty needs the gradient of the critic with respect to an
//! interpolated input, differentiated once more with respect to the critic
//! parameters. `Graph::grad_of` re-enters the backward pass as forward
//! nodes, which is exact for the piecewise-linear critics used here.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::HoleMask;
use crate::normals::normals_op;
use crate::tensor::Tensor;

/// Guard under the gradient-penalty norm.
const GP_EPS: f64 = 1e-8;

/// Weights of the composite objective. `alpha = 0` disables the vectorial
/// term and reproduces the plain contextual-attention objective shape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Adversarial weight.
    pub beta: f64,
    /// L1 weight.
    pub phi: f64,
    /// Vectorial-loss weight.
    pub alpha: f64,
    /// Gradient-penalty coefficient.
    pub lambda_gp: f64,
    /// Critic updates per generator update.
    pub n_critic: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { beta: 0.001, phi: 1.0, alpha: 1.0, lambda_gp: 10.0, n_critic: 5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.beta, self.phi, self.alpha, self.lambda_gp];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("loss weights must be finite"));
        }
        if self.phi <= 0.0 {
            return Err(Error::contract("phi must be positive"));
        }
        if self.alpha < 0.0 {
            return Err(Error::contract("alpha must be non-negative"));
        }
        if self.n_critic == 0 {
            return Err(Error::contract("n_critic must be positive"));
        }
        Ok(())
    }
}

/// Per-step scalar summary of both objectives.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub g_total: f64,
    pub g_adv: f64,
    pub g_l1: f64,
    pub g_vec: f64,
    pub d_total: f64,
    pub d_wasserstein_estimate: f64,
    pub d_gp: f64,
}

impl LossReport {
    /// Sum the generator components of two stage reports.
    pub fn add_generator(&mut self, other: &LossReport) {
        self.g_total += other.g_total;
        self.g_adv += other.g_adv;
        self.g_l1 += other.g_l1;
        self.g_vec += other.g_vec;
    }
}

/// Critic-side scalar summary of one update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CriticTerms {
    pub total: f64,
    /// mean critic(real) - mean critic(fake): the Wasserstein estimate.
    pub wasserstein_estimate: f64,
    pub gp: f64,
}

/// Mean absolute difference over all elements.
pub fn l1_loss(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
    let d = g.sub(x, y)?;
    let a = g.abs(d)?;
    g.mean(a)
}

/// Mean absolute difference over masked pixels only.
pub fn l1_loss_masked(g: &mut Graph, x: Var, y: Var, mask: &HoleMask) -> Result<Var> {
    let count = mask.hole_count();
    if count == 0 {
        return Err(Error::domain("l1_loss_masked: empty mask"));
    }
    let d = g.sub(x, y)?;
    let a = g.abs(d)?;
    let m = g.constant(mask.to_tensor());
    let sel = g.mul(a, m)?;
    let s = g.sum(sel)?;
    g.mul_scalar(s, 1.0 / count as f64)
}

/// Per-pixel component-wise L1 difference between two normal maps, averaged
/// over pixels: each pixel contributes |dx| + |dy| + |dz|.
pub fn vectorial_loss(g: &mut Graph, xn: Var, yn: Var) -> Result<Var> {
    let (cx, h, w) = g.value(xn).dims3()?;
    let (cy, _, _) = g.value(yn).dims3()?;
    if cx != 3 || cy != 3 {
        return Err(Error::dimension("vectorial_loss expects [3,H,W] normal maps"));
    }
    let d = g.sub(xn, yn)?;
    let a = g.abs(d)?;
    let s = g.sum(a)?;
    g.mul_scalar(s, 1.0 / (h * w) as f64)
}

/// Vectorial loss restricted to hole pixels.
pub fn vectorial_loss_masked(g: &mut Graph, xn: Var, yn: Var, mask: &HoleMask) -> Result<Var> {
    let (cx, _, _) = g.value(xn).dims3()?;
    if cx != 3 {
        return Err(Error::dimension("vectorial_loss expects [3,H,W] normal maps"));
    }
    let count = mask.hole_count();
    if count == 0 {
        return Err(Error::domain("vectorial_loss_masked: empty mask"));
    }
    let d = g.sub(xn, yn)?;
    let a = g.abs(d)?;
    let m1 = g.constant(mask.to_tensor());
    let m3 = g.concat(&[m1, m1, m1])?;
    let sel = g.mul(a, m3)?;
    let s = g.sum(sel)?;
    g.mul_scalar(s, 1.0 / count as f64)
}

/// WGAN-GP gradient penalty `(||grad_x critic(x_hat)|| - 1)^2` at the
/// interpolate `x_hat = u*real + (1-u)*fake`. The inner gradient is emitted
/// as graph nodes, so the penalty is differentiable with respect to the
/// critic parameters.
pub fn gradient_penalty<F>(g: &mut Graph, critic: &F, real: Var, fake: Var, u: f64) -> Result<Var>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if g.value(real).shape() != g.value(fake).shape() {
        return Err(Error::dimension("gradient_penalty: real/fake shapes differ"));
    }
    let ru = g.mul_scalar(real, u)?;
    let fu = g.mul_scalar(fake, 1.0 - u)?;
    let xhat = g.add(ru, fu)?;
    let out = critic(g, xhat)?;
    if !g.value(out).is_scalar() {
        return Err(Error::contract("gradient_penalty: critic must be scalar-valued"));
    }
    let grad = g.grad_of(out, xhat)?;
    let sq = g.mul(grad, grad)?;
    let ssq = g.sum(sq)?;
    let guarded = g.add_scalar(ssq, GP_EPS)?;
    let norm = g.sqrt(guarded)?;
    let shifted = g.sub_scalar(norm, 1.0)?;
    g.mul(shifted, shifted)
}

/// Critic objective without the surface-discrimination channel check:
/// `critic(fake) - critic(real) + lambda_gp * GP`.
pub fn wgan_critic_loss<F>(
    g: &mut Graph,
    critic: &F,
    real_in: Var,
    fake_in: Var,
    weights: &LossWeights,
    u: f64,
) -> Result<(Var, CriticTerms)>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let c_fake = critic(g, fake_in)?;
    let c_real = critic(g, real_in)?;
    if !g.value(c_fake).is_scalar() || !g.value(c_real).is_scalar() {
        return Err(Error::contract("critic must be scalar-valued"));
    }
    let w_term = g.sub(c_fake, c_real)?;
    let gp = gradient_penalty(g, critic, real_in, fake_in, u)?;
    let gp_scaled = g.mul_scalar(gp, weights.lambda_gp)?;
    let total = g.add(w_term, gp_scaled)?;
    let terms = CriticTerms {
        total: g.value(total).scalar_value()?,
        wasserstein_estimate: g.value(c_real).scalar_value()? - g.value(c_fake).scalar_value()?,
        gp: g.value(gp).scalar_value()?,
    };
    Ok((total, terms))
}

/// Surface-discriminating critic loss: inputs must be 4-channel
/// (disparity concatenated with normals).
pub fn critic_loss<F>(
    g: &mut Graph,
    critic: &F,
    real_in: Var,
    fake_in: Var,
    weights: &LossWeights,
    u: f64,
) -> Result<(Var, CriticTerms)>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    for (name, v) in [("real", real_in), ("fake", fake_in)] {
        let c = g.value(v).channels()?;
        if c != 4 {
            return Err(Error::contract(format!(
                "critic_loss: {} input must be 4-channel disparity+normals, got {}",
                name, c
            )));
        }
    }
    wgan_critic_loss(g, critic, real_in, fake_in, weights, u)
}

/// Composite generator objective for one output stage:
/// `beta*(-critic(y)) + phi*L1(y,x) + alpha*V(normals(y), normals(x))`.
///
/// The critic closure is expected to attach whatever conditioning it uses
/// (normals concatenation when surface discrimination is on). When
/// `vl_region` is given the vectorial term is restricted to hole pixels.
/// With `alpha == 0` the normal maps are not computed and `g_vec` reports 0.
pub fn generator_loss<F>(
    g: &mut Graph,
    critic: &F,
    y: Var,
    x: Var,
    weights: &LossWeights,
    vl_region: Option<&HoleMask>,
) -> Result<(Var, LossReport)>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if g.value(y).shape() != g.value(x).shape() {
        return Err(Error::dimension("generator_loss: shapes differ"));
    }
    let adv = if weights.beta != 0.0 {
        let c = critic(g, y)?;
        if !g.value(c).is_scalar() {
            return Err(Error::contract("generator_loss: critic must be scalar-valued"));
        }
        g.mul_scalar(c, -1.0)?
    } else {
        g.constant(Tensor::scalar(0.0))
    };
    let l1 = l1_loss(g, y, x)?;
    let vec = if weights.alpha != 0.0 {
        let yn = normals_op(g, y)?;
        let xn = normals_op(g, x)?;
        match vl_region {
            None => vectorial_loss(g, yn, xn)?,
            Some(mask) => vectorial_loss_masked(g, yn, xn, mask)?,
        }
    } else {
        g.constant(Tensor::scalar(0.0))
    };

    let adv_w = g.mul_scalar(adv, weights.beta)?;
    let l1_w = g.mul_scalar(l1, weights.phi)?;
    let vec_w = g.mul_scalar(vec, weights.alpha)?;
    let partial = g.add(adv_w, l1_w)?;
    let total = g.add(partial, vec_w)?;

    let report = LossReport {
        g_total: g.value(total).scalar_value()?,
        g_adv: g.value(adv).scalar_value()?,
        g_l1: g.value(l1).scalar_value()?,
        g_vec: g.value(vec).scalar_value()?,
        ..LossReport::default()
    };
    Ok((total, report))
}
