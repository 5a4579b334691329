//! Toy two-stage generator (coarse encoder-decoder plus surface-attention
//! merge) and the 4-channel surface-conditioned critic.
//!
//! Parameters live outside any graph; each training step inserts them as
//! leaves into a fresh graph. The generator always pastes the known
//! background over its raw output, so background pixels are bit-equal to
//! the input by construction.

pub mod checkpoint;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{surface_attention, AttentionConfig, AttentionResult, TransferMode};
use crate::error::{Error, Result};
use crate::graph::{Graph, PadMode, Padding, Var};
use crate::image::HoleMask;
use crate::losses::LossWeights;
use crate::normals::normals_op;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Linear,
}

/// Shape and wiring of one convolution layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    pub pad: Padding,
    pub act: Activation,
    /// Nearest-neighbour 2x upsample before the convolution.
    pub upsample: bool,
}

impl ConvSpec {
    fn new(in_ch: usize, out_ch: usize, stride: usize, pad: Padding, act: Activation) -> Self {
        ConvSpec { in_ch, out_ch, stride, pad, act, upsample: false }
    }

    fn upsampled(mut self) -> Self {
        self.upsample = true;
        self
    }
}

/// One 3x3 convolution layer with bias.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub spec: ConvSpec,
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    fn init(spec: ConvSpec, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (spec.in_ch * 9) as f64;
        let std = (2.0 / fan_in).sqrt();
        let gauss = Normal::new(0.0, std).expect("valid std");
        let kernel = Tensor::new(
            vec![spec.out_ch, spec.in_ch, 3, 3],
            (0..spec.out_ch * spec.in_ch * 9).map(|_| gauss.sample(rng)).collect(),
        )
        .expect("kernel shape");
        let bias = Tensor::zeros(vec![spec.out_ch]);
        ConvLayer { spec, kernel, bias }
    }

    fn apply(&self, g: &mut Graph, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let x = if self.spec.upsample { g.upsample2(x)? } else { x };
        let c = g.conv2d(x, kernel, self.spec.stride, self.spec.pad)?;
        let cb = g.add_channel_bias(c, bias)?;
        match self.spec.act {
            Activation::LeakyRelu(s) => g.leaky_relu(cb, s),
            Activation::Linear => Ok(cb),
        }
    }
}

const LRELU: Activation = Activation::LeakyRelu(0.2);

/// Coarse-stage layer stack: 4-conv encoder (stride 2 twice), 4-conv
/// decoder with upsample+conv, 2-channel input (masked disparity, mask),
/// 1-channel output. Replicate padding avoids inventing depth edges at the
/// borders.
fn generator_specs(w: usize) -> Vec<ConvSpec> {
    let rp = Padding::replicate(1);
    vec![
        ConvSpec::new(2, w, 1, rp, LRELU),
        ConvSpec::new(w, 2 * w, 2, rp, LRELU),
        ConvSpec::new(2 * w, 4 * w, 2, rp, LRELU),
        ConvSpec::new(4 * w, 4 * w, 1, rp, LRELU),
        ConvSpec::new(4 * w, 2 * w, 1, rp, LRELU).upsampled(),
        ConvSpec::new(2 * w, w, 1, rp, LRELU).upsampled(),
        ConvSpec::new(w, w, 1, rp, LRELU),
        ConvSpec::new(w, 1, 1, rp, Activation::Linear),
    ]
}

/// Refinement merge: one 3x3 convolution over coarse + attention features.
fn merge_spec() -> ConvSpec {
    ConvSpec::new(5, 1, 1, Padding::replicate(1), Activation::Linear)
}

/// Critic stack: four zero-padded convolutions (zero padding keeps the
/// gradient-penalty path expressible), then a per-channel global mean and a
/// linear head.
fn critic_specs(w: usize, in_ch: usize) -> Vec<ConvSpec> {
    let zp = Padding { mode: PadMode::Zero, rows: 1, cols: 1 };
    vec![
        ConvSpec::new(in_ch, w, 2, zp, LRELU),
        ConvSpec::new(w, 2 * w, 2, zp, LRELU),
        ConvSpec::new(2 * w, 2 * w, 1, zp, LRELU),
        ConvSpec::new(2 * w, 2 * w, 1, zp, LRELU),
    ]
}

#[derive(Clone, Debug)]
pub struct GeneratorParams {
    pub layers: Vec<ConvLayer>,
    pub merge: ConvLayer,
    pub width: usize,
    pub seed: u64,
}

impl GeneratorParams {
    pub fn init(width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = generator_specs(width)
            .into_iter()
            .map(|s| ConvLayer::init(s, &mut rng))
            .collect();
        // The merge starts as the identity on the coarse channel, so the
        // refined stage begins where the coarse stage left off.
        let mut merge = ConvLayer::init(merge_spec(), &mut rng);
        for v in merge.kernel.data_mut().iter_mut() {
            *v *= 0.01;
        }
        merge.kernel.data_mut()[4] += 1.0; // centre tap of input channel 0
        GeneratorParams { layers, merge, width, seed }
    }

    pub fn param_tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.kernel);
            out.push(&l.bias);
        }
        out.push(&self.merge.kernel);
        out.push(&self.merge.bias);
        out
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.kernel);
            out.push(&mut l.bias);
        }
        out.push(&mut self.merge.kernel);
        out.push(&mut self.merge.bias);
        out
    }

    /// Insert every parameter into the graph; `trainable` controls whether
    /// backward computes gradients for them.
    pub fn insert(&self, g: &mut Graph, trainable: bool) -> GeneratorVars {
        let mut ins = |t: &Tensor| {
            let mut t = t.clone();
            t.requires_grad = trainable;
            g.leaf(t)
        };
        let layers: Vec<(Var, Var)> =
            self.layers.iter().map(|l| (ins(&l.kernel), ins(&l.bias))).collect();
        let merge = (ins(&self.merge.kernel), ins(&self.merge.bias));
        GeneratorVars { layers, merge }
    }
}

pub struct GeneratorVars {
    pub layers: Vec<(Var, Var)>,
    pub merge: (Var, Var),
}

impl GeneratorVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (k, b) in &self.layers {
            out.push(*k);
            out.push(*b);
        }
        out.push(self.merge.0);
        out.push(self.merge.1);
        out
    }
}

#[derive(Clone, Debug)]
pub struct CriticParams {
    pub layers: Vec<ConvLayer>,
    pub head_w: Tensor,
    pub head_b: Tensor,
    pub in_channels: usize,
    pub width: usize,
    pub seed: u64,
}

impl CriticParams {
    pub fn init(width: usize, in_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers: Vec<ConvLayer> = critic_specs(width, in_channels)
            .into_iter()
            .map(|s| ConvLayer::init(s, &mut rng))
            .collect();
        let head_ch = layers.last().expect("critic has layers").spec.out_ch;
        let gauss = Normal::new(0.0, (1.0 / head_ch as f64).sqrt()).expect("valid std");
        let head_w = Tensor::new(
            vec![head_ch],
            (0..head_ch).map(|_| gauss.sample(&mut rng)).collect(),
        )
        .expect("head shape");
        let head_b = Tensor::zeros(vec![1]);
        CriticParams { layers, head_w, head_b, in_channels, width, seed }
    }

    pub fn param_tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.kernel);
            out.push(&l.bias);
        }
        out.push(&self.head_w);
        out.push(&self.head_b);
        out
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.kernel);
            out.push(&mut l.bias);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn insert(&self, g: &mut Graph, trainable: bool) -> CriticVars {
        let mut ins = |t: &Tensor| {
            let mut t = t.clone();
            t.requires_grad = trainable;
            g.leaf(t)
        };
        let layers: Vec<(Var, Var)> =
            self.layers.iter().map(|l| (ins(&l.kernel), ins(&l.bias))).collect();
        let head_w = ins(&self.head_w);
        let head_b = ins(&self.head_b);
        CriticVars { layers, head_w, head_b }
    }
}

pub struct CriticVars {
    pub layers: Vec<(Var, Var)>,
    pub head_w: Var,
    pub head_b: Var,
}

impl CriticVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (k, b) in &self.layers {
            out.push(*k);
            out.push(*b);
        }
        out.push(self.head_w);
        out.push(self.head_b);
        out
    }
}

/// Raw critic stack on an already-assembled input: convolutions, global
/// per-channel mean, linear head. This is the function the gradient penalty
/// differentiates.
pub fn critic_stack(
    g: &mut Graph,
    params: &CriticParams,
    vars: &CriticVars,
    x: Var,
) -> Result<Var> {
    let (c, _, _) = g.value(x).dims3()?;
    if c != params.in_channels {
        return Err(Error::contract(format!(
            "critic stack expects {} input channels, got {}",
            params.in_channels, c
        )));
    }
    let mut h = x;
    for (layer, (kv, bv)) in params.layers.iter().zip(&vars.layers) {
        h = layer.apply(g, h, *kv, *bv)?;
    }
    let pooled = g.spatial_mean(h)?;
    let weighted = g.mul(pooled, vars.head_w)?;
    let s = g.sum(weighted)?;
    g.add(s, vars.head_b)
}

/// Critic entry point on a disparity image. With surface discrimination the
/// normals are computed on-graph and concatenated, so the critic judges
/// disparity and surface structure together; without it the stack sees the
/// raw 1-channel disparity (the ablation baseline).
pub fn critic_forward(
    g: &mut Graph,
    params: &CriticParams,
    vars: &CriticVars,
    disparity: Var,
    surface_discrimination: bool,
) -> Result<Var> {
    let input = if surface_discrimination {
        let n = normals_op(g, disparity)?;
        g.concat(&[disparity, n])?
    } else {
        disparity
    };
    critic_stack(g, params, vars, input)
}

/// Outputs of one generator pass.
pub struct GenOutputs {
    pub coarse: Var,
    pub refined: Var,
    pub attention: Option<AttentionResult>,
}

/// Run the generator: coarse fill, paste of the known background, optional
/// surface-attention refinement plus merge convolution, second paste.
///
/// The attention transfer enters the graph as a constant: argmax transfer
/// is piecewise constant in the coarse output, so its gradient contribution
/// is zero almost everywhere.
#[allow(clippy::too_many_arguments)]
pub fn generate(
    g: &mut Graph,
    params: &GeneratorParams,
    vars: &GeneratorVars,
    masked_d: Var,
    mask_var: Var,
    mask: &HoleMask,
    attention_on: bool,
    attn_cfg: &AttentionConfig,
) -> Result<GenOutputs> {
    let (c, _, _) = g.value(masked_d).dims3()?;
    if c != 1 || g.value(mask_var).shape() != g.value(masked_d).shape() {
        return Err(Error::dimension("generate expects [1,H,W] masked disparity and mask"));
    }
    let input = g.concat(&[masked_d, mask_var])?;
    let mut h = input;
    for (layer, (kv, bv)) in params.layers.iter().zip(&vars.layers) {
        h = layer.apply(g, h, *kv, *bv)?;
    }
    if g.value(h).shape() != g.value(masked_d).shape() {
        return Err(Error::dimension(format!(
            "generator output shape {:?} does not match input",
            g.value(h).shape()
        )));
    }
    let paste = |g: &mut Graph, raw: Var| -> Result<Var> {
        let neg = g.mul_scalar(mask_var, -1.0)?;
        let inv = g.add_scalar(neg, 1.0)?;
        let hole_part = g.mul(mask_var, raw)?;
        let known_part = g.mul(inv, masked_d)?;
        g.add(hole_part, known_part)
    };
    let coarse = paste(g, h)?;

    if !attention_on || mask.is_empty_hole() {
        return Ok(GenOutputs { coarse, refined: coarse, attention: None });
    }

    let (features, attention) = surface_attention(g.value(coarse), mask, attn_cfg)?;
    let attn_const = g.constant(features);
    let merged_in = g.concat(&[coarse, attn_const])?;
    let raw2 = params.merge.apply(g, merged_in, vars.merge.0, vars.merge.1)?;
    let refined = paste(g, raw2)?;
    Ok(GenOutputs { coarse, refined, attention })
}

/// Training configuration; flags select the ablation row.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub image_size: usize,
    pub hole_size: usize,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Base channel width of both networks.
    pub width: usize,
    pub vectorial_loss_on: bool,
    pub surface_attention_on: bool,
    pub surface_discrimination_on: bool,
    pub attention: AttentionConfig,
    /// Restrict the vectorial loss to hole pixels.
    pub vl_hole_only: bool,
    /// Disparity normalisation scale; inferred from the stream when `None`.
    pub norm_max: Option<f64>,
    /// Training noise sigma for synthetic streams.
    pub sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            image_size: 64,
            hole_size: 24,
            batch: 1,
            steps: 300,
            lr: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.9,
            weights: LossWeights::default(),
            seed: 0,
            width: 16,
            vectorial_loss_on: true,
            surface_attention_on: true,
            surface_discrimination_on: true,
            attention: AttentionConfig::default(),
            vl_hole_only: false,
            norm_max: None,
            sigma: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.attention.validate()?;
        if !self.image_size.is_multiple_of(4) {
            return Err(Error::contract("image size must be divisible by 4"));
        }
        let margin = self.attention.patch / 2;
        if self.hole_size + 2 * margin.max(1) > self.image_size {
            return Err(Error::contract(format!(
                "hole {} plus margin does not fit into image {}",
                self.hole_size, self.image_size
            )));
        }
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::contract("steps and batch must be positive"));
        }
        if self.width == 0 {
            return Err(Error::contract("network width must be positive"));
        }
        Ok(())
    }

    /// Weights with the vectorial flag applied.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if !self.vectorial_loss_on {
            w.alpha = 0.0;
        }
        w
    }

    pub fn critic_in_channels(&self) -> usize {
        if self.surface_discrimination_on {
            4
        } else {
            1
        }
    }

    pub fn transfer_mode(&self) -> TransferMode {
        self.attention.transfer
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn scaled_scene(seed: u64, size: usize) -> (Tensor, HoleMask) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..size * size).map(|_| rng.gen_range(0.0..1.0)).collect();
        let t = Tensor::new(vec![1, size, size], values).unwrap();
        let mask = HoleMask::square(size, size, size / 4, size / 4, size / 3).unwrap();
        (t, mask)
    }

    fn masked_inputs(g: &mut Graph, x: &Tensor, mask: &HoleMask) -> (Var, Var) {
        let mt = mask.to_tensor();
        let mut masked = x.clone();
        for (v, m) in masked.data_mut().iter_mut().zip(mt.data()) {
            *v *= 1.0 - m;
        }
        (g.constant(masked), g.constant(mt))
    }

    #[test]
    fn generator_output_shapes_and_paste() {
        let params = GeneratorParams::init(4, 7);
        let (x, mask) = scaled_scene(1, 16);
        let mut g = Graph::new();
        let vars = params.insert(&mut g, false);
        let (md, mv) = masked_inputs(&mut g, &x, &mask);
        let out = generate(
            &mut g,
            &params,
            &vars,
            md,
            mv,
            &mask,
            true,
            &AttentionConfig::default(),
        )
        .unwrap();
        assert_eq!(g.value(out.coarse).shape(), &[1, 16, 16]);
        assert_eq!(g.value(out.refined).shape(), &[1, 16, 16]);
        assert!(out.attention.is_some());
        for i in 0..16 {
            for j in 0..16 {
                if !mask.is_hole(i, j) {
                    let want = x.data()[i * 16 + j];
                    assert_eq!(g.value(out.coarse).data()[i * 16 + j], want);
                    assert_eq!(g.value(out.refined).data()[i * 16 + j], want);
                }
            }
        }
        assert!(g.value(out.refined).all_finite());
    }

    #[test]
    fn generator_empty_hole_is_identity_paste() {
        let params = GeneratorParams::init(4, 3);
        let (x, _) = scaled_scene(2, 16);
        let mask = HoleMask::empty(16, 16);
        let mut g = Graph::new();
        let vars = params.insert(&mut g, false);
        let (md, mv) = masked_inputs(&mut g, &x, &mask);
        let out =
            generate(&mut g, &params, &vars, md, mv, &mask, true, &AttentionConfig::default())
                .unwrap();
        assert_eq!(g.value(out.refined).data(), x.data());
        assert!(out.attention.is_none());
    }

    #[test]
    fn generator_is_deterministic() {
        let run = || {
            let params = GeneratorParams::init(4, 11);
            let (x, mask) = scaled_scene(3, 16);
            let mut g = Graph::new();
            let vars = params.insert(&mut g, false);
            let (md, mv) = masked_inputs(&mut g, &x, &mask);
            let out = generate(
                &mut g,
                &params,
                &vars,
                md,
                mv,
                &mask,
                true,
                &AttentionConfig::default(),
            )
            .unwrap();
            g.value(out.refined).data().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn critic_channel_contract() {
        let params4 = CriticParams::init(4, 4, 5);
        let params1 = CriticParams::init(4, 1, 5);
        let (x, _) = scaled_scene(4, 16);

        let mut g = Graph::new();
        let v4 = params4.insert(&mut g, false);
        let d = g.constant(x.clone());
        let out = critic_forward(&mut g, &params4, &v4, d, true).unwrap();
        assert!(g.value(out).is_scalar());

        // Surface discrimination off pairs with a 1-channel stack.
        let mut g = Graph::new();
        let v1 = params1.insert(&mut g, false);
        let d = g.constant(x.clone());
        let out = critic_forward(&mut g, &params1, &v1, d, false).unwrap();
        assert!(g.value(out).is_scalar());

        // Mismatched wiring is rejected.
        let mut g = Graph::new();
        let v4 = params4.insert(&mut g, false);
        let d = g.constant(x);
        assert!(critic_forward(&mut g, &params4, &v4, d, false).is_err());
    }

    #[test]
    fn linear_critic_difference_depends_only_on_hole_neighbourhood() {
        // With a linear stack, critic(x1) - critic(x2) is a linear
        // functional of the (hole-supported) input difference, so modifying
        // both inputs identically far from the hole leaves it unchanged.
        let mut params = CriticParams::init(4, 4, 33);
        for l in &mut params.layers {
            l.spec.act = Activation::Linear;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let base: Vec<f64> = (0..16 * 16).map(|_| rng.gen_range(0.2..1.0)).collect();
        let x1 = Tensor::new(vec![1, 16, 16], base.clone()).unwrap();
        let mut x2 = x1.clone();
        for i in 6..10 {
            for j in 6..10 {
                x2.data_mut()[i * 16 + j] += rng.gen_range(0.1..0.5);
            }
        }
        let eval = |t: &Tensor| -> f64 {
            let mut g = Graph::new();
            let vars = params.insert(&mut g, false);
            let d = g.constant(t.clone());
            let out = critic_forward(&mut g, &params, &vars, d, true).unwrap();
            g.value(out).data()[0]
        };
        let diff = eval(&x1) - eval(&x2);

        // Identical far-away bump (outside the hole plus normal stencil).
        let mut x1b = x1.clone();
        let mut x2b = x2.clone();
        for t in [&mut x1b, &mut x2b] {
            t.data_mut()[16 + 1] += 0.7;
        }
        let diff_b = eval(&x1b) - eval(&x2b);
        assert!(
            (diff - diff_b).abs() < 1e-9,
            "difference moved with a far-away edit: {} vs {}",
            diff,
            diff_b
        );
        assert!(diff.abs() > 1e-12, "hole edit must actually reach the critic");
    }

    #[test]
    fn zeroed_critic_outputs_zero() {
        let mut params = CriticParams::init(4, 1, 9);
        for t in params.param_tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let (x, _) = scaled_scene(5, 16);
        let mut g = Graph::new();
        let vars = params.insert(&mut g, false);
        let d = g.constant(x);
        let out = critic_forward(&mut g, &params, &vars, d, false).unwrap();
        assert_eq!(g.value(out).data()[0], 0.0);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.hole_size = 64;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig { image_size: 30, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
        cfg = TrainConfig::default();
        cfg.weights.phi = 0.0;
        assert!(cfg.validate().is_err());
    }
}
