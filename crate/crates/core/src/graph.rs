//! Eager recorded computation graph with reverse-mode gradients.
//!
//! Operations execute immediately and append a node to the graph; `backward`
//! walks the record once in reverse insertion order. Graphs are built fresh
//! per training step and never reused.
//!
//! `grad_of` re-enters a backward pass as new forward nodes, so the norm of
//! an inner gradient can itself be differentiated. This is exact for
//! piecewise-linear networks (activation derivative masks are constant
//! almost everywhere), which is what the gradient penalty relies on.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Replicate,
}

/// Padding amount and fill mode for convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Padding {
    pub mode: PadMode,
    pub rows: usize,
    pub cols: usize,
}

impl Padding {
    pub fn none() -> Self {
        Padding { mode: PadMode::Zero, rows: 0, cols: 0 }
    }
    pub fn zero(n: usize) -> Self {
        Padding { mode: PadMode::Zero, rows: n, cols: n }
    }
    pub fn replicate(n: usize) -> Self {
        Padding { mode: PadMode::Replicate, rows: n, cols: n }
    }
    pub fn replicate_rect(rows: usize, cols: usize) -> Self {
        Padding { mode: PadMode::Replicate, rows, cols }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { x: usize, k: usize, stride: usize, pad: Padding },
    /// Adjoint of `Conv2d` with zero padding `pad` and the same stride,
    /// mapping back onto an `out_hw` input (strided convolutions admit
    /// several input sizes per output size).
    ConvTranspose2d { x: usize, k: usize, stride: usize, pad: (usize, usize), out_hw: (usize, usize) },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    AddScalar { x: usize, c: f64 },
    MulScalar { x: usize, c: f64 },
    Relu { x: usize },
    LeakyRelu { x: usize, slope: f64 },
    Tanh { x: usize },
    Sqrt { x: usize },
    Abs { x: usize },
    Sum { x: usize },
    Mean { x: usize },
    /// \[C,H,W\] -> \[C\]: mean over the spatial extent of each channel.
    SpatialMean { x: usize },
    /// Channel-axis concatenation of CHW tensors.
    Concat { parts: Vec<usize> },
    /// x[c,y,x] + b[c]
    AddChannelBias { x: usize, b: usize },
    /// Nearest-neighbour 2x upsample.
    Upsample2 { x: usize },
    /// Broadcast a scalar node times `factor` over a fixed shape.
    FillLike { s: usize, factor: f64 },
    /// Broadcast a \[C\] node times `factor` over \[C,H,W\].
    BroadcastChannels { v: usize, factor: f64 },
}

struct Node {
    op: Op,
    tensor: Tensor,
    needs_grad: bool,
}

/// Eagerly recorded computation graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a tensor as a leaf. Its `requires_grad` flag decides whether
    /// `backward` populates a gradient for it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad;
        self.push(Op::Leaf, t, needs)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.push(Op::Leaf, t, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    fn push(&mut self, op: Op, tensor: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, tensor, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let tensor = self.eval(&op)?;
        let needs = self.parents(&op).iter().any(|&p| self.nodes[p].needs_grad);
        Ok(self.push(op, tensor, needs))
    }

    fn parents(&self, op: &Op) -> Vec<usize> {
        match op {
            Op::Leaf => vec![],
            Op::Conv2d { x, k, .. } | Op::ConvTranspose2d { x, k, .. } => vec![*x, *k],
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } | Op::Div { a, b } => {
                vec![*a, *b]
            }
            Op::AddScalar { x, .. }
            | Op::MulScalar { x, .. }
            | Op::Relu { x }
            | Op::LeakyRelu { x, .. }
            | Op::Tanh { x }
            | Op::Sqrt { x }
            | Op::Abs { x }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::SpatialMean { x }
            | Op::Upsample2 { x } => vec![*x],
            Op::Concat { parts } => parts.clone(),
            Op::AddChannelBias { x, b } => vec![*x, *b],
            Op::FillLike { s, .. } => vec![*s],
            Op::BroadcastChannels { v, .. } => vec![*v],
        }
    }

    // ── Op constructors ─────────────────────────────────────────────

    /// 2-d cross-correlation of a \[C_in,H,W\] input with a
    /// \[C_out,C_in,kh,kw\] kernel.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: Padding) -> Result<Var> {
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be positive"));
        }
        let (ci, _, _) = self.value(x).dims3()?;
        let (_, kci, kh, kw) = self.value(k).dims4()?;
        if kci != ci {
            return Err(Error::dimension(format!(
                "conv2d input has {} channels, kernel expects {}",
                ci, kci
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::dimension(format!("conv2d kernel must be odd, got {}x{}", kh, kw)));
        }
        self.record(Op::Conv2d { x: x.0, k: k.0, stride, pad })
    }

    /// Adjoint of `conv2d` with zero padding 0 and the same kernel/stride:
    /// `dot(conv2d(a,k), b) == dot(a, transpose_conv2d(b,k))`.
    pub fn transpose_conv2d(&mut self, x: Var, k: Var, stride: usize) -> Result<Var> {
        let (_, hh, ww) = self.value(x).dims3()?;
        let (_, _, kh, kw) = self.value(k).dims4()?;
        let out_hw = ((hh - 1) * stride + kh, (ww - 1) * stride + kw);
        self.transpose_conv2d_padded(x, k, stride, (0, 0), out_hw)
    }

    fn transpose_conv2d_padded(
        &mut self,
        x: Var,
        k: Var,
        stride: usize,
        pad: (usize, usize),
        out_hw: (usize, usize),
    ) -> Result<Var> {
        if stride == 0 {
            return Err(Error::contract("transpose_conv2d stride must be positive"));
        }
        let (co, _, _) = self.value(x).dims3()?;
        let (kco, _, _, _) = self.value(k).dims4()?;
        if kco != co {
            return Err(Error::dimension(format!(
                "transpose_conv2d input has {} channels, kernel expects {}",
                co, kco
            )));
        }
        self.record(Op::ConvTranspose2d { x: x.0, k: k.0, stride, pad, out_hw })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        self.record(Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        self.record(Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        self.record(Op::Mul { a: a.0, b: b.0 })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        self.record(Op::Div { a: a.0, b: b.0 })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.record(Op::AddScalar { x: x.0, c })
    }

    pub fn sub_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.record(Op::AddScalar { x: x.0, c: -c })
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.record(Op::MulScalar { x: x.0, c })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Relu { x: x.0 })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.record(Op::LeakyRelu { x: x.0, slope })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Tanh { x: x.0 })
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Sqrt { x: x.0 })
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Abs { x: x.0 })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        if self.value(x).numel() == 0 {
            return Err(Error::domain("sum of empty tensor"));
        }
        self.record(Op::Sum { x: x.0 })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        if self.value(x).numel() == 0 {
            return Err(Error::domain("mean of empty tensor"));
        }
        self.record(Op::Mean { x: x.0 })
    }

    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        self.value(x).dims3()?;
        self.record(Op::SpatialMean { x: x.0 })
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        let (_, h, w) = self.value(parts[0]).dims3()?;
        for &p in parts {
            let (_, ph, pw) = self.value(p).dims3()?;
            if (ph, pw) != (h, w) {
                return Err(Error::dimension("concat spatial dims differ"));
            }
        }
        self.record(Op::Concat { parts: parts.iter().map(|v| v.0).collect() })
    }

    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (c, _, _) = self.value(x).dims3()?;
        if self.value(b).shape() != [c] {
            return Err(Error::dimension(format!(
                "bias shape {:?} does not match {} channels",
                self.value(b).shape(),
                c
            )));
        }
        self.record(Op::AddChannelBias { x: x.0, b: b.0 })
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        self.value(x).dims3()?;
        self.record(Op::Upsample2 { x: x.0 })
    }

    /// Broadcast a scalar node (times `factor`) over `shape`.
    pub fn fill_like(&mut self, s: Var, shape: Vec<usize>, factor: f64) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::contract("fill_like source must be scalar"));
        }
        let v = self.value(s).data()[0] * factor;
        let tensor = Tensor::full(shape, v);
        let needs = self.nodes[s.0].needs_grad;
        Ok(self.push(Op::FillLike { s: s.0, factor }, tensor, needs))
    }

    fn broadcast_channels(&mut self, v: Var, h: usize, w: usize, factor: f64) -> Result<Var> {
        let shape = self.value(v).shape();
        if shape.len() != 1 {
            return Err(Error::contract("broadcast_channels source must be 1-d"));
        }
        let c = shape[0];
        let src = self.value(v).data();
        let mut data = vec![0.0; c * h * w];
        for (ch, &s) in src.iter().enumerate() {
            let val = s * factor;
            data[ch * h * w..(ch + 1) * h * w].fill(val);
        }
        let tensor = Tensor::new(vec![c, h, w], data)?;
        let needs = self.nodes[v.0].needs_grad;
        Ok(self.push(Op::BroadcastChannels { v: v.0, factor }, tensor, needs))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa != sb {
            return Err(Error::dimension(format!("{}: shapes {:?} vs {:?}", what, sa, sb)));
        }
        Ok(())
    }

    // ── Forward evaluation ──────────────────────────────────────────

    fn eval(&self, op: &Op) -> Result<Tensor> {
        let t = |i: &usize| &self.nodes[*i].tensor;
        match op {
            Op::Leaf => unreachable!("leaves are pushed directly"),
            Op::Conv2d { x, k, stride, pad } => conv2d_forward(t(x), t(k), *stride, *pad),
            Op::ConvTranspose2d { x, k, stride, pad, out_hw } => {
                transpose_conv2d_forward(t(x), t(k), *stride, *pad, *out_hw)
            }
            Op::Add { a, b } => zip_map(t(a), t(b), |x, y| x + y),
            Op::Sub { a, b } => zip_map(t(a), t(b), |x, y| x - y),
            Op::Mul { a, b } => zip_map(t(a), t(b), |x, y| x * y),
            Op::Div { a, b } => zip_map(t(a), t(b), |x, y| x / y),
            Op::AddScalar { x, c } => map(t(x), |v| v + c),
            Op::MulScalar { x, c } => map(t(x), |v| v * c),
            Op::Relu { x } => map(t(x), |v| if v > 0.0 { v } else { 0.0 }),
            Op::LeakyRelu { x, slope } => map(t(x), |v| if v > 0.0 { v } else { slope * v }),
            Op::Tanh { x } => map(t(x), |v| v.tanh()),
            Op::Sqrt { x } => map(t(x), |v| v.sqrt()),
            Op::Abs { x } => map(t(x), |v| v.abs()),
            Op::Sum { x } => Ok(Tensor::scalar(t(x).data().iter().sum())),
            Op::Mean { x } => {
                let xt = t(x);
                Ok(Tensor::scalar(xt.data().iter().sum::<f64>() / xt.numel() as f64))
            }
            Op::SpatialMean { x } => {
                let xt = t(x);
                let (c, h, w) = xt.dims3()?;
                let hw = (h * w) as f64;
                let mut out = vec![0.0; c];
                for (ch, o) in out.iter_mut().enumerate() {
                    *o = xt.data()[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / hw;
                }
                Tensor::new(vec![c], out)
            }
            Op::Concat { parts } => {
                let (_, h, w) = t(&parts[0]).dims3()?;
                let c_total: usize = parts.iter().map(|p| t(p).shape()[0]).sum();
                let mut data = Vec::with_capacity(c_total * h * w);
                for p in parts {
                    data.extend_from_slice(t(p).data());
                }
                Tensor::new(vec![c_total, h, w], data)
            }
            Op::AddChannelBias { x, b } => {
                let xt = t(x);
                let (c, h, w) = xt.dims3()?;
                let bias = t(b).data();
                let mut data = xt.data().to_vec();
                for ch in 0..c {
                    for v in &mut data[ch * h * w..(ch + 1) * h * w] {
                        *v += bias[ch];
                    }
                }
                Tensor::new(vec![c, h, w], data)
            }
            Op::Upsample2 { x } => {
                let xt = t(x);
                let (c, h, w) = xt.dims3()?;
                let (oh, ow) = (2 * h, 2 * w);
                let mut data = vec![0.0; c * oh * ow];
                for ch in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            data[(ch * oh + y) * ow + xx] =
                                xt.data()[(ch * h + y / 2) * w + xx / 2];
                        }
                    }
                }
                Tensor::new(vec![c, oh, ow], data)
            }
            // FillLike / BroadcastChannels are pushed directly: their output
            // shape is not recoverable from the operands alone.
            Op::FillLike { .. } | Op::BroadcastChannels { .. } => {
                unreachable!("pushed directly")
            }
        }
    }

    /// Re-run every recorded op from the leaves; used to check that the
    /// record reproduces forward values bit-exactly.
    #[cfg(test)]
    pub(crate) fn replay_matches(&self) -> bool {
        for node in &self.nodes {
            match &node.op {
                Op::Leaf => {}
                Op::FillLike { s, factor } => {
                    let v = self.nodes[*s].tensor.data()[0] * factor;
                    if node.tensor.data().iter().any(|&d| d != v) {
                        return false;
                    }
                }
                Op::BroadcastChannels { v, factor } => {
                    let src = self.nodes[*v].tensor.data();
                    let (_, h, w) = node.tensor.dims3().unwrap();
                    for (ch, &s) in src.iter().enumerate() {
                        let want = s * factor;
                        if node.tensor.data()[ch * h * w..(ch + 1) * h * w]
                            .iter()
                            .any(|&d| d != want)
                        {
                            return false;
                        }
                    }
                }
                op => {
                    let fresh = self.eval(op).expect("replay");
                    if fresh.data() != node.tensor.data() {
                        return false;
                    }
                }
            }
        }
        true
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Populates `grad` on every
    /// node that can influence the loss; leaves with `requires_grad` always
    /// end up with a gradient buffer (zeros when disconnected).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n)
            .map(|i| {
                if self.nodes[i].needs_grad || i == loss.0 {
                    Some(vec![0.0; self.nodes[i].tensor.numel()])
                } else {
                    None
                }
            })
            .collect();
        grads[loss.0].as_mut().unwrap()[0] = 1.0;

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            node.tensor.grad = grads[i].take();
            if node.tensor.requires_grad && node.tensor.grad.is_none() {
                node.tensor.grad = Some(vec![0.0; node.tensor.numel()]);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let val = |j: usize| self.nodes[j].tensor.data();
        let wants = |j: usize, grads: &[Option<Vec<f64>>]| grads[j].is_some();
        macro_rules! acc {
            ($j:expr, $iter:expr) => {
                if let Some(buf) = grads[$j].as_mut() {
                    for (dst, add) in buf.iter_mut().zip($iter) {
                        *dst += add;
                    }
                }
            };
        }
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, k, stride, pad } => {
                let xt = &self.nodes[*x].tensor;
                let kt = &self.nodes[*k].tensor;
                if wants(*x, grads) {
                    let dx = conv2d_backward_input(g, xt, kt, *stride, *pad)?;
                    acc!(*x, dx.iter().copied());
                }
                if wants(*k, grads) {
                    let dk = conv2d_backward_kernel(g, xt, kt, *stride, *pad)?;
                    acc!(*k, dk.iter().copied());
                }
            }
            Op::ConvTranspose2d { x, k, stride, pad, .. } => {
                let xt = &self.nodes[*x].tensor;
                let kt = &self.nodes[*k].tensor;
                let out_t = &self.nodes[i].tensor;
                if wants(*x, grads) {
                    // Adjoint of the adjoint: the forward convolution.
                    let gt = Tensor::new(out_t.shape().to_vec(), g.to_vec())?;
                    let dx = conv2d_forward(
                        &gt,
                        kt,
                        *stride,
                        Padding { mode: PadMode::Zero, rows: pad.0, cols: pad.1 },
                    )?;
                    acc!(*x, dx.data().iter().copied());
                }
                if wants(*k, grads) {
                    let dk = transpose_conv2d_backward_kernel(g, xt, kt, out_t, *stride, *pad)?;
                    acc!(*k, dk.iter().copied());
                }
            }
            Op::Add { a, b } => {
                acc!(*a, g.iter().copied());
                acc!(*b, g.iter().copied());
            }
            Op::Sub { a, b } => {
                acc!(*a, g.iter().copied());
                acc!(*b, g.iter().map(|v| -v));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                acc!(*a, g.iter().zip(bv).map(|(gv, y)| gv * y));
                acc!(*b, g.iter().zip(av).map(|(gv, x)| gv * x));
            }
            Op::Div { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                acc!(*a, g.iter().zip(bv).map(|(gv, y)| gv / y));
                acc!(*b, g.iter().zip(av.iter().zip(bv)).map(|(gv, (x, y))| -gv * x / (y * y)));
            }
            Op::AddScalar { x, .. } => acc!(*x, g.iter().copied()),
            Op::MulScalar { x, c } => acc!(*x, g.iter().map(|v| v * c)),
            Op::Relu { x } => {
                let xv = val(*x);
                acc!(*x, g.iter().zip(xv).map(|(gv, v)| if *v > 0.0 { *gv } else { 0.0 }));
            }
            Op::LeakyRelu { x, slope } => {
                let xv = val(*x);
                acc!(*x, g.iter().zip(xv).map(|(gv, v)| if *v > 0.0 { *gv } else { gv * slope }));
            }
            Op::Tanh { x } => {
                let ov = self.nodes[i].tensor.data();
                acc!(*x, g.iter().zip(ov).map(|(gv, t)| gv * (1.0 - t * t)));
            }
            Op::Sqrt { x } => {
                let ov = self.nodes[i].tensor.data();
                acc!(*x, g.iter().zip(ov).map(|(gv, s)| gv / (2.0 * s)));
            }
            Op::Abs { x } => {
                // Subgradient 0 at 0.
                let xv = val(*x);
                acc!(*x, g.iter().zip(xv).map(|(gv, v)| gv * sign(*v)));
            }
            Op::Sum { x } => {
                let g0 = g[0];
                acc!(*x, std::iter::repeat_n(g0, self.nodes[*x].tensor.numel()));
            }
            Op::Mean { x } => {
                let nel = self.nodes[*x].tensor.numel();
                let g0 = g[0] / nel as f64;
                acc!(*x, std::iter::repeat_n(g0, nel));
            }
            Op::SpatialMean { x } => {
                let (c, h, w) = self.nodes[*x].tensor.dims3()?;
                let hw = (h * w) as f64;
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    let gv = g[ch] / hw;
                    dx[ch * h * w..(ch + 1) * h * w].fill(gv);
                }
                acc!(*x, dx.iter().copied());
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[*p].tensor.numel();
                    acc!(*p, g[offset..offset + len].iter().copied());
                    offset += len;
                }
            }
            Op::AddChannelBias { x, b } => {
                acc!(*x, g.iter().copied());
                if wants(*b, grads) {
                    let (c, h, w) = self.nodes[*x].tensor.dims3()?;
                    let mut db = vec![0.0; c];
                    for (ch, d) in db.iter_mut().enumerate() {
                        *d = g[ch * h * w..(ch + 1) * h * w].iter().sum();
                    }
                    acc!(*b, db.iter().copied());
                }
            }
            Op::Upsample2 { x } => {
                let (c, h, w) = self.nodes[*x].tensor.dims3()?;
                let (oh, ow) = (2 * h, 2 * w);
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            dx[(ch * h + y / 2) * w + xx / 2] += g[(ch * oh + y) * ow + xx];
                        }
                    }
                }
                acc!(*x, dx.iter().copied());
            }
            Op::FillLike { s, factor } => {
                let ds: f64 = g.iter().sum::<f64>() * factor;
                acc!(*s, std::iter::once(ds));
            }
            Op::BroadcastChannels { v, factor } => {
                let (c, h, w) = self.nodes[i].tensor.dims3()?;
                let mut dv = vec![0.0; c];
                for (ch, d) in dv.iter_mut().enumerate() {
                    *d = g[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() * factor;
                }
                acc!(*v, dv.iter().copied());
            }
        }
        Ok(())
    }

    // ── Recorded backward (gradient as new forward nodes) ───────────

    /// Emit the gradient of scalar `out` with respect to `wrt` as fresh
    /// graph nodes, so the result can be differentiated further. Activation
    /// derivative masks enter as constants, which is exact wherever the
    /// activations are locally linear.
    pub fn grad_of(&mut self, out: Var, wrt: Var) -> Result<Var> {
        if !self.value(out).is_scalar() {
            return Err(Error::contract("grad_of: output must be scalar"));
        }
        let wrt_shape = self.value(wrt).shape().to_vec();
        let n = out.0 + 1;
        let mut on_path = vec![false; n];
        if wrt.0 < n {
            on_path[wrt.0] = true;
        }
        for i in 0..n {
            if on_path[i] {
                continue;
            }
            if self.parents(&self.nodes[i].op).iter().any(|&p| on_path[p]) {
                on_path[i] = true;
            }
        }
        if !on_path[out.0] {
            return Ok(self.constant(Tensor::zeros(wrt_shape)));
        }

        let mut adj: Vec<Option<Var>> = vec![None; n];
        adj[out.0] = Some(self.constant(Tensor::scalar(1.0)));

        for i in (0..n).rev() {
            if !on_path[i] || i == wrt.0 {
                continue;
            }
            let Some(g) = adj[i] else { continue };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Conv2d { x, k, stride, pad } => {
                    if on_path[k] {
                        return Err(Error::contract(
                            "grad_of: differentiating a convolution kernel path is unsupported",
                        ));
                    }
                    if pad.mode != PadMode::Zero && (pad.rows > 0 || pad.cols > 0) {
                        return Err(Error::contract(
                            "grad_of: replicate-padded convolutions are unsupported",
                        ));
                    }
                    let (_, xh, xw) = self.nodes[x].tensor.dims3()?;
                    let c = self.transpose_conv2d_padded(
                        g,
                        Var(k),
                        stride,
                        (pad.rows, pad.cols),
                        (xh, xw),
                    )?;
                    self.accumulate(&mut adj, x, c)?;
                }
                Op::Add { a, b } => {
                    if on_path[a] {
                        self.accumulate(&mut adj, a, g)?;
                    }
                    if on_path[b] {
                        self.accumulate(&mut adj, b, g)?;
                    }
                }
                Op::Sub { a, b } => {
                    if on_path[a] {
                        self.accumulate(&mut adj, a, g)?;
                    }
                    if on_path[b] {
                        let neg = self.mul_scalar(g, -1.0)?;
                        self.accumulate(&mut adj, b, neg)?;
                    }
                }
                Op::Mul { a, b } => {
                    if on_path[a] {
                        let c = self.mul(g, Var(b))?;
                        self.accumulate(&mut adj, a, c)?;
                    }
                    if on_path[b] {
                        let c = self.mul(g, Var(a))?;
                        self.accumulate(&mut adj, b, c)?;
                    }
                }
                Op::Div { a, b } => {
                    if on_path[a] {
                        let c = self.div(g, Var(b))?;
                        self.accumulate(&mut adj, a, c)?;
                    }
                    if on_path[b] {
                        let gz = self.mul(g, Var(i))?;
                        let gzb = self.div(gz, Var(b))?;
                        let c = self.mul_scalar(gzb, -1.0)?;
                        self.accumulate(&mut adj, b, c)?;
                    }
                }
                Op::AddScalar { x, .. } => self.accumulate(&mut adj, x, g)?,
                Op::MulScalar { x, c } => {
                    let v = self.mul_scalar(g, c)?;
                    self.accumulate(&mut adj, x, v)?;
                }
                Op::Relu { x } => {
                    let mask = self.derivative_mask(x, |v| if v > 0.0 { 1.0 } else { 0.0 });
                    let c = self.mul(g, mask)?;
                    self.accumulate(&mut adj, x, c)?;
                }
                Op::LeakyRelu { x, slope } => {
                    let mask = self.derivative_mask(x, |v| if v > 0.0 { 1.0 } else { slope });
                    let c = self.mul(g, mask)?;
                    self.accumulate(&mut adj, x, c)?;
                }
                Op::Tanh { x } => {
                    let out_data: Vec<f64> =
                        self.nodes[i].tensor.data().iter().map(|t| 1.0 - t * t).collect();
                    let shape = self.nodes[i].tensor.shape().to_vec();
                    let mask = self.constant(Tensor::new(shape, out_data)?);
                    let c = self.mul(g, mask)?;
                    self.accumulate(&mut adj, x, c)?;
                }
                Op::Sqrt { x } => {
                    let twice = self.mul_scalar(Var(i), 2.0)?;
                    let c = self.div(g, twice)?;
                    self.accumulate(&mut adj, x, c)?;
                }
                Op::Abs { x } => {
                    let mask = self.derivative_mask(x, sign);
                    let c = self.mul(g, mask)?;
                    self.accumulate(&mut adj, x, c)?;
                }
                Op::Sum { x } => {
                    let shape = self.nodes[x].tensor.shape().to_vec();
                    let c = self.fill_like(g, shape, 1.0)?;
                    self.accumulate(&mut adj, x, c)?;
                }
                Op::Mean { x } => {
                    let nel = self.nodes[x].tensor.numel();
                    let shape = self.nodes[x].tensor.shape().to_vec();
                    let c = self.fill_like(g, shape, 1.0 / nel as f64)?;
                    self.accumulate(&mut adj, x, c)?;
                }
                Op::SpatialMean { x } => {
                    let (_, h, w) = self.nodes[x].tensor.dims3()?;
                    let c = self.broadcast_channels(g, h, w, 1.0 / (h * w) as f64)?;
                    self.accumulate(&mut adj, x, c)?;
                }
                Op::AddChannelBias { x, b } => {
                    if on_path[b] {
                        return Err(Error::contract(
                            "grad_of: differentiating a bias path is unsupported",
                        ));
                    }
                    self.accumulate(&mut adj, x, g)?;
                }
                Op::ConvTranspose2d { .. }
                | Op::Concat { .. }
                | Op::Upsample2 { .. }
                | Op::FillLike { .. }
                | Op::BroadcastChannels { .. } => {
                    return Err(Error::contract(format!(
                        "grad_of: unsupported op {:?} on the differentiation path",
                        op_name(&op)
                    )));
                }
            }
        }

        match adj[wrt.0] {
            Some(v) => Ok(v),
            None => Ok(self.constant(Tensor::zeros(wrt_shape))),
        }
    }

    fn accumulate(&mut self, adj: &mut [Option<Var>], target: usize, v: Var) -> Result<()> {
        adj[target] = Some(match adj[target] {
            None => v,
            Some(prev) => self.add(prev, v)?,
        });
        Ok(())
    }

    fn derivative_mask(&mut self, x: usize, f: impl Fn(f64) -> f64) -> Var {
        let data: Vec<f64> = self.nodes[x].tensor.data().iter().map(|&v| f(v)).collect();
        let shape = self.nodes[x].tensor.shape().to_vec();
        self.constant(Tensor::new(shape, data).expect("mask shape"))
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv2d { .. } => "conv2d",
        Op::ConvTranspose2d { .. } => "transpose_conv2d",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::Div { .. } => "div",
        Op::AddScalar { .. } => "add_scalar",
        Op::MulScalar { .. } => "mul_scalar",
        Op::Relu { .. } => "relu",
        Op::LeakyRelu { .. } => "leaky_relu",
        Op::Tanh { .. } => "tanh",
        Op::Sqrt { .. } => "sqrt",
        Op::Abs { .. } => "abs",
        Op::Sum { .. } => "sum",
        Op::Mean { .. } => "mean",
        Op::SpatialMean { .. } => "spatial_mean",
        Op::Concat { .. } => "concat",
        Op::AddChannelBias { .. } => "add_channel_bias",
        Op::Upsample2 { .. } => "upsample2",
        Op::FillLike { .. } => "fill_like",
        Op::BroadcastChannels { .. } => "broadcast_channels",
    }
}

// ── Convolution kernels ─────────────────────────────────────────────

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Result<Tensor> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

/// Materialise the padded image; replicate duplicates the border pixels.
fn pad_image(t: &Tensor, pad: Padding) -> Result<(Vec<f64>, usize, usize)> {
    let (c, h, w) = t.dims3()?;
    let (ph, pw) = (h + 2 * pad.rows, w + 2 * pad.cols);
    if pad.rows == 0 && pad.cols == 0 {
        return Ok((t.data().to_vec(), ph, pw));
    }
    let mut out = vec![0.0; c * ph * pw];
    for ch in 0..c {
        for y in 0..ph {
            for x in 0..pw {
                let v = match pad.mode {
                    PadMode::Zero => {
                        let iy = y as isize - pad.rows as isize;
                        let ix = x as isize - pad.cols as isize;
                        if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            t.data()[(ch * h + iy as usize) * w + ix as usize]
                        } else {
                            0.0
                        }
                    }
                    PadMode::Replicate => {
                        let iy = (y as isize - pad.rows as isize).clamp(0, h as isize - 1) as usize;
                        let ix = (x as isize - pad.cols as isize).clamp(0, w as isize - 1) as usize;
                        t.data()[(ch * h + iy) * w + ix]
                    }
                };
                out[(ch * ph + y) * pw + x] = v;
            }
        }
    }
    Ok((out, ph, pw))
}

fn conv_out_dim(input: usize, k: usize, stride: usize) -> Result<usize> {
    if input < k {
        return Err(Error::dimension(format!(
            "convolution kernel extent {} exceeds padded input {}",
            k, input
        )));
    }
    Ok((input - k) / stride + 1)
}

fn conv2d_forward(x: &Tensor, k: &Tensor, stride: usize, pad: Padding) -> Result<Tensor> {
    let (ci, _, _) = x.dims3()?;
    let (co, kci, kh, kw) = k.dims4()?;
    if kci != ci {
        return Err(Error::dimension(format!("conv2d channels {} vs kernel {}", ci, kci)));
    }
    let (padded, ph, pw) = pad_image(x, pad)?;
    let oh = conv_out_dim(ph, kh, stride)?;
    let ow = conv_out_dim(pw, kw, stride)?;
    let kd = k.data();
    let mut out = vec![0.0; co * oh * ow];
    for oc in 0..co {
        let kbase = oc * ci * kh * kw;
        for oy in 0..oh {
            let iy0 = oy * stride;
            for ox in 0..ow {
                let ix0 = ox * stride;
                let mut acc = 0.0;
                for ic in 0..ci {
                    for ky in 0..kh {
                        let krow = &kd[kbase + (ic * kh + ky) * kw..][..kw];
                        let irow = &padded[(ic * ph + iy0 + ky) * pw + ix0..][..kw];
                        for t in 0..kw {
                            acc += krow[t] * irow[t];
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Tensor::new(vec![co, oh, ow], out)
}

fn transpose_conv2d_forward(
    x: &Tensor,
    k: &Tensor,
    stride: usize,
    pad: (usize, usize),
    out_hw: (usize, usize),
) -> Result<Tensor> {
    let (co, hh, ww) = x.dims3()?;
    let (kco, ci, kh, kw) = k.dims4()?;
    if kco != co {
        return Err(Error::dimension(format!("transpose_conv2d channels {} vs kernel {}", co, kco)));
    }
    let (oh, ow) = out_hw;
    // The target size must itself convolve back to the input size.
    if (oh + 2 * pad.0) < kh
        || (ow + 2 * pad.1) < kw
        || (oh + 2 * pad.0 - kh) / stride + 1 != hh
        || (ow + 2 * pad.1 - kw) / stride + 1 != ww
    {
        return Err(Error::dimension(format!(
            "transpose_conv2d target {}x{} incompatible with input {}x{}",
            oh, ow, hh, ww
        )));
    }
    let (xd, kd) = (x.data(), k.data());
    let mut out = vec![0.0; ci * oh * ow];
    for oc in 0..co {
        for oy in 0..hh {
            for ox in 0..ww {
                let gv = xd[(oc * hh + oy) * ww + ox];
                if gv == 0.0 {
                    continue;
                }
                for ic in 0..ci {
                    let kbase = (oc * ci + ic) * kh * kw;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad.0 as isize;
                        if iy < 0 || iy >= oh as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad.1 as isize;
                            if ix < 0 || ix >= ow as isize {
                                continue;
                            }
                            out[(ic * oh + iy as usize) * ow + ix as usize] +=
                                gv * kd[kbase + ky * kw + kx];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![ci, oh, ow], out)
}

fn conv2d_backward_input(
    gout: &[f64],
    x: &Tensor,
    k: &Tensor,
    stride: usize,
    pad: Padding,
) -> Result<Vec<f64>> {
    let (ci, h, w) = x.dims3()?;
    let (co, _, kh, kw) = k.dims4()?;
    let (ph, pw) = (h + 2 * pad.rows, w + 2 * pad.cols);
    let oh = conv_out_dim(ph, kh, stride)?;
    let ow = conv_out_dim(pw, kw, stride)?;
    let kd = k.data();
    let mut dpad = vec![0.0; ci * ph * pw];
    for oc in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = gout[(oc * oh + oy) * ow + ox];
                if gv == 0.0 {
                    continue;
                }
                for ic in 0..ci {
                    let kbase = (oc * ci + ic) * kh * kw;
                    for ky in 0..kh {
                        let prow = (ic * ph + oy * stride + ky) * pw + ox * stride;
                        for kx in 0..kw {
                            dpad[prow + kx] += gv * kd[kbase + ky * kw + kx];
                        }
                    }
                }
            }
        }
    }
    // Fold padding gradient back onto the source pixels.
    let mut dx = vec![0.0; ci * h * w];
    for ch in 0..ci {
        for y in 0..ph {
            for xx in 0..pw {
                let gv = dpad[(ch * ph + y) * pw + xx];
                if gv == 0.0 {
                    continue;
                }
                let iy = y as isize - pad.rows as isize;
                let ix = xx as isize - pad.cols as isize;
                match pad.mode {
                    PadMode::Zero => {
                        if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            dx[(ch * h + iy as usize) * w + ix as usize] += gv;
                        }
                    }
                    PadMode::Replicate => {
                        let cy = iy.clamp(0, h as isize - 1) as usize;
                        let cx = ix.clamp(0, w as isize - 1) as usize;
                        dx[(ch * h + cy) * w + cx] += gv;
                    }
                }
            }
        }
    }
    Ok(dx)
}

fn conv2d_backward_kernel(
    gout: &[f64],
    x: &Tensor,
    k: &Tensor,
    stride: usize,
    pad: Padding,
) -> Result<Vec<f64>> {
    let (ci, _, _) = x.dims3()?;
    let (co, _, kh, kw) = k.dims4()?;
    let (padded, ph, pw) = pad_image(x, pad)?;
    let oh = conv_out_dim(ph, kh, stride)?;
    let ow = conv_out_dim(pw, kw, stride)?;
    let mut dk = vec![0.0; co * ci * kh * kw];
    for oc in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = gout[(oc * oh + oy) * ow + ox];
                if gv == 0.0 {
                    continue;
                }
                for ic in 0..ci {
                    let kbase = (oc * ci + ic) * kh * kw;
                    for ky in 0..kh {
                        let prow = (ic * ph + oy * stride + ky) * pw + ox * stride;
                        for kx in 0..kw {
                            dk[kbase + ky * kw + kx] += gv * padded[prow + kx];
                        }
                    }
                }
            }
        }
    }
    Ok(dk)
}

fn transpose_conv2d_backward_kernel(
    gout: &[f64],
    x: &Tensor,
    k: &Tensor,
    out: &Tensor,
    stride: usize,
    pad: (usize, usize),
) -> Result<Vec<f64>> {
    let (co, hh, ww) = x.dims3()?;
    let (_, ci, kh, kw) = k.dims4()?;
    let (_, oh, ow) = out.dims3()?;
    let xd = x.data();
    let mut dk = vec![0.0; co * ci * kh * kw];
    for oc in 0..co {
        for oy in 0..hh {
            for ox in 0..ww {
                let xv = xd[(oc * hh + oy) * ww + ox];
                if xv == 0.0 {
                    continue;
                }
                for ic in 0..ci {
                    let kbase = (oc * ci + ic) * kh * kw;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad.0 as isize;
                        if iy < 0 || iy >= oh as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad.1 as isize;
                            if ix < 0 || ix >= ow as isize {
                                continue;
                            }
                            dk[kbase + ky * kw + kx] +=
                                xv * gout[(ic * oh + iy as usize) * ow + ix as usize];
                        }
                    }
                }
            }
        }
    }
    Ok(dk)
}

// ── Gradient checking ───────────────────────────────────────────────

/// Max relative error between analytic and central-difference gradients of
/// a scalar-valued tensor function, `|a - n| / max(1, |a|, |n|)`.
pub fn grad_check<F>(f: F, input: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_multi(|g, vars| f(g, vars[0]), std::slice::from_ref(input), h)
}

/// `grad_check` over several independent inputs at once.
pub fn grad_check_multi<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.requires_grad = true;
            g.leaf(t)
        })
        .collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).is_scalar() {
        return Err(Error::contract("grad_check: function must be scalar-valued"));
    }
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> =
        vars.iter().map(|&v| g.grad(v).expect("leaf gradient").to_vec()).collect();

    let eval_at = |which: usize, elem: usize, delta: f64| -> Result<f64> {
        let mut gg = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut t = t.clone();
                if i == which {
                    t.data_mut()[elem] += delta;
                }
                gg.leaf(t)
            })
            .collect();
        let o = f(&mut gg, &vars)?;
        gg.value(o).scalar_value()
    };

    let mut max_rel = 0.0_f64;
    for (which, input) in inputs.iter().enumerate() {
        for (elem, &a) in analytic[which].iter().enumerate().take(input.numel()) {
            let plus = eval_at(which, elem, h)?;
            let minus = eval_at(which, elem, -h)?;
            let numeric = (plus - minus) / (2.0 * h);
            let denom = 1.0_f64.max(a.abs()).max(numeric.abs());
            max_rel = max_rel.max((a - numeric).abs() / denom);
        }
    }
    Ok(max_rel)
}
