//! Tape of executed operations with a single reverse sweep.
//!
//! Every forward op appends a node holding its output value and enough
//! bookkeeping to produce input gradients. `backward` walks the tape once in
//! reverse, accumulating additively into each input, so a value that feeds
//! several consumers receives the sum of its path gradients.
//!
//! A graph lives for one forward pass. Recurrent state carried across frames
//! must be re-entered as a [`Graph::constant`], which is where truncation
//! happens.

use std::rc::Rc;

use super::kernels::{self, ConvGeometry, GroupStats};
use super::tensor::{Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Softplus,
    Square,
    Ln,
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geometry: ConvGeometry,
    },
    GroupNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: GroupStats,
    },
    Unary {
        input: Var,
        act: Activation,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale {
        input: Var,
        factor: f64,
    },
    Offset {
        input: Var,
    },
    ChannelBias {
        input: Var,
        bias: Var,
    },
    /// Multiplies every channel by a constant (n, 1, h, w) map.
    PixelScale {
        input: Var,
        map: Rc<Tensor>,
    },
    /// Keeps entries where the (n, 1, h, w) mask is set and writes exact zeros elsewhere.
    MaskSelect {
        input: Var,
        mask: Rc<Vec<bool>>,
    },
    Concat(Vec<Var>),
    SliceChannels {
        input: Var,
        start: usize,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as data; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(input);
        let ks = self.shape(kernel);
        if ks.h != ks.w {
            return Err(Error::shape("conv2d", format!("non-square kernel {ks}")));
        }
        if ks.c != xs.c {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {ks} expects {} input channels, input is {xs}", ks.c),
            ));
        }
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs.numel() != ks.n {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {bs} for {} output channels", ks.n),
                ));
            }
        }
        let geometry = ConvGeometry::new(xs, ks.h, stride, pad).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!("kernel {} stride {stride} pad {pad} on input {xs}", ks.h),
            )
        })?;
        let out = kernels::conv2d_forward(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            &geometry,
        );
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            },
            rg,
        ))
    }

    pub fn group_norm(
        &mut self,
        input: Var,
        groups: usize,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var> {
        let xs = self.shape(input);
        if groups == 0 || xs.c % groups != 0 {
            return Err(Error::invalid(
                "group_norm",
                format!("{} channels not divisible into {groups} groups", xs.c),
            ));
        }
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v).numel() != xs.c {
                return Err(Error::shape(
                    "group_norm",
                    format!("{name} {} for {} channels", self.shape(v), xs.c),
                ));
            }
        }
        if eps <= 0.0 {
            return Err(Error::invalid("group_norm", "eps must be positive"));
        }
        let (out, stats) = kernels::group_norm_forward(
            self.value(input),
            groups,
            self.value(gamma),
            self.value(beta),
            eps,
        );
        let rg = self.any_grad(&[input, gamma, beta]);
        Ok(self.push(
            out,
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                stats,
            },
            rg,
        ))
    }

    pub fn activation(&mut self, input: Var, act: Activation) -> Var {
        let f: fn(f64) -> f64 = match act {
            Activation::Sigmoid => sigmoid,
            Activation::Tanh => f64::tanh,
            Activation::Relu => |v| v.max(0.0),
            Activation::Exp => f64::exp,
            Activation::Softplus => softplus,
            Activation::Square => |v| v * v,
            Activation::Ln => f64::ln,
        };
        let out = self.value(input).map(f);
        let rg = self.any_grad(&[input]);
        self.push(out, Op::Unary { input, act }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Exp)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Square)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                name,
                format!("{} vs {}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let out = self.value(input).map(|v| v * factor);
        let rg = self.any_grad(&[input]);
        self.push(out, Op::Scale { input, factor }, rg)
    }

    pub fn offset(&mut self, input: Var, value: f64) -> Var {
        let out = self.value(input).map(|v| v + value);
        let rg = self.any_grad(&[input]);
        self.push(out, Op::Offset { input }, rg)
    }

    /// Adds a per-channel bias of shape (1, c, 1, 1).
    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input);
        if self.shape(bias).numel() != xs.c {
            return Err(Error::shape(
                "channel_bias",
                format!("bias {} for input {xs}", self.shape(bias)),
            ));
        }
        let mut out = self.value(input).clone();
        let b = self.value(bias).data().to_vec();
        let plane = xs.plane();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let bv = b[i % xs.c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let rg = self.any_grad(&[input, bias]);
        Ok(self.push(out, Op::ChannelBias { input, bias }, rg))
    }

    /// Multiplies each channel pointwise by a constant single-channel map.
    pub fn pixel_scale(&mut self, input: Var, map: Rc<Tensor>) -> Result<Var> {
        let xs = self.shape(input);
        let ms = map.shape();
        if ms.c != 1 || !ms.same_spatial(&xs) {
            return Err(Error::shape(
                "pixel_scale",
                format!("map {ms} for input {xs}"),
            ));
        }
        let mut out = self.value(input).clone();
        let plane = xs.plane();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let m = &map.data()[(i / xs.c) * plane..][..plane];
            chunk.iter_mut().zip(m).for_each(|(v, s)| *v *= s);
        }
        let rg = self.any_grad(&[input]);
        Ok(self.push(out, Op::PixelScale { input, map }, rg))
    }

    /// Keeps values where the single-channel mask is set, exact 0.0 elsewhere.
    /// The mask has `n * h * w` entries.
    pub fn mask_select(&mut self, input: Var, mask: Rc<Vec<bool>>) -> Result<Var> {
        let xs = self.shape(input);
        if mask.len() != xs.n * xs.plane() {
            return Err(Error::shape(
                "mask_select",
                format!("{} mask entries for input {xs}", mask.len()),
            ));
        }
        let mut out = self.value(input).clone();
        let plane = xs.plane();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let m = &mask[(i / xs.c) * plane..][..plane];
            chunk.iter_mut().zip(m).for_each(|(v, &keep)| {
                if !keep {
                    *v = 0.0;
                }
            });
        }
        let rg = self.any_grad(&[input]);
        Ok(self.push(out, Op::MaskSelect { input, mask }, rg))
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .map(|&v| self.shape(v))
            .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?;
        let mut total_c = 0;
        for &v in inputs {
            let s = self.shape(v);
            if !s.same_spatial(&first) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{s} vs {first}"),
                ));
            }
            total_c += s.c;
        }
        let os = first.with_channels(total_c);
        let mut data = Vec::with_capacity(os.numel());
        for n in 0..os.n {
            for &v in inputs {
                data.extend_from_slice(self.value(v).batch_item(n));
            }
        }
        let out = Tensor::from_vec(os, data)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(out, Op::Concat(inputs.to_vec()), rg))
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(input);
        if start + len > xs.c || len == 0 {
            return Err(Error::shape(
                "slice_channels",
                format!("channels {start}..{} of {xs}", start + len),
            ));
        }
        let os = xs.with_channels(len);
        let plane = xs.plane();
        let mut data = Vec::with_capacity(os.numel());
        let src = self.value(input);
        for n in 0..xs.n {
            let item = src.batch_item(n);
            data.extend_from_slice(&item[start * plane..(start + len) * plane]);
        }
        let out = Tensor::from_vec(os, data)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(out, Op::SliceChannels { input, start }, rg))
    }

    /// Splits channels into `parts` equal chunks.
    pub fn split_channels(&mut self, input: Var, parts: usize) -> Result<Vec<Var>> {
        let c = self.shape(input).c;
        if parts == 0 || c % parts != 0 {
            return Err(Error::shape(
                "split_channels",
                format!("{c} channels into {parts} parts"),
            ));
        }
        let len = c / parts;
        (0..parts)
            .map(|p| self.slice_channels(input, p * len, len))
            .collect()
    }

    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::invalid("upsample_nearest", "factor must be >= 1"));
        }
        let out = kernels::upsample_nearest_forward(self.value(input), factor);
        let rg = self.any_grad(&[input]);
        Ok(self.push(out, Op::Upsample { input, factor }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).sum());
        let rg = self.any_grad(&[input]);
        self.push(out, Op::Sum(input), rg)
    }

    /// Reverse sweep from a scalar loss. Gradients are retrievable with [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.shape(loss);
        if !ls.is_scalar() {
            return Err(Error::NotScalar(ls.to_string()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            for (target, contribution) in self.node_backward(node, &g) {
                if !self.nodes[target.0].requires_grad {
                    continue;
                }
                match &mut grads[target.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot => *slot = Some(contribution),
                }
            }
            // Leaves keep their gradient.
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            } => {
                let grads = kernels::conv2d_backward(
                    self.value(*input),
                    self.value(*kernel),
                    g,
                    geometry,
                    (rg(*input), rg(*kernel), bias.is_some_and(rg)),
                );
                let mut out = Vec::new();
                if let Some(dx) = grads.input {
                    out.push((*input, dx));
                }
                if let Some(dw) = grads.kernel {
                    out.push((*kernel, dw));
                }
                if let (Some(b), Some(db)) = (bias, grads.bias) {
                    let shape = self.shape(*b);
                    out.push((*b, db.reshape(shape).expect("bias numel checked in forward")));
                }
                out
            }
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let (dx, dg, db) = kernels::group_norm_backward(
                    self.value(*input),
                    *groups,
                    self.value(*gamma),
                    stats,
                    g,
                );
                let gs = self.shape(*gamma);
                let bs = self.shape(*beta);
                vec![
                    (*input, dx),
                    (*gamma, dg.reshape(gs).expect("gamma numel checked")),
                    (*beta, db.reshape(bs).expect("beta numel checked")),
                ]
            }
            Op::Unary { input, act } => {
                let x = self.value(*input);
                let y = &node.value;
                let dx = match act {
                    Activation::Sigmoid => zip3(g, y, |g, y| g * y * (1.0 - y)),
                    Activation::Tanh => zip3(g, y, |g, y| g * (1.0 - y * y)),
                    Activation::Exp => zip3(g, y, |g, y| g * y),
                    Activation::Relu => zip3(g, x, |g, x| if x > 0.0 { g } else { 0.0 }),
                    Activation::Softplus => zip3(g, x, |g, x| g * sigmoid(x)),
                    Activation::Square => zip3(g, x, |g, x| 2.0 * g * x),
                    Activation::Ln => zip3(g, x, |g, x| g / x),
                };
                vec![(*input, dx)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => {
                let mut out = Vec::new();
                if rg(*a) {
                    out.push((*a, zip3(g, self.value(*b), |g, y| g * y)));
                }
                if rg(*b) {
                    out.push((*b, zip3(g, self.value(*a), |g, x| g * x)));
                }
                out
            }
            Op::Scale { input, factor } => vec![(*input, g.map(|v| v * factor))],
            Op::Offset { input } => vec![(*input, g.clone())],
            Op::ChannelBias { input, bias } => {
                let s = g.shape();
                let mut db = Tensor::zeros(self.shape(*bias));
                for (i, chunk) in g.data().chunks(s.plane()).enumerate() {
                    db.data_mut()[i % s.c] += chunk.iter().sum::<f64>();
                }
                vec![(*input, g.clone()), (*bias, db)]
            }
            Op::PixelScale { input, map } => {
                let s = g.shape();
                let plane = s.plane();
                let mut dx = g.clone();
                for (i, chunk) in dx.data_mut().chunks_mut(plane).enumerate() {
                    let m = &map.data()[(i / s.c) * plane..][..plane];
                    chunk.iter_mut().zip(m).for_each(|(v, s)| *v *= s);
                }
                vec![(*input, dx)]
            }
            Op::MaskSelect { input, mask } => {
                let s = g.shape();
                let plane = s.plane();
                let mut dx = g.clone();
                for (i, chunk) in dx.data_mut().chunks_mut(plane).enumerate() {
                    let m = &mask[(i / s.c) * plane..][..plane];
                    chunk.iter_mut().zip(m).for_each(|(v, &keep)| {
                        if !keep {
                            *v = 0.0;
                        }
                    });
                }
                vec![(*input, dx)]
            }
            Op::Concat(inputs) => {
                let s = g.shape();
                let mut offset = 0;
                let mut out = Vec::with_capacity(inputs.len());
                for &v in inputs {
                    let vs = self.shape(v);
                    let len = vs.item();
                    if rg(v) {
                        let mut data = Vec::with_capacity(vs.numel());
                        for n in 0..s.n {
                            data.extend_from_slice(&g.batch_item(n)[offset..offset + len]);
                        }
                        out.push((v, Tensor::from_vec(vs, data).expect("concat slice")));
                    }
                    offset += len;
                }
                out
            }
            Op::SliceChannels { input, start } => {
                let xs = self.shape(*input);
                let s = g.shape();
                let plane = s.plane();
                let mut dx = Tensor::zeros(xs);
                for n in 0..s.n {
                    let src = g.batch_item(n);
                    let dst_start = n * xs.item() + start * plane;
                    dx.data_mut()[dst_start..dst_start + src.len()].copy_from_slice(src);
                }
                vec![(*input, dx)]
            }
            Op::Upsample { input, factor } => vec![(
                *input,
                kernels::upsample_nearest_backward(g, self.shape(*input), *factor),
            )],
            Op::Sum(input) => {
                let gv = g.data()[0];
                vec![(*input, Tensor::full(self.shape(*input), gv))]
            }
        }
    }
}

fn zip3(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    g.zip_map(other, f).expect("gradient shape equals value shape")
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}
