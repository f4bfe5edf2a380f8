use rand::Rng;

use crate::autodiff::{Graph, Shape, Tensor, Var};
use crate::error::Result;
use crate::params::{init_kernel, Bound, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        bias: bool,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init_kernel(out_c, in_c, k, gain, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(Shape::new(1, out_c, 1, 1))));
        Conv {
            weight,
            bias,
            stride,
            pad: k / 2,
        }
    }

    /// A convolution whose weights and bias start at zero.
    pub fn zeroed(store: &mut ParamStore, name: &str, in_c: usize, out_c: usize, k: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(Shape::new(out_c, in_c, k, k)));
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(Shape::new(1, out_c, 1, 1))));
        Conv {
            weight,
            bias,
            stride: 1,
            pad: k / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(
            x,
            p.var(self.weight),
            self.bias.map(|b| p.var(b)),
            self.stride,
            self.pad,
        )
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize, eps: f64) -> Self {
        GroupNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(Shape::new(1, channels, 1, 1), 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(Shape::new(1, channels, 1, 1))),
            groups,
            eps,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.group_norm(x, self.groups, p.var(self.gamma), p.var(self.beta), self.eps)
    }
}

/// Basic residual block: conv-norm-relu-conv-norm plus (projected) shortcut, then relu.
#[derive(Clone, Debug)]
pub struct ResBlock {
    conv1: Conv,
    norm1: GroupNorm,
    conv2: Conv,
    norm2: GroupNorm,
    shortcut: Option<(Conv, GroupNorm)>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        stride: usize,
        groups: usize,
        eps: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let conv1 = Conv::new(store, &format!("{name}.conv1"), in_c, out_c, 3, stride, false, 1.0, rng);
        let norm1 = GroupNorm::new(store, &format!("{name}.norm1"), out_c, groups, eps);
        let conv2 = Conv::new(store, &format!("{name}.conv2"), out_c, out_c, 3, 1, false, 1.0, rng);
        let norm2 = GroupNorm::new(store, &format!("{name}.norm2"), out_c, groups, eps);
        let shortcut = (stride != 1 || in_c != out_c).then(|| {
            (
                Conv::new(store, &format!("{name}.proj"), in_c, out_c, 1, stride, false, 1.0, rng),
                GroupNorm::new(store, &format!("{name}.proj_norm"), out_c, groups, eps),
            )
        });
        ResBlock {
            conv1,
            norm1,
            conv2,
            norm2,
            shortcut,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = self.conv1.forward(g, p, x)?;
        let y = self.norm1.forward(g, p, y)?;
        let y = g.relu(y);
        let y = self.conv2.forward(g, p, y)?;
        let y = self.norm2.forward(g, p, y)?;
        let skip = match &self.shortcut {
            Some((conv, norm)) => {
                let s = conv.forward(g, p, x)?;
                norm.forward(g, p, s)?
            }
            None => x,
        };
        let y = g.add(y, skip)?;
        Ok(g.relu(y))
    }
}
