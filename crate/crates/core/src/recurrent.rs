//! Convolutional LSTM over the latent grid.

use rand::Rng;

use crate::autodiff::{Graph, Shape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{init_kernel, Bound, ParamId, ParamStore};

/// Hidden and cell state values carried between frames.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl ConvLstmState {
    pub fn zeros(shape: Shape) -> Self {
        ConvLstmState {
            h: Tensor::zeros(shape),
            c: Tensor::zeros(shape),
        }
    }

    /// Enters the state into a new graph as constants; this is the truncation point.
    pub fn enter(&self, g: &mut Graph) -> LstmVars {
        LstmVars {
            h: g.constant(self.h.clone()),
            c: g.constant(self.c.clone()),
        }
    }
}

/// State handles within one graph.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub h: Var,
    pub c: Var,
}

impl LstmVars {
    pub fn values(&self, g: &Graph) -> ConvLstmState {
        ConvLstmState {
            h: g.value(self.h).clone(),
            c: g.value(self.c).clone(),
        }
    }
}

/// Gate kernels for input, forget, output and candidate, stacked along the
/// output-channel axis in that order and applied to `[x; h]`.
#[derive(Clone, Debug)]
pub struct ConvLstmWeights {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub input_channels: usize,
    pub hidden: usize,
    pub k: usize,
}

impl ConvLstmWeights {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_channels: usize,
        hidden: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let kernel = store.add(
            format!("{name}.kernel"),
            init_kernel(4 * hidden, input_channels + hidden, k, 0.5_f64.sqrt(), rng),
        );
        let mut b = Tensor::zeros(Shape::new(1, 4 * hidden, 1, 1));
        for c in hidden..2 * hidden {
            b.data_mut()[c] = 1.0;
        }
        let bias = store.add(format!("{name}.bias"), b);
        ConvLstmWeights {
            kernel,
            bias,
            input_channels,
            hidden,
            k,
        }
    }

    pub fn state_shape(&self, n: usize, h: usize, w: usize) -> Shape {
        Shape::new(n, self.hidden, h, w)
    }
}

/// One recurrence: i, f, o = sigmoid, g = tanh, c' = f*c + i*g, h' = o*tanh(c').
pub fn convlstm_step(
    g: &mut Graph,
    params: &Bound,
    weights: &ConvLstmWeights,
    x: Var,
    state: LstmVars,
) -> Result<LstmVars> {
    let xs = g.shape(x);
    let hs = g.shape(state.h);
    if !xs.same_spatial(&hs) {
        return Err(Error::shape(
            "convlstm_step",
            format!("input {xs} vs hidden state {hs}"),
        ));
    }
    if hs.c != weights.hidden || g.shape(state.c) != hs {
        return Err(Error::shape(
            "convlstm_step",
            format!(
                "state h {hs} / c {} for {} hidden channels",
                g.shape(state.c),
                weights.hidden
            ),
        ));
    }
    let joined = g.concat_channels(&[x, state.h])?;
    let gates = g.conv2d(
        joined,
        params.var(weights.kernel),
        Some(params.var(weights.bias)),
        1,
        weights.k / 2,
    )?;
    let parts = g.split_channels(gates, 4)?;
    let i = g.sigmoid(parts[0]);
    let f = g.sigmoid(parts[1]);
    let o = g.sigmoid(parts[2]);
    let cand = g.tanh(parts[3]);
    let keep = g.mul(f, state.c)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok(LstmVars { h, c })
}
