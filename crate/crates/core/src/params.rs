//! Named weight storage and per-pass binding onto a [`Graph`].

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::autodiff::{Graph, Shape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in store order.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Replaces every tensor with one of identical name and shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.names != self.names {
            return Err(Error::Checkpoint("parameter names differ".into()));
        }
        for (i, (mine, theirs)) in self.tensors.iter().zip(&other.tensors).enumerate() {
            if mine.shape() != theirs.shape() {
                return Err(Error::Checkpoint(format!(
                    "{}: expected {}, found {}",
                    self.names[i],
                    mine.shape(),
                    theirs.shape()
                )));
            }
        }
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }

    /// Registers every parameter as a graph leaf; `track` selects gradient tracking.
    pub fn bind(&self, g: &mut Graph, track: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if track {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Graph handles for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients for all parameters in store order; untouched ones are zero.
    pub fn gradients(&self, g: &mut Graph) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| {
                g.take_grad(v)
                    .unwrap_or_else(|| Tensor::zeros(g.shape(v)))
            })
            .collect()
    }
}

/// Normal(0, std) initialization.
pub fn init_normal(shape: Shape, std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// He initialization for a conv kernel of shape (out, in, k, k).
pub fn init_kernel(out_c: usize, in_c: usize, k: usize, gain: f64, rng: &mut impl Rng) -> Tensor {
    let fan_in = (in_c * k * k) as f64;
    init_normal(Shape::new(out_c, in_c, k, k), gain * (2.0 / fan_in).sqrt(), rng)
}

/// Kernel for a normalized sparse convolution, shape (out, in, k, k).
///
/// Each (out, in) slice is a positive constant with small per-tap noise, so a
/// channel responds to the local mean of its valid inputs rather than to
/// which taps happen to be valid.
pub fn init_sparse_kernel(out_c: usize, in_c: usize, k: usize, rng: &mut impl Rng) -> Tensor {
    let taps = k * k;
    let mut data = Vec::with_capacity(out_c * in_c * taps);
    for _ in 0..out_c {
        for _ in 0..in_c {
            let base = 1.25 * rng.sample::<f64, _>(StandardNormal).abs() / in_c as f64;
            for _ in 0..taps {
                let noise = 1.0 + 0.1 * rng.sample::<f64, _>(StandardNormal);
                data.push(base * noise);
            }
        }
    }
    Tensor::from_vec(Shape::new(out_c, in_c, k, k), data).expect("sized to shape")
}
