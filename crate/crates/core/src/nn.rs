//! Parameters and the small building blocks shared by the encoder.

use crate::error::Result;
use crate::rng;
use crate::tensor::{Graph, Tensor, Var};

/// A named trainable tensor. `id` is its slot on a [`Graph`] and is assigned
/// by the owning model.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub id: usize,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param {
            name: name.into(),
            id: usize::MAX,
            value,
        }
    }

    pub fn bind(&self, g: &mut Graph) -> Var {
        g.param(self.id, &self.value)
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Anything holding parameters, visited in a fixed order.
pub trait Module {
    fn visit(&self, f: &mut dyn FnMut(&Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.numel());
        n
    }

    /// Numbers every parameter by its visit position.
    fn assign_ids(&mut self) {
        let mut next = 0;
        self.visit_mut(&mut |p| {
            p.id = next;
            next += 1;
        });
    }
}

/// Affine map `x · W + b` over the last axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    /// Uniform init in `±1/sqrt(fan_in)`, drawn from a stream named after the layer.
    pub fn new(name: &str, fan_in: usize, fan_out: usize, seed: u64) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut r = rng::stream(seed, name);
        Linear {
            weight: Param::new(
                format!("{name}.weight"),
                Tensor::uniform(&[fan_in, fan_out], bound, &mut r),
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::uniform(&[fan_out], bound, &mut r)),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = self.weight.bind(g);
        let b = self.bias.bind(g);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

impl Module for Linear {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Mean cross-entropy of `logits [B, C]` against integer labels.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let ls = g.log_softmax(logits, -1)?;
    let picked = g.gather(ls, labels)?;
    let m = g.mean_all(picked);
    Ok(g.neg(m))
}
