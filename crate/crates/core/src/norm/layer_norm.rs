use crate::error::{Error, Result};
use crate::nn::{Module, Param};
use crate::tensor::{Graph, Tensor, Var};

/// One LayerNorm affine pair.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Param,
    pub beta: Param,
    pub epsilon: f64,
}

impl LayerNormParams {
    /// `gamma = 1`, `beta = 0`.
    pub fn new(name: &str, dim: usize, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::Config(format!("layer norm epsilon must be > 0, got {epsilon}")));
        }
        Ok(LayerNormParams {
            gamma: Param::new(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[dim])),
            epsilon,
        })
    }

    pub fn dim(&self) -> usize {
        self.gamma.value.numel()
    }
}

impl Module for LayerNormParams {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// `(x - mean) / sqrt(var + eps)` over the last axis, population variance.
pub fn normalize(g: &mut Graph, x: Var, epsilon: f64) -> Result<Var> {
    let mu = g.mean(x, -1)?;
    let var = g.variance(x, -1)?;
    let centered = g.sub(x, mu)?;
    let shifted = g.add_scalar(var, epsilon);
    let std = g.sqrt(shifted);
    g.div(centered, std)
}

/// `gamma * normalize(x) + beta`, binding the pair's parameters on `g`.
pub fn layer_norm(g: &mut Graph, x: Var, params: &LayerNormParams) -> Result<Var> {
    let d = *g.shape(x).last().unwrap_or(&0);
    if d != params.dim() {
        return Err(Error::shape("layer_norm", g.shape(x), &[params.dim()]));
    }
    let xhat = normalize(g, x, params.epsilon)?;
    let gamma = params.gamma.bind(g);
    let beta = params.beta.bind(g);
    let scaled = g.mul(xhat, gamma)?;
    g.add(scaled, beta)
}
