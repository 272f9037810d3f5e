use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::layer_norm::{normalize, LayerNormParams};
use super::prototype::{gate, EmaOutcome, PrototypeBank};
use crate::error::{Error, Result};
use crate::nn::{Module, Param};
use crate::rng;
use crate::tensor::{Graph, Var};

/// How a ProtoNorm site picks the LayerNorm pair for a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    /// Nearest prototype.
    Proto,
    /// The sample's dataset id.
    Dataset,
    /// A single pair for every sample.
    Plain,
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormMode::Proto => "proto",
            NormMode::Dataset => "dataset",
            NormMode::Plain => "plain",
        })
    }
}

impl FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proto" | "proto-gated" => Ok(NormMode::Proto),
            "dataset" | "dataset-indexed" => Ok(NormMode::Dataset),
            "plain" | "plain-ln" => Ok(NormMode::Plain),
            other => Err(Error::Config(format!(
                "unknown norm mode {other:?}; expected proto, dataset or plain"
            ))),
        }
    }
}

/// Per-sample routing decisions of one forward pass through a site.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Routing {
    /// Selected LayerNorm index per sample.
    pub routes: Vec<usize>,
    /// Token-averaged input features per sample (detached values).
    pub features: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtoNormLayer {
    pub norms: Vec<LayerNormParams>,
    pub bank: PrototypeBank,
    pub mode: NormMode,
    epsilon: f64,
}

impl ProtoNormLayer {
    /// `n` identity-initialized LayerNorm pairs (one in plain mode) and an
    /// orthonormal bank of `n` prototypes in dimension `dim`.
    pub fn new(
        name: &str,
        dim: usize,
        n: usize,
        mode: NormMode,
        epsilon: f64,
        ema_alpha: f64,
        seed: u64,
    ) -> Result<Self> {
        let pairs = if mode == NormMode::Plain { 1 } else { n };
        let norms = (0..pairs)
            .map(|i| LayerNormParams::new(&format!("{name}.norm{i}"), dim, epsilon))
            .collect::<Result<Vec<_>>>()?;
        let mut r = rng::stream(seed, &format!("{name}.prototypes"));
        let bank = PrototypeBank::new(name, n, dim, ema_alpha, &mut r)?;
        Ok(ProtoNormLayer {
            norms,
            bank,
            mode,
            epsilon,
        })
    }

    pub fn dim(&self) -> usize {
        self.bank.dim()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Picks the LayerNorm index for every sample of a `[B, T, d]` batch.
    pub fn route(&self, features: &[Vec<f64>], dataset_ids: Option<&[usize]>) -> Result<Vec<usize>> {
        match self.mode {
            NormMode::Plain => Ok(vec![0; features.len()]),
            NormMode::Proto => features.iter().map(|f| gate(f, &self.bank)).collect(),
            NormMode::Dataset => {
                let ids = dataset_ids.ok_or_else(|| {
                    Error::Contract("dataset-indexed normalization needs dataset ids".into())
                })?;
                if ids.len() != features.len() {
                    return Err(Error::Contract(format!(
                        "{} dataset ids for a batch of {}",
                        ids.len(),
                        features.len()
                    )));
                }
                if let Some(&bad) = ids.iter().find(|&&i| i >= self.norms.len()) {
                    return Err(Error::Contract(format!(
                        "dataset id {bad} has no LayerNorm (only {})",
                        self.norms.len()
                    )));
                }
                Ok(ids.to_vec())
            }
        }
    }

    /// Normalizes `x [B, T, d]`. Every token of sample `b` goes through the
    /// same selected pair. Routing is read off detached values, so no
    /// gradient reaches the prototypes from here.
    pub fn forward(&self, g: &mut Graph, x: Var, dataset_ids: Option<&[usize]>) -> Result<(Var, Routing)> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.dim() {
            return Err(Error::shape("protonorm", &shape, &[self.dim()]));
        }
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let features: Vec<Vec<f64>> = {
            let data = g.value(x).data();
            (0..b)
                .map(|s| {
                    let mut f = vec![0.0; d];
                    for tok in 0..t {
                        let row = &data[(s * t + tok) * d..(s * t + tok + 1) * d];
                        f.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    f.iter_mut().for_each(|a| *a /= t as f64);
                    f
                })
                .collect()
        };
        let routes = self.route(&features, dataset_ids)?;

        let xhat = normalize(g, x, self.epsilon)?;
        let mut picked: BTreeMap<usize, (Var, Var)> = BTreeMap::new();
        for &r in &routes {
            if let std::collections::btree_map::Entry::Vacant(e) = picked.entry(r) {
                let gamma = self.norms[r].gamma.bind(g);
                let beta = self.norms[r].beta.bind(g);
                let gamma = g.reshape(gamma, &[1, 1, d])?;
                let beta = g.reshape(beta, &[1, 1, d])?;
                e.insert((gamma, beta));
            }
        }
        let gammas: Vec<Var> = routes.iter().map(|r| picked[r].0).collect();
        let betas: Vec<Var> = routes.iter().map(|r| picked[r].1).collect();
        let gamma = g.concat(&gammas, 0)?;
        let beta = g.concat(&betas, 0)?;
        let scaled = g.mul(xhat, gamma)?;
        let out = g.add(scaled, beta)?;
        Ok((out, Routing { routes, features }))
    }

    /// Counts a training-time routing and queues its features for the EMA.
    /// A no-op for the EMA outside prototype mode or when the bank is frozen.
    pub fn record(&mut self, routing: &Routing) {
        for (&r, f) in routing.routes.iter().zip(&routing.features) {
            if self.mode == NormMode::Proto {
                self.bank.push_assignment(r, f);
            } else {
                self.bank.assignment_counts[r] += 1;
            }
        }
    }

    pub fn apply_ema(&mut self) -> EmaOutcome {
        self.bank.apply_pending()
    }

    /// Prototypes are parameters only when they gate.
    pub fn prototypes_are_parameters(&self) -> bool {
        self.mode == NormMode::Proto
    }
}

impl Module for ProtoNormLayer {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        for n in &self.norms {
            n.visit(f);
        }
        if self.prototypes_are_parameters() {
            self.bank.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for n in &mut self.norms {
            n.visit_mut(f);
        }
        if self.prototypes_are_parameters() {
            self.bank.visit_mut(f);
        }
    }
}
