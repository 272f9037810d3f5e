use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr_peak: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub warmup_steps: u64,
    /// Schedule length. Zero means "derive from the loop length".
    pub total_steps: u64,
    pub lr_floor: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr_peak: 1e-3,
            weight_decay: 1e-5,
            betas: [0.9, 0.999],
            eps: 1e-8,
            warmup_steps: 2000,
            total_steps: 0,
            lr_floor: 0.0,
        }
    }
}

impl OptimConfig {
    /// Same settings with a short warmup for runs of a few hundred steps.
    pub fn desk() -> Self {
        OptimConfig {
            warmup_steps: 50,
            ..Self::default()
        }
    }

    /// Copy with `total_steps` filled in when it was left at zero; the
    /// warmup is clipped to the schedule length.
    pub fn resolved(&self, total_steps: u64) -> Self {
        let total = if self.total_steps == 0 { total_steps } else { self.total_steps };
        OptimConfig {
            total_steps: total,
            warmup_steps: self.warmup_steps.min(total),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return bad(format!("lr_peak must be positive, got {}", self.lr_peak));
        }
        if !(self.lr_floor >= 0.0 && self.lr_floor <= self.lr_peak) {
            return bad(format!("lr_floor must lie in [0, lr_peak], got {}", self.lr_floor));
        }
        if !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return bad("weight_decay must be non-negative and eps positive".into());
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return bad(format!("betas must lie in [0, 1), got {:?}", self.betas));
        }
        if self.total_steps != 0 && self.warmup_steps > self.total_steps {
            return bad(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr_peak`, then cosine decay to `lr_floor` at
/// `total_steps`. Steps past the end stay at the floor.
pub fn cosine_warmup_lr(step: u64, cfg: &OptimConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr_peak * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.total_steps.saturating_sub(cfg.warmup_steps);
    if span == 0 {
        return if step == cfg.warmup_steps { cfg.lr_peak } else { cfg.lr_floor };
    }
    let progress = ((step - cfg.warmup_steps) as f64 / span as f64).min(1.0);
    cfg.lr_floor + (cfg.lr_peak - cfg.lr_floor) * 0.5 * (1.0 + (PI * progress).cos())
}

/// Adam moments of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub step: u64,
    pub m: Tensor,
    pub v: Tensor,
}

/// AdamW with decoupled weight decay. State is keyed by parameter name.
/// Parameters without a gradient on the graph are left untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: OptimConfig,
    pub moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: OptimConfig) -> Self {
        AdamW {
            cfg,
            moments: BTreeMap::new(),
        }
    }

    /// One update of every parameter of `model` that has a gradient in `g`.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, model: &mut dyn Module, g: &Graph, lr: f64, global_step: u64) -> Result<()> {
        let mut bad = None;
        model.visit(&mut |p| {
            if bad.is_none() {
                if let Some(grad) = g.param_grad(p.id) {
                    if !grad.is_finite() {
                        bad = Some(p.name.clone());
                    }
                }
            }
        });
        if let Some(name) = bad {
            return Err(Error::Divergence {
                step: global_step,
                msg: format!("non-finite gradient for {name}"),
            });
        }
        let [b1, b2] = self.cfg.betas;
        let (eps, wd) = (self.cfg.eps, self.cfg.weight_decay);
        let moments = &mut self.moments;
        model.visit_mut(&mut |p| {
            let Some(grad) = g.param_grad(p.id) else { return };
            let st = moments.entry(p.name.clone()).or_insert_with(|| Moments {
                step: 0,
                m: Tensor::zeros(p.value.shape()),
                v: Tensor::zeros(p.value.shape()),
            });
            st.step += 1;
            let c1 = 1.0 - b1.powi(st.step as i32);
            let c2 = 1.0 - b2.powi(st.step as i32);
            let decay = 1.0 - lr * wd;
            let (m, v) = (st.m.data_mut(), st.v.data_mut());
            for (((w, &gr), m), v) in p.value.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                *w *= decay;
                *m = b1 * *m + (1.0 - b1) * gr;
                *v = b2 * *v + (1.0 - b2) * gr * gr;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        });
        Ok(())
    }
}
