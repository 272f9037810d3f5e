//! Contrastive pretraining objective: view augmentations, NT-Xent, and the
//! combined loss with the prototype orthogonality penalty.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Largest circular shift as a fraction of the series length.
    pub max_shift_fraction: f64,
    pub scale_range: [f64; 2],
    pub jitter_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_shift_fraction: 0.2,
            scale_range: [0.8, 1.2],
            jitter_std: 0.05,
        }
    }
}

impl AugmentConfig {
    /// No-op augmentation: both views equal the input.
    pub fn identity() -> Self {
        AugmentConfig {
            max_shift_fraction: 0.0,
            scale_range: [1.0, 1.0],
            jitter_std: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale_range;
        if !(0.0..=0.5).contains(&self.max_shift_fraction) {
            return Err(Error::Config(format!(
                "max_shift_fraction must lie in [0, 0.5], got {}",
                self.max_shift_fraction
            )));
        }
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!(
                "scale_range must satisfy 0 < lo <= hi, got [{lo}, {hi}]"
            )));
        }
        if !(self.jitter_std >= 0.0 && self.jitter_std.is_finite()) {
            return Err(Error::Config(format!(
                "jitter_std must be non-negative, got {}",
                self.jitter_std
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NtXentConfig {
    pub temperature: f64,
    /// Weight of the summed orthogonality penalties.
    pub lambda_orth: f64,
}

impl Default for NtXentConfig {
    fn default() -> Self {
        NtXentConfig {
            temperature: 0.2,
            lambda_orth: 0.001,
        }
    }
}

impl NtXentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.lambda_orth >= 0.0 && self.lambda_orth.is_finite()) {
            return Err(Error::Config(format!(
                "lambda_orth must be non-negative, got {}",
                self.lambda_orth
            )));
        }
        Ok(())
    }
}

/// Rotates every channel of `series [C, L]` right by `k` steps.
pub fn circular_shift(series: &Tensor, k: i64) -> Tensor {
    let (c, l) = (series.shape()[0], series.shape()[1]);
    let k = k.rem_euclid(l as i64) as usize;
    let mut out = vec![0.0; c * l];
    for ch in 0..c {
        let src = &series.data()[ch * l..(ch + 1) * l];
        let dst = &mut out[ch * l..(ch + 1) * l];
        dst[k..].copy_from_slice(&src[..l - k]);
        dst[..k].copy_from_slice(&src[l - k..]);
    }
    Tensor::new(series.shape().to_vec(), out).expect("same shape")
}

/// Two views of `series [C, L]`: a random circular shift, and a random
/// scaling with additive Gaussian jitter.
pub fn augment_pair(series: &Tensor, cfg: &AugmentConfig, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
    if series.rank() != 2 {
        return Err(Error::shape("augment_pair", series.shape(), &[0, 0]));
    }
    if !series.is_finite() {
        return Err(Error::Input("augment_pair: non-finite input".into()));
    }
    let l = series.shape()[1];
    let max_shift = (cfg.max_shift_fraction * l as f64).floor() as i64;
    let shift = rng.random_range(-max_shift..=max_shift);
    let view1 = circular_shift(series, shift);

    let [lo, hi] = cfg.scale_range;
    let scale = if lo == hi { lo } else { rng.random_range(lo..hi) };
    let mut view2 = series.clone();
    if cfg.jitter_std > 0.0 {
        let noise = Normal::new(0.0, cfg.jitter_std).expect("validated std");
        for v in view2.data_mut() {
            *v = *v * scale + noise.sample(rng);
        }
    } else {
        view2.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    Ok((view1, view2))
}

/// Augments a `[B, C, L]` batch into `[2B, C, L]`: all first views, then
/// all second views, so row `i` pairs with row `i + B`.
pub fn augment_batch(batch: &Tensor, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Tensor> {
    if batch.rank() != 3 {
        return Err(Error::shape("augment_batch", batch.shape(), &[0, 0, 0]));
    }
    let (b, c, l) = (batch.shape()[0], batch.shape()[1], batch.shape()[2]);
    let mut first = Vec::with_capacity(b * c * l);
    let mut second = Vec::with_capacity(b * c * l);
    for s in 0..b {
        let series = Tensor::new(vec![c, l], batch.data()[s * c * l..(s + 1) * c * l].to_vec())?;
        let (v1, v2) = augment_pair(&series, cfg, rng)?;
        first.extend(v1.into_data());
        second.extend(v2.into_data());
    }
    first.extend(second);
    Tensor::new(vec![2 * b, c, l], first)
}

/// NT-Xent over `z [2N, D]` where row `i` and row `(i + N) mod 2N` are
/// positives. Mean over all `2N` anchors.
pub fn nt_xent(g: &mut Graph, z: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let shape = g.shape(z).to_vec();
    if shape.len() != 2 || shape[0] < 2 || shape[0] % 2 != 0 {
        return Err(Error::shape("nt_xent", &shape, &[0, 0]));
    }
    let (rows, d) = (shape[0], shape[1]);
    let zero_row = g.value(z).data().chunks(d).position(|r| r.iter().all(|&v| v == 0.0));
    if let Some(i) = zero_row {
        return Err(Error::Input(format!("nt_xent: row {i} has zero norm")));
    }
    let sq = g.mul(z, z)?;
    let sq = g.sum(sq, -1)?;
    let norm = g.sqrt(sq);
    let zn = g.div(z, norm)?;
    let znt = g.transpose(zn, 0, 1)?;
    let sim = g.matmul(zn, znt)?;
    let logits = g.mul_scalar(sim, 1.0 / temperature);
    let diagonal = (0..rows * rows).map(|k| k / rows == k % rows).collect();
    let logits = g.mask_fill(logits, diagonal, f64::NEG_INFINITY)?;
    let log_p = g.log_softmax(logits, -1)?;
    let n = rows / 2;
    let positives: Vec<usize> = (0..rows).map(|i| (i + n) % rows).collect();
    let picked = g.gather(log_p, &positives)?;
    let mean = g.mean_all(picked);
    Ok(g.neg(mean))
}

/// `nt + λ Σ orth`. With `λ = 0` or no penalties, returns `nt` itself.
pub fn total_loss(g: &mut Graph, nt: Var, orth: &[Var], lambda: f64) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("lambda_orth must be non-negative, got {lambda}")));
    }
    if lambda == 0.0 || orth.is_empty() {
        return Ok(nt);
    }
    let mut sum = orth[0];
    for &o in &orth[1..] {
        sum = g.add(sum, o)?;
    }
    let weighted = g.mul_scalar(sum, lambda);
    g.add(nt, weighted)
}
