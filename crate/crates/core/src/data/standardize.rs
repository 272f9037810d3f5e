use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Target shape every sample is brought to before batching.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StandardizeSpec {
    pub target_len: usize,
    pub target_channels: usize,
    /// Noise added to replicated channels only.
    pub replication_noise_std: f64,
}

impl Default for StandardizeSpec {
    fn default() -> Self {
        StandardizeSpec {
            target_len: 128,
            target_channels: 1,
            replication_noise_std: 0.01,
        }
    }
}

impl StandardizeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.target_len == 0 || self.target_channels == 0 {
            return Err(Error::Config("target_len and target_channels must be positive".into()));
        }
        if !(self.replication_noise_std >= 0.0 && self.replication_noise_std.is_finite()) {
            return Err(Error::Config(format!(
                "replication_noise_std must be non-negative, got {}",
                self.replication_noise_std
            )));
        }
        Ok(())
    }
}

/// Resamples `xs` to `n` points, the `k`-th at position `k (len-1)/(n-1)`.
pub fn interpolate_linear(xs: &[f64], n: usize) -> Vec<f64> {
    let l = xs.len();
    if n == 1 || l == 1 {
        return vec![xs[0]; n];
    }
    let step = (l - 1) as f64 / (n - 1) as f64;
    (0..n)
        .map(|k| {
            let pos = k as f64 * step;
            let i = (pos.floor() as usize).min(l - 2);
            let frac = pos - i as f64;
            xs[i] + frac * (xs[i + 1] - xs[i])
        })
        .collect()
}

/// Brings a `[C, L]` sample to `[target_channels, target_len]`.
///
/// Longer series are downsampled by linear interpolation, shorter ones are
/// zero-padded at the tail. Missing channels are filled by cycling through the
/// existing ones, with Gaussian noise on the copies.
pub fn standardize(sample: &Sample, spec: &StandardizeSpec, rng: &mut Rng) -> Result<Sample> {
    let (c, l) = (sample.series.shape()[0], sample.series.shape()[1]);
    if c > spec.target_channels {
        return Err(Error::Config(format!(
            "sample has {c} channels, more than target_channels {}",
            spec.target_channels
        )));
    }
    let (tc, tl) = (spec.target_channels, spec.target_len);
    let mut base = Vec::with_capacity(c * tl);
    for ch in sample.series.data().chunks(l) {
        if l > tl {
            base.extend(interpolate_linear(ch, tl));
        } else {
            base.extend_from_slice(ch);
            base.resize(base.len() + tl - l, 0.0);
        }
    }
    let mut out = base.clone();
    if tc > c {
        let noise = Normal::new(0.0, spec.replication_noise_std).expect("validated std");
        for j in c..tc {
            let src = &base[(j % c) * tl..(j % c + 1) * tl];
            out.extend(src.iter().map(|&v| v + noise.sample(rng)));
        }
    }
    Ok(Sample {
        series: Tensor::new(vec![tc, tl], out)?,
        label: sample.label,
    })
}
