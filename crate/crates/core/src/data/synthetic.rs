use std::f64::consts::TAU;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Sinusoid-plus-noise pools with per-dataset offset, amplitude and
/// frequency band.
///
/// Sample `i` of dataset `k` has class `i mod n_classes`. Class `c` draws its
/// frequency (cycles per series) uniformly from
/// `[base + c * band, base + (c + 1) * band)`, with `base = 2 + 0.5 k`, so
/// with two classes the label is "frequency above or below the midpoint".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_datasets: usize,
    pub n_per_dataset: usize,
    pub len: usize,
    pub n_classes: usize,
    /// Series mean per dataset. Empty means evenly spaced over `[-5, 5]`.
    pub offsets: Vec<f64>,
    /// Width of each class's frequency band, in cycles per series.
    pub band: f64,
    pub noise_std: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_datasets: 2,
            n_per_dataset: 200,
            len: 128,
            n_classes: 2,
            offsets: Vec::new(),
            band: 2.0,
            noise_std: 0.3,
        }
    }
}

impl SyntheticSpec {
    pub fn offset(&self, k: usize) -> f64 {
        if let Some(&o) = self.offsets.get(k) {
            o
        } else if self.n_datasets == 1 {
            0.0
        } else {
            -5.0 + 10.0 * k as f64 / (self.n_datasets - 1) as f64
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_datasets == 0 || self.n_per_dataset == 0 || self.len < 2 || self.n_classes == 0 {
            return Err(Error::Config(
                "synthetic pools need n_datasets, n_per_dataset, n_classes >= 1 and len >= 2".into(),
            ));
        }
        if !self.offsets.is_empty() && self.offsets.len() != self.n_datasets {
            return Err(Error::Config(format!(
                "{} offsets given for {} datasets",
                self.offsets.len(),
                self.n_datasets
            )));
        }
        if !(self.band > 0.0) || !(self.noise_std >= 0.0) {
            return Err(Error::Config("band must be positive and noise_std non-negative".into()));
        }
        Ok(())
    }
}

/// Generates `spec.n_datasets` univariate datasets with ids `0..k`.
pub fn make_synthetic_clusters(spec: &SyntheticSpec, seed: u64) -> Result<Vec<Dataset>> {
    spec.validate()?;
    let l = spec.len;
    let noise = Normal::new(0.0, spec.noise_std).expect("validated std");
    (0..spec.n_datasets)
        .map(|k| {
            let mut r = rng::stream(seed, &format!("synthetic.{k}"));
            let offset = spec.offset(k);
            let amplitude = 1.0 + 0.25 * k as f64;
            let base = 2.0 + 0.5 * k as f64;
            let samples = (0..spec.n_per_dataset)
                .map(|i| {
                    let label = i % spec.n_classes;
                    let lo = base + label as f64 * spec.band;
                    let freq = r.random_range(lo..lo + spec.band);
                    let phase = r.random_range(0.0..TAU);
                    let data = (0..l)
                        .map(|t| {
                            let wave = (TAU * freq * t as f64 / l as f64 + phase).sin();
                            offset + amplitude * wave + noise.sample(&mut r)
                        })
                        .collect();
                    Sample {
                        series: Tensor::new(vec![1, l], data).expect("shape"),
                        label,
                    }
                })
                .collect();
            Ok(Dataset {
                name: format!("synthetic-{k}"),
                dataset_id: k,
                split: Split::Train,
                samples,
            })
        })
        .collect()
}

/// Copy of `ds` with i.i.d. Gaussian noise of std `noise_std` added to every
/// value, registered under `dataset_id`.
pub fn make_shifted_variant(ds: &Dataset, noise_std: f64, dataset_id: usize, rng: &mut Rng) -> Result<Dataset> {
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::Config(format!("noise_std must be non-negative, got {noise_std}")));
    }
    let mut out = ds.clone();
    out.name = format!("{}-sigma{noise_std}", ds.name);
    out.dataset_id = dataset_id;
    if noise_std > 0.0 {
        let noise = Normal::new(0.0, noise_std).expect("checked std");
        for s in &mut out.samples {
            s.series.data_mut().iter_mut().for_each(|v| *v += noise.sample(rng));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_dataset_is_balanced() {
        let spec = SyntheticSpec {
            n_datasets: 1,
            n_per_dataset: 101,
            ..SyntheticSpec::default()
        };
        let ds = make_synthetic_clusters(&spec, 1).unwrap();
        assert_eq!(ds.len(), 1);
        let counts = ds[0].class_counts();
        assert_eq!(counts, vec![51, 50]);
    }

    #[test]
    fn zero_noise_variant_is_bit_equal() {
        let ds = make_synthetic_clusters(&SyntheticSpec::default(), 3).unwrap();
        let v = make_shifted_variant(&ds[0], 0.0, 7, &mut rng::stream(0, "v")).unwrap();
        assert_eq!(v.samples, ds[0].samples);
        assert_eq!(v.dataset_id, 7);
    }
}
