//! Datasets, standardization, synthetic pools and batching.

mod standardize;
mod synthetic;
mod ucr;

pub use standardize::{interpolate_linear, standardize, StandardizeSpec};
pub use synthetic::{make_shifted_variant, make_synthetic_clusters, SyntheticSpec};
pub use ucr::{load_ucr_tsv, load_ucr_tsv_raw, parse_ucr, write_ucr, znormalize};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[C, L]`.
    pub series: Tensor,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub dataset_id: usize,
    pub split: Split,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// One more than the largest label, or 0 when empty.
    pub fn n_classes(&self) -> usize {
        self.samples.iter().map(|s| s.label + 1).max().unwrap_or(0)
    }

    /// `(channels, length)` of the first sample.
    pub fn sample_shape(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| (s.series.shape()[0], s.series.shape()[1]))
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    fn with_samples(&self, split: Split, samples: Vec<Sample>) -> Dataset {
        Dataset {
            name: self.name.clone(),
            dataset_id: self.dataset_id,
            split,
            samples,
        }
    }
}

/// Shuffles `ds` and cuts it in two, the first part holding
/// `round(fraction * len)` samples.
pub fn partition(ds: &Dataset, fraction: f64, splits: (Split, Split), rng: &mut Rng) -> Result<(Dataset, Dataset)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("split fraction must lie in [0, 1], got {fraction}")));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(rng);
    let cut = (fraction * ds.len() as f64).round() as usize;
    let pick = |range: &[usize]| range.iter().map(|&i| ds.samples[i].clone()).collect();
    Ok((
        ds.with_samples(splits.0, pick(&idx[..cut])),
        ds.with_samples(splits.1, pick(&idx[cut..])),
    ))
}

/// 80/20 train/validation split.
pub fn train_val_split(ds: &Dataset, rng: &mut Rng) -> Result<(Dataset, Dataset)> {
    partition(ds, 0.8, (Split::Train, Split::Val), rng)
}

/// Draws `n` samples with at least `min_per_class` from every class present
/// in `ds`; the rest are drawn uniformly from what remains.
pub fn sample_labeled(ds: &Dataset, n: usize, min_per_class: usize, rng: &mut Rng) -> Result<Dataset> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in ds.samples.iter().enumerate() {
        by_class.entry(s.label).or_default().push(i);
    }
    let k = by_class.len();
    if n > ds.len() {
        return Err(Error::Input(format!("asked for {n} labeled samples but {} has {}", ds.name, ds.len())));
    }
    if n < k * min_per_class {
        return Err(Error::Input(format!(
            "{n} labeled samples cannot cover {k} classes with {min_per_class} each"
        )));
    }
    let mut chosen = Vec::with_capacity(n);
    let mut rest = Vec::new();
    for (label, mut members) in by_class {
        if members.len() < min_per_class {
            return Err(Error::Input(format!(
                "class {label} has {} samples, fewer than the floor of {min_per_class}",
                members.len()
            )));
        }
        members.shuffle(rng);
        chosen.extend_from_slice(&members[..min_per_class]);
        rest.extend_from_slice(&members[min_per_class..]);
    }
    rest.shuffle(rng);
    chosen.extend_from_slice(&rest[..n - chosen.len()]);
    chosen.sort_unstable();
    Ok(ds.with_samples(ds.split, chosen.into_iter().map(|i| ds.samples[i].clone()).collect()))
}

/// A stacked minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B, C, L]`.
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub dataset_ids: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Stacks the given `(dataset, sample)` positions of `pool` into a batch.
pub fn stack(pool: &[Dataset], positions: &[(usize, usize)]) -> Result<Batch> {
    let mut data = Vec::new();
    let mut labels = Vec::with_capacity(positions.len());
    let mut ids = Vec::with_capacity(positions.len());
    let mut shape: Option<Vec<usize>> = None;
    for &(d, i) in positions {
        let s = &pool[d].samples[i];
        match &shape {
            None => shape = Some(s.series.shape().to_vec()),
            Some(sh) if sh != s.series.shape() => {
                return Err(Error::shape("stack", sh, s.series.shape()));
            }
            _ => {}
        }
        data.extend_from_slice(s.series.data());
        labels.push(s.label);
        ids.push(pool[d].dataset_id);
    }
    let shape = shape.ok_or_else(|| Error::Input("cannot stack an empty batch".into()))?;
    let x = Tensor::new(vec![positions.len(), shape[0], shape[1]], data)?;
    Ok(Batch {
        x,
        labels,
        dataset_ids: ids,
    })
}

/// One epoch over the union of `pool`, in shuffled (or given) order.
#[derive(Debug)]
pub struct Batches<'a> {
    pool: &'a [Dataset],
    order: Vec<(usize, usize)>,
    batch_size: usize,
    cursor: usize,
}

impl<'a> Batches<'a> {
    /// Uniform shuffle across every sample of every dataset in `pool`.
    pub fn shuffled(pool: &'a [Dataset], batch_size: usize, rng: &mut Rng) -> Result<Self> {
        let mut b = Self::sequential(pool, batch_size)?;
        b.order.shuffle(rng);
        Ok(b)
    }

    /// Pool order: dataset by dataset, samples in stored order.
    pub fn sequential(pool: &'a [Dataset], batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let order: Vec<(usize, usize)> = pool
            .iter()
            .enumerate()
            .flat_map(|(d, ds)| (0..ds.len()).map(move |i| (d, i)))
            .collect();
        if order.is_empty() {
            return Err(Error::Input("dataset pool is empty".into()));
        }
        let shape = pool.iter().find_map(Dataset::sample_shape);
        for ds in pool {
            for s in &ds.samples {
                let got = (s.series.shape()[0], s.series.shape()[1]);
                if Some(got) != shape {
                    let (c, l) = shape.unwrap_or_default();
                    return Err(Error::shape("batches", &[got.0, got.1], &[c, l]));
                }
            }
        }
        Ok(Batches {
            pool,
            order,
            batch_size,
            cursor: 0,
        })
    }

    pub fn n_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    /// Sample positions in emission order.
    pub fn order(&self) -> &[(usize, usize)] {
        &self.order
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = stack(self.pool, &self.order[self.cursor..end]).expect("shapes checked at construction");
        self.cursor = end;
        Some(batch)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.cursor).div_ceil(self.batch_size);
        (left, Some(left))
    }

    fn nth(&mut self, n: usize) -> Option<Batch> {
        self.cursor = (self.cursor + n * self.batch_size).min(self.order.len());
        self.next()
    }
}

impl ExactSizeIterator for Batches<'_> {}
