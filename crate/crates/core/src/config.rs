//! File-based run configuration, its validation and the data it resolves to.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    load_ucr_tsv, load_ucr_tsv_raw, make_shifted_variant, make_synthetic_clusters, partition, standardize, Dataset,
    Split, StandardizeSpec, SyntheticSpec,
};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::norm::NormMode;
use crate::rng;
use crate::train::{FinetuneConfig, PretrainConfig};

/// Where the datasets of a run come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// UCR-format files forming the pretraining pool. Empty means `synthetic`.
    pub pool: Vec<PathBuf>,
    /// Labeled files for fine-tuning and evaluation. Without them the first
    /// pool dataset is split by `train_fraction` and its test part is kept
    /// out of the pool.
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Per-series z-scoring of loaded files.
    pub znorm: bool,
    pub synthetic: SyntheticSpec,
    /// One noisy copy of the source training split joins the pool per entry.
    pub noise_sigmas: Vec<f64>,
    pub train_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            pool: Vec::new(),
            train: None,
            test: None,
            znorm: true,
            synthetic: SyntheticSpec::default(),
            noise_sigmas: Vec::new(),
            train_fraction: 0.75,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    /// Noise levels of the variants written next to the first synthetic dataset.
    pub sigmas: Vec<f64>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            sigmas: vec![0.1, 0.2, 0.3],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    NPrototypes,
    Sigma,
    Lambda,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::NPrototypes => "n_prototypes",
            SweepAxis::Sigma => "sigma",
            SweepAxis::Lambda => "lambda",
        })
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "n_prototypes" | "prototypes" => Ok(SweepAxis::NPrototypes),
            "sigma" => Ok(SweepAxis::Sigma),
            "lambda" => Ok(SweepAxis::Lambda),
            other => Err(Error::Config(format!(
                "unknown sweep axis {other:?}; expected n_prototypes, sigma or lambda"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            axis: SweepAxis::NPrototypes,
            values: vec![4.0, 8.0, 16.0, 32.0, 64.0],
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("values: at least one value is needed".into()));
        }
        for &v in &self.values {
            let ok = match self.axis {
                SweepAxis::NPrototypes => v >= 1.0 && v.fract() == 0.0,
                SweepAxis::Sigma | SweepAxis::Lambda => v >= 0.0 && v.is_finite(),
            };
            if !ok {
                return Err(Error::Config(format!("values: {v} is not a valid {} setting", self.axis)));
            }
        }
        Ok(())
    }
}

/// Everything a command needs, loaded from TOML. Missing keys take their
/// defaults; unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub standardize: StandardizeSpec,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub generate: GenerateConfig,
    pub sweep: SweepConfig,
}

/// Command-line and environment values that replace file values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub norm_mode: Option<NormMode>,
    pub n_prototypes: Option<usize>,
    pub lambda: Option<f64>,
    pub freeze_prototypes: Option<bool>,
}

/// Prefixes a configuration error with the field it concerns.
fn at(field: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{field}: {m}")),
        other => other,
    })
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Hex SHA-256 of the serialized configuration.
    pub fn digest(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(m) = o.norm_mode {
            self.encoder.norm_mode = m;
        }
        if let Some(n) = o.n_prototypes {
            self.encoder.n_prototypes = n;
        }
        if let Some(l) = o.lambda {
            self.pretrain.loss.lambda_orth = l;
        }
        if let Some(f) = o.freeze_prototypes {
            self.pretrain.freeze_prototypes = f;
        }
    }

    /// Number of datasets the pretraining pool will hold.
    pub fn pool_size(&self) -> usize {
        let base = if self.data.pool.is_empty() {
            self.data.synthetic.n_datasets
        } else {
            self.data.pool.len()
        };
        base + self.data.noise_sigmas.len()
    }

    /// Checks every section; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        at("encoder", self.encoder.validate())?;
        at("standardize", self.standardize.validate())?;
        at("pretrain", self.pretrain.validate())?;
        at("finetune", self.finetune.validate())?;
        at("sweep", self.sweep.validate())?;
        if self.data.pool.is_empty() {
            at("data.synthetic", self.data.synthetic.validate())?;
        }
        if self.encoder.input_len != self.standardize.target_len {
            return Err(Error::Config(format!(
                "encoder.input_len ({}) must equal standardize.target_len ({})",
                self.encoder.input_len, self.standardize.target_len
            )));
        }
        if self.encoder.channels != self.standardize.target_channels {
            return Err(Error::Config(format!(
                "encoder.channels ({}) must equal standardize.target_channels ({})",
                self.encoder.channels, self.standardize.target_channels
            )));
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "data.train_fraction must lie in (0, 1), got {}",
                self.data.train_fraction
            )));
        }
        if let Some(bad) = self.data.noise_sigmas.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("data.noise_sigmas: {bad} must be non-negative")));
        }
        if let Some(bad) = self.generate.sigmas.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("generate.sigmas: {bad} must be non-negative")));
        }
        if self.data.train.is_some() != self.data.test.is_some() {
            return Err(Error::Config("data.train and data.test must be given together".into()));
        }
        if self.encoder.norm_mode == NormMode::Dataset && self.encoder.n_prototypes < self.pool_size() {
            return Err(Error::Config(format!(
                "encoder.n_prototypes ({}) must cover the {} pool datasets in dataset mode",
                self.encoder.n_prototypes,
                self.pool_size()
            )));
        }
        Ok(())
    }

    /// Loads or generates the datasets and brings every sample to the
    /// configured shape.
    pub fn resolve_data(&self) -> Result<Experiment> {
        let seed = self.seed;
        let mut sources = if self.data.pool.is_empty() {
            make_synthetic_clusters(&self.data.synthetic, seed)?
        } else {
            self.data
                .pool
                .iter()
                .enumerate()
                .map(|(k, p)| {
                    let mut ds = self.read_dataset(p)?;
                    ds.dataset_id = k;
                    Ok(ds)
                })
                .collect::<Result<Vec<_>>>()?
        };
        let (train, test) = match (&self.data.train, &self.data.test) {
            (Some(tr), Some(te)) => {
                let mut train = self.read_dataset(tr)?;
                let mut test = self.read_dataset(te)?;
                train.split = Split::Train;
                test.split = Split::Test;
                test.dataset_id = train.dataset_id;
                (train, test)
            }
            _ => {
                let (train, test) = partition(
                    &sources[0],
                    self.data.train_fraction,
                    (Split::Train, Split::Test),
                    &mut rng::stream(seed, "data-split"),
                )?;
                sources[0] = train.clone();
                (train, test)
            }
        };
        let n = sources.len();
        for (i, &sigma) in self.data.noise_sigmas.iter().enumerate() {
            let mut r = rng::stream(seed, &format!("noise.{i}"));
            sources.push(make_shifted_variant(&sources[0], sigma, n + i, &mut r)?);
        }
        let mut r = rng::stream(seed, "standardize");
        let mut fit = |ds: Dataset| -> Result<Dataset> {
            let samples = ds
                .samples
                .iter()
                .map(|s| standardize(s, &self.standardize, &mut r))
                .collect::<Result<Vec<_>>>()?;
            Ok(Dataset { samples, ..ds })
        };
        let pool = sources.into_iter().map(&mut fit).collect::<Result<Vec<_>>>()?;
        Ok(Experiment {
            pool,
            train: fit(train)?,
            test: fit(test)?,
        })
    }

    fn read_dataset(&self, path: &Path) -> Result<Dataset> {
        if self.data.znorm {
            load_ucr_tsv(path)
        } else {
            load_ucr_tsv_raw(path)
        }
    }
}

/// Datasets of one run.
#[derive(Clone, Debug)]
pub struct Experiment {
    /// Unlabeled pretraining pool, ids `0..pool.len()`.
    pub pool: Vec<Dataset>,
    /// Labeled data for fine-tuning and its held-out test set.
    pub train: Dataset,
    pub test: Dataset,
}
