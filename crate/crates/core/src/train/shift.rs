use serde::{Deserialize, Serialize};

use super::finetune::{finetune, FinetuneConfig, FinetuneOutcome};
use super::pretrain::{PretrainConfig, Pretrainer, StepLog};
use crate::data::{make_shifted_variant, make_synthetic_clusters, partition, Dataset, Split, SyntheticSpec};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::Result;
use crate::norm::NormMode;
use crate::rng;

/// Pretrain on a source dataset paired with a noisy copy of it, fine-tune on
/// a small labeled subset of the source, test on held-out source samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftProtocol {
    pub source: SyntheticSpec,
    pub sigma: f64,
    /// Share of the source kept for training; the rest is the test set.
    pub train_fraction: f64,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
}

impl Default for ShiftProtocol {
    fn default() -> Self {
        ShiftProtocol {
            source: SyntheticSpec {
                n_datasets: 1,
                n_per_dataset: 400,
                ..SyntheticSpec::default()
            },
            sigma: 0.3,
            train_fraction: 0.75,
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig {
                epochs: 2,
                ..PretrainConfig::default()
            },
            finetune: FinetuneConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ShiftRun {
    pub pretrain_trace: Vec<StepLog>,
    pub outcome: FinetuneOutcome,
}

impl ShiftProtocol {
    /// `(source train, noisy train copy, source test)`. Depends only on `seed`.
    pub fn datasets(&self, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
        let source = make_synthetic_clusters(&self.source, seed)?.remove(0);
        let (train, test) = partition(
            &source,
            self.train_fraction,
            (Split::Train, Split::Test),
            &mut rng::stream(seed, "shift-split"),
        )?;
        let noisy = make_shifted_variant(&train, self.sigma, train.dataset_id + 1, &mut rng::stream(seed, "shift-noise"))?;
        Ok((train, noisy, test))
    }

    pub fn run(&self, mode: NormMode, seed: u64) -> Result<ShiftRun> {
        let (train, noisy, test) = self.datasets(seed)?;
        let cfg = EncoderConfig {
            norm_mode: mode,
            ..self.encoder.clone()
        };
        let encoder = Encoder::new(cfg, seed)?;
        let mut p = Pretrainer::new(encoder, &[train.clone(), noisy], self.pretrain.clone(), seed)?;
        let pretrain_trace = p.run()?;
        let pretrained = p.best.take().unwrap_or(p.encoder);
        let outcome = finetune(&pretrained, &train, &test, &self.finetune, seed)?;
        Ok(ShiftRun {
            pretrain_trace,
            outcome,
        })
    }
}
