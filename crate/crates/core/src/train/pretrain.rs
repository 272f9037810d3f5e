use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, TrainState};
use super::optim::{cosine_warmup_lr, AdamW, OptimConfig};
use crate::data::{partition, stack, Batches, Dataset, Split};
use crate::encoder::{Encoder, Phase};
use crate::error::{Error, Result};
use crate::rng::{self, Rng, RngState};
use crate::ssl::{augment_batch, nt_xent, total_loss, AugmentConfig, NtXentConfig};
use crate::tensor::Graph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub augment: AugmentConfig,
    pub loss: NtXentConfig,
    pub optim: OptimConfig,
    /// Freezes every bank: no EMA and no orthogonality penalty.
    pub freeze_prototypes: bool,
    /// Moves prototypes toward their assigned features after each step.
    pub ema_updates: bool,
    /// Share of each pool dataset held out for best-checkpoint selection.
    pub val_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 5,
            batch_size: 32,
            augment: AugmentConfig::default(),
            loss: NtXentConfig::default(),
            optim: OptimConfig::desk(),
            freeze_prototypes: false,
            ema_updates: true,
            val_fraction: 0.2,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction)));
        }
        self.augment.validate()?;
        self.loss.validate()?;
        self.optim.validate()
    }
}

/// One row of the loss trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub loss_nt: f64,
    /// Unweighted sum of the per-site orthogonality losses.
    pub loss_orth: f64,
    pub loss_total: f64,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "step,lr,loss_nt,loss_orth,loss_total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.step, self.lr, self.loss_nt, self.loss_orth, self.loss_total
        )
    }
}

pub fn write_trace_csv(path: impl AsRef<Path>, trace: &[StepLog]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    writeln!(out, "{}", StepLog::CSV_HEADER).expect("vec write");
    for row in trace {
        writeln!(out, "{}", row.csv_row()).expect("vec write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Contrastive pretraining driven one batch at a time, so it can stop and
/// resume anywhere.
///
/// Epoch `e` visits the training pool in an order drawn from its own stream,
/// so resuming needs only `(epoch, cursor)` and the augmentation stream.
#[derive(Debug)]
pub struct Pretrainer {
    cfg: PretrainConfig,
    seed: u64,
    train: Vec<Dataset>,
    val: Vec<Dataset>,
    pub encoder: Encoder,
    pub optimizer: AdamW,
    pub state: TrainState,
    /// Encoder with the lowest validation loss so far.
    pub best: Option<Encoder>,
    rng: Rng,
    order: Option<(u64, Vec<(usize, usize)>)>,
    batches_per_epoch: u64,
}

impl Pretrainer {
    pub fn new(mut encoder: Encoder, pool: &[Dataset], cfg: PretrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        encoder.set_prototypes_frozen(cfg.freeze_prototypes);
        let rng = rng::stream(seed, "pretrain");
        let state = TrainState::new(RngState::capture(&rng), cfg.freeze_prototypes);
        Self::assemble(encoder, None, state, rng, pool, cfg, seed)
    }

    /// Continues from a checkpoint written by [`Pretrainer::checkpoint`].
    pub fn resume(ckpt: Checkpoint, pool: &[Dataset], cfg: PretrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let rng = ckpt.state.rng.restore();
        Self::assemble(ckpt.encoder, Some(ckpt.optimizer), ckpt.state, rng, pool, cfg, seed)
    }

    fn assemble(
        encoder: Encoder,
        optimizer: Option<AdamW>,
        state: TrainState,
        rng: Rng,
        pool: &[Dataset],
        cfg: PretrainConfig,
        seed: u64,
    ) -> Result<Self> {
        if encoder.n_classes().is_some() {
            return Err(Error::Contract("pretraining needs the projection head".into()));
        }
        let mut train = Vec::with_capacity(pool.len());
        let mut val = Vec::new();
        for ds in pool {
            if cfg.val_fraction == 0.0 {
                train.push(ds.clone());
                continue;
            }
            let (tr, va) = partition(
                ds,
                1.0 - cfg.val_fraction,
                (Split::Train, Split::Val),
                &mut rng::stream(seed, &format!("pretrain-split.{}", ds.dataset_id)),
            )?;
            train.push(tr);
            if !va.is_empty() {
                val.push(va);
            }
        }
        let batches_per_epoch = Batches::sequential(&train, cfg.batch_size)?.n_batches() as u64;
        let optimizer = optimizer.unwrap_or_else(|| AdamW::new(cfg.optim.resolved(cfg.epochs * batches_per_epoch)));
        Ok(Pretrainer {
            cfg,
            seed,
            train,
            val,
            encoder,
            optimizer,
            state,
            best: None,
            rng,
            order: None,
            batches_per_epoch,
        })
    }

    pub fn batches_per_epoch(&self) -> u64 {
        self.batches_per_epoch
    }

    pub fn total_steps(&self) -> u64 {
        self.cfg.epochs * self.batches_per_epoch
    }

    pub fn is_done(&self) -> bool {
        self.state.epoch >= self.cfg.epochs
    }

    pub fn train_pool(&self) -> &[Dataset] {
        &self.train
    }

    /// Snapshot of everything needed to continue bit-for-bit.
    pub fn checkpoint(&self, run_config: &str) -> Checkpoint {
        let mut state = self.state.clone();
        state.rng = RngState::capture(&self.rng);
        Checkpoint {
            encoder: self.encoder.clone(),
            optimizer: self.optimizer.clone(),
            state,
            run_config: run_config.to_string(),
        }
    }

    fn epoch_order(&mut self) -> Result<&[(usize, usize)]> {
        let epoch = self.state.epoch;
        if self.order.as_ref().map(|o| o.0) != Some(epoch) {
            let mut r = rng::stream(self.seed, &format!("shuffle.{epoch}"));
            let b = Batches::shuffled(&self.train, self.cfg.batch_size, &mut r)?;
            self.order = Some((epoch, b.order().to_vec()));
        }
        Ok(&self.order.as_ref().expect("just set").1)
    }

    /// Runs one optimizer step. Returns `None` once every epoch is done.
    ///
    /// On a divergence error the encoder, optimizer and bank state are left
    /// as they were before the call.
    pub fn step(&mut self) -> Result<Option<StepLog>> {
        if self.is_done() {
            return Ok(None);
        }
        let bs = self.cfg.batch_size;
        let cursor = self.state.cursor as usize;
        let positions = self.epoch_order()?[cursor * bs..].iter().take(bs).copied().collect::<Vec<_>>();
        let batch = stack(&self.train, &positions)?;
        let views = augment_batch(&batch.x, &self.cfg.augment, &mut self.rng)?;
        let ids: Vec<usize> = batch.dataset_ids.iter().chain(&batch.dataset_ids).copied().collect();

        let mut g = Graph::new();
        let out = self.encoder.forward(&mut g, &views, Some(&ids), Phase::Pretrain, &mut self.rng)?;
        let nt = nt_xent(&mut g, out.output, self.cfg.loss.temperature)?;
        let lambda = self.cfg.loss.lambda_orth;
        let orth = if lambda > 0.0 {
            self.encoder.orthogonality_losses(&mut g)?
        } else {
            Vec::new()
        };
        let loss = total_loss(&mut g, nt, &orth, lambda)?;
        let step = self.state.step;
        let loss_total = g.value(loss).item()?;
        if !loss_total.is_finite() {
            return Err(Error::Divergence {
                step,
                msg: format!("pretraining loss is {loss_total}"),
            });
        }
        let loss_nt = g.value(nt).item()?;
        let loss_orth = orth.iter().map(|&o| g.value(o).data()[0]).sum();
        g.backward(loss)?;
        let lr = cosine_warmup_lr(step + 1, &self.optimizer.cfg);
        self.optimizer.step(&mut self.encoder, &g, lr, step)?;
        if self.cfg.ema_updates {
            self.encoder.record_routings(&out.routings)?;
            self.encoder.apply_ema();
        }

        self.state.step += 1;
        self.state.cursor += 1;
        if self.state.cursor == self.batches_per_epoch {
            self.end_epoch()?;
        }
        Ok(Some(StepLog {
            step,
            lr,
            loss_nt,
            loss_orth,
            loss_total,
        }))
    }

    fn end_epoch(&mut self) -> Result<()> {
        self.state.epoch += 1;
        self.state.cursor = 0;
        let Some(loss) = self.validation_loss()? else {
            self.best = Some(self.encoder.clone());
            return Ok(());
        };
        if self.state.best_val.is_none_or(|b| loss < b) {
            self.state.best_val = Some(loss);
            self.state.best_step = self.state.step;
            self.state.since_best = 0;
            self.best = Some(self.encoder.clone());
        } else {
            self.state.since_best += 1;
        }
        Ok(())
    }

    /// Mean NT-Xent over the held-out pool with fixed augmentations and no
    /// dropout; `None` without held-out data.
    pub fn validation_loss(&self) -> Result<Option<f64>> {
        if self.val.is_empty() {
            return Ok(None);
        }
        let mut aug = rng::stream(self.seed, "pretrain-val-aug");
        let mut unused = rng::stream(self.seed, "pretrain-val");
        let (mut total, mut count) = (0.0, 0usize);
        for batch in Batches::sequential(&self.val, self.cfg.batch_size)? {
            let views = augment_batch(&batch.x, &self.cfg.augment, &mut aug)?;
            let ids: Vec<usize> = batch.dataset_ids.iter().chain(&batch.dataset_ids).copied().collect();
            let mut g = Graph::new();
            let out = self.encoder.forward(&mut g, &views, Some(&ids), Phase::Validate, &mut unused)?;
            let nt = nt_xent(&mut g, out.output, self.cfg.loss.temperature)?;
            total += g.value(nt).item()? * batch.len() as f64;
            count += batch.len();
        }
        Ok(Some(total / count as f64))
    }

    /// Runs every remaining step and returns their trace.
    pub fn run(&mut self) -> Result<Vec<StepLog>> {
        let mut trace = Vec::new();
        while let Some(row) = self.step()? {
            trace.push(row);
        }
        Ok(trace)
    }
}

/// Convenience wrapper: fresh pretraining over `pool`, returning the final
/// encoder and its loss trace.
pub fn pretrain(encoder: Encoder, pool: &[Dataset], cfg: &PretrainConfig, seed: u64) -> Result<(Encoder, Vec<StepLog>)> {
    let mut p = Pretrainer::new(encoder, pool, cfg.clone(), seed)?;
    let trace = p.run()?;
    Ok((p.encoder, trace))
}
