use serde::{Deserialize, Serialize};

use super::metrics::Metrics;
use super::optim::{cosine_warmup_lr, AdamW, OptimConfig};
use crate::data::{sample_labeled, train_val_split, Batches, Dataset};
use crate::encoder::{Encoder, Phase};
use crate::error::{Error, Result};
use crate::nn::cross_entropy;
use crate::rng;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: u64,
    pub batch_size: usize,
    /// Size of the labeled subset; `None` uses the whole training split.
    pub n_labeled: Option<usize>,
    pub min_per_class: usize,
    pub optim: OptimConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 30,
            batch_size: 16,
            n_labeled: Some(100),
            min_per_class: 5,
            optim: OptimConfig::desk(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        self.optim.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: u64,
    pub loss: f64,
    pub val_accuracy: f64,
    pub val_macro_f1: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    /// Classifier at the epoch with the best validation score.
    pub model: Encoder,
    pub best_epoch: u64,
    pub val: Metrics,
    pub test: Metrics,
    pub trace: Vec<EpochLog>,
}

/// Replaces the projection head with a linear classifier, freezes every
/// prototype bank, and trains on a labeled subset of `train` with
/// cross-entropy. The subset is split 80/20 for model selection; the selected
/// model is scored on `test`.
pub fn finetune(
    pretrained: &Encoder,
    train: &Dataset,
    test: &Dataset,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let labeled = match cfg.n_labeled {
        Some(n) if n < train.len() => {
            sample_labeled(train, n, cfg.min_per_class, &mut rng::stream(seed, "finetune-labeled"))?
        }
        _ => train.clone(),
    };
    let (tr, va) = train_val_split(&labeled, &mut rng::stream(seed, "finetune-split"))?;
    let va = if va.is_empty() { tr.clone() } else { va };
    if tr.is_empty() {
        return Err(Error::Input("fine-tuning needs at least one training sample".into()));
    }
    let n_classes = train.n_classes().max(test.n_classes());

    let mut model = pretrained.clone();
    model.attach_classifier(n_classes)?;
    model.set_prototypes_frozen(true);
    let frozen: Vec<Tensor> = model.sites().map(|s| s.bank.prototypes.value.clone()).collect();

    let pool = std::slice::from_ref(&tr);
    let per_epoch = Batches::sequential(pool, cfg.batch_size)?.n_batches() as u64;
    let mut opt = AdamW::new(cfg.optim.resolved(cfg.epochs * per_epoch));
    let mut dropout = rng::stream(seed, "finetune");
    let mut step = 0u64;
    let mut best: Option<(Encoder, u64, Metrics)> = None;
    let mut trace = Vec::with_capacity(cfg.epochs as usize);

    for epoch in 0..cfg.epochs {
        let mut shuffle = rng::stream(seed, &format!("finetune-shuffle.{epoch}"));
        let (mut total, mut seen) = (0.0, 0usize);
        for batch in Batches::shuffled(pool, cfg.batch_size, &mut shuffle)? {
            let mut g = Graph::new();
            let out = model.forward(&mut g, &batch.x, Some(&batch.dataset_ids), Phase::Finetune, &mut dropout)?;
            let loss = cross_entropy(&mut g, out.output, &batch.labels)?;
            let value = g.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Divergence {
                    step,
                    msg: format!("fine-tuning loss is {value}"),
                });
            }
            g.backward(loss)?;
            opt.step(&mut model, &g, cosine_warmup_lr(step + 1, &opt.cfg), step)?;
            step += 1;
            total += value * batch.len() as f64;
            seen += batch.len();
        }
        let unchanged = model.sites().zip(&frozen).all(|(s, p)| {
            s.bank.prototypes.value.data().iter().zip(p.data()).all(|(a, b)| a.to_bits() == b.to_bits())
        });
        if !unchanged {
            return Err(Error::Contract(format!("prototype bank changed during fine-tuning epoch {epoch}")));
        }
        let val = evaluate(&model, &va, cfg.batch_size)?;
        trace.push(EpochLog {
            epoch,
            loss: total / seen as f64,
            val_accuracy: val.accuracy,
            val_macro_f1: val.macro_f1,
        });
        let better = best.as_ref().is_none_or(|(_, _, b)| {
            (val.accuracy, val.macro_f1) > (b.accuracy, b.macro_f1)
        });
        if better {
            best = Some((model.clone(), epoch, val));
        }
    }
    let (model, best_epoch, val) = best.expect("at least one epoch");
    let test = evaluate(&model, test, cfg.batch_size)?;
    Ok(FinetuneOutcome {
        model,
        best_epoch,
        val,
        test,
        trace,
    })
}

/// Class predictions (arg-max logit, lowest index on ties) and, per
/// normalization site, how many samples each LayerNorm received.
pub fn predict(model: &Encoder, ds: &Dataset, batch_size: usize) -> Result<(Vec<usize>, Vec<Vec<u64>>)> {
    if model.n_classes().is_none() {
        return Err(Error::Contract("prediction needs a classifier head".into()));
    }
    let mut unused = rng::stream(0, "eval");
    let mut preds = Vec::with_capacity(ds.len());
    let mut hist: Vec<Vec<u64>> = model.sites().map(|s| vec![0; s.norms.len()]).collect();
    for batch in Batches::sequential(std::slice::from_ref(ds), batch_size)? {
        let mut g = Graph::new();
        let out = model.forward(&mut g, &batch.x, Some(&batch.dataset_ids), Phase::Eval, &mut unused)?;
        let logits = g.value(out.output);
        let c = logits.shape()[1];
        for row in logits.data().chunks(c) {
            let arg = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
            preds.push(arg);
        }
        for (h, r) in hist.iter_mut().zip(&out.routings) {
            for &route in &r.routes {
                h[route] += 1;
            }
        }
    }
    Ok((preds, hist))
}

pub fn evaluate(model: &Encoder, ds: &Dataset, batch_size: usize) -> Result<Metrics> {
    if ds.is_empty() {
        return Err(Error::Input(format!("{}: empty evaluation set", ds.name)));
    }
    let k = model
        .n_classes()
        .ok_or_else(|| Error::Contract("evaluation needs a classifier head".into()))?;
    if ds.n_classes() > k {
        return Err(Error::Contract(format!(
            "{} has {} classes but the classifier has {k}",
            ds.name,
            ds.n_classes()
        )));
    }
    let (preds, _) = predict(model, ds, batch_size)?;
    Metrics::from_predictions(&ds.labels(), &preds, k)
}

/// [`evaluate`] over `threads` disjoint shards, summing confusion matrices.
pub fn evaluate_parallel(model: &Encoder, ds: &Dataset, batch_size: usize, threads: usize) -> Result<Metrics> {
    if ds.is_empty() {
        return Err(Error::Input(format!("{}: empty evaluation set", ds.name)));
    }
    let k = model
        .n_classes()
        .ok_or_else(|| Error::Contract("evaluation needs a classifier head".into()))?;
    let threads = threads.clamp(1, ds.len());
    let shard = ds.len().div_ceil(threads);
    let parts = std::thread::scope(|s| {
        let handles: Vec<_> = ds
            .samples
            .chunks(shard)
            .map(|chunk| {
                let part = Dataset {
                    name: ds.name.clone(),
                    dataset_id: ds.dataset_id,
                    split: ds.split,
                    samples: chunk.to_vec(),
                };
                s.spawn(move || confusion(model, &part, batch_size, k))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut total = vec![vec![0; k]; k];
    for part in parts {
        for (acc, row) in total.iter_mut().zip(part) {
            acc.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
    }
    Metrics::from_confusion(total)
}

fn confusion(model: &Encoder, part: &Dataset, batch_size: usize, k: usize) -> Result<Vec<Vec<u64>>> {
    let (preds, _) = predict(model, part, batch_size)?;
    let mut out = vec![vec![0; k]; k];
    for (&y, &p) in part.labels().iter().zip(&preds) {
        if y >= k {
            return Err(Error::Contract(format!("label {y} outside classifier range {k}")));
        }
        out[y][p] += 1;
    }
    Ok(out)
}
