//! Pretrains on a synthetic pool, fine-tunes on the labeled source split and
//! compares against fine-tuning from random weights.

use protonorm::data::{make_synthetic_clusters, partition, Split, SyntheticSpec};
use protonorm::encoder::{Encoder, EncoderConfig};
use protonorm::rng;
use protonorm::train::{finetune, pretrain, FinetuneConfig, PretrainConfig};

fn main() -> protonorm::Result<()> {
    let seed = 2;
    let pool = make_synthetic_clusters(&SyntheticSpec::default(), seed)?;
    let (train, test) = partition(&pool[0], 0.75, (Split::Train, Split::Test), &mut rng::stream(seed, "split"))?;
    let ft = FinetuneConfig::default();

    let encoder = Encoder::new(EncoderConfig::default(), seed)?;
    let t0 = std::time::Instant::now();
    let (pretrained, trace) = pretrain(encoder.clone(), &pool, &PretrainConfig::default(), seed)?;
    println!(
        "pretrained {} steps in {:.1?}: nt-xent {:.4} -> {:.4}",
        trace.len(),
        t0.elapsed(),
        trace[0].loss_nt,
        trace.last().unwrap().loss_nt
    );

    for (name, start) in [("pretrained", &pretrained), ("random init", &encoder)] {
        let out = finetune(start, &train, &test, &ft, seed)?;
        println!(
            "{name:>12}: test accuracy {:.3}, macro-F1 {:.3} (best epoch {})",
            out.test.accuracy, out.test.macro_f1, out.best_epoch
        );
    }
    Ok(())
}
