//! Stops pretraining mid-epoch, round-trips the state through checkpoint
//! bytes and shows the resumed run matching the uninterrupted one bit for bit.

use protonorm::data::{make_synthetic_clusters, SyntheticSpec};
use protonorm::encoder::{Encoder, EncoderConfig};
use protonorm::train::{Checkpoint, PretrainConfig, Pretrainer};

fn main() -> protonorm::Result<()> {
    let seed = 5;
    let pool = make_synthetic_clusters(
        &SyntheticSpec {
            n_per_dataset: 48,
            ..SyntheticSpec::default()
        },
        seed,
    )?;
    let cfg = PretrainConfig {
        epochs: 2,
        batch_size: 16,
        ..PretrainConfig::default()
    };
    let fresh = || Encoder::new(EncoderConfig::default(), seed);

    let mut full = Pretrainer::new(fresh()?, &pool, cfg.clone(), seed)?;
    let reference = full.run()?;

    let mut first = Pretrainer::new(fresh()?, &pool, cfg.clone(), seed)?;
    let stop = first.batches_per_epoch() + 1;
    for _ in 0..stop {
        first.step()?;
    }
    let bytes = first.checkpoint("example").to_bytes()?;
    println!("checkpoint after step {stop}: {} bytes", bytes.len());
    let mut resumed = Pretrainer::resume(Checkpoint::from_bytes(&bytes)?, &pool, cfg, seed)?;
    let tail = resumed.run()?;

    for (a, b) in reference[stop as usize..].iter().zip(&tail) {
        let same = a.loss_total.to_bits() == b.loss_total.to_bits();
        println!("step {:>2}: {:.12} {:.12} {}", a.step, a.loss_total, b.loss_total, if same { "same" } else { "DIFFERENT" });
    }
    println!("final encoders identical: {}", full.encoder == resumed.encoder);
    Ok(())
}
