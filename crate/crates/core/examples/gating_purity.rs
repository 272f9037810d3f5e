//! Pretrains on two synthetic datasets whose series sit at -5 and +5 and
//! reports how cleanly each normalization site separates them.

use protonorm::data::{make_synthetic_clusters, SyntheticSpec};
use protonorm::encoder::{Encoder, EncoderConfig};
use protonorm::train::{audit_gating, PretrainConfig, Pretrainer};

fn main() -> protonorm::Result<()> {
    let seed = 1;
    let pool = make_synthetic_clusters(
        &SyntheticSpec {
            offsets: vec![-5.0, 5.0],
            ..SyntheticSpec::default()
        },
        seed,
    )?;
    let encoder = Encoder::new(EncoderConfig::default(), seed)?;
    let cfg = PretrainConfig {
        epochs: 2,
        ..PretrainConfig::default()
    };
    let t0 = std::time::Instant::now();
    let mut trainer = Pretrainer::new(encoder, &pool, cfg, seed)?;
    let trace = trainer.run()?;
    println!(
        "{} steps in {:.1?}, loss {:.4} -> {:.4}",
        trace.len(),
        t0.elapsed(),
        trace[0].loss_total,
        trace.last().unwrap().loss_total
    );
    for r in trace.iter().step_by(4) {
        println!("step {} nt {:.4} orth {:.2}", r.step, r.loss_nt, r.loss_orth);
    }
    for (i, site) in audit_gating(&trainer.encoder, &pool, 64)?.iter().enumerate() {
        println!("site {i}: purity {:.3}, mismatches {}, counts {:?}", site.purity, site.mismatches, site.counts);
    }
    Ok(())
}
