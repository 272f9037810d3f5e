//! Source series paired with a noisy copy: compares prototype-gated and
//! plain LayerNorm after fine-tuning on 100 labeled source samples.

use protonorm::norm::NormMode;
use protonorm::train::ShiftProtocol;

fn main() -> protonorm::Result<()> {
    let seeds: Vec<u64> = (0..5).collect();
    let protocol = ShiftProtocol::default();
    for mode in [NormMode::Proto, NormMode::Plain] {
        let t0 = std::time::Instant::now();
        let mut accs = Vec::new();
        for &seed in &seeds {
            let run = protocol.run(mode, seed)?;
            accs.push(run.outcome.test.accuracy);
            println!("{mode} seed {seed}: acc {:.4} f1 {:.4} (best epoch {})",
                run.outcome.test.accuracy, run.outcome.test.macro_f1, run.outcome.best_epoch);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        println!("{mode}: mean accuracy {mean:.4} in {:.1?}", t0.elapsed());
    }
    Ok(())
}
