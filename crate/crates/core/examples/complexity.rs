//! Parameter and multiply-accumulate counts as the prototype count grows,
//! at the large classification configuration.

use protonorm::encoder::{count_forward_macs, count_parameters, EncoderConfig, HeadKind};
use protonorm::norm::NormMode;

fn main() {
    let plain = EncoderConfig {
        norm_mode: NormMode::Plain,
        ..EncoderConfig::ucr_large(1)
    };
    let base = count_parameters(&plain, HeadKind::None);
    println!("plain LayerNorm encoder: {base} parameters");
    println!("{:>4} {:>11} {:>9} {:>14} {:>12}", "n", "parameters", "overhead", "core MACs", "gating MACs");
    for n in [4, 8, 16, 32, 64] {
        let cfg = EncoderConfig::ucr_large(n);
        let p = count_parameters(&cfg, HeadKind::None);
        let macs = count_forward_macs(&cfg, HeadKind::None);
        println!(
            "{n:>4} {p:>11} {:>8.2}% {:>14} {:>12}",
            100.0 * (p - base) as f64 / base as f64,
            macs.core(),
            macs.gating_distance
        );
    }
    let d32 = count_parameters(&EncoderConfig::ucr_large(32), HeadKind::None)
        - count_parameters(&EncoderConfig::ucr_large(4), HeadKind::None);
    println!("n=32 over n=4: {d32} parameters, {:.2}% of 8M", 100.0 * d32 as f64 / 8e6);
}
