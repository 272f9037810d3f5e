//! NT-Xent on hand-made embeddings: aligned views give a low loss, shuffled
//! pairs a high one, and temperature sharpens both.

use protonorm::rng;
use protonorm::ssl::nt_xent;
use protonorm::tensor::{Graph, Tensor};

fn loss(z: &Tensor, temperature: f64) -> protonorm::Result<f64> {
    let mut g = Graph::new();
    let v = g.leaf(z.clone(), true);
    let l = nt_xent(&mut g, v, temperature)?;
    g.value(l).item()
}

fn main() -> protonorm::Result<()> {
    let (n, d) = (8, 16);
    let mut r = rng::stream(0, "example");
    let anchors = Tensor::randn(&[n, d], 1.0, &mut r);
    let jitter = Tensor::randn(&[n, d], 0.05, &mut r);
    let other = Tensor::randn(&[n, d], 1.0, &mut r);

    let positives: Vec<f64> = anchors.data().iter().zip(jitter.data()).map(|(a, b)| a + b).collect();
    let aligned = Tensor::new(vec![2 * n, d], [anchors.data(), &positives].concat())?;
    let unrelated = Tensor::new(vec![2 * n, d], [anchors.data(), other.data()].concat())?;

    println!("{:>6} {:>10} {:>10}", "tau", "aligned", "unrelated");
    for tau in [0.05, 0.1, 0.2, 0.5, 1.0] {
        println!("{tau:>6} {:>10.4} {:>10.4}", loss(&aligned, tau)?, loss(&unrelated, tau)?);
    }
    println!("log(2N - 1) = {:.4}", ((2 * n - 1) as f64).ln());
    Ok(())
}
