//! Central finite differences against reverse-mode gradients of the full
//! pretraining objective, on a small encoder and a few entries per tensor.

use protonorm::encoder::{Encoder, EncoderConfig, Phase};
use protonorm::nn::Module;
use protonorm::rng;
use protonorm::ssl::{nt_xent, total_loss};
use protonorm::tensor::{Graph, Tensor};

const LAMBDA: f64 = 0.1;
const H: f64 = 1e-5;

fn objective(enc: &Encoder, views: &Tensor, ids: &[usize], grads: bool) -> protonorm::Result<(f64, Graph)> {
    let mut g = Graph::new();
    let out = enc.forward(&mut g, views, Some(ids), Phase::Pretrain, &mut rng::stream(0, "unused"))?;
    let nt = nt_xent(&mut g, out.output, 0.2)?;
    let orth = enc.orthogonality_losses(&mut g)?;
    let loss = total_loss(&mut g, nt, &orth, LAMBDA)?;
    let value = g.value(loss).item()?;
    if grads {
        g.backward(loss)?;
    }
    Ok((value, g))
}

fn main() -> protonorm::Result<()> {
    let cfg = EncoderConfig {
        input_len: 32,
        patch_size: 8,
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        n_prototypes: 3,
        dropout: 0.0,
        ..EncoderConfig::default()
    };
    let enc = Encoder::new(cfg, 3)?;
    let mut r = rng::stream(3, "views");
    let views = Tensor::randn(&[6, 1, 32], 1.0, &mut r);
    let ids = [0, 1, 0, 0, 1, 0];
    let (_, g) = objective(&enc, &views, &ids, true)?;

    let mut params = Vec::new();
    enc.visit(&mut |p| params.push((p.name.clone(), p.id, p.numel())));
    let mut worst = 0.0f64;
    for (name, id, numel) in params {
        let analytic = g.param_grad(id).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; numel]);
        let mut err = 0.0f64;
        for k in (0..numel).step_by(numel.div_ceil(5)) {
            let shifted = |delta: f64| {
                let mut e = enc.clone();
                e.visit_mut(&mut |p| {
                    if p.id == id {
                        p.value.data_mut()[k] += delta;
                    }
                });
                objective(&e, &views, &ids, false).map(|(v, _)| v)
            };
            let numeric = (shifted(H)? - shifted(-H)?) / (2.0 * H);
            let scale = analytic[k].abs().max(numeric.abs()).max(1e-6);
            err = err.max((analytic[k] - numeric).abs() / scale);
        }
        println!("{name:<32} max rel err {err:.2e}");
        worst = worst.max(err);
    }
    println!("worst: {worst:.2e}");
    Ok(())
}
