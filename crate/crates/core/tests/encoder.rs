mod common;

use common::{max_rel_err, numeric_grad};
use protonorm::encoder::{
    count_forward_macs, count_parameters, Encoder, EncoderConfig, HeadKind, Phase,
};
use protonorm::nn::Module;
use protonorm::norm::NormMode;
use protonorm::rng;
use protonorm::tensor::{Graph, Tensor};
use protonorm::Error;

fn toy(mode: NormMode) -> EncoderConfig {
    EncoderConfig {
        input_len: 24,
        channels: 2,
        patch_size: 8,
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        n_prototypes: 3,
        dropout: 0.0,
        norm_mode: mode,
        ..EncoderConfig::default()
    }
}

fn batch(b: usize, cfg: &EncoderConfig, seed: u64) -> Tensor {
    Tensor::randn(&[b, cfg.channels, cfg.input_len], 1.0, &mut rng::stream(seed, "batch"))
}

#[test]
fn parameter_formula_matches_stored_parameters() {
    for mode in [NormMode::Proto, NormMode::Dataset, NormMode::Plain] {
        for n in [1, 4, 8, 16, 32, 64] {
            let cfg = EncoderConfig {
                n_prototypes: n,
                norm_mode: mode,
                ..EncoderConfig::default()
            };
            let mut enc = Encoder::new(cfg.clone(), 1).unwrap();
            assert_eq!(enc.num_parameters(), count_parameters(&cfg, HeadKind::Projection));
            enc.attach_classifier(5).unwrap();
            assert_eq!(enc.num_parameters(), count_parameters(&cfg, HeadKind::Classifier(5)));
        }
    }
}

#[test]
fn proto_overhead_formula() {
    for n in [4, 8, 16, 32, 64] {
        let proto = EncoderConfig {
            n_prototypes: n,
            ..EncoderConfig::default()
        };
        let plain = EncoderConfig {
            norm_mode: NormMode::Plain,
            ..proto.clone()
        };
        let (l, d) = (proto.n_layers, proto.d_model);
        let delta = count_parameters(&proto, HeadKind::None) - count_parameters(&plain, HeadKind::None);
        assert_eq!(delta, 2 * l * (n - 1) * 2 * d + 2 * l * n * d);
    }
}

#[test]
fn matmul_macs_match_executed_graph() {
    for (mode, n) in [(NormMode::Proto, 4), (NormMode::Proto, 16), (NormMode::Plain, 4)] {
        let cfg = EncoderConfig {
            n_prototypes: n,
            norm_mode: mode,
            ..EncoderConfig::default()
        };
        let enc = Encoder::new(cfg.clone(), 2).unwrap();
        let mut g = Graph::new();
        let mut r = rng::stream(0, "d");
        enc.forward(&mut g, &batch(1, &cfg, 3), None, Phase::Pretrain, &mut r).unwrap();
        let macs = count_forward_macs(&cfg, HeadKind::Projection);
        assert_eq!(g.matmul_macs(), macs.encoder_matmul + macs.head);
    }
}

#[test]
fn identical_samples_give_identical_rows() {
    let cfg = EncoderConfig {
        dropout: 0.0,
        ..EncoderConfig::default()
    };
    let enc = Encoder::new(cfg.clone(), 4).unwrap();
    let one = batch(1, &cfg, 5);
    let mut data = Vec::new();
    for _ in 0..4 {
        data.extend_from_slice(one.data());
    }
    let four = Tensor::new(vec![4, cfg.channels, cfg.input_len], data).unwrap();
    let mut g = Graph::new();
    let out = enc.forward(&mut g, &four, None, Phase::Pretrain, &mut rng::stream(0, "d")).unwrap();
    let v = g.value(out.output);
    let w = v.shape()[1];
    for i in 1..4 {
        assert_eq!(v.row(0).iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                   v.data()[i * w..(i + 1) * w].iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn zero_dropout_train_equals_eval() {
    let cfg = EncoderConfig {
        dropout: 0.0,
        ..EncoderConfig::default()
    };
    let mut enc = Encoder::new(cfg.clone(), 6).unwrap();
    enc.attach_classifier(3).unwrap();
    let x = batch(3, &cfg, 7);
    let run = |phase| {
        let mut g = Graph::new();
        let o = enc.forward(&mut g, &x, None, phase, &mut rng::stream(1, "d")).unwrap();
        g.value(o.output).clone()
    };
    assert_eq!(run(Phase::Finetune), run(Phase::Eval));
}

#[test]
fn phase_head_mismatch_is_contract_error() {
    let cfg = toy(NormMode::Proto);
    let enc = Encoder::new(cfg.clone(), 1).unwrap();
    let mut g = Graph::new();
    let r = enc.forward(&mut g, &batch(1, &cfg, 1), None, Phase::Eval, &mut rng::stream(0, "d"));
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn dataset_mode_requires_ids() {
    let cfg = toy(NormMode::Dataset);
    let enc = Encoder::new(cfg.clone(), 1).unwrap();
    let mut g = Graph::new();
    let mut r = rng::stream(0, "d");
    let x = batch(2, &cfg, 1);
    assert!(matches!(enc.forward(&mut g, &x, None, Phase::Pretrain, &mut r), Err(Error::Contract(_))));
    let out = enc.forward(&mut g, &x, Some(&[2, 1]), Phase::Pretrain, &mut r).unwrap();
    for routing in &out.routings {
        assert_eq!(routing.routes, vec![2, 1]);
    }
}

#[test]
fn wrong_input_shape_is_rejected() {
    let cfg = toy(NormMode::Proto);
    let enc = Encoder::new(cfg, 1).unwrap();
    let mut g = Graph::new();
    let r = enc.forward(&mut g, &Tensor::zeros(&[1, 1, 24]), None, Phase::Pretrain, &mut rng::stream(0, "d"));
    assert!(matches!(r, Err(Error::Shape { .. })));
}

#[test]
fn patch_embed_gradient_matches_finite_differences() {
    let cfg = toy(NormMode::Proto);
    let mut enc = Encoder::new(cfg.clone(), 11).unwrap();
    // spread the affine pairs so routing matters
    for site in enc.sites_mut() {
        for norm in &mut site.norms {
            let mut r = rng::stream(3, &norm.gamma.name);
            norm.gamma.value = Tensor::randn(&[8], 0.3, &mut r);
            norm.gamma.value.data_mut().iter_mut().for_each(|v| *v += 1.0);
            norm.beta.value = Tensor::randn(&[8], 0.3, &mut r);
        }
    }
    let x = batch(3, &cfg, 12);
    let w = Tensor::randn(&[3, cfg.projection_dim()], 1.0, &mut rng::stream(13, "w"));
    let scalarize = |enc: &Encoder, want: bool| {
        let mut g = Graph::new();
        let out = enc.forward(&mut g, &x, None, Phase::Pretrain, &mut rng::stream(0, "d")).unwrap();
        let wv = g.constant(w.clone());
        let p = g.mul(out.output, wv).unwrap();
        let loss = g.sum_all(p);
        let value = g.value(loss).item().unwrap();
        let grad = want.then(|| {
            g.backward(loss).unwrap();
            let id = enc.patch_embed.weight.id;
            g.param_grad(id).unwrap().clone()
        });
        (value, grad)
    };
    let analytic = scalarize(&enc, true).1.unwrap();
    let w0 = enc.patch_embed.weight.value.clone();
    let numeric = numeric_grad(&w0, 1e-5, |t| {
        let mut e = enc.clone();
        e.patch_embed.weight.value = t.clone();
        scalarize(&e, false).0
    });
    let err = max_rel_err(analytic.data(), &numeric, 1e-6);
    assert!(err < 1e-4, "rel err {err}");
}

#[test]
fn normalization_sites_output_unit_statistics() {
    // Affine pairs start at the identity, so site outputs are the pre-affine values.
    let cfg = EncoderConfig {
        dropout: 0.0,
        ln_eps: 1e-12,
        ..EncoderConfig::default()
    };
    let enc = Encoder::new(cfg.clone(), 21).unwrap();
    let mut g = Graph::new();
    let out = enc.forward(&mut g, &batch(4, &cfg, 22), None, Phase::Pretrain, &mut rng::stream(0, "d")).unwrap();
    assert_eq!(out.site_outputs.len(), 2 * cfg.n_layers);
    let d = cfg.d_model;
    for &site in &out.site_outputs {
        for token in g.value(site).data().chunks(d) {
            let mu = token.iter().sum::<f64>() / d as f64;
            let var = token.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / d as f64;
            assert!(mu.abs() < 1e-5 && (var - 1.0).abs() < 1e-5, "mu {mu} var {var}");
        }
    }
}

#[test]
fn plain_mode_encoder_ignores_banks() {
    let cfg = EncoderConfig {
        norm_mode: NormMode::Plain,
        dropout: 0.0,
        ..EncoderConfig::default()
    };
    let a = Encoder::new(cfg.clone(), 31).unwrap();
    let mut b = a.clone();
    for site in b.sites_mut() {
        site.bank.prototypes.value = Tensor::randn(&[4, 64], 5.0, &mut rng::stream(1, "junk"));
    }
    let x = batch(2, &cfg, 32);
    let run = |e: &Encoder| {
        let mut g = Graph::new();
        let o = e.forward(&mut g, &x, None, Phase::Pretrain, &mut rng::stream(0, "d")).unwrap();
        g.value(o.output).clone()
    };
    assert_eq!(run(&a), run(&b));
}
