mod common;

use common::{max_rel_err, numeric_grad};
use proptest::prelude::*;
use protonorm::tensor::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;
const FLOOR: f64 = 1e-6;

/// Checks `sum(w ⊙ op(x))` against finite differences for a random weighting `w`.
fn check_unary(x: Tensor, seed: u64, op: impl Fn(&mut Graph, Var) -> Var) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let y = op(&mut g, v);
        g.value(y).shape().to_vec()
    };
    let w = Tensor::randn(&probe, 1.0, &mut rng);
    let eval = |t: &Tensor, want_grad: bool| {
        let mut g = Graph::new();
        let v = g.leaf(t.clone(), want_grad);
        let y = op(&mut g, v);
        let wv = g.constant(w.clone());
        let p = g.mul(y, wv).unwrap();
        let loss = g.sum_all(p);
        let value = g.value(loss).item().unwrap();
        let grad = want_grad.then(|| {
            g.backward(loss).unwrap();
            g.grad(v).unwrap().clone()
        });
        (value, grad)
    };
    let analytic = eval(&x, true).1.unwrap();
    let numeric = numeric_grad(&x, H, |t| eval(t, false).0);
    max_rel_err(analytic.data(), &numeric, FLOOR)
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut g = Graph::new();
    let i = g.constant(Tensor::eye(2));
    let m = g.constant(Tensor::new(vec![2, 2], vec![1.5, -2.0, 3.0, 4.25]).unwrap());
    let y = g.matmul(i, m).unwrap();
    assert_eq!(g.value(y).data(), &[1.5, -2.0, 3.0, 4.25]);

    let a = g.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
    let b = g.constant(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
    let y = g.matmul(a, b).unwrap();
    assert_eq!(g.value(y).data(), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let b = rand_t(&[3, 3], 2);
    let err = check_unary(rand_t(&[3, 3], 1), 3, |g, a| {
        let bv = g.constant(b.clone());
        g.matmul(a, bv).unwrap()
    });
    assert!(err < TOL, "rel err {err}");
    let a = rand_t(&[3, 3], 4);
    let err = check_unary(rand_t(&[3, 3], 5), 6, |g, b| {
        let av = g.constant(a.clone());
        g.matmul(av, b).unwrap()
    });
    assert!(err < TOL, "rel err {err}");
}

#[test]
fn batched_matmul_broadcasts_rhs() {
    let w = rand_t(&[4, 2], 7);
    let err = check_unary(rand_t(&[2, 3, 4], 8), 9, |g, x| {
        let wv = g.constant(w.clone());
        g.matmul(x, wv).unwrap()
    });
    assert!(err < TOL, "rel err {err}");
    let x = rand_t(&[2, 3, 4], 10);
    let err = check_unary(w.clone(), 11, |g, wv| {
        let xv = g.constant(x.clone());
        g.matmul(xv, wv).unwrap()
    });
    assert!(err < TOL, "rel err {err}");
}

#[test]
fn softmax_symmetry_and_stability() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros(&[3]));
    let s = g.softmax(z, -1).unwrap();
    for &p in g.value(s).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let big = g.constant(Tensor::from_vec(vec![1000.0, 0.0]));
    let s = g.softmax(big, 0).unwrap();
    let d = g.value(s).data();
    assert!((d[0] - 1.0).abs() < 1e-12 && d[1].abs() < 1e-12);
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let err = check_unary(rand_t(&[5], 12), 13, |g, x| g.softmax(x, 0).unwrap());
    assert!(err < TOL, "rel err {err}");
    let err = check_unary(rand_t(&[3, 4], 14), 15, |g, x| g.softmax(x, 0).unwrap());
    assert!(err < TOL, "rel err {err}");
    let err = check_unary(rand_t(&[3, 4], 16), 17, |g, x| g.log_softmax(x, -1).unwrap());
    assert!(err < TOL, "rel err {err}");
}

#[test]
fn mean_and_population_variance() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    let m = g.mean(x, 0).unwrap();
    let v = g.variance(x, 0).unwrap();
    assert_eq!(g.value(m).data(), &[2.0]);
    assert!((g.value(v).data()[0] - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn dropout_zero_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new();
    let x = g.constant(rand_t(&[4, 4], 1));
    let y = g.dropout(x, 0.0, true, &mut rng);
    assert_eq!(g.value(x), g.value(y));
    let y = g.dropout(x, 0.5, false, &mut rng);
    assert_eq!(g.value(x), g.value(y));
}

#[test]
fn dropout_scales_survivors() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(&[1000]));
    let y = g.dropout(x, 0.25, true, &mut rng);
    let vals = g.value(y).data();
    assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-15));
    let kept = vals.iter().filter(|&&v| v > 0.0).count();
    assert!((650..850).contains(&kept), "kept {kept}");
}

#[test]
fn backward_linear_and_quadratic() {
    let x0 = rand_t(&[2, 3, 2], 20);
    let mut g = Graph::new();
    let x = g.leaf(x0.clone(), true);
    let loss = g.sum_all(x);
    g.backward(loss).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));

    let mut g = Graph::new();
    let x = g.leaf(x0.clone(), true);
    let sq = g.mul(x, x).unwrap();
    let s = g.sum_all(sq);
    let loss = g.mul_scalar(s, 0.5);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), x0.data());
}

#[test]
fn backward_rejects_non_scalar_and_second_call() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::ones(&[3]), true);
    assert!(g.backward(x).is_err());
    let loss = g.sum_all(x);
    g.backward(loss).unwrap();
    assert!(g.backward(loss).is_err());
}

#[test]
fn every_elementwise_primitive_matches_finite_differences() {
    let pos = {
        let mut t = rand_t(&[3, 4], 30);
        t.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.5);
        t
    };
    let other = rand_t(&[3, 4], 31);
    let row = rand_t(&[4], 32);
    let col = {
        let mut t = rand_t(&[3, 1], 33);
        t.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.5);
        t
    };
    type Case<'a> = (&'a str, Tensor, Box<dyn Fn(&mut Graph, Var) -> Var + 'a>);
    let cases: Vec<Case> = vec![
        ("add", rand_t(&[3, 4], 1), Box::new(|g, x| { let o = g.constant(other.clone()); g.add(x, o).unwrap() })),
        ("add-bcast-lhs", row.clone(), Box::new(|g, r| { let o = g.constant(other.clone()); g.add(o, r).unwrap() })),
        ("sub", rand_t(&[3, 4], 2), Box::new(|g, x| { let o = g.constant(row.clone()); g.sub(o, x).unwrap() })),
        ("mul", rand_t(&[3, 4], 3), Box::new(|g, x| { let o = g.constant(other.clone()); g.mul(x, o).unwrap() })),
        ("mul-bcast", row.clone(), Box::new(|g, r| { let o = g.constant(other.clone()); g.mul(o, r).unwrap() })),
        ("div-num", rand_t(&[3, 4], 4), Box::new(|g, x| { let c = g.constant(col.clone()); g.div(x, c).unwrap() })),
        ("div-den", col.clone(), Box::new(|g, c| { let o = g.constant(other.clone()); g.div(o, c).unwrap() })),
        ("exp", rand_t(&[3, 4], 5), Box::new(|g, x| g.exp(x))),
        ("log", pos.clone(), Box::new(|g, x| g.log(x))),
        ("sqrt", pos.clone(), Box::new(|g, x| g.sqrt(x))),
        ("powf", pos.clone(), Box::new(|g, x| g.powf(x, 2.5))),
        ("gelu", rand_t(&[3, 4], 6), Box::new(|g, x| g.gelu(x))),
        ("relu", rand_t(&[3, 4], 7), Box::new(|g, x| g.relu(x))),
        ("mul_scalar", rand_t(&[3, 4], 8), Box::new(|g, x| g.mul_scalar(x, -1.7))),
        ("add_scalar", rand_t(&[3, 4], 9), Box::new(|g, x| g.add_scalar(x, 0.3))),
        ("sum-axis0", rand_t(&[3, 4], 10), Box::new(|g, x| g.sum(x, 0).unwrap())),
        ("mean-axis1", rand_t(&[3, 4], 11), Box::new(|g, x| g.mean(x, 1).unwrap())),
        ("variance-axis1", rand_t(&[3, 4], 12), Box::new(|g, x| g.variance(x, -1).unwrap())),
        ("variance-axis0", rand_t(&[2, 3, 4], 13), Box::new(|g, x| g.variance(x, 1).unwrap())),
        ("mean_all", rand_t(&[3, 4], 14), Box::new(|g, x| g.mean_all(x))),
        ("concat", rand_t(&[3, 4], 15), Box::new(|g, x| { let o = g.constant(other.clone()); g.concat(&[o, x, x], 1).unwrap() })),
        ("slice", rand_t(&[3, 4], 16), Box::new(|g, x| g.slice(x, 1, 1, 3).unwrap())),
        ("transpose", rand_t(&[2, 3, 4], 17), Box::new(|g, x| g.transpose(x, 0, 2).unwrap())),
        ("permute", rand_t(&[2, 3, 4], 18), Box::new(|g, x| g.permute(x, &[1, 2, 0]).unwrap())),
        ("reshape", rand_t(&[3, 4], 19), Box::new(|g, x| g.reshape(x, &[2, 6]).unwrap())),
        ("gather", rand_t(&[3, 4], 20), Box::new(|g, x| g.gather(x, &[3, 0, 3]).unwrap())),
        ("index_select", rand_t(&[3, 4], 21), Box::new(|g, x| g.index_select(x, &[2, 0, 2, 2]).unwrap())),
        ("mask_fill", rand_t(&[3, 4], 22), Box::new(|g, x| {
            let mask = (0..12).map(|i| i % 5 == 0).collect();
            g.mask_fill(x, mask, -3.0).unwrap()
        })),
        ("dropout-fixed-seed", rand_t(&[3, 4], 23), Box::new(|g, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            g.dropout(x, 0.3, true, &mut rng)
        })),
    ];
    for (i, (name, x, op)) in cases.into_iter().enumerate() {
        let err = check_unary(x, 100 + i as u64, op);
        assert!(err < TOL, "{name}: rel err {err}");
    }
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let x = g.leaf(rand_t(&[4, 6], 1), true);
        let w = g.leaf(rand_t(&[6, 3], 2), true);
        let h = g.matmul(x, w).unwrap();
        let h = g.gelu(h);
        let h = g.dropout(h, 0.2, true, &mut rng);
        let s = g.softmax(h, -1).unwrap();
        let loss = g.mean_all(s);
        let l2 = g.mul(loss, loss).unwrap();
        g.backward(l2).unwrap();
        (
            g.value(s).clone(),
            g.grad(x).unwrap().clone(),
            g.grad(w).unwrap().clone(),
        )
    };
    let a = run();
    let b = run();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.0), bits(&b.0));
    assert_eq!(bits(&a.1), bits(&b.1));
    assert_eq!(bits(&a.2), bits(&b.2));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-500.0f64..500.0, 1..40)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vals));
        let s = g.softmax(x, 0).unwrap();
        let total: f64 = g.value(s).data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(g.value(s).data().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn matmul_gradient_on_random_shapes(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in 0u64..1000) {
        let b = rand_t(&[k, n], seed + 1);
        let err = check_unary(rand_t(&[m, k], seed), seed + 2, |g, a| {
            let bv = g.constant(b.clone());
            g.matmul(a, bv).unwrap()
        });
        prop_assert!(err < TOL, "rel err {}", err);
    }

    #[test]
    fn variance_gradient_on_random_shapes(rows in 1usize..4, cols in 2usize..7, seed in 0u64..1000) {
        let err = check_unary(rand_t(&[rows, cols], seed), seed + 1, |g, x| g.variance(x, -1).unwrap());
        prop_assert!(err < TOL, "rel err {}", err);
    }
}
