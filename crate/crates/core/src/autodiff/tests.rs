use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Random values at least `margin` away from zero.
fn random_off_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor {
    random(rng, shape).map(|v| if v.abs() < margin { v.signum() * margin + v } else { v })
}

/// Contracts an op output with a fixed random weight so the check sees a
/// scalar with O(1) gradients everywhere.
fn contract(t: &mut Tape, y: Var, weight: &Tensor) -> Result<Var> {
    let w = t.leaf(weight.clone());
    let p = t.elementwise_mul(y, w)?;
    Ok(t.sum_all(p))
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (r, k, c) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        for j in 0..c {
            let mut s = 0.0;
            for t in 0..k {
                s += a.get(i, t) * b.get(t, j);
            }
            out.set(i, j, s);
        }
    }
    out
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap());
    let s = t.row_softmax(x, 1.0).unwrap();
    assert_eq!(t.value(s).data(), &[0.5, 0.5]);
}

#[test]
fn softmax_rejects_nonpositive_temperature() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap());
    assert!(matches!(t.row_softmax(x, 0.0), Err(Error::Param(_))));
    assert!(matches!(t.row_softmax(x, -1.0), Err(Error::Param(_))));
}

#[test]
fn normalize_three_four_five() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap());
    let y = t.row_l2_normalize(x).unwrap();
    let v = t.value(y);
    assert!((v.get(0, 0) - 0.6).abs() < 1e-15 && (v.get(0, 1) - 0.8).abs() < 1e-15);
    assert_eq!(v.row(1), &[0.0, 0.0]);
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&mut rng, &[2, 3]);
    let b = random(&mut rng, &[3, 2]);
    let mut t = Tape::new();
    let (va, vb) = (t.leaf(a.clone()), t.leaf(b.clone()));
    let c = t.matmul(va, vb).unwrap();
    let want = naive_matmul(&a, &b);
    assert!(t.value(c).max_abs_diff(&want).unwrap() < 1e-12);
}

#[test]
fn shape_errors_name_the_op() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::zeros(&[2, 3]));
    let b = t.leaf(Tensor::zeros(&[2, 3]));
    let err = t.matmul(a, b).unwrap_err();
    match err {
        Error::Shape { op, detail } => {
            assert_eq!(op, "matmul");
            assert!(detail.contains("[2, 3]"));
        }
        other => panic!("unexpected {other:?}"),
    }
    let c = t.leaf(Tensor::zeros(&[3, 2]));
    assert!(matches!(t.add(a, c), Err(Error::Shape { op: "add", .. })));
}

#[test]
fn linear_examples() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::identity(2));
    let w = t.leaf(Tensor::identity(2));
    let b = t.leaf(Tensor::zeros(&[2]));
    let y = t.linear(x, w, Some(b)).unwrap();
    assert_eq!(t.value(y), &Tensor::identity(2));

    let x = t.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
    let b = t.leaf(Tensor::vector(vec![3.0, 3.0]));
    let y = t.linear(x, w, Some(b)).unwrap();
    assert_eq!(t.value(y).data(), &[4.0, 5.0]);
}

#[test]
fn linear_weight_gradient_is_column_sums_of_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&mut rng, &[4, 3]);
    let w = random(&mut rng, &[3, 2]);
    let b = random(&mut rng, &[2]);
    let mut t = Tape::new();
    let (vx, vw, vb) = (t.leaf(x.clone()), t.leaf(w.clone()), t.leaf(b.clone()));
    let y = t.linear(vx, vw, Some(vb)).unwrap();
    let loss = t.sum_all(y);
    let g = t.backward(loss).unwrap();
    let gw = g.get(vw).unwrap();
    for k in 0..3 {
        let col_sum: f64 = (0..4).map(|i| x.get(i, k)).sum();
        for j in 0..2 {
            assert!((gw.get(k, j) - col_sum).abs() < 1e-12);
        }
    }
    let report = grad_check(
        |t: &mut Tape, v: &[Var]| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            Ok(t.sum_all(y))
        },
        &[x, w, b],
        1e-6,
        1e-5,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn batchnorm_constant_column_maps_to_beta() {
    let mut state = BatchNormState::new(2, true);
    state.beta = Tensor::vector(vec![5.0, 0.0]);
    let mut t = Tape::new();
    let x = t.leaf(Tensor::from_rows(&[vec![2.0, 1.0], vec![2.0, 3.0], vec![2.0, -1.0]]).unwrap());
    let (y, stats) = t.batchnorm(x, None, None, &state, BnMode::Train).unwrap();
    let y = t.value(y);
    for i in 0..3 {
        assert_eq!(y.get(i, 0), 5.0);
    }
    assert_eq!(stats.unwrap().var[0], 0.0);
}

#[test]
fn batchnorm_train_output_is_standardized() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[16, 5]).map(|v| 3.0 * v + 1.5);
    let state = BatchNormState::new(5, true);
    let mut t = Tape::new();
    let vx = t.leaf(x);
    let (y, _) = t.batchnorm(vx, None, None, &state, BnMode::Train).unwrap();
    let y = t.value(y);
    for j in 0..5 {
        let col: Vec<f64> = (0..16).map(|i| y.get(i, j)).collect();
        let mean = col.iter().sum::<f64>() / 16.0;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-10);
        // var(xhat) = var / (var + eps)
        assert!(var < 1.0 && var > 1.0 - 1e-4, "var {var}");
    }
}

#[test]
fn batchnorm_errors() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::zeros(&[1, 3]));
    let state = BatchNormState::new(3, true);
    assert!(matches!(
        t.batchnorm(x, None, None, &state, BnMode::Train),
        Err(Error::Param(_))
    ));
    assert!(t.batchnorm(x, None, None, &state, BnMode::Eval).is_ok());
    let mut bad = state.clone();
    bad.epsilon = 0.0;
    let x2 = t.leaf(Tensor::zeros(&[4, 3]));
    assert!(matches!(
        t.batchnorm(x2, None, None, &bad, BnMode::Train),
        Err(Error::Param(_))
    ));
}

#[test]
fn batchnorm_eval_uses_only_running_stats() {
    let mut state = BatchNormState::new(2, true);
    state.running_mean = Tensor::vector(vec![1.0, -1.0]);
    state.running_var = Tensor::vector(vec![4.0, 0.25]);
    let rows = [vec![1.0, 0.0], vec![3.0, -1.0]];
    let mut t = Tape::new();
    let x = t.leaf(Tensor::from_rows(&rows).unwrap());
    let (y, stats) = t.batchnorm(x, None, None, &state, BnMode::Eval).unwrap();
    assert!(stats.is_none());
    // row 0 alone gives the same normalized values as inside the batch
    let x0 = t.leaf(Tensor::from_rows(&rows[..1]).unwrap());
    let (y0, _) = t.batchnorm(x0, None, None, &state, BnMode::Eval).unwrap();
    assert_eq!(t.value(y).row(0), t.value(y0).row(0));
    let expect = (3.0 - 1.0) / (4.0f64 + 1e-5).sqrt();
    assert!((t.value(y).get(1, 0) - expect).abs() < 1e-15);
}

#[test]
fn batchnorm_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[8, 4]);
    let gamma = random(&mut rng, &[4]).map(|v| v + 1.5);
    let beta = random(&mut rng, &[4]);
    let weight = random(&mut rng, &[8, 4]);
    let state = BatchNormState::new(4, true);
    for mode in [BnMode::Train, BnMode::Eval] {
        let report = grad_check(
            |t: &mut Tape, v: &[Var]| {
                let (y, _) = t.batchnorm(v[0], Some(v[1]), Some(v[2]), &state, mode)?;
                contract(t, y, &weight)
            },
            &[x.clone(), gamma.clone(), beta.clone()],
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(), "{mode:?}: {report:?}");
    }
}

#[test]
fn running_stats_mix_with_momentum() {
    let mut state = BatchNormState::new(1, true);
    let stats = BatchStats {
        mean: vec![2.0],
        var: vec![3.0],
        count: 4,
    };
    state.update_running(&stats).unwrap();
    assert!((state.running_mean.item() - 0.2).abs() < 1e-15);
    assert!((state.running_var.item() - (0.9 + 0.1 * 4.0)).abs() < 1e-15);
}

#[test]
fn stop_gradient_is_bitwise_identity_and_blocks() {
    let x = Tensor::vector(vec![0.1, -2.5, 1e-300, 7.0]);
    let mut t = Tape::new();
    let vx = t.leaf(x.clone());
    let s = t.stop_gradient(vx);
    assert_eq!(t.value(s), &x);
    let loss = t.sum_all(s);
    let g = t.backward(loss).unwrap();
    assert!(g.get(vx).is_none());
    assert_eq!(g.get_or_zeros(vx), Tensor::zeros(&[4]));
}

#[test]
fn stop_gradient_product_keeps_live_branch_only() {
    let x = Tensor::vector(vec![0.5, -1.5, 2.0]);
    let mut t = Tape::new();
    let vx = t.leaf(x.clone());
    let s = t.stop_gradient(vx);
    let p = t.elementwise_mul(vx, s).unwrap();
    let loss = t.sum_all(p);
    let g = t.backward(loss).unwrap();
    assert_eq!(g.get(vx).unwrap(), &x);
    let report = grad_check(
        |t: &mut Tape, v: &[Var]| {
            let s = t.stop_gradient(v[0]);
            let p = t.elementwise_mul(v[0], s)?;
            Ok(t.sum_all(p))
        },
        &[x],
        1e-8,
        1e-5,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn straight_through_forward_examples() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::from_rows(&[vec![0.2, 0.7, 0.1]]).unwrap());
    let h = t.straight_through_onehot(a).unwrap();
    assert_eq!(t.value(h).data(), &[0.0, 1.0, 0.0]);
    let a = t.leaf(Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap());
    let h = t.straight_through_onehot(a).unwrap();
    assert_eq!(t.value(h).data(), &[1.0, 0.0]);
}

#[test]
fn straight_through_copies_upstream_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = random(&mut rng, &[5, 4]);
    let weight = random(&mut rng, &[5, 4]);

    let mut t = Tape::new();
    let va = t.leaf(a.clone());
    let h = t.straight_through_onehot(va).unwrap();
    let loss = contract(&mut t, h, &weight).unwrap();
    let g = t.backward(loss).unwrap();

    // soft surrogate sum(G ⊙ A)
    let mut s = Tape::new();
    let sa = s.leaf(a);
    let sl = contract(&mut s, sa, &weight).unwrap();
    let sg = s.backward(sl).unwrap();

    assert_eq!(g.get(va).unwrap(), sg.get(sa).unwrap());
    assert_eq!(g.get(va).unwrap(), &weight);
}

#[test]
fn backward_requires_scalar_loss() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::zeros(&[2, 2]));
    assert!(matches!(t.backward(x), Err(Error::Shape { op: "backward", .. })));
}

#[test]
fn mean_gives_uniform_gradient() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::zeros(&[3, 4]));
    let m = t.mean_all(x).unwrap();
    let g = t.backward(m).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0 / 12.0));
}

#[test]
fn self_cosine_has_zero_gradient() {
    let x = Tensor::from_rows(&[vec![0.3, -1.2, 2.0, 0.7]]).unwrap();
    let mut t = Tape::new();
    let vx = t.leaf(x);
    let n = t.row_l2_normalize(vx).unwrap();
    let p = t.elementwise_mul(n, n).unwrap();
    let s = t.sum_all(p);
    let loss = t.scalar_mul(s, -1.0);
    assert!((t.value(loss).item() + 1.0).abs() < 1e-15);
    let g = t.backward(loss).unwrap();
    assert!(g.get(vx).unwrap().data().iter().all(|v| v.abs() < 1e-15));
}

#[test]
fn fan_out_doubles_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random(&mut rng, &[3, 3]);
    let mut single = Tape::new();
    let sx = single.leaf(x.clone());
    let sn = single.row_l2_normalize(sx).unwrap();
    let sl = single.sum_all(sn);
    let g1 = single.backward(sl).unwrap().get_or_zeros(sx);

    let mut double = Tape::new();
    let dx = double.leaf(x);
    let dn = double.row_l2_normalize(dx).unwrap();
    let sum = double.add(dn, dn).unwrap();
    let dl = double.sum_all(sum);
    let g2 = double.backward(dl).unwrap().get_or_zeros(dx);
    for (a, b) in g1.data().iter().zip(g2.data()) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn unreachable_nodes_have_no_gradient() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::vector(vec![1.0]));
    let b = t.leaf(Tensor::vector(vec![2.0]));
    let loss = t.sum_all(a);
    let g = t.backward(loss).unwrap();
    assert!(g.get(b).is_none());
    assert!(g.get(a).is_some());
}

#[test]
fn bn_relu_linear_chain_self_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random(&mut rng, &[8, 5]);
    let w = random(&mut rng, &[5, 3]);
    let b = random(&mut rng, &[3]);
    let gamma = random(&mut rng, &[5]).map(|v| v + 2.0);
    let beta = random(&mut rng, &[5]);
    let state = BatchNormState::new(5, true);
    let report = grad_check(
        |t: &mut Tape, v: &[Var]| {
            let (h, _) = t.batchnorm(v[0], Some(v[1]), Some(v[2]), &state, BnMode::Train)?;
            let r = t.relu(h);
            let y = t.linear(r, v[3], Some(v[4]))?;
            let sq = t.elementwise_mul(y, y)?;
            t.mean_all(sq)
        },
        &[x, gamma, beta, w, b],
        1e-5,
        1e-5,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
    assert!(report.max_rel_error < 1e-5);
}

/// One random instance per seed for every primitive, checked against
/// central differences.
#[test]
fn every_primitive_matches_finite_differences_on_100_seeds() {
    const TOL: f64 = 1e-5;
    const STEP: f64 = 1e-5;
    let state = BatchNormState::new(3, true);
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let a = random(&mut rng, &[4, 3]);
        let b = random(&mut rng, &[3, 5]);
        let c = random(&mut rng, &[4, 3]);
        let w45 = random(&mut rng, &[4, 5]);
        let w43 = random(&mut rng, &[4, 3]);
        let w83 = random(&mut rng, &[8, 3]);
        let w34 = random(&mut rng, &[3, 4]);
        let relu_in = random_off_zero(&mut rng, &[4, 3], 1e-3);
        let tau = rng.random_range(0.2..2.0);
        let gamma = random(&mut rng, &[3]).map(|v| v + 2.0);
        let beta = random(&mut rng, &[3]);

        type Case<'a> = (&'static str, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + Sync + 'a>, Vec<Tensor>);
        let cases: Vec<Case> = vec![
            ("matmul", Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.matmul(v[0], v[1])?;
                contract(t, y, &w45)
            }), vec![a.clone(), b.clone()]),
            ("add", Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.add(v[0], v[1])?;
                let y = t.elementwise_mul(y, y)?;
                contract(t, y, &w43)
            }), vec![a.clone(), c.clone()]),
            ("relu", Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.relu(v[0]);
                contract(t, y, &w43)
            }), vec![relu_in.clone()]),
            ("row_softmax", Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.row_softmax(v[0], tau)?;
                contract(t, y, &w43)
            }), vec![a.clone()]),
            ("row_l2_normalize", Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.row_l2_normalize(v[0])?;
                contract(t, y, &w43)
            }), vec![a.clone()]),
            ("concat_rows", Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.concat_rows(v[0], v[1])?;
                let y = t.elementwise_mul(y, y)?;
                contract(t, y, &w83)
            }), vec![a.clone(), c.clone()]),
            ("mean_all", Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.elementwise_mul(v[0], v[0])?;
                t.mean_all(y)
            }), vec![a.clone()]),
            ("scalar_mul", Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.scalar_mul(v[0], -2.5);
                contract(t, y, &w43)
            }), vec![a.clone()]),
            ("elementwise_mul", Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.elementwise_mul(v[0], v[1])?;
                contract(t, y, &w43)
            }), vec![a.clone(), c.clone()]),
            ("transpose", Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.transpose(v[0])?;
                contract(t, y, &w34)
            }), vec![a.clone()]),
            ("batchnorm", Box::new(|t: &mut Tape, v: &[Var]| {
                let (y, _) = t.batchnorm(v[0], Some(v[1]), Some(v[2]), &state, BnMode::Train)?;
                contract(t, y, &w43)
            }), vec![a.clone(), gamma.clone(), beta.clone()]),
        ];
        for (name, f, params) in cases {
            let report = grad_check(f, &params, TOL, STEP).unwrap();
            assert!(report.passed(), "seed {seed} op {name}: {report:?}");
        }
    }
}

#[test]
fn straight_through_rows_are_one_hot() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..50 {
        let a = random(&mut rng, &[6, 5]);
        let (h, labels) = onehot_rows(&a);
        for i in 0..6 {
            let row = h.row(i);
            assert_eq!(row.iter().sum::<f64>(), 1.0);
            assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(row[labels[i]], 1.0);
        }
    }
}

#[test]
fn identical_construction_is_bitwise_deterministic() {
    let build = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let a = random(&mut rng, &[6, 4]);
        let w = random(&mut rng, &[4, 4]);
        let mut t = Tape::new();
        let (va, vw) = (t.leaf(a), t.leaf(w));
        let y = t.matmul(va, vw).unwrap();
        let s = t.row_softmax(y, 0.7).unwrap();
        let n = t.row_l2_normalize(s).unwrap();
        let loss = t.mean_all(n).unwrap();
        let g = t.backward(loss).unwrap();
        (t.value(loss).clone(), g.get_or_zeros(va), g.get_or_zeros(vw))
    };
    assert_eq!(build(), build());
}
