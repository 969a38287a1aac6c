use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn param(name: &str, shape: &[usize], data: Vec<f64>, set: &mut ParameterSet) {
    set.insert(name, Tensor::from_vec(shape, data).unwrap().with_grad());
}

fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn fc_identity_and_bias() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap());
    let w = tape.constant(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let b = tape.constant(Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap());
    let y = tape.fc(x, w, b).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

    let x0 = tape.constant(Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap());
    let w_any = tape.constant(Tensor::from_vec(&[2, 2], vec![0.3, -0.7, 1.1, 0.2]).unwrap());
    let b34 = tape.constant(Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap());
    let y2 = tape.fc(x0, w_any, b34).unwrap();
    assert_eq!(tape.value(y2).data(), &[3.0, 4.0]);
}

#[test]
fn fc_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 3]));
    let w = tape.constant(Tensor::zeros(&[2, 2]));
    let b = tape.constant(Tensor::zeros(&[2]));
    match tape.fc(x, w, b) {
        Err(Error::Shape { left, right, .. }) => {
            assert_eq!(left, vec![1, 3]);
            assert_eq!(right, vec![2, 2]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn fc_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut params = ParameterSet::new();
    param("x", &[2, 3], rand_vec(6, &mut rng), &mut params);
    param("w", &[3, 4], rand_vec(12, &mut rng), &mut params);
    param("b", &[4], rand_vec(4, &mut rng), &mut params);
    let report = finite_diff_check(
        &params,
        &|tape: &mut Tape, ids: &BTreeMap<String, ValueId>| {
            let y = tape.fc(ids["x"], ids["w"], ids["b"])?;
            // square so the objective is nonlinear in y
            let sq = tape.mul(y, y)?;
            Ok(tape.sum_all(sq))
        },
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
}

#[test]
fn conv_delta_kernel_is_identity() {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xv = rand_vec(16, &mut rng);
    let x = tape.constant(Tensor::from_vec(&[1, 1, 4, 4], xv.clone()).unwrap());
    let mut kv = vec![0.0; 9];
    kv[4] = 1.0;
    let k = tape.constant(Tensor::from_vec(&[1, 1, 3, 3], kv).unwrap());
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.conv2d(x, k, b).unwrap();
    for (a, b) in tape.value(y).data().iter().zip(&xv) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn conv_zero_input_passes_bias() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 2, 3, 3]));
    let k = tape.constant(Tensor::zeros(&[2, 2, 3, 3]));
    let b = tape.constant(Tensor::from_vec(&[2], vec![1.5, -2.0]).unwrap());
    let y = tape.conv2d(x, k, b).unwrap();
    let out = tape.value(y);
    for s in 0..2 {
        for c in 0..2 {
            for i in 0..9 {
                let v = out.data()[(s * 2 + c) * 9 + i];
                assert_eq!(v, if c == 0 { 1.5 } else { -2.0 });
            }
        }
    }
}

#[test]
fn conv_rejects_non_3x3_kernel() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
    let k = tape.constant(Tensor::zeros(&[1, 1, 5, 5]));
    let b = tape.constant(Tensor::zeros(&[1]));
    assert!(matches!(tape.conv2d(x, k, b), Err(Error::Config(_))));
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = ParameterSet::new();
    param("x", &[1, 2, 4, 4], rand_vec(32, &mut rng), &mut params);
    param("k", &[3, 2, 3, 3], rand_vec(54, &mut rng), &mut params);
    param("b", &[3], rand_vec(3, &mut rng), &mut params);
    let report = finite_diff_check(
        &params,
        &|tape: &mut Tape, ids: &BTreeMap<String, ValueId>| {
            let y = tape.conv2d(ids["x"], ids["k"], ids["b"])?;
            let sq = tape.mul(y, y)?;
            Ok(tape.sum_all(sq))
        },
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
}

#[test]
fn batchnorm_constant_input_yields_zeros() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[3, 2, 2, 2], 4.2));
    let gamma = tape.constant(Tensor::full(&[2], 1.0));
    let beta = tape.constant(Tensor::zeros(&[2]));
    let (y, _) = tape.batchnorm_train(x, gamma, beta).unwrap();
    for v in tape.value(y).data() {
        assert_eq!(*v, 0.0);
    }
}

#[test]
fn batchnorm_zero_gamma_broadcasts_beta() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(&[2, 2, 3], rand_vec(12, &mut rng)).unwrap());
    let gamma = tape.constant(Tensor::zeros(&[2]));
    let beta = tape.constant(Tensor::from_vec(&[2], vec![0.7, -0.3]).unwrap());
    let (y, _) = tape.batchnorm_train(x, gamma, beta).unwrap();
    let out = tape.value(y);
    for b in 0..2 {
        for c in 0..2 {
            for s in 0..3 {
                assert_eq!(out.data()[(b * 2 + c) * 3 + s], if c == 0 { 0.7 } else { -0.3 });
            }
        }
    }
}

#[test]
fn batchnorm_normalizes_batch_statistics() {
    // Inputs scaled well above the variance guard so the normalized
    // statistics are clean.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data: Vec<f64> = (0..32).map(|_| rng.gen_range(-10.0..10.0)).collect();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(&[4, 2, 2, 2], data).unwrap());
    let gamma = tape.constant(Tensor::full(&[2], 1.0));
    let beta = tape.constant(Tensor::zeros(&[2]));
    let (y, _) = tape.batchnorm_train(x, gamma, beta).unwrap();
    let out = tape.value(y).data();
    for c in 0..2 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|b| (0..4).map(move |s| out[(b * 2 + c) * 4 + s]))
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-10, "channel {c} mean {mean}");
        assert!((var - 1.0).abs() < 1e-6, "channel {c} var {var}");
    }
}

#[test]
fn batchnorm_train_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut params = ParameterSet::new();
    param("x", &[3, 2, 2], rand_vec(12, &mut rng), &mut params);
    param("g", &[2], vec![1.1, 0.8], &mut params);
    param("be", &[2], vec![0.1, -0.2], &mut params);
    let report = finite_diff_check(
        &params,
        &|tape: &mut Tape, ids: &BTreeMap<String, ValueId>| {
            let (y, _) = tape.batchnorm_train(ids["x"], ids["g"], ids["be"])?;
            let sq = tape.mul(y, y)?;
            Ok(tape.sum_all(sq))
        },
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
}

#[test]
fn activations_match_pointwise_definitions() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = tape.leaky_relu(x, 0.3).unwrap();
    assert_eq!(tape.value(y).data(), &[-0.3, 0.0, 2.0]);
    let t = tape.tanh(x);
    assert_eq!(tape.value(t).data()[1], 0.0);
    assert!(tape.leaky_relu(x, 1.5).is_err());
}

#[test]
fn lrelu_gradient_uses_slope_below_zero() {
    let mut params = ParameterSet::new();
    param("x", &[2], vec![-2.0, 3.0], &mut params);
    let mut tape = Tape::new();
    let x = tape.leaf(params.get("x"));
    let y = tape.leaky_relu(x, 0.1).unwrap();
    let s = tape.sum_all(y);
    tape.backward(s).unwrap();
    let g = tape.grad(x).unwrap();
    assert_eq!(g, &[0.1, 1.0]);
}

#[test]
fn dropout_zero_probability_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let data = rand_vec(64, &mut rng);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(&[64], data.clone()).unwrap());
    let y = tape.dropout(x, 0.0, 9).unwrap();
    assert_eq!(tape.value(y).data(), &data[..]);
}

#[test]
fn dropout_mask_fraction_concentrates() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[10_000], 1.0));
    let y = tape.dropout(x, 0.5, 1234).unwrap();
    let zeros = tape.value(y).data().iter().filter(|v| **v == 0.0).count();
    let frac = zeros as f64 / 10_000.0;
    assert!((0.47..=0.53).contains(&frac), "zeroed fraction {frac}");
    // survivors scaled by 1/(1-p)
    for v in tape.value(y).data() {
        assert!(*v == 0.0 || (*v - 2.0).abs() < 1e-12);
    }
    // reproducible from seed
    let mut tape2 = Tape::new();
    let x2 = tape2.constant(Tensor::full(&[10_000], 1.0));
    let y2 = tape2.dropout(x2, 0.5, 1234).unwrap();
    assert_eq!(tape.value(y).data(), tape2.value(y2).data());
}

#[test]
fn residual_add_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
    let b = tape.constant(Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap());
    let z = tape.constant(Tensor::zeros(&[2]));
    let s = tape.residual_add(a, b).unwrap();
    assert_eq!(tape.value(s).data(), &[4.0, 6.0]);
    let id = tape.residual_add(a, z).unwrap();
    assert_eq!(tape.value(id).data(), &[1.0, 2.0]);
    let bad = tape.constant(Tensor::zeros(&[3]));
    assert!(tape.residual_add(a, bad).is_err());
}

#[test]
fn residual_add_routes_unit_gradient() {
    let mut params = ParameterSet::new();
    param("a", &[3], vec![0.3, -0.4, 1.2], &mut params);
    param("b", &[3], vec![1.0, 0.5, -0.7], &mut params);
    let report = finite_diff_check(
        &params,
        &|tape: &mut Tape, ids: &BTreeMap<String, ValueId>| {
            let s = tape.residual_add(ids["a"], ids["b"])?;
            Ok(tape.sum_all(s))
        },
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-8);
}

#[test]
fn quantizer_levels_and_indices() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(&[2], vec![-1.0, 0.3]).unwrap());
    let y2 = tape.quantize_ste(x, 2, 25.0).unwrap();
    assert_eq!(tape.value(y2).data()[0], -0.75);
    assert_eq!(tape.quant_indices(y2).unwrap()[0], 0);
    let y1 = tape.quantize_ste(x, 1, 25.0).unwrap();
    assert_eq!(tape.value(y1).data()[1], 0.5);
    assert_eq!(tape.quant_indices(y1).unwrap()[1], 1);
    assert!(tape.quantize_ste(x, 0, 25.0).is_err());
}

#[test]
fn quantizer_output_always_on_levels() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for bits in 1..=4u32 {
        let levels: Vec<f64> = (0..1u32 << bits).map(|i| quant_level(i, 1 << bits)).collect();
        let data: Vec<f64> = (0..200).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[200], data).unwrap());
        let y = tape.quantize_ste(x, bits, 25.0).unwrap();
        for v in tape.value(y).data() {
            assert!(levels.iter().any(|l| l == v), "{v} not a level");
        }
    }
}

#[test]
fn staircase_derivative_matches_finite_differences() {
    // The backward pass uses S'(x); validate S' against central
    // differences of S itself, including cell centers and edges.
    let bits = 2u32;
    let temp = 25.0;
    let step = 1e-6;
    let mut worst: f64 = 0.0;
    let mut xs: Vec<f64> = (-20..=20).map(|i| i as f64 / 20.0).collect();
    xs.extend([-0.5, 0.0, 0.5, -0.75, 0.25]);
    for &x in &xs {
        let fd = (staircase_surrogate(x + step, bits, temp)
            - staircase_surrogate(x - step, bits, temp))
            / (2.0 * step);
        let an = staircase_derivative(x, bits, temp);
        let scale = an.abs().max(fd.abs()).max(1.0);
        worst = worst.max((an - fd).abs() / scale);
    }
    assert!(worst < 1e-6, "surrogate derivative error {worst}");
    // qualitative shape: near zero at a cell center, large at an edge
    let center = staircase_derivative(-0.75, bits, temp);
    let edge = staircase_derivative(-0.5, bits, temp);
    assert!(center < 0.05 * edge);
}

#[test]
fn quantizer_backward_uses_surrogate() {
    let mut params = ParameterSet::new();
    param("x", &[4], vec![-0.9, -0.45, 0.1, 0.52], &mut params);
    let mut tape = Tape::new();
    let x = tape.leaf(params.get("x"));
    let y = tape.quantize_ste(x, 2, 25.0).unwrap();
    let s = tape.sum_all(y);
    tape.backward(s).unwrap();
    let g = tape.grad(x).unwrap();
    for (i, &xv) in [-0.9, -0.45, 0.1, 0.52].iter().enumerate() {
        let expect = staircase_derivative(xv, 2, 25.0);
        assert!((g[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn adam_first_step_closed_form() {
    let mut params = ParameterSet::new();
    param("w", &[1], vec![0.0], &mut params);
    params.get_mut("w").accumulate_grad(&[1.0]);
    let mut state = AdamState::new(0.03);
    adam_step(&mut params, &mut state).unwrap();
    let v = params.get("w").data()[0];
    assert!((v + 0.03).abs() < 1e-6, "got {v}");
}

#[test]
fn adam_zero_gradient_keeps_parameters() {
    let mut params = ParameterSet::new();
    param("w", &[2], vec![0.5, -0.25], &mut params);
    let mut state = AdamState::new(0.03);
    for _ in 0..3 {
        params.get_mut("w").accumulate_grad(&[0.0, 0.0]);
        adam_step(&mut params, &mut state).unwrap();
    }
    assert_eq!(params.get("w").data(), &[0.5, -0.25]);
}

#[test]
fn adam_zero_learning_rate_keeps_parameters() {
    let mut params = ParameterSet::new();
    param("w", &[2], vec![0.5, -0.25], &mut params);
    let mut state = AdamState::new(0.0);
    params.get_mut("w").accumulate_grad(&[3.0, -1.0]);
    adam_step(&mut params, &mut state).unwrap();
    assert_eq!(params.get("w").data(), &[0.5, -0.25]);
}

#[test]
fn adam_symmetric_parameters_update_equally() {
    let mut params = ParameterSet::new();
    param("a", &[1], vec![1.0], &mut params);
    param("b", &[1], vec![1.0], &mut params);
    let mut state = AdamState::new(0.01);
    for _ in 0..5 {
        params.get_mut("a").accumulate_grad(&[0.7]);
        params.get_mut("b").accumulate_grad(&[0.7]);
        adam_step(&mut params, &mut state).unwrap();
    }
    assert_eq!(params.get("a").data()[0], params.get("b").data()[0]);
}

#[test]
fn adam_missing_grad_names_parameter() {
    let mut params = ParameterSet::new();
    param("enc.w", &[1], vec![0.0], &mut params);
    let mut state = AdamState::new(0.01);
    match adam_step(&mut params, &mut state) {
        Err(Error::MissingGrad(name)) => assert_eq!(name, "enc.w"),
        other => panic!("expected missing grad, got {other:?}"),
    }
}

#[test]
fn finite_diff_on_square_and_constant() {
    let mut params = ParameterSet::new();
    param("x", &[1], vec![3.0], &mut params);
    let report = finite_diff_check(
        &params,
        &|tape: &mut Tape, ids: &BTreeMap<String, ValueId>| {
            let sq = tape.mul(ids["x"], ids["x"])?;
            Ok(tape.sum_all(sq))
        },
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-8, "err {}", report.max_rel_err);
    // analytic gradient is 6
    let mut tape = Tape::new();
    let x = tape.leaf(params.get("x"));
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum_all(sq);
    tape.backward(s).unwrap();
    assert!((tape.grad(x).unwrap()[0] - 6.0).abs() < 1e-12);

    let constant = finite_diff_check(
        &params,
        &|tape: &mut Tape, _ids: &BTreeMap<String, ValueId>| {
            Ok(tape.constant(Tensor::scalar(5.0)))
        },
        1e-5,
    )
    .unwrap();
    assert_eq!(constant.max_rel_err, 0.0);
}

#[test]
fn generic_ops_pass_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut params = ParameterSet::new();
    param("a", &[3, 3], rand_vec(9, &mut rng), &mut params);
    param("b", &[3, 3], (0..9).map(|_| rng.gen_range(0.5..1.5)).collect(), &mut params);
    // strengthen the diagonal so a + diag is comfortably invertible
    let report = finite_diff_check(
        &params,
        &|tape: &mut Tape, ids: &BTreeMap<String, ValueId>| {
            let (a, b) = (ids["a"], ids["b"]);
            let prod = tape.matmul(a, b)?;
            let t = tape.transpose2(prod)?;
            let dsum = tape.add(t, b)?;
            let eye = tape.constant(
                Tensor::from_vec(&[3, 3], vec![4.0, 0.0, 0.0, 0.0, 4.0, 0.0, 0.0, 0.0, 4.0])
                    .unwrap(),
            );
            let shifted = tape.add(dsum, eye)?;
            let inv = tape.mat_inverse(shifted)?;
            let sl = tape.slice2d(inv, 0, 2, 1, 2)?;
            let cat = tape.concat_cols(&[sl, sl])?;
            let catr = tape.concat_rows(&[cat, cat])?;
            let quot = tape.div(catr, catr)?;
            let mixed = tape.mul(quot, catr)?;
            let sq = tape.mul(mixed, mixed)?;
            let pos = tape.add_scalar(sq, 1.0);
            let lg = tape.ln(pos);
            let rt = tape.sqrt(pos);
            let th = tape.tanh(lg);
            let sum1 = tape.add(th, rt)?;
            let neg = tape.neg(sum1);
            let sc = tape.scale(neg, -1.7);
            Ok(tape.sum_all(sc))
        },
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
}

#[test]
fn scatter_and_plane_pass_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let ports = vec![vec![(0usize, 1usize), (2, 0)], vec![(1, 1), (0, 0)]];
    let mut params = ParameterSet::new();
    param("w", &[2, 4], rand_vec(8, &mut rng), &mut params);
    let ports2 = ports.clone();
    let report = finite_diff_check(
        &params,
        &|tape: &mut Tape, ids: &BTreeMap<String, ValueId>| {
            let v = tape.scatter_ports(ids["w"], &ports2, 3, 2)?;
            let p0 = tape.plane(v, 0, 0)?;
            let p1 = tape.plane(v, 1, 1)?;
            let s = tape.add(p0, p1)?;
            let sq = tape.mul(s, s)?;
            Ok(tape.sum_all(sq))
        },
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
}

#[test]
fn backward_accumulates_additively() {
    let mut params = ParameterSet::new();
    param("x", &[2], vec![1.0, -2.0], &mut params);
    let mut tape = Tape::new();
    let x = tape.leaf(params.get("x"));
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum_all(sq);
    tape.backward(s).unwrap();
    let once = tape.grad(x).unwrap().to_vec();
    tape.backward(s).unwrap();
    let twice = tape.grad(x).unwrap().to_vec();
    for (a, b) in once.iter().zip(&twice) {
        assert!((2.0 * a - b).abs() < 1e-12);
    }
}

#[test]
fn forward_is_deterministic_for_fixed_seed() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[2, 3, 4, 4], rand_vec(96, &mut rng)).unwrap());
        let k = tape.constant(Tensor::from_vec(&[3, 3, 3, 3], rand_vec(81, &mut rng)).unwrap());
        let b = tape.constant(Tensor::from_vec(&[3], rand_vec(3, &mut rng)).unwrap());
        let y = tape.conv2d(x, k, b).unwrap();
        let d = tape.dropout(y, 0.3, 5).unwrap();
        tape.value(d).data().to_vec()
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
}

#[test]
fn non_finite_root_reports_numerical_error() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::scalar(0.0));
    let inv = tape.ln(x); // ln(0) = -inf
    assert!(matches!(tape.backward(inv), Err(Error::Numerical(_))));
}
