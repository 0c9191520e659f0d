use rand::Rng;
use sslseg_core::gradcheck::check_program;
use sslseg_core::rng::stream;
use sslseg_core::tensor::{AdamConfig, AdamState};
use sslseg_core::{Tape, Tensor, Var};

const TOL: f64 = 1e-4;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = stream(seed, &[]);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Entries bounded away from zero (relu kink) and pairwise well separated
/// (pooling ties).
fn separated(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut rng = stream(seed, &[]);
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0 + 0.5) * 0.05).collect();
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

/// Weighted sum so every output entry carries a distinct cotangent.
fn weighted_sum(tape: &mut Tape<f64>, out: Var, seed: u64) -> Var {
    let w = random(tape.shape(out), seed ^ 0xabc);
    let prod = tape.mul_const(out, &w).unwrap();
    tape.sum(prod)
}

fn assert_reports(name: &str, reports: &[sslseg_core::gradcheck::Report], tol: f64) {
    for (i, r) in reports.iter().enumerate() {
        assert!(r.max_rel_error < tol, "{name} input {i}: rel err {} at {}", r.max_rel_error, r.worst_index);
    }
}

#[test]
fn conv2d_identity_kernel() {
    let x = random(&[1, 2, 5, 5], 1).cast::<f32>();
    let mut k = Tensor::<f32>::zeros([2, 2, 3, 3]);
    k.data_mut()[4] = 1.0; // out0 <- in0 centre
    k.data_mut()[18 + 9 + 4] = 1.0; // out1 <- in1 centre
    let mut tape = Tape::new();
    let (xv, kv, bv) = (tape.constant(x.clone()), tape.constant(k), tape.constant(Tensor::zeros([2])));
    let y = tape.conv2d(xv, kv, bv).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn conv2d_zero_input_gives_bias() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros([2, 3, 4, 4]));
    let k = tape.constant(random(&[2, 3, 3, 3], 2).cast());
    let b = tape.constant(Tensor::new([2], vec![0.5, -1.5]).unwrap());
    let y = tape.conv2d(x, k, b).unwrap();
    let out = tape.value(y);
    for (i, v) in out.data().iter().enumerate() {
        let ch = (i / 16) % 2;
        assert_eq!(*v, [0.5, -1.5][ch]);
    }
}

#[test]
fn conv2d_rejects_channel_mismatch() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros([1, 2, 4, 4]));
    let k = tape.constant(Tensor::zeros([3, 3, 3, 3]));
    let b = tape.constant(Tensor::zeros([3]));
    assert!(matches!(tape.conv2d(x, k, b), Err(sslseg_core::TensorError::Shape { .. })));
}

#[test]
fn conv2d_gradients() {
    for seed in 0..3 {
        let inputs = [random(&[1, 2, 5, 5], seed), random(&[3, 2, 3, 3], seed + 10), random(&[3], seed + 20)];
        let r = check_program(&inputs, |t, v| {
            let y = t.conv2d(v[0], v[1], v[2])?;
            Ok(t.sum(y))
        });
        assert_reports("conv2d", &r, TOL);
        let r = check_program(&inputs, |t, v| {
            let y = t.conv2d(v[0], v[1], v[2])?;
            Ok(weighted_sum(t, y, seed))
        });
        assert_reports("conv2d weighted", &r, TOL);
    }
}

#[test]
fn conv1x1_gradients() {
    let inputs = [random(&[2, 3, 4, 4], 5), random(&[2, 3, 1, 1], 6), random(&[2], 7)];
    let r = check_program(&inputs, |t, v| {
        let y = t.conv2d(v[0], v[1], v[2])?;
        Ok(weighted_sum(t, y, 1))
    });
    assert_reports("conv1x1", &r, TOL);
}

#[test]
fn relu_values_and_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new([3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    let pos = Tensor::new([3], vec![0.5, 1.0, 2.0]).unwrap();
    let p = tape.constant(pos.clone());
    let q = tape.relu(p);
    assert_eq!(tape.value(q), &pos);

    let r = check_program(&[separated(&[2, 3, 4], 3)], |t, v| {
        let y = t.relu(v[0]);
        Ok(weighted_sum(t, y, 2))
    });
    assert_reports("relu", &r, TOL);
}

#[test]
fn max_pool_values_ties_and_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = tape.max_pool2(x).unwrap();
    assert_eq!(tape.value(y).data(), &[4.0]);

    let c = tape.param(Tensor::full([1, 1, 4, 4], 0.3));
    let yc = tape.max_pool2(c).unwrap();
    assert!(tape.value(yc).data().iter().all(|&v| v == 0.3));
    let s = tape.sum(yc);
    tape.backward(s).unwrap();
    let g = tape.grad(c).unwrap().data();
    let expected: Vec<f64> = (0..16).map(|i| if (i / 4) % 2 == 0 && i % 2 == 0 { 1.0 } else { 0.0 }).collect();
    assert_eq!(g, expected.as_slice());

    let r = check_program(&[separated(&[1, 1, 4, 4], 4)], |t, v| {
        let y = t.max_pool2(v[0])?;
        Ok(weighted_sum(t, y, 3))
    });
    assert_reports("max_pool2", &r, TOL);

    let mut tape = Tape::<f64>::new();
    let odd = tape.constant(Tensor::zeros([1, 1, 3, 4]));
    assert!(tape.max_pool2(odd).is_err());
}

#[test]
fn upsample_and_avg_pool() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full([1, 1, 1, 1], 5.0));
    let y = tape.upsample_nearest2(x).unwrap();
    assert_eq!(tape.value(y).data(), &[5.0; 4]);

    let r0 = random(&[2, 3, 3, 5], 9);
    let a = tape.constant(r0.clone());
    let up = tape.upsample_nearest2(a).unwrap();
    let back = tape.avg_pool2(up).unwrap();
    assert_eq!(tape.value(back), &r0);

    let r = check_program(&[random(&[1, 2, 3, 3], 10)], |t, v| {
        let y = t.upsample_nearest2(v[0])?;
        Ok(weighted_sum(t, y, 4))
    });
    assert_reports("upsample", &r, TOL);
}

#[test]
fn instance_norm_contracts() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full([1, 2, 3, 3], 4.0));
    let gain = tape.constant(Tensor::new([2], vec![2.0, 3.0]).unwrap());
    let shift = tape.constant(Tensor::new([2], vec![0.1, -0.2]).unwrap());
    let y = tape.instance_norm(x, gain, shift).unwrap();
    let v = tape.value(y).data();
    assert!(v[..9].iter().all(|&e| e == 0.1) && v[9..].iter().all(|&e| e == -0.2));

    let xr = tape.constant(random(&[2, 3, 4, 4], 11).map(|e| e * 5.0 + 2.0));
    let g1 = tape.constant(Tensor::full([3], 1.0));
    let s0 = tape.constant(Tensor::zeros([3]));
    let y = tape.instance_norm(xr, g1, s0).unwrap();
    for plane in tape.value(y).data().chunks(16) {
        let mean = plane.iter().sum::<f64>() / 16.0;
        let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-3);
    }

    let r = check_program(&[random(&[2, 3, 4, 4], 12), random(&[3], 13), random(&[3], 14)], |t, v| {
        let y = t.instance_norm(v[0], v[1], v[2])?;
        Ok(weighted_sum(t, y, 5))
    });
    assert_reports("instance_norm", &r, TOL);
}

#[test]
fn linear_contracts() {
    let mut tape = Tape::<f64>::new();
    let xin = random(&[2, 3], 15);
    let x = tape.constant(xin.clone());
    let eye = tape.constant(Tensor::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
    let zb = tape.constant(Tensor::zeros([3]));
    let y = tape.linear(x, eye, zb).unwrap();
    assert_eq!(tape.value(y), &xin);

    let z = tape.constant(Tensor::zeros([2, 3]));
    let w = tape.constant(random(&[4, 3], 16));
    let bias = random(&[4], 17);
    let b = tape.constant(bias.clone());
    let y = tape.linear(z, w, b).unwrap();
    assert_eq!(&tape.value(y).data()[..4], bias.data());
    assert_eq!(&tape.value(y).data()[4..], bias.data());
    let wrong = tape.constant(Tensor::zeros([4, 2]));
    assert!(tape.linear(z, wrong, b).is_err());

    let r = check_program(&[random(&[2, 3], 18), random(&[4, 3], 19), random(&[4], 20)], |t, v| {
        let y = t.linear(v[0], v[1], v[2])?;
        Ok(weighted_sum(t, y, 6))
    });
    assert_reports("linear", &r, TOL);
}

#[test]
fn backward_basics_and_fan_out() {
    let x0 = random(&[2, 3], 21);
    let mut tape = Tape::new();
    let x = tape.param(x0.clone());
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));

    let mut tape = Tape::new();
    let x = tape.param(x0.clone());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    for (g, v) in tape.grad(x).unwrap().data().iter().zip(x0.data()) {
        assert_eq!(*g, 2.0 * v);
    }

    // fan-out: x used in two branches, gradient is the sum of both
    let mut tape = Tape::new();
    let x = tape.param(x0.clone());
    let a = tape.affine(x, 3.0, 0.0);
    let b = tape.relu(x);
    let c = tape.add(a, b).unwrap();
    let s = tape.sum(c);
    tape.backward(s).unwrap();
    for (g, v) in tape.grad(x).unwrap().data().iter().zip(x0.data()) {
        assert_eq!(*g, 3.0 + if *v > 0.0 { 1.0 } else { 0.0 });
    }

    let mut tape = Tape::new();
    let x = tape.param(x0);
    assert!(matches!(tape.backward(x), Err(sslseg_core::TensorError::NonScalarLoss(_))));
}

#[test]
fn remaining_ops_gradients() {
    let r = check_program(&[random(&[2, 3, 2, 2], 22), random(&[2, 2, 2, 2], 23)], |t, v| {
        let y = t.concat_channels(v[0], v[1])?;
        let p = t.global_avg_pool(y)?;
        Ok(weighted_sum(t, p, 7))
    });
    assert_reports("concat+gap", &r, TOL);

    let r = check_program(&[random(&[3, 4], 24), random(&[3, 4], 25).map(|v| v.abs() + 0.5)], |t, v| {
        let a = t.div(v[0], v[1])?;
        let b = t.sub(a, v[1])?;
        let c = t.abs(b);
        let d = t.narrow(c, 1, 2)?;
        Ok(t.mean(d))
    });
    assert_reports("div/sub/abs/narrow", &r, TOL);

    let r = check_program(&[random(&[2, 4, 3, 3], 26)], |t, v| {
        let s = t.softmax_axis1(v[0])?;
        let c = t.sum_per_channel(s)?;
        Ok(weighted_sum(t, c, 8))
    });
    assert_reports("softmax+sum_per_channel", &r, TOL);

    let r = check_program(&[random(&[3, 5], 27), random(&[4, 5], 28)], |t, v| {
        let a = t.l2_normalize_axis1(v[0])?;
        let b = t.l2_normalize_axis1(v[1])?;
        let m = t.matmul_nt(a, b)?;
        let l = t.affine(m, 10.0, 0.0);
        t.cross_entropy_rows(l, &[0, 3, 1])
    });
    assert_reports("normalize+matmul+ce", &r, TOL);

    let r = check_program(&[random(&[2, 3, 6, 6], 29)], |t, v| {
        let n = t.l2_normalize_axis1(v[0])?;
        let p = t.patch_pool(n, &[[0, 0, 0], [1, 3, 2], [0, 2, 3]], 3)?;
        Ok(weighted_sum(t, p, 9))
    });
    assert_reports("patch_pool", &r, TOL);
}

#[test]
fn adam_is_deterministic() {
    let run = || {
        let mut params = indexmap::IndexMap::new();
        params.insert("w".to_string(), random(&[3, 3], 30).cast::<f32>());
        let mut state = AdamState::new(AdamConfig::default(), &params);
        for step in 0..10 {
            let mut tape = Tape::new();
            let w = tape.param(params["w"].clone());
            let sq = tape.mul(w, w).unwrap();
            let shifted = tape.affine(sq, 1.0, step as f32);
            let l = tape.sum(shifted);
            tape.backward(l).unwrap();
            let g = tape.grad(w).unwrap().clone();
            state.step(&mut params, &indexmap::IndexMap::from([("w".to_string(), g)])).unwrap();
        }
        params["w"].clone()
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn first_non_finite_op_is_recorded() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::full([2], 1.0));
    let z = tape.constant(Tensor::zeros([2]));
    let r = tape.relu(a);
    assert_eq!(tape.non_finite_origin(), None);
    let q = tape.div(r, z).unwrap();
    let _ = tape.sum(q);
    assert_eq!(tape.non_finite_origin(), Some("div"));
}
