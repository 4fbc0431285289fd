use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn assert_close(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
}

#[test]
fn conv2d_zero_input_gives_zero_output() {
    let mut g = Graph::new();
    let x = g.constant(&[1, 2, 4, 4], vec![0.0; 32]).unwrap();
    let w = g.param(&[3, 2, 3, 3], vec![0.7; 54]).unwrap();
    let y = g.conv2d(x, w, None, 1, 1).unwrap();
    assert!(g.value(y).iter().all(|&v| v == 0.0));
}

#[test]
fn conv2d_ones_cross_correlation() {
    let mut g = Graph::new();
    let x = g.constant(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
    let w = g.param(&[1, 1, 2, 2], vec![1.0; 4]).unwrap();
    let y = g.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 2, 2]);
    assert_eq!(g.value(y), &[4.0, 4.0, 4.0, 4.0]);
}

#[test]
fn conv2d_known_asymmetric_kernel() {
    // 2x2 input [[1,2],[3,4]], kernel [[1,0],[0,2]] at pad 0 -> 1 + 2*4 = 9.
    let mut g = Graph::new();
    let x = g.constant(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let w = g.param(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
    let y = g.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(g.value(y), &[9.0]);
}

#[test]
fn conv2d_rejects_bad_shapes() {
    let mut g = Graph::new();
    let x = g.constant(&[1, 2, 4, 4], vec![0.0; 32]).unwrap();
    let w = g.param(&[3, 3, 3, 3], vec![0.0; 81]).unwrap();
    assert!(g.conv2d(x, w, None, 1, 1).is_err());
    let w2 = g.param(&[3, 2, 3, 3], vec![0.0; 54]).unwrap();
    assert!(g.conv2d(x, w2, None, 0, 1).is_err());
    let small = g.constant(&[1, 2, 2, 2], vec![0.0; 8]).unwrap();
    assert!(g.conv2d(small, w2, None, 1, 0).is_err());
}

#[test]
fn conv2d_weight_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let input = InputSpec::new(&[1, 1, 4, 4], (0..16).map(|_| rng.gen::<f64>() - 0.5).collect());
    let weight = InputSpec::new(&[1, 1, 3, 3], (0..9).map(|_| rng.gen::<f64>() - 0.5).collect());
    let builder = |g: &mut Graph, ids: &[NodeId]| {
        let y = g.conv2d(ids[0], ids[1], None, 1, 0)?;
        g.sum(y)
    };
    let err = grad_check(&builder, &[input, weight], 1e-5).unwrap();
    assert!(err < 1e-6, "conv2d fd error {err}");
}

#[test]
fn leaky_relu_values_and_gradient() {
    let mut g = Graph::new();
    let x = g.param(&[3], vec![-2.0, 0.0, 3.0]).unwrap();
    let y = g.leaky_relu(x, 0.1).unwrap();
    assert_eq!(g.value(y), &[-0.2, 0.0, 3.0]);
    let loss = g.sum(y).unwrap();
    g.backward(loss).unwrap();
    let grad = g.grad(x).unwrap();
    assert_eq!(grad[0], 0.1);
    assert_eq!(grad[2], 1.0);
}

#[test]
fn leaky_relu_rejects_bad_slope() {
    let mut g = Graph::new();
    let x = g.param(&[1], vec![1.0]).unwrap();
    assert!(g.leaky_relu(x, 1.0).is_err());
    assert!(g.leaky_relu(x, -0.1).is_err());
}

#[test]
fn downsample_shapes_and_odd_rejection() {
    let mut g = Graph::new();
    let x = g.constant(&[1, 4, 16, 16], vec![0.1; 1024]).unwrap();
    let w = g.param(&[6, 4, 3, 3], vec![0.05; 216]).unwrap();
    let y = g.downsample_conv(x, w, None).unwrap();
    assert_eq!(g.shape(y), &[1, 6, 8, 8]);

    let x64 = g.constant(&[1, 1, 64, 64], vec![0.2; 4096]).unwrap();
    let w1 = g.param(&[1, 1, 3, 3], vec![0.1; 9]).unwrap();
    let d1 = g.downsample_conv(x64, w1, None).unwrap();
    let d2 = g.downsample_conv(d1, w1, None).unwrap();
    assert_eq!(g.shape(d2), &[1, 1, 16, 16]);

    let odd = g.constant(&[1, 1, 5, 5], vec![0.0; 25]).unwrap();
    assert!(g.downsample_conv(odd, w1, None).is_err());
}

#[test]
fn upsample_identity_replication_and_backward() {
    let mut g = Graph::new();
    let x = g.param(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let same = g.upsample_nearest(x, 1).unwrap();
    assert_eq!(g.value(same), g.value(x));

    let mut g = Graph::new();
    let x = g.param(&[1, 1, 1, 1], vec![5.0]).unwrap();
    let y = g.upsample_nearest(x, 2).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 2, 2]);
    assert_eq!(g.value(y), &[5.0; 4]);
    let loss = g.sum(y).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[4.0]);
}

#[test]
fn concat_shapes_empty_and_backward_routing() {
    let mut g = Graph::new();
    let a = g.param(&[1, 2, 2, 2], vec![1.0; 8]).unwrap();
    let b = g.param(&[1, 3, 2, 2], vec![2.0; 12]).unwrap();
    let y = g.concat_channels(a, b).unwrap();
    assert_eq!(g.shape(y), &[1, 5, 2, 2]);

    let empty = g.constant(&[1, 0, 2, 2], vec![]).unwrap();
    let same = g.concat_channels(a, empty).unwrap();
    assert_eq!(g.value(same), g.value(a));

    // Distinct upstream weights must route exactly to their channel source.
    let mask: Vec<f64> = (0..20).map(|i| i as f64).collect();
    let m = g.constant(&[1, 5, 2, 2], mask.clone()).unwrap();
    let prod = g.mul(y, m).unwrap();
    let loss = g.sum(prod).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(a).unwrap(), &mask[0..8]);
    assert_eq!(g.grad(b).unwrap(), &mask[8..20]);

    let bad = g.constant(&[1, 2, 3, 3], vec![0.0; 18]).unwrap();
    assert!(g.concat_channels(a, bad).is_err());
}

#[test]
fn select_rows_gathers_and_accumulates() {
    let mut g = Graph::new();
    let x = g.param(&[3, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let y = g.select_rows(x, &[2, 0, 2]).unwrap();
    assert_eq!(g.value(y), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
    let loss = g.sum(y).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    assert!(g.select_rows(x, &[3]).is_err());
}

#[test]
fn sigmoid_values_and_gradient() {
    let mut g = Graph::new();
    let x = g.param(&[3], vec![0.0, 3.0_f64.ln(), 1000.0]).unwrap();
    let y = g.sigmoid(x).unwrap();
    assert_eq!(g.value(y)[0], 0.5);
    assert_close(g.value(y)[1], 0.75, 1e-15);
    assert!(g.value(y)[2] <= 1.0 && g.value(y)[2].is_finite());

    let loss = g.sum(y).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap()[0], 0.25);
}

#[test]
fn sigmoid_survives_large_negative_inputs() {
    let mut g = Graph::new();
    let x = g.param(&[2], vec![-1000.0, -30.0]).unwrap();
    let y = g.sigmoid(x).unwrap();
    assert!(g.value(y).iter().all(|v| v.is_finite() && *v >= 0.0));
}

#[test]
fn bce_hand_values() {
    let mut g = Graph::new();
    // Perfect prediction after clamping.
    let p = g.param(&[2], vec![1.0, 0.0]).unwrap();
    let t = g.constant(&[2], vec![1.0, 0.0]).unwrap();
    let loss = g.bce(p, t, Reduction::Mean).unwrap();
    assert!(g.scalar(loss) <= 1e-6);

    // Uniform 0.5 on a 2x2 map, all-ones target, sum reduction.
    let mut g = Graph::new();
    let p = g.param(&[1, 1, 2, 2], vec![0.5; 4]).unwrap();
    let t = g.constant(&[1, 1, 2, 2], vec![1.0; 4]).unwrap();
    let loss = g.bce(p, t, Reduction::Sum).unwrap();
    assert_close(g.scalar(loss), 4.0 * std::f64::consts::LN_2, 1e-12);

    // Single element p = 0.9 against target 0.
    let mut g = Graph::new();
    let p = g.param(&[1], vec![0.9]).unwrap();
    let t = g.constant(&[1], vec![0.0]).unwrap();
    let loss = g.bce(p, t, Reduction::Sum).unwrap();
    assert_close(g.scalar(loss), -(0.1_f64.ln()), 1e-12);
}

#[test]
fn bce_rejects_out_of_range() {
    let mut g = Graph::new();
    let p = g.param(&[1], vec![1.5]).unwrap();
    let t = g.constant(&[1], vec![1.0]).unwrap();
    assert!(g.bce(p, t, Reduction::Sum).is_err());
    let p2 = g.param(&[1], vec![0.5]).unwrap();
    let t2 = g.constant(&[1], vec![0.25]).unwrap();
    assert!(g.bce(p2, t2, Reduction::Sum).is_err());
}

#[test]
fn grl_forward_is_bitwise_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let values: Vec<f64> = (0..32).map(|_| rng.gen::<f64>() * 200.0 - 100.0).collect();
    for lambda in [0.01, 0.1, 1.0, 17.5] {
        let mut g = Graph::new();
        let x = g.param(&[32], values.clone()).unwrap();
        let y = g.grl(x, lambda).unwrap();
        for (a, b) in g.value(x).iter().zip(g.value(y)) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

#[test]
fn grl_reverses_and_scales_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let values: Vec<f64> = (0..16).map(|_| rng.gen::<f64>() - 0.5).collect();
    let mask: Vec<f64> = (0..16).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();

    let run = |lambda: Option<f64>| -> Vec<f64> {
        let mut g = Graph::new();
        let x = g.param(&[16], values.clone()).unwrap();
        let h = match lambda {
            Some(l) => g.grl(x, l).unwrap(),
            None => x,
        };
        let m = g.constant(&[16], mask.clone()).unwrap();
        let s = g.sigmoid(h).unwrap();
        let prod = g.mul(s, m).unwrap();
        let loss = g.sum(prod).unwrap();
        g.backward(loss).unwrap();
        g.grad(x).unwrap().to_vec()
    };

    let identity = run(None);
    for lambda in [0.01, 0.1, 1.0] {
        let reversed = run(Some(lambda));
        for (r, i) in reversed.iter().zip(&identity) {
            let expect = -lambda * i;
            let rel = (r - expect).abs() / expect.abs().max(1e-300);
            assert!(rel <= 1e-12, "lambda {lambda}: {r} vs {expect}");
        }
    }

    // Vanishing-lambda limit: gradient magnitude shrinks with lambda.
    let tiny = run(Some(1e-12));
    let up_norm: f64 = identity.iter().map(|v| v * v).sum::<f64>().sqrt();
    let tiny_norm: f64 = tiny.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(tiny_norm <= 1e-9 * up_norm);
}

#[test]
fn backward_linear_and_quadratic() {
    let mut g = Graph::new();
    let w = g.param(&[4], vec![0.3, -0.7, 2.0, 5.5]).unwrap();
    let loss = g.sum(w).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(w).unwrap(), &[1.0; 4]);

    let mut g = Graph::new();
    let w = g.param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    let sq = g.mul(w, w).unwrap();
    let half = g.scale(sq, 0.5).unwrap();
    let loss = g.sum(half).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(w).unwrap(), &[1.0, 2.0, 3.0]);
}

#[test]
fn backward_rejects_non_scalar_and_accumulates() {
    let mut g = Graph::new();
    let w = g.param(&[2], vec![1.0, 2.0]).unwrap();
    assert!(g.backward(w).is_err());

    let loss = g.sum(w).unwrap();
    g.backward(loss).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(w).unwrap(), &[2.0, 2.0]);
    assert_eq!(g.grad(loss).unwrap(), &[2.0]);

    g.zero_grads();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(w).unwrap(), &[1.0, 1.0]);
}

#[test]
fn backward_is_bitwise_deterministic() {
    let build = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut g = Graph::new();
        let x = g
            .constant(&[2, 3, 8, 8], (0..384).map(|_| rng.gen::<f64>()).collect())
            .unwrap();
        let w = g
            .param(&[4, 3, 3, 3], (0..108).map(|_| rng.gen::<f64>() - 0.5).collect())
            .unwrap();
        let b = g.param(&[4], vec![0.01; 4]).unwrap();
        let y = g.conv2d(x, w, Some(b), 2, 1).unwrap();
        let y = g.leaky_relu(y, 0.1).unwrap();
        let p = g.sigmoid(y).unwrap();
        let t = g.constant(&[2, 4, 4, 4], vec![1.0; 128]).unwrap();
        let loss = g.bce(p, t, Reduction::Mean).unwrap();
        g.backward(loss).unwrap();
        (g.grad(w).unwrap().to_vec(), g.grad(b).unwrap().to_vec())
    };
    let (w1, b1) = build();
    let (w2, b2) = build();
    assert!(w1.iter().zip(&w2).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert!(b1.iter().zip(&b2).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn composite_network_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let input = InputSpec::new(&[1, 1, 4, 4], (0..16).map(|_| rng.gen::<f64>() - 0.5).collect());
    let weight = InputSpec::new(&[2, 1, 3, 3], (0..18).map(|_| rng.gen::<f64>() - 0.5).collect());
    let bias = InputSpec::new(&[2], vec![0.05, -0.05]);
    let t: Vec<f64> = (0..8).map(|i| f64::from(i % 2 == 0)).collect();
    let builder = move |g: &mut Graph, ids: &[NodeId]| {
        let y = g.conv2d(ids[0], ids[1], Some(ids[2]), 1, 0)?;
        let y = g.leaky_relu(y, 0.1)?;
        let p = g.sigmoid(y)?;
        let target = g.constant(&[1, 2, 2, 2], t.clone())?;
        g.bce(p, target, Reduction::Sum)
    };
    let err = grad_check(&builder, &[input, weight, bias], 1e-5).unwrap();
    assert!(err < 1e-4, "composite fd error {err}");
}

#[test]
fn grad_check_identity_is_exact() {
    let input = InputSpec::new(&[5], vec![0.3, -1.2, 0.8, 2.0, -0.4]);
    let builder = |g: &mut Graph, ids: &[NodeId]| g.sum(ids[0]);
    let err = grad_check(&builder, &[input], 1e-5).unwrap();
    assert!(err < 1e-10);
}

#[test]
fn grad_check_bce_sigmoid_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let input = InputSpec::new(&[8], (0..8).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect());
    let t: Vec<f64> = (0..8).map(|_| f64::from(rng.gen::<bool>())).collect();
    let builder = move |g: &mut Graph, ids: &[NodeId]| {
        let p = g.sigmoid(ids[0])?;
        let target = g.constant(&[8], t.clone())?;
        g.bce(p, target, Reduction::Sum)
    };
    let err = grad_check(&builder, &[input], 1e-5).unwrap();
    assert!(err < 1e-6, "bce+sigmoid fd error {err}");
}

#[test]
fn grad_check_grl_sign_aware() {
    let lambda = 0.1;
    let input = InputSpec::new(&[6], vec![0.4, -0.2, 1.1, -0.9, 0.0, 0.6]);
    let builder = move |g: &mut Graph, ids: &[NodeId]| {
        let y = g.grl(ids[0], lambda)?;
        g.sum(y)
    };
    let analytic = analytic_gradients(&builder, std::slice::from_ref(&input)).unwrap();
    let numeric = numeric_gradients(&builder, std::slice::from_ref(&input), 1e-5).unwrap();
    for (&a, &n) in analytic[0].iter().zip(&numeric[0]) {
        assert!(rel_error(a, -lambda * n) < 1e-10);
    }
}

#[test]
fn grad_check_rejects_nondeterministic_builder() {
    use std::cell::Cell;
    let counter = Cell::new(0.0_f64);
    let input = InputSpec::new(&[2], vec![1.0, 2.0]);
    let builder = move |g: &mut Graph, ids: &[NodeId]| {
        counter.set(counter.get() + 1.0);
        let c = g.scalar_constant(counter.get());
        let s = g.sum(ids[0])?;
        g.mul(s, c)
    };
    let err = grad_check(&builder, &[input], 1e-5);
    assert!(matches!(err, Err(crate::Error::NonDeterministic(_))));
}

#[test]
fn grad_check_rejects_bad_eps() {
    let input = InputSpec::new(&[2], vec![1.0, 2.0]);
    let builder = |g: &mut Graph, ids: &[NodeId]| g.sum(ids[0]);
    assert!(grad_check(&builder, &[input.clone()], 1e-8).is_err());
    assert!(grad_check(&builder, &[input], 1e-2).is_err());
}

#[test]
fn audit_clears_thresholds_on_five_seeds() {
    for row in audit_operators(5).unwrap() {
        assert!(
            row.pass(),
            "{} error {} over threshold {}",
            row.op,
            row.max_rel_error,
            row.threshold
        );
    }
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn bce_is_nonnegative(
            p in proptest::collection::vec(0.0..=1.0f64, 1..16),
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t: Vec<f64> = (0..p.len()).map(|_| f64::from(rng.gen::<bool>())).collect();
            let mut g = Graph::new();
            let n = p.len();
            let pid = g.param(&[n], p).unwrap();
            let tid = g.constant(&[n], t).unwrap();
            let loss = g.bce(pid, tid, Reduction::Sum).unwrap();
            prop_assert!(g.scalar(loss) >= 0.0);
        }

        #[test]
        fn grl_identity_forward_any_lambda(
            xs in proptest::collection::vec(-1e3..1e3f64, 1..32),
            lambda in 1e-6..10.0f64,
        ) {
            let mut g = Graph::new();
            let n = xs.len();
            let x = g.param(&[n], xs).unwrap();
            let y = g.grl(x, lambda).unwrap();
            let same = g.value(x).iter().zip(g.value(y)).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }

        #[test]
        fn sigmoid_stays_in_open_unit_interval(
            xs in proptest::collection::vec(-30.0..30.0f64, 1..32),
        ) {
            let mut g = Graph::new();
            let n = xs.len();
            let x = g.param(&[n], xs).unwrap();
            let y = g.sigmoid(x).unwrap();
            prop_assert!(g.value(y).iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}
