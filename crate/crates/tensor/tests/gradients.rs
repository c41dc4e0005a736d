use otdr_tensor::{grad_check, BnMode, GradCheckOptions, Graph, ParamSet, Result, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

/// Builds a parameter set of random normal tensors and checks the gradient of
/// `mse(f(params), target)` against finite differences.
fn check<F>(seed: u64, shapes: &[&[usize]], f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    for (i, s) in shapes.iter().enumerate() {
        ps.add(format!("p{i}"), Tensor::randn(s, 1.0, &mut rng)).unwrap();
    }
    let ids: Vec<_> = ps.ids().collect();
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(&ps, id)).collect();
        let out = f(&mut g, &vars).unwrap();
        g.value(out).shape().to_vec()
    };
    let target = Tensor::randn(&probe, 1.0, &mut rng);
    let report = grad_check(
        &mut ps,
        |g, ps| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(ps, id)).collect();
            let out = f(g, &vars)?;
            let t = g.constant(target.clone());
            g.mse(out, t)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(!report.non_finite);
    report.max_rel_error
}

fn config() -> ProptestConfig {
    ProptestConfig::with_cases(24)
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn elementwise_ops(seed in any::<u64>()) {
        let e = check(seed, &[&[3, 4], &[3, 4]], |g, v| {
            let a = g.add(v[0], v[1])?;
            let s = g.sub(a, v[1])?;
            let m = g.mul(s, v[1])?;
            Ok(g.scale(m, -0.7))
        });
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn activations(seed in any::<u64>()) {
        for kind in [otdr_tensor::Activation::Elu, otdr_tensor::Activation::Sigmoid, otdr_tensor::Activation::Tanh] {
            let e = check(seed, &[&[2, 7]], |g, v| Ok(g.activation(v[0], kind)));
            prop_assert!(e < TOL, "{kind:?}: {e}");
        }
    }

    #[test]
    fn reductions(seed in any::<u64>()) {
        let e = check(seed, &[&[4, 3]], |g, v| {
            let sq = g.mul(v[0], v[0])?;
            let s = g.sum(sq);
            let m = g.mean(v[0]);
            g.add(s, m)
        });
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn dense(seed in any::<u64>()) {
        let e = check(seed, &[&[5, 3], &[4, 3], &[4]], |g, v| g.dense(v[0], v[1], Some(v[2])));
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn conv1d(seed in any::<u64>(), stride in 1usize..=2, k in 1usize..=5) {
        let e = check(seed, &[&[2, 3, 11], &[4, 3, k], &[4]], |g, v| g.conv1d(v[0], v[1], Some(v[2]), stride));
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn conv1d_transpose(seed in any::<u64>(), stride in 1usize..=2, k in 1usize..=5) {
        let e = check(seed, &[&[2, 3, 6], &[3, 2, k], &[2]], |g, v| {
            g.conv1d_transpose(v[0], v[1], Some(v[2]), stride)
        });
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn batch_norm(seed in any::<u64>()) {
        let e = check(seed, &[&[3, 2, 5], &[2], &[2]], |g, v| {
            Ok(g.batch_norm(v[0], v[1], v[2], BnMode::Train { eps: 1e-5 })?.0)
        });
        prop_assert!(e < TOL, "train: {e}");
        let e = check(seed, &[&[3, 2, 5], &[2], &[2]], |g, v| {
            let mode = BnMode::Eval { mean: &[0.1, -0.3], var: &[0.8, 1.7], eps: 1e-5 };
            Ok(g.batch_norm(v[0], v[1], v[2], mode)?.0)
        });
        prop_assert!(e < TOL, "eval: {e}");
    }

    #[test]
    fn shape_plumbing(seed in any::<u64>()) {
        let e = check(seed, &[&[2, 3, 4], &[2, 5]], |g, v| {
            let t0 = g.select_time(v[0], 0)?;
            let t2 = g.select_time(v[0], 2)?;
            let st = g.stack_time(&[t2, t0])?;
            let flat = g.reshape(st, &[2, 8])?;
            let part = g.slice_last(v[1], 1, 3)?;
            g.concat_last(&[part, flat])
        });
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn classification_and_masked_losses(seed in any::<u64>()) {
        let e = check(seed, &[&[3, 4]], |g, v| {
            let ce = g.softmax_cross_entropy(v[0], &[2, 0, 3])?;
            let col = g.slice_last(v[0], 1, 1)?;
            let ms = g.masked_sq_error(col, &[0.2, 0.5, 0.9], &[1.0, 0.0, 1.0])?;
            let tot = g.add(ce, ms)?;
            g.reshape(tot, &[1, 1])
        });
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn lstm(seed in any::<u64>(), reverse in any::<bool>()) {
        let e = check(seed, &[&[2, 6, 3], &[16, 3], &[16, 4], &[16]], |g, v| {
            g.lstm(v[0], v[1], v[2], v[3], reverse)
        });
        prop_assert!(e < TOL, "{e}");
    }
}

#[test]
fn dense_mse_gradient_is_tight() {
    for seed in 0..5 {
        let e = check(seed, &[&[4, 6], &[3, 6]], |g, v| g.dense(v[0], v[1], None));
        assert!(e < 1e-6, "{e}");
    }
}

#[test]
fn strided_conv_gradient_is_tight() {
    for seed in 0..5 {
        let e = check(seed, &[&[2, 2, 20], &[3, 2, 6]], |g, v| g.conv1d(v[0], v[1], None, 2));
        assert!(e < 1e-5, "{e}");
    }
}

fn inner(a: &Tensor, b: &Tensor) -> f64 {
    a.dot(b)
}

#[test]
fn conv_transpose_is_adjoint_for_autoencoder_shapes() {
    // (channels in, channels out, length, stride) as in a 100-sample autoencoder;
    // the pair is only adjoint when the length is a multiple of the stride
    let cases = [
        (1, 64, 100, 2),
        (64, 32, 50, 2),
        (32, 16, 25, 1),
        (16, 64, 25, 1),
        (32, 64, 50, 2),
        (64, 1, 100, 1),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (cin, cout, len, stride) in cases {
        let x = Tensor::randn(&[2, cin, len], 1.0, &mut rng);
        let w = Tensor::randn(&[cout, cin, 16], 1.0, &mut rng);
        let out_len = len.div_ceil(stride);
        let y = Tensor::randn(&[2, cout, out_len], 1.0, &mut rng);
        let mut g = Graph::new();
        let (xv, wv, yv) = (g.constant(x.clone()), g.constant(w), g.constant(y.clone()));
        let cx = g.conv1d(xv, wv, None, stride).unwrap();
        let cty = g.conv1d_transpose(yv, wv, None, stride).unwrap();
        let lhs = inner(g.value(cx), &y);
        let rhs = inner(&x, g.value(cty));
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "{cin}->{cout} L={len}: {lhs} vs {rhs}");
    }
}

#[test]
fn operations_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[4, 5, 1], 1.0, &mut rng));
        let wi = g.constant(Tensor::randn(&[8, 1], 0.5, &mut rng));
        let wh = g.constant(Tensor::randn(&[8, 2], 0.5, &mut rng));
        let b = g.constant(Tensor::randn(&[8], 0.5, &mut rng));
        let h = g.lstm(x, wi, wh, b, true).unwrap();
        g.value(h).clone()
    };
    assert_eq!(run(), run());
}
