use super::*;
use crate::error::Error;
use crate::rng::SplitMix64;

fn t(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::from_data(shape, v.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_data(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

/// Random input bounded away from zero (keeps ReLU off its kink).
fn random_off_zero(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.uniform(0.05, 1.0);
            if rng.next_f64() < 0.5 {
                -mag
            } else {
                mag
            }
        })
        .collect();
    Tensor::from_data(shape, data).unwrap()
}

type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

/// Projects `build`'s output on a fixed random direction and compares the
/// tape gradient of that scalar with central differences, input by input.
fn check_grads(build: &Build, inputs: &[Tensor], rng: &mut SplitMix64, eps: f64) -> f64 {
    let probe_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.shape(out).to_vec()
    };
    let weights = random(&probe_shape, rng);
    let scalar = |tape: &mut Tape, vars: &[Var]| {
        let out = build(tape, vars);
        let w = tape.constant(weights.clone());
        tape.dot(out, w).unwrap()
    };
    let mut worst: f64 = 0.0;
    for which in 0..inputs.len() {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, x)| tape.leaf(x.clone(), i == which))
            .collect();
        let loss = scalar(&mut tape, &vars);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(vars[which]).unwrap().clone();
        let numeric = finite_diff_grad(
            |x| {
                let mut tape = Tape::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, orig)| tape.constant(if i == which { x.clone() } else { orig.clone() }))
                    .collect();
                let loss = scalar(&mut tape, &vars);
                tape.value(loss).item().unwrap()
            },
            &inputs[which],
            eps,
        );
        worst = worst.max(max_relative_error(analytic.data(), numeric.data(), 1e-8));
    }
    worst
}

fn assert_op_grads(name: &str, build: &Build, make: impl Fn(&mut SplitMix64) -> Vec<Tensor>) {
    for seed in 0..20 {
        let mut rng = SplitMix64::keyed(0xC0FFEE, seed);
        let inputs = make(&mut rng);
        let err = check_grads(build, &inputs, &mut rng, 1e-5);
        assert!(err < 1e-5, "{name}, seed {seed}: max relative error {err:e}");
    }
}

#[test]
fn matmul_identity_and_row_vector() {
    let mut tape = Tape::new();
    let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let out = tape.matmul(eye, m).unwrap();
    assert_eq!(tape.value(out), &t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));

    let a = tape.constant(t(&[1, 2], &[1.0, 0.0]));
    let b = tape.constant(t(&[2, 1], &[2.0, 5.0]));
    let out = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(out), &t(&[1, 1], &[2.0]));

    let bad = tape.constant(Tensor::zeros(&[3, 1]));
    assert!(matches!(tape.matmul(a, bad), Err(Error::ShapeMismatch(_))));
}

#[test]
fn matmul_backward_matches_finite_differences() {
    let mut rng = SplitMix64::new(11);
    let inputs = vec![random(&[3, 4], &mut rng), random(&[4, 2], &mut rng)];
    let err = check_grads(&|tp, v| tp.matmul(v[0], v[1]).unwrap(), &inputs, &mut rng, 1e-5);
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn conv2d_zero_kernel_and_identity_kernel() {
    let mut tape = Tape::new();
    let ones = tape.constant(Tensor::full(&[1, 3, 3], 1.0));
    let zero_k = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
    let out = tape.conv2d(ones, zero_k, 1, 0).unwrap();
    assert_eq!(tape.value(out), &Tensor::zeros(&[1, 1, 1]));

    let mut rng = SplitMix64::new(5);
    let img = random(&[2, 5, 5], &mut rng);
    let mut delta = vec![0.0; 2 * 2 * 9];
    delta[4] = 1.0; // filter 0 <- channel 0
    delta[(2 + 1) * 9 + 4] = 1.0; // filter 1 <- channel 1
    let x = tape.constant(img.clone());
    let k = tape.constant(t(&[2, 2, 3, 3], &delta));
    let out = tape.conv2d(x, k, 1, 1).unwrap();
    assert_eq!(tape.value(out), &img);
}

#[test]
fn conv2d_output_size_and_errors() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 3, 7, 7]));
    let k = tape.constant(Tensor::zeros(&[4, 3, 3, 3]));
    let out = tape.conv2d(x, k, 2, 1).unwrap();
    assert_eq!(tape.shape(out), &[2, 4, 4, 4]);
    let out = tape.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(tape.shape(out), &[2, 4, 5, 5]);

    let k_bad = tape.constant(Tensor::zeros(&[4, 2, 3, 3]));
    assert!(matches!(tape.conv2d(x, k_bad, 1, 1), Err(Error::ShapeMismatch(_))));
    assert!(matches!(tape.conv2d(x, k, 3, 1), Err(Error::Domain(_))));
}

#[test]
fn conv2d_backward_matches_finite_differences() {
    for (stride, padding) in [(1, 1), (1, 0), (2, 1)] {
        let mut rng = SplitMix64::new(21 + stride as u64 * 7 + padding as u64);
        let inputs = vec![random(&[2, 6, 6], &mut rng), random(&[3, 2, 3, 3], &mut rng)];
        let err = check_grads(
            &move |tp, v| tp.conv2d(v[0], v[1], stride, padding).unwrap(),
            &inputs,
            &mut rng,
            1e-5,
        );
        assert!(err < 1e-5, "stride {stride} padding {padding}: {err:e}");
    }
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let z = tape.constant(t(&[2], &[0.0, 0.0]));
    let p = tape.softmax_t(z, 1.0).unwrap();
    assert_eq!(tape.value(p).data(), &[0.5, 0.5]);

    let z = tape.constant(Tensor::full(&[4], 3.7));
    let p = tape.softmax_t(z, 0.3).unwrap();
    for &e in tape.value(p).data() {
        assert!((e - 0.25).abs() < 1e-15);
    }

    let z = tape.constant(t(&[2], &[4.0, 0.0]));
    let p = tape.softmax_t(z, 4.0).unwrap();
    let e = std::f64::consts::E;
    let got = tape.value(p).data();
    assert!((got[0] - e / (e + 1.0)).abs() < 1e-15);
    assert!((got[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
    assert!((got[0] - 0.731059).abs() < 1e-6);

    assert!(matches!(tape.softmax_t(z, 0.0), Err(Error::Domain(_))));
    assert!(matches!(tape.softmax_t(z, -1.0), Err(Error::Domain(_))));
}

#[test]
fn softmax_probability_shift_and_high_temperature() {
    let mut rng = SplitMix64::new(99);
    for _ in 0..50 {
        let x = random(&[7], &mut rng);
        let tau = rng.uniform(0.05, 5.0);
        let c = rng.uniform(-100.0, 100.0);
        let shifted = Tensor::from_data(&[7], x.data().iter().map(|v| v * 10.0 + c).collect()).unwrap();
        let base = Tensor::from_data(&[7], x.data().iter().map(|v| v * 10.0).collect()).unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(base);
        let b = tape.constant(shifted);
        let pa = tape.softmax_t(a, tau).unwrap();
        let pb = tape.softmax_t(b, tau).unwrap();
        let (pa, pb) = (tape.value(pa).data(), tape.value(pb).data());
        assert!((pa.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(pa.iter().all(|&p| p >= 0.0));
        for (x, y) in pa.iter().zip(pb) {
            assert!((x - y).abs() < 1e-12);
        }

        let hot = tape.softmax_t(a, 1e6).unwrap();
        assert!(tape.value(hot).data().iter().all(|p| (p - 1.0 / 7.0).abs() < 1e-4));
    }
}

#[test]
fn backward_sum_and_dot() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[3], &[0.3, -1.0, 2.0]));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    let d = tape.dot(x, x).unwrap();
    tape.backward(d).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);

    // A second pass without reset accumulates.
    tape.backward(d).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[4.0, 8.0]);
    tape.zero_grad();
    assert!(tape.grad(x).is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[2]));
    assert!(matches!(tape.backward(x), Err(Error::NotScalar(2))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    let c = tape.constant(t(&[2], &[3.0, 4.0]));
    let d = tape.dot(x, c).unwrap();
    tape.backward(d).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 4.0]);
    assert!(tape.grad(c).is_none());
}

#[test]
fn finite_diff_examples() {
    let x = t(&[4], &[0.1, 2.0, -3.0, 7.0]);
    let g = finite_diff_grad(|x| x.data().iter().sum(), &x, 1e-5);
    assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-9));

    let g = finite_diff_grad(|x| x.data().iter().map(|v| v * v).sum(), &t(&[1], &[3.0]), 1e-5);
    assert!((g.data()[0] - 6.0).abs() < 1e-8);

    // d softmax_0 / dz = [p0(1 - p0), -p0 p1] = [0.25, -0.25] at z = 0.
    let g = finite_diff_grad(
        |x| {
            let mut tape = Tape::new();
            let z = tape.constant(x.clone());
            let p = tape.softmax_t(z, 1.0).unwrap();
            tape.value(p).data()[0]
        },
        &t(&[2], &[0.0, 0.0]),
        1e-5,
    );
    assert!((g.data()[0] - 0.25).abs() < 1e-10);
    assert!((g.data()[1] + 0.25).abs() < 1e-10);
}

#[test]
fn elementwise_primitives_match_finite_differences() {
    assert_op_grads("add", &|tp, v| tp.add(v[0], v[1]).unwrap(), |r| {
        vec![random(&[3, 2], r), random(&[3, 2], r)]
    });
    assert_op_grads("sub", &|tp, v| tp.sub(v[0], v[1]).unwrap(), |r| {
        vec![random(&[5], r), random(&[5], r)]
    });
    assert_op_grads("mul", &|tp, v| tp.mul(v[0], v[1]).unwrap(), |r| {
        vec![random(&[2, 3], r), random(&[2, 3], r)]
    });
    assert_op_grads("scale", &|tp, v| tp.scale(v[0], -2.5), |r| vec![random(&[4], r)]);
    assert_op_grads("relu", &|tp, v| tp.relu(v[0]), |r| vec![random_off_zero(&[12], r)]);
    assert_op_grads("ln_floor", &|tp, v| tp.ln_floor(v[0], 1e-12), |r| {
        let x = random(&[6], r);
        vec![Tensor::from_data(&[6], x.data().iter().map(|v| v.abs() + 0.1).collect()).unwrap()]
    });
    assert_op_grads("reshape", &|tp, v| tp.reshape(v[0], &[6]).unwrap(), |r| {
        vec![random(&[2, 3], r)]
    });
}

#[test]
fn reduction_primitives_match_finite_differences() {
    assert_op_grads("sum", &|tp, v| tp.sum(v[0]), |r| vec![random(&[3, 3], r)]);
    assert_op_grads("mean", &|tp, v| tp.mean(v[0]), |r| vec![random(&[7], r)]);
    assert_op_grads("row_sum", &|tp, v| tp.row_sum(v[0]), |r| vec![random(&[4, 3], r)]);
    assert_op_grads("add_bias", &|tp, v| tp.add_bias(v[0], v[1]).unwrap(), |r| {
        vec![random(&[4, 3], r), random(&[3], r)]
    });
    assert_op_grads("avg_pool2", &|tp, v| tp.avg_pool2(v[0]).unwrap(), |r| {
        vec![random(&[2, 2, 4, 6], r)]
    });
    assert_op_grads("global_avg_pool", &|tp, v| tp.global_avg_pool(v[0]).unwrap(), |r| {
        vec![random(&[2, 3, 2, 2], r)]
    });
}

#[test]
fn normalization_primitives_match_finite_differences() {
    assert_op_grads("batch_norm", &|tp, v| tp.batch_norm(v[0], v[1], v[2]).unwrap(), |r| {
        vec![random(&[3, 2, 2, 2], r), random(&[2], r), random(&[2], r)]
    });
    assert_op_grads(
        "batch_norm_2d",
        &|tp, v| tp.batch_norm(v[0], v[1], v[2]).unwrap(),
        |r| vec![random(&[5, 3], r), random(&[3], r), random(&[3], r)],
    );
    assert_op_grads(
        "batch_norm_eval",
        &|tp, v| tp.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 2.0]).unwrap(),
        |r| vec![random(&[3, 2, 2], r), random(&[2], r), random(&[2], r)],
    );
    assert_op_grads("normalize_rows", &|tp, v| tp.normalize_rows(v[0]), |r| {
        vec![random(&[3, 4], r)]
    });
}

#[test]
fn softmax_family_matches_finite_differences() {
    assert_op_grads("softmax_t", &|tp, v| tp.softmax_t(v[0], 0.7).unwrap(), |r| {
        vec![random(&[5], r)]
    });
    assert_op_grads("softmax_t rows", &|tp, v| tp.softmax_t(v[0], 4.0).unwrap(), |r| {
        vec![random(&[3, 4], r)]
    });
    assert_op_grads("log_softmax_t", &|tp, v| tp.log_softmax_t(v[0], 0.1).unwrap(), |r| {
        vec![random(&[2, 6], r)]
    });
    assert_op_grads(
        "pick_columns",
        &|tp, v| tp.pick_columns(v[0], &[2, 0, 1]).unwrap(),
        |r| vec![random(&[3, 3], r)],
    );
    assert_op_grads(
        "select_rows",
        &|tp, v| tp.select_rows(v[0], &[1, 1, 0, 2]).unwrap(),
        |r| vec![random(&[3, 2], r)],
    );
}

/// Every primitive chained once; used for the determinism property.
fn composite_grads(seed: u64) -> Vec<Vec<f64>> {
    let mut rng = SplitMix64::new(seed);
    let mut tape = Tape::new();
    let img = tape.param(random(&[2, 1, 4, 4], &mut rng));
    let k = tape.param(random(&[2, 1, 3, 3], &mut rng));
    let gamma = tape.param(random(&[2], &mut rng));
    let beta = tape.param(random(&[2], &mut rng));
    let w = tape.param(random(&[2, 3], &mut rng));
    let b = tape.param(random(&[3], &mut rng));
    let h = tape.conv2d(img, k, 1, 1).unwrap();
    let h = tape.batch_norm(h, gamma, beta).unwrap();
    let h = tape.relu(h);
    let h = tape.avg_pool2(h).unwrap();
    let h = tape.global_avg_pool(h).unwrap();
    let logits = tape.matmul(h, w).unwrap();
    let logits = tape.add_bias(logits, b).unwrap();
    let ls = tape.log_softmax(logits).unwrap();
    let picked = tape.pick_columns(ls, &[0, 2]).unwrap();
    let p = tape.softmax_t(logits, 4.0).unwrap();
    let lp = tape.ln_floor(p, 1e-12);
    let q = tape.select_rows(p, &[1, 0]).unwrap();
    let mix = tape.mul(q, lp).unwrap();
    let rs = tape.row_sum(mix);
    let n = tape.normalize_rows(h);
    let nsum = tape.sum(n);
    let diff = tape.sub(picked, rs).unwrap();
    let total = tape.add(diff, diff).unwrap();
    let m = tape.mean(total);
    let loss = tape.add(m, nsum).unwrap();
    let loss = tape.scale(loss, 0.5);
    tape.backward(loss).unwrap();
    [img, k, gamma, beta, w, b]
        .iter()
        .map(|&v| tape.grad(v).unwrap().data().to_vec())
        .collect()
}

#[test]
fn backward_is_deterministic_across_runs() {
    for seed in 0..5 {
        let a = composite_grads(seed);
        let b = composite_grads(seed);
        let bits = |g: &Vec<Vec<f64>>| g.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}

#[test]
fn tape_is_topologically_ordered() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(1.0));
    let y = tape.scale(x, 2.0);
    let z = tape.add(y, x).unwrap();
    assert!(x.node_id() < y.node_id() && y.node_id() < z.node_id());
    assert_eq!(tape.len(), 3);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_is_a_distribution(v in proptest::collection::vec(-50.0f64..50.0, 1..12), tau in 0.01f64..10.0) {
            let mut tape = Tape::new();
            let z = tape.constant(Tensor::vector(v));
            let p = tape.softmax_t(z, tau).unwrap();
            let p = tape.value(p).data();
            prop_assert!(p.iter().all(|&e| (0.0..=1.0).contains(&e)));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn conv_identity_kernel_is_exact(v in proptest::collection::vec(-10.0f64..10.0, 25)) {
            let img = Tensor::from_data(&[1, 5, 5], v).unwrap();
            let mut delta = vec![0.0; 9];
            delta[4] = 1.0;
            let mut tape = Tape::new();
            let x = tape.constant(img.clone());
            let k = tape.constant(Tensor::from_data(&[1, 1, 3, 3], delta).unwrap());
            let out = tape.conv2d(x, k, 1, 1).unwrap();
            prop_assert_eq!(tape.value(out), &img);
        }
    }
}
