//! Finite-difference checks of every differentiable primitive over many seeds.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roadbev::tensor::{grad_check, Tape, Tensor, Var};

const SEEDS: u64 = 20;
const EPS: f64 = 1e-6;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values bounded away from zero so ReLU kinks are never straddled.
fn rand_away(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Non-lattice sample points, some of them outside the map.
fn rand_points(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[n, 2], |i| {
        let lim = if i % 2 == 0 { w } else { h } as f64;
        let x: f64 = rng.gen_range(-0.8..lim - 0.2);
        if (x - x.round()).abs() < 0.05 {
            x + 0.1
        } else {
            x
        }
    })
}

fn check<F>(name: &str, tol: f64, mut make: impl FnMut(&mut ChaCha8Rng) -> Vec<Tensor>, f: F)
where
    F: Fn(&mut Tape, &[Var]) -> roadbev::tensor::Result<Var> + Copy,
{
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = make(&mut rng);
        let r = grad_check(f, &inputs, EPS).unwrap();
        assert!(r.max_rel_err < tol, "{name} seed {seed}: {r:?}");
    }
}

#[test]
fn matmul_sum_gradient_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (a, b) = (rand_t(&mut rng, &[4, 3]), rand_t(&mut rng, &[3, 2]));
    let mut tape = Tape::new();
    let (av, bv) = (tape.param(a.clone()), tape.param(b.clone()));
    let y = tape.matmul(av, bv).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    // d sum(AB) / dA[i,k] = sum_j B[k,j]
    let ga = tape.grad(av).unwrap();
    for i in 0..4 {
        for k in 0..3 {
            let expect: f64 = b.data()[k * 2..k * 2 + 2].iter().sum();
            assert!((ga[i * 3 + k] - expect).abs() < 1e-12);
        }
    }
    let r = grad_check(
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            t.sum(y)
        },
        &[a, b],
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn matmul_gradients() {
    check("matmul", 1e-6, |r| vec![rand_t(r, &[3, 3]), rand_t(r, &[3, 3])], |t, v| t.matmul(v[0], v[1]));
    check("matmul_nt", 1e-6, |r| vec![rand_t(r, &[3, 4]), rand_t(r, &[2, 4])], |t, v| t.matmul_nt(v[0], v[1]));
    check("linear", 1e-6, |r| vec![rand_t(r, &[2, 3]), rand_t(r, &[3, 4]), rand_t(r, &[4])], |t, v| {
        t.linear(v[0], v[1], v[2])
    });
    check("transpose", 1e-6, |r| vec![rand_t(r, &[2, 3])], |t, v| t.transpose(v[0]));
}

#[test]
fn elementwise_gradients() {
    let two = |r: &mut ChaCha8Rng| vec![rand_t(r, &[2, 3]), rand_t(r, &[2, 3])];
    check("add", 1e-6, two, |t, v| t.add(v[0], v[1]));
    check("sub", 1e-6, two, |t, v| t.sub(v[0], v[1]));
    check("mul", 1e-6, two, |t, v| t.mul(v[0], v[1]));
    check("scale", 1e-6, |r| vec![rand_t(r, &[5])], |t, v| t.scale(v[0], -2.5));
    check("relu", 1e-6, |r| vec![rand_away(r, &[7])], |t, v| t.relu(v[0]));
    check("sigmoid", 1e-6, |r| vec![rand_t(r, &[7])], |t, v| t.sigmoid(v[0]));
    check("reshape", 1e-6, |r| vec![rand_t(r, &[2, 3])], |t, v| t.reshape(v[0], &[3, 2]));
    check("mean", 1e-6, |r| vec![rand_t(r, &[4])], |t, v| t.mean(v[0]));
}

#[test]
fn softmax_gradients() {
    check("softmax len 6", 1e-6, |r| vec![rand_t(r, &[6])], |t, v| t.softmax(v[0], 0));
    check("softmax len 5", 1e-6, |r| vec![rand_t(r, &[5])], |t, v| t.softmax(v[0], 0));
    check("softmax axis 1 of 3", 1e-6, |r| vec![rand_t(r, &[2, 3, 2])], |t, v| t.softmax(v[0], 1));
}

#[test]
fn layer_norm_gradients() {
    check("layer_norm", 1e-5, |r| vec![rand_t(r, &[3, 4]), rand_t(r, &[4]), rand_t(r, &[4])], |t, v| {
        t.layer_norm(v[0], v[1], v[2])
    });
}

#[test]
fn conv_gradients() {
    check(
        "conv2d s1 p1",
        1e-5,
        |r| vec![rand_t(r, &[2, 5, 5]), rand_t(r, &[3, 2, 3, 3]), rand_t(r, &[3])],
        |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1),
    );
    check(
        "conv2d s2 p1",
        1e-5,
        |r| vec![rand_t(r, &[2, 5, 6]), rand_t(r, &[2, 2, 3, 3])],
        |t, v| t.conv2d(v[0], v[1], None, 2, 1),
    );
    check(
        "conv2d 1x1",
        1e-5,
        |r| vec![rand_t(r, &[3, 3, 4]), rand_t(r, &[2, 3, 1, 1]), rand_t(r, &[2])],
        |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 0),
    );
    check("avg_pool2", 1e-6, |r| vec![rand_t(r, &[2, 4, 6])], |t, v| t.avg_pool2(v[0]));
    check(
        "channel_scale",
        1e-6,
        |r| vec![rand_t(r, &[3, 2, 2]), rand_t(r, &[3])],
        |t, v| t.channel_scale(v[0], v[1]),
    );
}

#[test]
fn sampling_gradients() {
    check(
        "bilinear_sample",
        1e-5,
        |r| vec![rand_t(r, &[2, 4, 5]), rand_points(r, 6, 4, 5)],
        |t, v| t.bilinear_sample(v[0], v[1]),
    );
    check(
        "outer_lift",
        1e-6,
        |r| vec![rand_t(r, &[3, 2, 2]), rand_t(r, &[4, 2, 2])],
        |t, v| t.outer_lift(v[0], v[1]),
    );
    check("gather", 1e-6, |r| vec![rand_t(r, &[5])], |t, v| t.gather(v[0], vec![4, 0, 0, 2], &[2, 2]));
    check("scatter_add", 1e-6, |r| vec![rand_t(r, &[5])], |t, v| {
        t.scatter_add(v[0], vec![1, usize::MAX, 1, 0, 2], &[3])
    });
    check("concat_cols", 1e-6, |r| vec![rand_t(r, &[2, 1]), rand_t(r, &[2, 3])], |t, v| t.concat_cols(&[v[0], v[1]]));
}

#[test]
fn deformable_gather_gradients() {
    // two levels 4×6 and 2×3, 2 heads over 4 channels, 2 points, 3 queries
    let refs = [(0.3, 0.4), (0.71, 0.52), (0.05, 0.93)];
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let inputs = vec![
            rand_t(&mut rng, &[4, 4, 6]),
            rand_t(&mut rng, &[4, 2, 3]),
            Tensor::from_fn(&[3, 16], |_| rng.gen_range(-0.25..0.25)),
            rand_t(&mut rng, &[3, 8]),
        ];
        let r = grad_check(|t, v| t.ms_deform_attn(&v[0..2], v[2], v[3], &refs, 2, 2), &inputs, EPS).unwrap();
        assert!(r.max_rel_err < 1e-5, "seed {seed}: {r:?}");
    }
}

#[test]
fn loss_gradients() {
    check(
        "focal_loss",
        1e-6,
        |r| vec![rand_t(r, &[2, 3, 3])],
        |t, v| {
            let mut target = Tensor::from_fn(&[2, 3, 3], |i| (i as f64 * 0.37).fract());
            target.data_mut()[4] = 1.0;
            target.data_mut()[11] = 1.0;
            t.focal_loss(v[0], &target, 2.0, 4.0)
        },
    );
    check("masked_l1", 1e-6, |r| vec![rand_t(r, &[2, 2, 3])], |t, v| {
        t.masked_l1(v[0], &[5.0, -5.0, 5.0, -5.0], &[1, 4])
    });
    check("softmax_cross_entropy", 1e-6, |r| vec![rand_t(r, &[3, 4])], |t, v| {
        t.softmax_cross_entropy(v[0], &[0, 2, 1, 2])
    });
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let x = tape.param(rand_t(&mut rng, &[2, 6, 6]));
        let w = tape.param(rand_t(&mut rng, &[3, 2, 3, 3]));
        let y = tape.conv2d(x, w, None, 2, 1).unwrap();
        let y = tape.relu(y).unwrap();
        let y = tape.reshape(y, &[3, 9]).unwrap();
        let y = tape.softmax(y, 1).unwrap();
        let s = tape.sum(y).unwrap();
        let y2 = tape.mul(s, s).unwrap();
        tape.backward(y2).unwrap();
        (tape.grad_or_zeros(x), tape.grad_or_zeros(w))
    };
    let (a, b) = (run(), run());
    assert!(a.0.iter().zip(&b.0).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert!(a.1.iter().zip(&b.1).all(|(p, q)| p.to_bits() == q.to_bits()));
}

proptest! {
    #[test]
    fn softmax_slices_sum_to_one(data in prop::collection::vec(-50.0f64..50.0, 12), axis in 0usize..3) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 3, 2], data).unwrap());
        let y = tape.softmax(x, axis).unwrap();
        let y = tape.value(y);
        let shape = [2usize, 3, 2];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..shape[axis]).map(|k| y.data()[(o * shape[axis] + k) * inner + i]).sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }
        prop_assert!(y.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn lattice_samples_are_exact(data in prop::collection::vec(-10.0f64..10.0, 24), i in 0usize..4, j in 0usize..3) {
        let map = Tensor::new(vec![2, 4, 3], data).unwrap();
        let v = roadbev::tensor::bilinear_sample_point(&map, j as f64, i as f64);
        prop_assert_eq!(v, vec![map.at3(0, i, j), map.at3(1, i, j)]);
    }
}
