use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn tensor_shape_must_match_data() {
    assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    assert_eq!(Tensor::scalar(2.0).shape(), &[] as &[usize]);
    assert!(Tensor::zeros(&[2, 2]).reshape(&[3]).is_err());
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = tape.matmul(i2, m).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

    let p = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
    let m = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    let y = tape.matmul(p, m).unwrap();
    assert_eq!(tape.value(y).data(), &[5.0, 6.0, 0.0, 0.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "{err}");
    assert!(matches!(tape.matmul(a, b), Err(TensorError::Dimension(_))));
}

#[test]
fn matmul_nt_matches_explicit_transpose() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_fn(&[3, 4], |i| i as f64 * 0.3 - 1.0));
    let b = tape.constant(Tensor::from_fn(&[5, 4], |i| (i as f64).sin()));
    let bt = tape.transpose(b).unwrap();
    let y1 = tape.matmul(a, bt).unwrap();
    let y2 = tape.matmul_nt(a, b).unwrap();
    assert!(tape.value(y1).max_abs_diff(tape.value(y2)) < 1e-14);
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    assert!(close(tape.value(y).data(), &[1.0 / 3.0; 3], 1e-15));

    let x = tape.constant(t(&[2], &[1000.0, 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    assert!(close(tape.value(y).data(), &[1.0, 0.0], 1e-12));

    assert!(matches!(tape.softmax(x, 1), Err(TensorError::Dimension(_))));
    let empty = tape.constant(Tensor::zeros(&[2, 0]));
    assert!(matches!(tape.softmax(empty, 1), Err(TensorError::Dimension(_))));
}

#[test]
fn softmax_along_leading_axis() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 2], &[0.0, 1.0, 0.0, 3.0]));
    let y = tape.softmax(x, 0).unwrap();
    let v = tape.value(y).data();
    assert!((v[0] - 0.5).abs() < 1e-15 && (v[2] - 0.5).abs() < 1e-15);
    let e = (-2.0f64).exp();
    assert!((v[1] - e / (1.0 + e)).abs() < 1e-15);
}

#[test]
fn conv_examples() {
    let mut tape = Tape::new();
    let x = Tensor::from_fn(&[1, 4, 5], |i| (i * i) as f64 * 0.1);
    let xv = tape.constant(x.clone());
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let w = tape.constant(t(&[1, 1, 3, 3], &k));
    let y = tape.conv2d(xv, w, None, 1, 1).unwrap();
    assert_eq!(tape.value(y), &x);

    let ones = tape.constant(Tensor::full(&[1, 4, 4], 1.0));
    let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = tape.conv2d(ones, w, None, 1, 1).unwrap();
    let y = tape.value(y);
    assert_eq!(y.shape(), &[1, 4, 4]);
    assert_eq!(y.at3(0, 1, 1), 9.0);
    assert_eq!(y.at3(0, 2, 2), 9.0);
    assert_eq!(y.at3(0, 0, 0), 4.0);
    assert_eq!(y.at3(0, 3, 3), 4.0);
    assert_eq!(y.at3(0, 0, 1), 6.0);
}

#[test]
fn conv_output_dims() {
    let mut tape = Tape::new();
    for (dim, stride, pad) in [(7, 2, 1), (8, 2, 1), (5, 1, 0), (1, 1, 1), (3, 2, 0)] {
        let x = tape.constant(Tensor::zeros(&[2, dim, dim + 1]));
        let w = tape.constant(Tensor::zeros(&[3, 2, 3, 3]));
        let y = tape.conv2d(x, w, None, stride, pad).unwrap();
        let expect = |d: usize| (d + 2 * pad - 3) / stride + 1;
        assert_eq!(tape.shape(y), &[3, expect(dim), expect(dim + 1)]);
    }
    let x = tape.constant(Tensor::zeros(&[2, 4, 4]));
    let w = tape.constant(Tensor::zeros(&[3, 1, 3, 3]));
    assert!(matches!(tape.conv2d(x, w, None, 1, 1), Err(TensorError::Dimension(_))));
}

#[test]
fn bilinear_examples() {
    let map = Tensor::from_fn(&[2, 5, 4], |i| i as f64 * 1.5 - 3.0);
    let at = bilinear_sample_point(&map, 2.0, 3.0);
    assert_eq!(at, vec![map.at3(0, 3, 2), map.at3(1, 3, 2)]);
    assert_eq!(bilinear_sample_point(&map, -5.0, -5.0), vec![0.0, 0.0]);
    let mid = bilinear_sample_point(&map, 0.5, 0.0);
    assert_eq!(mid[0], (map.at3(0, 0, 0) + map.at3(0, 0, 1)) / 2.0);

    // far edges are inclusive, one past is not
    assert_eq!(bilinear_sample_point(&map, 3.0, 4.0)[1], map.at3(1, 4, 3));
    assert_eq!(bilinear_sample_point(&map, 3.0001, 0.0), vec![0.0, 0.0]);

    let mut tape = Tape::new();
    let m = tape.constant(map.clone());
    let pts = tape.constant(t(&[3, 2], &[2.0, 3.0, -5.0, -5.0, 0.5, 0.0]));
    let y = tape.bilinear_sample(m, pts).unwrap();
    assert_eq!(tape.shape(y), &[3, 2]);
    assert_eq!(tape.value(y).data()[0], map.at3(0, 3, 2));
    assert_eq!(tape.value(y).data()[2..4], [0.0, 0.0]);
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::full(&[3], 1.0));
    let b = tape.constant(Tensor::zeros(&[3]));
    let x = tape.constant(Tensor::full(&[1, 3], 7.0));
    let y = tape.layer_norm(x, g, b).unwrap();
    assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-12));

    let g = tape.constant(Tensor::full(&[2], 1.0));
    let b = tape.constant(Tensor::zeros(&[2]));
    let x = tape.constant(t(&[1, 2], &[1.0, -1.0]));
    let y = tape.layer_norm(x, g, b).unwrap();
    assert!(close(tape.value(y).data(), &[1.0, -1.0], 1e-4));
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_fn(&[2, 3, 2], |i| i as f64));
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().iter().all(|&g| g == 1.0));

    let mut tape = Tape::new();
    let x = tape.param(t(&[1], &[3.0]));
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[6.0]);

    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[4]));
    let y = tape.add(x, x).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0; 4]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[2]));
    assert!(matches!(tape.backward(x), Err(TensorError::Contract(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::full(&[2], 2.0));
    let c = tape.constant(Tensor::full(&[2], 5.0));
    let y = tape.mul(x, c).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[5.0, 5.0]);
    assert!(tape.grad(c).is_none());
    assert_eq!(tape.grad_or_zeros(c), vec![0.0, 0.0]);
}

#[test]
fn grad_check_rejects_bad_eps() {
    let f = |tape: &mut Tape, v: &[Var]| tape.sum(v[0]);
    assert!(grad_check(f, &[Tensor::zeros(&[2])], 1e-2).is_err());
    assert!(grad_check(f, &[Tensor::zeros(&[2])], 1e-8).is_err());
    assert!(grad_check(f, &[Tensor::zeros(&[2])], 1e-5).unwrap().max_rel_err < 1e-9);
}

#[test]
fn non_finite_values_name_the_op() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::full(&[2], 1e300));
    let err = tape.mul(x, x).unwrap_err();
    assert_eq!(err, TensorError::NonFinite { op: "mul" });
    let f = |tape: &mut Tape, v: &[Var]| {
        let y = tape.mul(v[0], v[0])?;
        tape.sum(y)
    };
    assert!(matches!(grad_check(f, &[Tensor::full(&[1], 1e300)], 1e-5), Err(TensorError::NonFinite { op: "mul" })));
}

#[test]
fn avg_pool_and_channel_scale() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_fn(&[1, 2, 4], |i| i as f64));
    let y = tape.avg_pool2(x).unwrap();
    assert_eq!(tape.value(y).data(), &[2.5, 4.5]);
    let s = tape.constant(t(&[1], &[2.0]));
    let z = tape.channel_scale(y, s).unwrap();
    assert_eq!(tape.value(z).data(), &[5.0, 9.0]);
    let odd = tape.constant(Tensor::zeros(&[1, 3, 4]));
    assert!(tape.avg_pool2(odd).is_err());
}

#[test]
fn gather_scatter_round_trip() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
    let g = tape.gather(x, vec![3, 0, 0], &[3]).unwrap();
    assert_eq!(tape.value(g).data(), &[4.0, 1.0, 1.0]);
    let s = tape.scatter_add(x, vec![1, usize::MAX, 1, 0], &[2]).unwrap();
    assert_eq!(tape.value(s).data(), &[4.0, 4.0]);
    assert!(tape.gather(x, vec![4], &[1]).is_err());
    assert!(tape.scatter_add(x, vec![0, 0, 0, 9], &[2]).is_err());
}

#[test]
fn outer_lift_layout() {
    let mut tape = Tape::new();
    // C=2, H=1, W=2; B=3
    let f = tape.constant(t(&[2, 1, 2], &[1.0, 2.0, 10.0, 20.0]));
    let p = tape.constant(t(&[3, 1, 2], &[0.5, 0.1, 0.25, 0.2, 0.25, 0.7]));
    let y = tape.outer_lift(f, p).unwrap();
    assert_eq!(tape.shape(y), &[6, 2]);
    let v = tape.value(y).data();
    assert_eq!(&v[0..2], &[0.5, 5.0]);
    assert_eq!(&v[4..6], &[0.25, 2.5]);
    assert!(close(&v[6..8], &[0.2, 2.0], 1e-15));
    assert!(close(&v[10..12], &[1.4, 14.0], 1e-15));
}

#[test]
fn concat_cols_layout() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2, 1], &[1.0, 2.0]));
    let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
    let y = tape.concat_cols(&[a, b]).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
}

#[test]
fn focal_loss_oracle() {
    let logits = [0.3, -1.2, 2.0, 0.0];
    let target = [1.0, 0.5, 0.0, 1.0];
    let mut tape = Tape::new();
    let x = tape.constant(t(&[4], &logits));
    let y = tape.focal_loss(x, &t(&[4], &target), 2.0, 4.0).unwrap();
    let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
    let mut expect = 0.0;
    for (&z, &tg) in logits.iter().zip(&target) {
        let p = sig(z);
        expect -= if tg == 1.0 { (1.0 - p).powi(2) * p.ln() } else { (1.0 - tg).powi(4) * p.powi(2) * (1.0 - p).ln() };
    }
    assert!((tape.value(y).data()[0] - expect / 2.0).abs() < 1e-12);
}

#[test]
fn cross_entropy_oracle() {
    let mut tape = Tape::new();
    // K=2 classes, N=2 columns
    let x = tape.constant(t(&[2, 2], &[0.0, 1.0, 0.0, -1.0]));
    let y = tape.softmax_cross_entropy(x, &[0, 1]).unwrap();
    // column 0: ln 2; column 1: ln(e + e⁻¹) + 1 = ln(1 + e²)
    let expect = (2f64.ln() + (1.0 + 2f64.exp()).ln()) / 2.0;
    assert!((tape.value(y).data()[0] - expect).abs() < 1e-12);
}

#[test]
fn masked_l1_oracle() {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::from_fn(&[2, 2, 2], |i| i as f64));
    let y = tape.masked_l1(p, &[0.5, 0.0, 4.0, 8.0], &[1, 3]).unwrap();
    // |1-0.5| + |3-0| + |5-4| + |7-8|
    assert_eq!(tape.value(y).data()[0], 5.5 / 2.0);
}

#[test]
fn params_round_trip_and_validation() {
    let mut store = ParamStore::new();
    store.init_uniform("a.weight", &[2, 3], 0.5, 7);
    store.init_const("a.bias", &[3], 0.25);
    let json = store.to_json();
    let back = ParamStore::from_json(&json).unwrap();
    assert_eq!(back.get("a.weight"), store.get("a.weight"));
    assert_eq!(back.numel(), 9);

    let mut other = ParamStore::new();
    other.init_const("a.weight", &[3, 2], 0.0);
    other.init_const("a.bias", &[3], 0.0);
    assert!(matches!(other.load_json(&json), Err(TensorError::Param(_))));
    let mut missing = ParamStore::new();
    missing.init_const("a.weight", &[2, 3], 0.0);
    assert!(missing.load_json(&json).is_err());
}

#[test]
fn adamw_minimizes_quadratic() {
    let mut store = ParamStore::new();
    store.insert("x", t(&[2], &[3.0, -2.0]));
    let mut opt = AdamW::new(AdamWConfig { lr: 0.1, weight_decay: 0.0, ..AdamWConfig::default() });
    for _ in 0..300 {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = bound.get("x").unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        let grads = store.grads(&tape, &bound);
        opt.update(&mut store, &grads);
    }
    assert!(store.get("x").unwrap().data().iter().all(|v| v.abs() < 0.05));
    assert_eq!(opt.steps(), 300);
}
