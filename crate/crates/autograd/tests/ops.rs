use him_autograd::{AutogradError, ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mat(tape: &mut Tape<f64>, rows: usize, cols: usize, data: &[f64]) -> him_autograd::Var {
    tape.constant(Tensor::matrix(rows, cols, data.to_vec()).unwrap())
        .unwrap()
}

#[test]
fn matmul_hand_example() {
    let mut tape = Tape::new();
    let a = mat(&mut tape, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
    let b = mat(&mut tape, 2, 1, &[1.0, 1.0]);
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.shape(c), &[2, 1]);
    assert_eq!(tape.data(c), &[3.0, 7.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut naive = vec![0.0; 15];
    for i in 0..5 {
        for j in 0..3 {
            for k in 0..4 {
                naive[i * 3 + j] += a[i * 4 + k] * b[k * 3 + j];
            }
        }
    }
    let mut tape = Tape::new();
    let av = mat(&mut tape, 5, 4, &a);
    let bv = mat(&mut tape, 4, 3, &b);
    let c = tape.matmul(av, bv).unwrap();
    for (x, y) in tape.data(c).iter().zip(&naive) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn shape_mismatch_names_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = mat(&mut tape, 2, 3, &[0.0; 6]);
    let b = mat(&mut tape, 2, 3, &[0.0; 6]);
    match tape.matmul(a, b) {
        Err(AutogradError::ShapeMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn sum_pool_all_masked_is_zero() {
    let mut tape = Tape::new();
    let m = mat(&mut tape, 2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let p = tape.sum_pool(m, &[false, false]).unwrap();
    assert_eq!(tape.data(p), &[0.0, 0.0, 0.0]);
    let q = tape.sum_pool(m, &[true, false]).unwrap();
    assert_eq!(tape.data(q), &[1.0, 2.0, 3.0]);
}

#[test]
fn softmax_symmetric_and_stable() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant_vec(vec![0.0, 0.0]).unwrap();
    let y = tape.softmax(x, None).unwrap();
    assert_eq!(tape.data(y), &[0.5, 0.5]);

    let x = tape.constant_vec(vec![1000.0, 0.0]).unwrap();
    let y = tape.softmax(x, None).unwrap();
    assert!((tape.data(y)[0] - 1.0).abs() < 1e-15);
    assert!(tape.data(y)[1] < 1e-300);
}

#[test]
fn softmax_masked_entries_are_zero() {
    let mut tape = Tape::new();
    let x = tape.constant_vec(vec![3.0, -1.0, 2.0]).unwrap();
    let y = tape.softmax(x, Some(&[true, false, true])).unwrap();
    assert_eq!(tape.data(y)[1], 0.0);
    let s: f64 = tape.data(y).iter().sum();
    assert!((s - 1.0).abs() < 1e-12);
    assert!(matches!(
        tape.softmax(x, Some(&[false, false, false])),
        Err(AutogradError::Invalid { .. })
    ));
}

/// exp(x_i) / sum exp(x_j) with compensated summation and no max shift.
fn softmax_oracle(x: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = x.iter().map(|v| v.exp()).collect();
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &v in &e {
        let y = v - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    e.iter().map(|v| v / sum).collect()
}

#[test]
fn softmax_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let mut tape = Tape::new();
        let v = tape.constant_vec(x.clone()).unwrap();
        let y = tape.softmax(v, None).unwrap();
        for (a, b) in tape.data(y).iter().zip(softmax_oracle(&x)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn distance_examples() {
    let mut tape = Tape::new();
    let a = tape.constant_vec(vec![0.0, 0.0]).unwrap();
    let b = tape.constant_vec(vec![3.0, 4.0]).unwrap();
    let d = tape.distance(a, b).unwrap();
    assert_eq!(tape.scalar(d), 5.0);
    let z = tape.distance(b, b).unwrap();
    assert_eq!(tape.scalar(z), 0.0);
    let c = tape.constant_vec(vec![1.0]).unwrap();
    assert!(tape.distance(a, c).is_err());
}

#[test]
fn distance_gradient_is_finite_at_coincidence() {
    let mut tape = Tape::<f64>::new();
    let a = tape.variable(Tensor::vector(vec![1.0, 2.0])).unwrap();
    let b = tape.constant_vec(vec![1.0, 2.0]).unwrap();
    let d = tape.distance(a, b).unwrap();
    tape.backward(d).unwrap();
    assert!(tape.grad(a).unwrap().iter().all(|g| g.is_finite()));
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut tape = Tape::new();
    let x = tape.constant_vec(vec![1e308]).unwrap();
    assert_eq!(
        tape.scale(x, 10.0),
        Err(AutogradError::NonFinite { op: "affine" })
    );
}

#[test]
fn backward_linear_and_independent_cases() {
    let mut store = ParamStore::<f64>::new();
    let w = store
        .insert("w", Tensor::vector(vec![0.3, -2.0, 5.0]))
        .unwrap();
    let u = store.insert("u", Tensor::vector(vec![1.0])).unwrap();
    let mut tape = Tape::new();
    let wv = tape.param(&store, w);
    let _ = tape.param(&store, u);
    let loss = tape.sum(wv).unwrap();
    tape.backward(loss).unwrap();
    store.zero_grad();
    store.accumulate(&tape).unwrap();
    assert_eq!(store.grad(w), &[1.0, 1.0, 1.0]);
    assert_eq!(store.grad(u), &[0.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let v = tape.variable(Tensor::vector(vec![1.0, 2.0])).unwrap();
    assert_eq!(tape.backward(v), Err(AutogradError::NonScalarLoss(vec![2])));
}

#[test]
fn gru_zero_weights_zero_state() {
    use him_autograd::nn::GruCell;
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cell = GruCell::new(&mut store, "gru", 3, 2, &mut rng).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        store
            .value_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }
    let mut tape = Tape::new();
    let x = tape.zeros(vec![3]).unwrap();
    let h = tape.zeros(vec![2]).unwrap();
    let h1 = cell.step(&mut tape, &store, x, h).unwrap();
    assert_eq!(tape.data(h1), &[0.0, 0.0]);
}

#[test]
fn gru_hand_evaluated_step() {
    // One unit, input width one, hand-set weights.
    use him_autograd::nn::GruCell;
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cell = GruCell::new(&mut store, "g", 1, 1, &mut rng).unwrap();
    let set = |store: &mut ParamStore<f64>, name: &str, v: f64| {
        let id = store.id(name).unwrap();
        store.value_mut(id).data_mut()[0] = v;
    };
    for (n, v) in [
        ("g.w_z", 0.5),
        ("g.u_z", -0.25),
        ("g.b_z", 0.1),
        ("g.w_r", 1.5),
        ("g.u_r", 0.75),
        ("g.b_r", -0.2),
        ("g.w_h", -1.0),
        ("g.u_h", 2.0),
        ("g.b_h", 0.3),
    ] {
        set(&mut store, n, v);
    }
    let (x, h) = (0.8f64, -0.4f64);
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let z = sig(0.5 * x - 0.25 * h + 0.1);
    let r = sig(1.5 * x + 0.75 * h - 0.2);
    let cand = (-1.0 * x + 2.0 * (r * h) + 0.3).tanh();
    let expected = (1.0 - z) * h + z * cand;

    let mut tape = Tape::new();
    let xv = tape.constant_vec(vec![x]).unwrap();
    let hv = tape.constant_vec(vec![h]).unwrap();
    let out = cell.step(&mut tape, &store, xv, hv).unwrap();
    assert_eq!(tape.shape(out), &[1]);
    assert!((tape.data(out)[0] - expected).abs() < 1e-15);
}

#[test]
fn f32_tape_runs_the_same_ops() {
    let mut tape = Tape::<f32>::new();
    let a = tape
        .constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap())
        .unwrap();
    let x = tape.variable(Tensor::vector(vec![0.5, -0.5])).unwrap();
    let y = tape.matvec(a, x).unwrap();
    let s = tape.softmax(y, None).unwrap();
    let l = tape.dot(s, y).unwrap();
    tape.backward(l).unwrap();
    let sum: f32 = tape.data(s).iter().sum();
    assert!((sum - 1.0).abs() < 1e-6);
    assert_eq!(tape.grad(x).unwrap().len(), 2);
}

#[test]
fn softmax_groups_fully_masked_run_is_zero() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant_vec(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = tape
        .softmax_groups(x, 2, &[false, false, true, true])
        .unwrap();
    let d = tape.data(y);
    assert_eq!(&d[..2], &[0.0, 0.0]);
    assert!((d[2] + d[3] - 1.0).abs() < 1e-15);
}

#[test]
fn group_sum_and_repeat_rows_shapes() {
    let mut tape = Tape::<f64>::new();
    let m = mat(&mut tape, 4, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    let g = tape.group_sum(m, 2).unwrap();
    assert_eq!(tape.data(g), &[4.0, 6.0, 12.0, 14.0]);
    let r = tape.repeat_rows(g, 2).unwrap();
    assert_eq!(tape.shape(r), &[4, 2]);
    assert_eq!(&tape.data(r)[..4], &[4.0, 6.0, 4.0, 6.0]);
    assert!(tape.group_sum(m, 3).is_err());
    let h = tape.hconcat(&[m, m]).unwrap();
    assert_eq!(tape.shape(h), &[4, 4]);
    assert_eq!(&tape.data(h)[..4], &[1.0, 2.0, 1.0, 2.0]);
}
