use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ufo_core::adapter::{adapted_linear, composed_linear, delta_identity_check, deserialize, serialize};
use ufo_core::autodiff::{finite_diff_check, Tape};
use ufo_core::{
    compose, init_adapter_set, transfer, AdapterEntry, AdapterKind, Error, ModelConfig, ModelGraph, ScheduleKind,
    Tensor, UfoAdapterSet,
};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn entry(m: usize, n: usize, d: usize, seed: u64) -> AdapterEntry {
    let mut r = rng(seed);
    AdapterEntry {
        v_det: Tensor::randn(&[n, d], 1.0, &mut r),
        v_cor: Tensor::randn(&[m, d], 1.0, &mut r),
        beta: Tensor::randn(&[1], 1.0, &mut r).data()[0],
    }
}

fn tiny() -> ModelConfig {
    ModelConfig {
        frames: 2,
        height: 4,
        width: 4,
        channels: 1,
        patch: 2,
        dim: 8,
        depth: 1,
        num_conditions: 3,
        timesteps: 10,
        schedule: ScheduleKind::Cosine,
    }
}

/// A set with every entry randomised, as after training.
fn trained_like(model: &ModelGraph, d: usize, seed: u64, kind: AdapterKind) -> UfoAdapterSet {
    let mut set = init_adapter_set(model, d, seed, kind).unwrap();
    for (i, e) in set.entries.values_mut().enumerate() {
        let (m, n, d) = e.dims();
        *e = entry(m, n, d, seed.wrapping_add(i as u64 * 7919));
    }
    set.round_to_f32();
    set
}

/// Direct loops over `Wx + b + Σ αβ (v_detᵀx)·v_cor`.
fn brute_force(w: &Tensor, b: &Tensor, x: &[f64], terms: &[(f64, &AdapterEntry)]) -> Vec<f64> {
    let (m, n) = (w.shape()[0], w.shape()[1]);
    let mut y: Vec<f64> = (0..m)
        .map(|i| b.data()[i] + (0..n).map(|j| w.data()[i * n + j] * x[j]).sum::<f64>())
        .collect();
    for &(alpha, e) in terms {
        let d = e.v_cor.shape()[1];
        for k in 0..d {
            let det: f64 = (0..n).map(|j| e.v_det.data()[j * d + k] * x[j]).sum();
            for (i, yi) in y.iter_mut().enumerate() {
                *yi += alpha * e.beta * det * e.v_cor.data()[i * d + k];
            }
        }
    }
    y
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn dims() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (1usize..=6, 1usize..=6, 1usize..=4, 1usize..=3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zero_alpha_is_the_base_layer((m, n, d, rows) in dims(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let w = Tensor::randn(&[m, n], 1.0, &mut r);
        let b = Tensor::randn(&[m], 1.0, &mut r);
        let x = Tensor::randn(&[rows, n], 1.0, &mut r);
        let e = entry(m, n, d, seed ^ 1);
        let adapted = adapted_linear(&w, &b, &x, &e, 0.0).unwrap();
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x), tape.constant(w), tape.constant(b));
        let base = tape.linear(xv, wv, Some(bv)).unwrap();
        prop_assert!(adapted.bit_eq(tape.value(base)));
    }

    #[test]
    fn output_is_affine_in_alpha((m, n, d, rows) in dims(), a in -2.0f64..2.0, b2 in -2.0f64..2.0, seed in any::<u64>()) {
        let mut r = rng(seed);
        let w = Tensor::randn(&[m, n], 1.0, &mut r);
        let bias = Tensor::randn(&[m], 1.0, &mut r);
        let x = Tensor::randn(&[rows, n], 1.0, &mut r);
        let e = entry(m, n, d, seed ^ 2);
        let y = |al: f64| adapted_linear(&w, &bias, &x, &e, al).unwrap().into_data();
        let lhs: Vec<f64> = y(a).iter().zip(y(b2)).map(|(p, q)| p + q).collect();
        let rhs: Vec<f64> = y(0.0).iter().zip(y(a + b2)).map(|(p, q)| p + q).collect();
        prop_assert!(max_abs(&lhs, &rhs) <= 1e-12 * (1.0 + lhs.iter().fold(0.0f64, |s, v| s.max(v.abs()))));
        // half intensity moves half as far
        let (y0, yh, y1) = (y(0.0), y(0.5), y(1.0));
        for i in 0..y0.len() {
            prop_assert!(((yh[i] - y0[i]) - 0.5 * (y1[i] - y0[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn delta_decomposition_holds((m, n, d, rows) in dims(), alpha in 0.0f64..2.0, seed in any::<u64>()) {
        let mut r = rng(seed);
        let w = Tensor::randn(&[m, n], 1.0, &mut r);
        let xt = Tensor::randn(&[rows, n], 1.0, &mut r);
        let xtn = Tensor::randn(&[rows, n], 1.0, &mut r);
        let e = entry(m, n, d, seed ^ 3);
        prop_assert!(delta_identity_check(&xt, &xtn, &w, &e, alpha).unwrap() <= 1e-12);
        prop_assert_eq!(delta_identity_check(&xt, &xt, &w, &e, alpha).unwrap(), 0.0);
    }

    #[test]
    fn composition_is_additive_and_order_free((m, n, d, rows) in dims(), a1 in 0.0f64..2.0, a2 in 0.0f64..2.0, seed in any::<u64>()) {
        let mut r = rng(seed);
        let w = Tensor::randn(&[m, n], 1.0, &mut r);
        let b = Tensor::randn(&[m], 1.0, &mut r);
        let x = Tensor::randn(&[rows, n], 1.0, &mut r);
        let (e1, e2) = (entry(m, n, d, seed ^ 4), entry(m, n, 1 + d % 3, seed ^ 5));
        let fwd = composed_linear(&w, &b, &x, &[(a1, &e1), (a2, &e2)]).unwrap();
        let rev = composed_linear(&w, &b, &x, &[(a2, &e2), (a1, &e1)]).unwrap();
        prop_assert!(fwd.max_abs_diff(&rev) <= 1e-12);
        for (row, got) in x.data().chunks(n).zip(fwd.data().chunks(m)) {
            prop_assert!(max_abs(got, &brute_force(&w, &b, row, &[(a1, &e1), (a2, &e2)])) <= 1e-12);
        }
        // a set at zero intensity contributes nothing
        let with_zero = composed_linear(&w, &b, &x, &[(0.0, &e1), (a2, &e2)]).unwrap();
        let alone = composed_linear(&w, &b, &x, &[(a2, &e2)]).unwrap();
        prop_assert!(with_zero.bit_eq(&alone));
    }

    #[test]
    fn adapter_gradients_match_finite_differences((m, n, d, rows) in dims(), alpha in 0.1f64..1.5, seed in any::<u64>()) {
        let mut r = rng(seed);
        let w = Tensor::randn(&[m, n], 1.0, &mut r);
        let b = Tensor::randn(&[m], 1.0, &mut r);
        let x = Tensor::randn(&[rows, n], 1.0, &mut r);
        let weights = Tensor::randn(&[rows, m], 1.0, &mut r);
        let e = entry(m, n, d, seed ^ 6);
        // y·r summed, with the varied tensor substituted into the entry
        let loss = |tape: &mut Tape, v_det, v_cor, beta| -> ufo_core::Result<ufo_core::autodiff::Var> {
            let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
            let y = tape.linear(xv, wv, Some(bv))?;
            let det = tape.matmul(xv, v_det)?;
            let cor = tape.linear(det, v_cor, None)?;
            let cor = tape.mul_scalar(cor, beta)?;
            let cor = tape.scale(cor, alpha);
            let y = tape.add(y, cor)?;
            let rv = tape.constant(weights.clone());
            let p = tape.mul(y, rv)?;
            Ok(tape.mean(p))
        };
        // the tape expression must agree with the library's forward
        let mut tape = Tape::new();
        let (dv, cv, bv) = (tape.constant(e.v_det.clone()), tape.constant(e.v_cor.clone()), tape.constant(Tensor::scalar(e.beta)));
        let l = loss(&mut tape, dv, cv, bv).unwrap();
        let y = adapted_linear(&w, &b, &x, &e, alpha).unwrap();
        let direct: f64 = y.data().iter().zip(weights.data()).map(|(p, q)| p * q).sum::<f64>() / y.numel() as f64;
        prop_assert!((tape.value(l).item() - direct).abs() < 1e-12);

        let err_det = finite_diff_check(|t, v| {
            let (c, bb) = (t.constant(e.v_cor.clone()), t.constant(Tensor::scalar(e.beta)));
            loss(t, v, c, bb)
        }, &e.v_det, 1e-5).unwrap();
        let err_cor = finite_diff_check(|t, v| {
            let (dd, bb) = (t.constant(e.v_det.clone()), t.constant(Tensor::scalar(e.beta)));
            loss(t, dd, v, bb)
        }, &e.v_cor, 1e-5).unwrap();
        let err_beta = finite_diff_check(|t, v| {
            let (dd, c) = (t.constant(e.v_det.clone()), t.constant(e.v_cor.clone()));
            loss(t, dd, c, v)
        }, &Tensor::scalar(e.beta), 1e-5).unwrap();
        prop_assert!(err_det < 1e-5 && err_cor < 1e-5 && err_beta < 1e-5, "{err_det} {err_cor} {err_beta}");
    }

    #[test]
    fn serialization_round_trips_bit_exact(d in 1usize..=5, seed in any::<u64>(), alpha in 0.0f64..=1.0) {
        let model = ModelGraph::new(tiny(), seed).unwrap();
        let mut set = trained_like(&model, d, seed, AdapterKind::Stylization);
        set.recommended_alpha = alpha;
        let bytes = serialize(&set);
        let back = deserialize(&bytes).unwrap();
        prop_assert!(back.bit_eq(&set));
        prop_assert_eq!(&back, &set);
        prop_assert_eq!(serialize(&back), bytes);
    }

    #[test]
    fn model_forward_at_zero_alpha_is_bit_exact(seed in any::<u64>(), t in 1usize..=10, c in 0usize..3) {
        let model = ModelGraph::new(tiny(), seed).unwrap();
        let set = trained_like(&model, 3, seed ^ 9, AdapterKind::Consistency);
        let z = Tensor::randn(&[1, 2, 4, 4, 1], 1.0, &mut rng(seed ^ 10));
        let run = |adapters: &[(&UfoAdapterSet, f64)]| {
            let comp = compose(&model, adapters).unwrap();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, false);
            let ads = comp.bind(&mut tape);
            let (e, v) = model.forward(&mut tape, &bound, &ads, &z, &[t], &[c]).unwrap();
            (tape.value(e).clone(), tape.value(v).clone())
        };
        let (e0, v0) = run(&[]);
        let (e1, v1) = run(&[(&set, 0.0)]);
        prop_assert!(e0.bit_eq(&e1) && v0.bit_eq(&v1));
    }
}

#[test]
fn hand_evaluated_example() {
    let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let e = AdapterEntry {
        v_det: Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap(),
        v_cor: Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap(),
        beta: 1.0,
    };
    let x = Tensor::new(vec![1, 2], vec![3.0, 5.0]).unwrap();
    let y = adapted_linear(&w, &Tensor::zeros(&[2]), &x, &e, 1.0).unwrap();
    assert_eq!(y.data(), &[3.0, 8.0]);
    assert_eq!(
        delta_identity_check(&x, &Tensor::zeros(&[1, 2]), &w, &e, 0.0).unwrap(),
        0.0
    );
}

#[test]
fn two_sets_on_a_three_by_two_layer() {
    let mut r = rng(77);
    let w = Tensor::randn(&[3, 2], 1.0, &mut r);
    let b = Tensor::randn(&[3], 1.0, &mut r);
    let x = Tensor::randn(&[4, 2], 1.0, &mut r);
    let (e1, e2) = (entry(3, 2, 2, 1), entry(3, 2, 2, 2));
    let y = composed_linear(&w, &b, &x, &[(0.3, &e1), (1.0, &e2)]).unwrap();
    for (row, got) in x.data().chunks(2).zip(y.data().chunks(3)) {
        assert!(max_abs(got, &brute_force(&w, &b, row, &[(0.3, &e1), (1.0, &e2)])) <= 1e-12);
    }
}

#[test]
fn adapted_linear_passes_the_finite_difference_oracle() {
    let mut r = rng(5);
    let w = Tensor::randn(&[3, 4], 1.0, &mut r);
    let b = Tensor::randn(&[3], 1.0, &mut r);
    let e = entry(3, 4, 2, 6);
    let x = Tensor::randn(&[2, 4], 1.0, &mut r);
    let err = finite_diff_check(
        |t, xv| {
            let (wv, bv) = (t.constant(w.clone()), t.constant(b.clone()));
            let y = t.linear(xv, wv, Some(bv))?;
            let (dv, cv) = (t.constant(e.v_det.clone()), t.constant(e.v_cor.clone()));
            let det = t.matmul(xv, dv)?;
            let cor = t.linear(det, cv, None)?;
            let cor = t.scale(cor, 0.7 * e.beta);
            let y = t.add(y, cor)?;
            let s = t.square(y);
            Ok(t.sum(s))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn fresh_set_leaves_every_layer_unchanged() {
    let model = ModelGraph::new(tiny(), 1).unwrap();
    let set = init_adapter_set(&model, 4, 2, AdapterKind::Consistency).unwrap();
    let x = Tensor::randn(&[3, 8], 1.0, &mut rng(3));
    for alpha in [0.0, 0.1, 1.0, 7.0] {
        let with = compose(&model, &[(&set, alpha)]).unwrap();
        let without = compose(&model, &[]).unwrap();
        for name in ["blocks.0.temporal.q", "blocks.0.mlp.fc1"] {
            let a = with.layer_forward(name, &x).unwrap();
            let b = without.layer_forward(name, &x).unwrap();
            assert_eq!(a.max_abs_diff(&b), 0.0);
        }
    }
}

#[test]
fn transfer_to_identical_weights_is_bit_identical() {
    let source = ModelGraph::new(tiny(), 8).unwrap();
    let copy = ufo_core::checkpoint::deserialize_model(&ufo_core::checkpoint::serialize_model(&source)).unwrap();
    let set = trained_like(&source, 2, 4, AdapterKind::Consistency);
    let a = compose(&source, &[(&set, 0.4)]).unwrap();
    let b = transfer(&set, &copy, 0.4).unwrap();
    for name in set.entries.keys() {
        let n = source.layer(name).unwrap().shape().1;
        let xin = Tensor::randn(&[5, n], 1.0, &mut rng(4));
        assert!(a.layer_forward(name, &xin).unwrap().bit_eq(&b.layer_forward(name, &xin).unwrap()));
    }
    // independently initialised weights of the same spec attach too
    let other = ModelGraph::new(tiny(), 99).unwrap();
    assert!(transfer(&set, &other, 0.1).is_ok());
}

#[test]
fn mismatched_specs_are_transfer_errors() {
    let model = ModelGraph::new(tiny(), 0).unwrap();
    let set = init_adapter_set(&model, 2, 0, AdapterKind::Consistency).unwrap();
    let wider = ModelGraph::new(ModelConfig { dim: 10, ..tiny() }, 0).unwrap();
    let err = transfer(&set, &wider, 0.1).unwrap_err();
    assert!(matches!(err, Error::Transfer(ref m) if m.contains("blocks.0.")), "{err}");
    let deeper = ModelGraph::new(ModelConfig { depth: 2, ..tiny() }, 0).unwrap();
    assert!(matches!(transfer(&set, &deeper, 0.1), Err(Error::Transfer(_))));
    assert!(matches!(compose(&model, &[(&set, -0.1)]), Err(Error::Contract(_))));
}

#[test]
fn corrupted_length_field_returns_no_set() {
    let model = ModelGraph::new(tiny(), 0).unwrap();
    let set = trained_like(&model, 2, 1, AdapterKind::Consistency);
    let mut bytes = serialize(&set);
    bytes[5..9].copy_from_slice(&u32::MAX.to_le_bytes());
    assert!(matches!(deserialize(&bytes), Err(Error::Format { .. })));
    let header_len = u32::from_le_bytes(serialize(&set)[5..9].try_into().unwrap()) as usize;
    assert_eq!(serialize(&set).len(), 9 + header_len + 4 * set.parameter_count());
}
