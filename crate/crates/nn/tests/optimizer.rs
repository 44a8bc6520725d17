use tpdm_nn::graph::Graph;
use tpdm_nn::{Adam, NnError, ParamStore, Tensor};

fn scalar_store(value: f64) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    store.add("w", Tensor::scalar(value));
    store
}

fn set_grad(store: &mut ParamStore<f64>, g: f64) {
    for p in store.iter_mut() {
        p.grad.fill(g);
    }
}

#[test]
fn zero_gradient_leaves_parameter_unchanged() {
    let mut store = scalar_store(0.75);
    Adam::new(1e-3).step(&mut store);
    let p = store.iter().next().unwrap();
    assert_eq!(p.value.data()[0], 0.75);
    assert_eq!(p.step_count, 1);
}

#[test]
fn first_step_moves_by_learning_rate_against_gradient_sign() {
    for g in [3.0, -0.02] {
        let mut store = scalar_store(1.0);
        set_grad(&mut store, g);
        Adam::new(0.01).step(&mut store);
        let w = store.iter().next().unwrap().value.data()[0];
        let expected = 1.0 - 0.01 * f64::signum(g);
        assert!((w - expected).abs() < 1e-8, "g={g}: {w} vs {expected}");
    }
}

#[test]
fn two_steps_follow_scalar_recurrence() {
    let (lr, g, w0) = (0.05, 0.4, 2.0);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    // Hand-unrolled recurrence.
    let m1 = (1.0 - b1) * g;
    let v1 = (1.0 - b2) * g * g;
    let w1 = w0 - lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
    let m2 = b1 * m1 + (1.0 - b1) * g;
    let v2 = b2 * v1 + (1.0 - b2) * g * g;
    let w2 = w1 - lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);

    let mut store = scalar_store(w0);
    let adam = Adam::new(lr);
    for _ in 0..2 {
        set_grad(&mut store, g);
        adam.step(&mut store);
    }
    let p = store.iter().next().unwrap();
    assert!((p.value.data()[0] - w2).abs() < 1e-15);
    assert_eq!(p.step_count, 2);
}

#[test]
fn backward_requires_recorded_scalar_graph() {
    let store = scalar_store(1.0);
    let mut other = Graph::new(&store);
    let v = other.input(Tensor::zeros(&[2]));
    let empty = Graph::new(&store);
    assert_eq!(empty.backward(v).unwrap_err(), NnError::GraphNotRecorded);
    assert!(matches!(other.backward(v), Err(NnError::NonScalarOutput(_))));
}

#[test]
fn finite_checks_flag_nan() {
    let store = scalar_store(1.0);
    let mut g = Graph::new(&store).with_finite_checks(true);
    let x = g.input(Tensor::scalar(f64::INFINITY));
    assert_eq!(g.scale(x, 0.0).unwrap_err(), NnError::NonFinite("scale"));
}

#[test]
fn forward_is_bit_deterministic() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f32>::new();
    let conv = tpdm_nn::Conv1d::same(&mut store, "c", 4, 8, 3, &mut rng);
    let attn = tpdm_nn::SelfAttention::new(&mut store, "a", 8, 2, &mut rng).unwrap();
    let x = Tensor::from_fn(&[4, 64], |i| (i as f32 * 0.1).sin());
    let run = || {
        let mut g = Graph::new(&store);
        let xv = g.input(x.clone());
        let h = conv.forward(&mut g, xv).unwrap();
        let y = attn.forward(&mut g, h).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run().data(), run().data());
}
