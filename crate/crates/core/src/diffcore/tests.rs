use super::*;
use approx::assert_abs_diff_eq;
use proptest::prelude::*;

fn row(v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(&[1, v.len()], v).unwrap()
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::<f64>::new();
    let x = g.input(row(&[0.0; 4])).unwrap();
    let y = g.softmax(x).unwrap();
    for &p in g.value(y).data() {
        assert_abs_diff_eq!(p, 0.25, epsilon = 1e-15);
    }
}

#[test]
fn layer_norm_of_constant_is_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.input(row(&[3.5; 16])).unwrap();
    let gain = g.param(Tensor::full(&[1, 16], 1.0)).unwrap();
    let bias = g.param(Tensor::zeros(&[1, 16])).unwrap();
    let y = g.layer_norm(x, gain, bias).unwrap();
    assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-6));
}

#[test]
fn matmul_matches_hand_product() {
    // [[1,2,3],[4,5,6]] x [[1,0],[0,1],[1,1]] = [[4,5],[10,11]]
    let mut g = Graph::<f64>::new();
    let a = g.input(Tensor::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap()).unwrap();
    let b = g.input(Tensor::from_f64(&[3, 2], &[1., 0., 0., 1., 1., 1.]).unwrap()).unwrap();
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[4., 5., 10., 11.]);
    assert_eq!(g.value(c).shape(), &[2, 2]);
}

#[test]
fn square_has_gradient_six_at_three() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(3.0)).unwrap();
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
}

#[test]
fn mean_gradient_is_one_over_n() {
    let mut g = Graph::<f64>::new();
    let x = g.param(row(&[1.0, -2.0, 5.0, 0.5, 9.0])).unwrap();
    let m = g.mean(x, 1).unwrap();
    let grads = g.backward(m).unwrap();
    for &d in grads.get(x).unwrap().data() {
        assert_abs_diff_eq!(d, 0.2, epsilon = 1e-15);
    }
}

#[test]
fn non_scalar_backward_is_a_contract_error() {
    let mut g = Graph::<f64>::new();
    let x = g.param(row(&[1.0, 2.0])).unwrap();
    assert!(matches!(g.backward(x), Err(DiffError::Contract(_))));
}

#[test]
fn shape_errors_name_the_op() {
    let mut g = Graph::<f32>::new();
    let a = g.input(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.input(Tensor::zeros(&[2, 3])).unwrap();
    let err = g.matmul(a, b).unwrap_err();
    assert!(err.to_string().starts_with("matmul"), "{err}");
}

#[test]
fn non_finite_values_are_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.input(row(&[1000.0])).unwrap();
    assert!(matches!(g.exp(x), Err(DiffError::NonFinite { op: "exp" })));
}

#[test]
fn inputs_do_not_receive_gradients() {
    let mut g = Graph::<f64>::new();
    let x = g.input(row(&[1.0, 2.0])).unwrap();
    let w = g.param(row(&[3.0, 4.0])).unwrap();
    let y = g.mul(x, w).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(x).is_none());
    assert_eq!(grads.get(w).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn dropout_is_identity_in_eval_mode() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::full(&[2, 2], 1.0)).unwrap();
    let y = g.dropout(x, 0.5).unwrap();
    assert_eq!(x, y);
}

#[test]
fn dropout_preserves_expectation() {
    let mut g = Graph::<f64>::training(11);
    let x = g.input(Tensor::full(&[100, 100], 1.0)).unwrap();
    let y = g.dropout(x, 0.1).unwrap();
    let mean = g.value(y).sum() / 10_000.0;
    assert!((mean - 1.0).abs() < 0.02, "{mean}");
}

#[test]
fn training_graphs_are_deterministic_per_seed() {
    let run = || {
        let mut g = Graph::<f32>::training(5);
        let x = g.param(Tensor::full(&[8, 8], 0.5)).unwrap();
        let y = g.attention(x, x, x, 2, 2, 0.3).unwrap();
        let z = g.dropout(y, 0.3).unwrap();
        let s = g.sum(z).unwrap();
        let grads = g.backward(s).unwrap();
        (g.value(s).data()[0].to_bits(), grads.get(x).unwrap().clone())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(v in prop::collection::vec(-30.0f64..30.0, 1..12)) {
        let mut g = Graph::<f64>::new();
        let x = g.input(row(&v)).unwrap();
        let y = g.softmax(x).unwrap();
        let p = g.value(y).data();
        prop_assert!(p.iter().all(|&q| q > 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_is_shift_invariant(v in prop::collection::vec(-10.0f64..10.0, 1..12), c in -50.0f64..50.0) {
        let mut g = Graph::<f64>::new();
        let x = g.input(row(&v)).unwrap();
        let shifted: Vec<f64> = v.iter().map(|a| a + c).collect();
        let xs = g.input(row(&shifted)).unwrap();
        let y = g.softmax(x).unwrap();
        let ys = g.softmax(xs).unwrap();
        prop_assert!(g.value(y).max_abs_diff(g.value(ys)) < 1e-9);
    }
}
