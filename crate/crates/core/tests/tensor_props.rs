use galr_core::{Graph, Tensor};
use proptest::prelude::*;

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn matrix(max: usize) -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1..max, 1..max).prop_flat_map(|(r, c)| {
        (
            Just(r),
            Just(c),
            prop::collection::vec(-10.0..10.0f64, r * c),
        )
    })
}

proptest! {
    #[test]
    fn identity_matmul_is_exact((r, c, data) in matrix(9)) {
        let mut g = Graph::<f64>::new();
        let a = g.constant(tensor(&[r, c], data));
        let right = g.constant(Tensor::eye(c));
        let left = g.constant(Tensor::eye(r));
        let ai = g.matmul(a, right).unwrap();
        let ia = g.matmul(left, a).unwrap();
        prop_assert_eq!(g.value(ai), g.value(a));
        prop_assert_eq!(g.value(ia), g.value(a));
    }

    #[test]
    fn softmax_normalizes_and_ignores_shifts(
        data in prop::collection::vec(-20.0..20.0f64, 24),
        shift in -50.0..50.0f64,
        axis in 0usize..3,
    ) {
        let shape = [2, 3, 4];
        let mut g = Graph::<f64>::new();
        let x = g.constant(tensor(&shape, data.clone()));
        let shifted = g.constant(tensor(&shape, data.iter().map(|v| v + shift).collect()));
        let y = g.softmax(x, axis).unwrap();
        let ys = g.softmax(shifted, axis).unwrap();
        let y = g.value(y).clone();
        prop_assert!(y.max_abs_diff(g.value(ys)) <= 1e-6);
        // sum along `axis` for every other index
        let strides = [12, 4, 1];
        for base in 0..24 {
            let idx = [base / 12, (base / 4) % 3, base % 4];
            if idx[axis] != 0 {
                continue;
            }
            let total: f64 = (0..shape[axis]).map(|i| y.data()[base + i * strides[axis]]).sum();
            prop_assert!((total - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn layer_norm_ignores_affine_input_changes(
        data in prop::collection::vec(-6.0..6.0f64, 16),
        a in 1.0..4.0f64,
        b in -5.0..5.0f64,
    ) {
        for row in data.chunks(8) {
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            // the epsilon term perturbs the result by about eps/var
            prop_assume!(var >= 4.0);
        }
        let mut g = Graph::<f64>::new();
        let gain = g.constant(tensor(&[8], (0..8).map(|i| 0.5 + i as f64 / 8.0).collect()));
        let bias = g.constant(tensor(&[8], (0..8).map(|i| i as f64 / 10.0 - 0.3).collect()));
        let x = g.constant(tensor(&[2, 8], data.clone()));
        let xt = g.constant(tensor(&[2, 8], data.iter().map(|v| a * v + b).collect()));
        let y = g.layer_norm(x, gain, bias).unwrap();
        let yt = g.layer_norm(xt, gain, bias).unwrap();
        prop_assert!(g.value(y).max_abs_diff(g.value(yt)) <= 1e-5);
    }

    #[test]
    fn trailing_broadcast_matches_elementwise_oracle(
        a in prop::collection::vec(-5.0..5.0f64, 24),
        b in prop::collection::vec(-5.0..5.0f64, 4),
    ) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(tensor(&[2, 3, 4], a.clone()));
        let y = g.constant(tensor(&[4], b.clone()));
        let s = g.add(x, y).unwrap();
        let p = g.mul(x, y).unwrap();
        for i in 0..24 {
            prop_assert_eq!(g.value(s).data()[i], a[i] + b[i % 4]);
            prop_assert_eq!(g.value(p).data()[i], a[i] * b[i % 4]);
        }
    }
}

#[test]
fn gradients_accumulate_over_shared_inputs() {
    // y = sum(x * x + x) → dy/dx = 2x + 1
    let mut g = Graph::<f64>::new();
    let x = g.param(tensor(&[3], vec![1.0, -2.0, 0.5]));
    let sq = g.mul(x, x).unwrap();
    let s = g.add(sq, x).unwrap();
    let y = g.sum(s).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[3.0, -3.0, 2.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.param(tensor(&[2], vec![1.0, 2.0]));
    let c = g.constant(tensor(&[2], vec![3.0, 4.0]));
    let p = g.mul(x, c).unwrap();
    let y = g.sum(p).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[3.0, 4.0]);
    assert!(g.grad(c).is_none());
}

#[test]
fn shape_errors_are_reported() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([2, 3]));
    assert!(matches!(
        g.matmul(a, b),
        Err(galr_core::Error::Dimension(_))
    ));
    let c = g.constant(Tensor::zeros([2]));
    assert!(g.add(a, c).is_err());
}
