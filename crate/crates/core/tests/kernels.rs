use attnlab::linalg::{layer_norm, relu_bias, softmax_causal_columns};
use attnlab::{Mat, Rng};
use proptest::prelude::*;
use rand::RngCore;

fn mat_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Mat> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Mat::from_vec(rows, cols, d).unwrap())
}

fn triple() -> impl Strategy<Value = (Mat, Mat, Mat)> {
    (1usize..6, 1usize..6, 1usize..6, 1usize..6)
        .prop_flat_map(|(a, b, c, d)| (mat_strategy(a, b), mat_strategy(b, c), mat_strategy(c, d)))
}

proptest! {
    #[test]
    fn matmul_is_associative((a, b, c) in triple()) {
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        let scale = left.max_abs().max(1.0);
        prop_assert!(left.max_abs_diff(&right) / scale < 1e-9);
    }

    #[test]
    fn causal_softmax_is_column_stochastic(s in (1usize..8).prop_flat_map(|m| mat_strategy(m, m))) {
        let scaled = s.scale(10.0).unwrap();
        let w = softmax_causal_columns(&scaled).unwrap();
        for i in 0..w.cols() {
            let col = w.column(i);
            prop_assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (j, x) in col.iter().enumerate() {
                if j > i {
                    prop_assert_eq!(*x, 0.0);
                } else {
                    prop_assert!(*x >= 0.0);
                }
            }
        }
    }

    #[test]
    fn relu_without_bias_is_idempotent_on_nonnegative(d in prop::collection::vec(0.0f64..5.0, 12)) {
        let m = Mat::from_vec(3, 4, d).unwrap();
        let once = relu_bias(&m, &[0.0; 3]).unwrap();
        prop_assert_eq!(&once, &m);
        prop_assert_eq!(relu_bias(&once, &[0.0; 3]).unwrap(), once);
    }

    #[test]
    fn layer_norm_standardises(v in prop::collection::vec(-10.0f64..10.0, 2..20)) {
        let spread = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - v.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-3);
        let out = layer_norm(&v, 1e-12, None).unwrap();
        let n = out.len() as f64;
        let mean = out.iter().sum::<f64>() / n;
        let var = out.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn hundred_random_softmax_matrices() {
    let mut rng = Rng::new(5);
    for _ in 0..100 {
        let m = 1 + rng.below(9);
        let s = Mat::from_fn(m, m, |_, _| 5.0 * rng.normal()).unwrap();
        let w = softmax_causal_columns(&s).unwrap();
        for i in 0..m {
            assert!((w.column(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for j in i + 1..m {
                assert_eq!(w[(j, i)], 0.0);
            }
        }
    }
}

#[test]
fn seed_42_stream_is_reproducible() {
    let mut a = Rng::new(42);
    let mut b = Rng::new(42);
    let xs: Vec<u64> = (0..10_000).map(|_| a.next_u64()).collect();
    let ys: Vec<u64> = (0..10_000).map(|_| b.next_u64()).collect();
    assert_eq!(xs, ys);
}

#[test]
fn softmax_saturates_on_a_large_score() {
    let mut s = Mat::zeros(4, 4);
    s[(1, 2)] = 30.0;
    let w = softmax_causal_columns(&s).unwrap();
    assert!((w[(1, 2)] - 1.0).abs() < 1e-6);
}
