use farsight::attention::{causal_attention, farsight_attention, rope_rotate, AttentionInputs, RopeParams};
use farsight::masks::RegisterSchedule;
use farsight::numerics::{dot, log_sum_exp, matmul, softmax_row, Matrix};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
}

fn inputs() -> impl Strategy<Value = AttentionInputs> {
    (1usize..12, 1usize..6).prop_flat_map(|(n, d)| {
        (matrix(n, d), matrix(n, d), matrix(n, d)).prop_map(|(q, k, v)| AttentionInputs::new(q, k, v).unwrap())
    })
}

proptest! {
    #[test]
    fn softmax_is_shift_invariant(xs in prop::collection::vec(-50.0f64..50.0, 1..20), c in -100.0f64..100.0) {
        let a = softmax_row(&xs).unwrap();
        let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
        let b = softmax_row(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_bounds(xs in prop::collection::vec(-50.0f64..50.0, 1..20)) {
        let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let l = log_sum_exp(&xs);
        prop_assert!(l >= m && l <= m + (xs.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn matmul_is_associative((a, b, c) in (1usize..5, 1usize..5, 1usize..5, 1usize..5)
        .prop_flat_map(|(r, s, t, u)| (matrix(r, s), matrix(s, t), matrix(t, u)))) {
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right).unwrap() < 1e-10);
    }

    #[test]
    fn surviving_rows_are_scaled_causal_rows(inp in inputs(), sigma in 0.01f64..5.0) {
        let f = farsight_attention(&inp, &RegisterSchedule::with_sigma(sigma).unwrap()).unwrap();
        let c = causal_attention(&inp).unwrap();
        let n = inp.len();
        for i in 0..n {
            for j in 0..=i {
                prop_assert!((f.probs[(i, j)] - f.beta[i] * c.probs[(i, j)]).abs() < 1e-12);
            }
            prop_assert!(f.probs.row(i)[i + 1..].iter().all(|&p| p == 0.0));
            prop_assert!((f.probs.row(i).iter().sum::<f64>() - f.beta[i]).abs() < 1e-12);
            prop_assert!(f.beta[i] > 0.0 && f.beta[i] <= 1.0 + 1e-12);
        }
        prop_assert!((f.beta[n - 1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn larger_sigma_keeps_more_mass(inp in inputs(), s in 0.01f64..2.0, extra in 0.01f64..2.0) {
        let lo = farsight_attention(&inp, &RegisterSchedule::with_sigma(s).unwrap()).unwrap();
        let hi = farsight_attention(&inp, &RegisterSchedule::with_sigma(s + extra).unwrap()).unwrap();
        for (a, b) in lo.beta.iter().zip(&hi.beta) {
            prop_assert!(b + 1e-15 >= *a);
        }
    }

    #[test]
    fn rope_preserves_norm(x in prop::collection::vec(-5.0f64..5.0, 8), pos in 0usize..10_000) {
        let r = rope_rotate(&x, pos, &RopeParams::new(8).unwrap()).unwrap();
        prop_assert!((dot(&r, &r) - dot(&x, &x)).abs() < 1e-10);
    }
}
