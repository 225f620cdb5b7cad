use proptest::prelude::*;

use semco::entmax::oracle::{oracle_entmax, sparsemax_exhaustive};
use semco::entmax::{entmax, fy_loss, fy_loss_grad, tsallis_entropy, entmax_jacobian_vector_product};
use semco::{Alpha, LogitVector, ProbabilityVector};

fn logits() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-8.0f64..8.0, 1..20)
}

fn alpha() -> impl Strategy<Value = Alpha> {
    prop_oneof![
        Just(Alpha::SOFTMAX),
        Just(Alpha::ENTMAX15),
        Just(Alpha::SPARSEMAX),
        (1.05f64..1.95).prop_map(|a| Alpha::new(a).unwrap()),
    ]
}

fn simplex() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, 2..12).prop_filter_map("positive mass", |v| {
        let s: f64 = v.iter().sum();
        (s > 1e-3).then(|| v.iter().map(|x| x / s).collect())
    })
}

proptest! {
    #[test]
    fn output_is_a_distribution(z in logits(), a in alpha()) {
        let p = entmax(&LogitVector::new(z).unwrap(), a);
        let sum: f64 = p.as_slice().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        prop_assert!(p.as_slice().iter().all(|&x| x >= 0.0));
        prop_assert!(p.support_size() >= 1);
    }

    #[test]
    fn agrees_with_bisection_oracle(z in logits(), a in alpha()) {
        let lv = LogitVector::new(z).unwrap();
        let fast = entmax(&lv, a);
        let slow = oracle_entmax(&lv, a);
        for (x, y) in fast.as_slice().iter().zip(slow.as_slice()) {
            prop_assert!((x - y).abs() < 1e-8, "{x} vs {y}");
        }
    }

    #[test]
    fn sparsemax_is_the_euclidean_projection(z in prop::collection::vec(-4.0f64..4.0, 1..10)) {
        let lv = LogitVector::new(z).unwrap();
        let p = entmax(&lv, Alpha::SPARSEMAX);
        let q = sparsemax_exhaustive(lv.as_slice());
        for (x, y) in p.as_slice().iter().zip(&q) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn shift_invariant_and_order_preserving(z in logits(), a in alpha(), c in -50.0f64..50.0) {
        let p = entmax(&LogitVector::new(z.clone()).unwrap(), a);
        let shifted = entmax(&LogitVector::new(z.iter().map(|v| v + c).collect()).unwrap(), a);
        for (x, y) in p.as_slice().iter().zip(shifted.as_slice()) {
            prop_assert!((x - y).abs() < 1e-8);
        }
        for i in 0..z.len() {
            for j in 0..z.len() {
                if z[i] > z[j] {
                    prop_assert!(p.as_slice()[i] >= p.as_slice()[j]);
                }
            }
        }
    }

    #[test]
    fn softmax_has_full_support(z in prop::collection::vec(-5.0f64..5.0, 1..20)) {
        let p = entmax(&LogitVector::new(z).unwrap(), Alpha::SOFTMAX);
        prop_assert!(p.as_slice().iter().all(|&x| x > 0.0));
    }

    #[test]
    fn fy_loss_is_nonnegative_and_zero_at_prediction(
        z in logits(), a in alpha(), tau in 0.1f64..3.0, t in simplex(),
    ) {
        let lv = LogitVector::new(z.clone()).unwrap();
        let scaled = LogitVector::new(z.iter().map(|v| v / tau).collect()).unwrap();
        let own = entmax(&scaled, a);
        prop_assert!(fy_loss(&lv, &own, a, tau).unwrap() < 1e-9);
        if t.len() == z.len() {
            let p = ProbabilityVector::new(t).unwrap();
            prop_assert!(fy_loss(&lv, &p, a, tau).unwrap() >= 0.0);
        }
    }

    #[test]
    fn fy_gradient_matches_central_differences(
        z in prop::collection::vec(-3.0f64..3.0, 2..10), a in alpha(), tau in 0.2f64..2.0, k in 0usize..10,
    ) {
        let k = k % z.len();
        let p = ProbabilityVector::one_hot(z.len(), k).unwrap();
        let g = fy_loss_grad(&LogitVector::new(z.clone()).unwrap(), &p, a, tau).unwrap();
        let h = 1e-6;
        let (mut diff, mut norm) = (0.0, 0.0);
        for i in 0..z.len() {
            let mut up = z.clone();
            up[i] += h;
            let mut down = z.clone();
            down[i] -= h;
            let fd = (fy_loss(&LogitVector::new(up).unwrap(), &p, a, tau).unwrap()
                - fy_loss(&LogitVector::new(down).unwrap(), &p, a, tau).unwrap())
                / (2.0 * h);
            diff += (fd - g[i]).powi(2);
            norm += g[i].powi(2);
        }
        prop_assert!(diff.sqrt() <= 1e-5 * norm.sqrt().max(1e-3));
    }

    #[test]
    fn jacobian_rows_sum_to_zero(z in logits(), a in alpha(), v in prop::collection::vec(-1.0f64..1.0, 20)) {
        let p = entmax(&LogitVector::new(z.clone()).unwrap(), a);
        let jv = entmax_jacobian_vector_product(&p, a, &v[..z.len()]).unwrap();
        let ones = vec![1.0; z.len()];
        let j1 = entmax_jacobian_vector_product(&p, a, &ones).unwrap();
        prop_assert!(j1.iter().all(|x| x.abs() < 1e-9));
        // Off-support coordinates get no gradient.
        for (i, &q) in p.as_slice().iter().enumerate() {
            if q == 0.0 {
                prop_assert_eq!(jv[i], 0.0);
            }
        }
    }

    #[test]
    fn entropy_is_maximal_at_uniform(n in 2usize..12, a in alpha(), t in simplex()) {
        let u = ProbabilityVector::uniform(n).unwrap();
        let hu = tsallis_entropy(&u, a);
        prop_assert!(hu > 0.0);
        if t.len() == n {
            let h = tsallis_entropy(&ProbabilityVector::new(t).unwrap(), a);
            prop_assert!(h <= hu + 1e-12);
        }
        prop_assert_eq!(tsallis_entropy(&ProbabilityVector::one_hot(n, 0).unwrap(), a), 0.0);
    }
}
