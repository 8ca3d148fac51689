mod common;

use learnpanel::likelihood::LikelihoodMatrix;
use learnpanel::npmle::{column_ratios, kkt_residual, solve_weights};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn two_point_weight_matches_bisection() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..30 {
        let n = rng.random_range(5..60);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        let raw: Vec<f64> = a.iter().zip(&b).flat_map(|(x, y)| [x.ln(), y.ln()]).collect();
        let s = solve_weights(&LikelihoodMatrix::from_raw(n, 2, raw).unwrap()).unwrap();
        let w = common::two_point_weight(&a, &b);
        assert!((s.weights[0] - w).abs() < 1e-8, "{} vs {w}", s.weights[0]);
        assert!(s.certified);
    }
}

#[test]
fn identical_columns_share_mass() {
    let raw = vec![-1.0, -1.0, -3.0, -3.0, -0.5, -0.5];
    let s = solve_weights(&LikelihoodMatrix::from_raw(3, 2, raw).unwrap()).unwrap();
    assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(s.kkt_residual < 1e-8);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn solution_satisfies_kkt(n in 1usize..40, q in 1usize..9, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..n * q).map(|_| rng.random_range(-30.0..0.0)).collect();
        let l = LikelihoodMatrix::from_raw(n, q, raw).unwrap();
        let s = solve_weights(&l).unwrap();
        prop_assert!(s.certified);
        prop_assert!(s.weights.iter().all(|w| *w >= 0.0));
        prop_assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        let ratios = column_ratios(&l, &s.weights);
        for (r, w) in ratios.iter().zip(&s.weights) {
            prop_assert!(*r <= 1.0 + 1e-7);
            if *w > 1e-6 {
                prop_assert!((r - 1.0).abs() < 1e-6);
            }
        }
        prop_assert!(kkt_residual(&l, &s.weights) <= 1e-8);
    }
}
