mod oracles;

use depca::qpsolve::{solve_dependency_qp, ConstraintSet, QpStatus, FEASIBILITY_TOLERANCE};
use depca::scorematch::QuadraticForm;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_problem(d: usize, seed: u64) -> QuadraticForm {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = d * (d + 1) / 2;
    let r = DMatrix::from_fn(p, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let h = r.transpose() * &r / p as f64 + DMatrix::identity(p, p) * 0.5;
    let b = DVector::from_fn(p, |_, _| 2.0 * rng.sample::<f64, _>(StandardNormal));
    QuadraticForm { h, b }
}

#[test]
fn solver_matches_projected_gradient_oracle() {
    for seed in 0..20u64 {
        let d = 2 + (seed as usize % 5);
        let q = random_problem(d, seed);
        let sol = solve_dependency_qp(&q, d, 0.0).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        let (_, oracle) = oracles::projected_gradient_qp(&q.h, &q.b, d, 1_000_000);
        assert!(
            (sol.objective - oracle).abs() < 1e-8,
            "seed {seed}: {} vs {oracle}",
            sol.objective
        );
    }
}

#[test]
fn oracle_projection_is_feasible_and_idempotent() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let y = DVector::from_fn(10, |_, _| rng.sample::<f64, _>(StandardNormal));
    let x = oracles::project_feasible(&y, 4);
    assert!(ConstraintSet::new(4).violations(&x, 1e-12).is_empty());
    let again = oracles::project_feasible(&x, 4);
    assert!((&x - again).amax() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn solutions_feasible_with_small_kkt(seed in 0u64..10_000, d in 2usize..7, lambda in 0f64..2.0) {
        let q = random_problem(d, seed);
        let sol = solve_dependency_qp(&q, d, lambda).unwrap();
        prop_assert!(ConstraintSet::new(d).violations(&sol.m, FEASIBILITY_TOLERANCE).is_empty());
        prop_assert!(sol.kkt_residual <= 1e-6);
        for pair in sol.objective_trace.windows(2) {
            prop_assert!(pair[1] <= pair[0] + 1e-12 * (1.0 + pair[0].abs()));
        }
    }

    #[test]
    fn total_mass_shrinks_with_sparsity_weight(seed in 0u64..10_000, d in 2usize..6) {
        let q = random_problem(d, seed);
        let mut prev = f64::INFINITY;
        for lambda in [0.0, 0.25, 0.5, 1.0, 2.0] {
            let total = solve_dependency_qp(&q, d, lambda).unwrap().m.sum();
            prop_assert!(total <= prev + 1e-9);
            prev = total;
        }
    }
}
