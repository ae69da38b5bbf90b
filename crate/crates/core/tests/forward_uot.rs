mod common;

use common::{primal_oracle, random_instance, two_by_two, zoom_grid_min};
use ifyot::divergences::{catalogue, Divergence};
use ifyot::forward_uot::{
    dual_value, fixed_point_residual, primal_from_dual, primal_value, solve_sinkhorn, solve_sinkhorn_traced,
    DualPotentials, UotProblem,
};
use ifyot::measures::{rng, DiscreteMeasure};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

#[test]
fn oracle_matches_library_primal() {
    let prob = two_by_two(1, Divergence::Kl { tau: 1.0 }, Divergence::Hellinger { tau: 2.0 });
    let pi = DMatrix::from_row_slice(2, 2, &[0.2, 0.1, 0.05, 0.4]);
    assert!((primal_oracle(&prob, &pi) - primal_value(&prob, &pi)).abs() < 1e-12);
}

#[test]
fn brute_force_two_by_two() {
    let kinds = [
        Divergence::Kl { tau: 1.0 },
        Divergence::ChiSquared { tau: 0.5 },
        Divergence::Hellinger { tau: 2.0 },
        Divergence::JensenShannon { tau: 1.0 },
    ];
    for (k, d1) in kinds.iter().enumerate() {
        let d2 = kinds[(k + 1) % kinds.len()];
        let prob = two_by_two(10 + k as u64, *d1, d2);
        let pots = solve_sinkhorn(&prob, 1e-12, 100_000, None).unwrap();
        let want = zoom_grid_min(&prob);
        let got = dual_value(&prob, &pots);
        assert!((got - want).abs() < 1e-6, "{d1}/{d2}: {got} vs {want}");
    }
}

#[test]
fn residual_and_gap_across_pairs() {
    let cat = catalogue();
    for (k, d1) in cat.iter().enumerate() {
        for (l, d2) in cat.iter().enumerate() {
            let inst = random_instance((k * 10 + l) as u64, *d1, *d2, 6);
            let prob = inst.problem(&inst.theta_star);
            let pots = solve_sinkhorn(&prob, 1e-10, 1_000_000, None).unwrap();
            assert!(fixed_point_residual(&prob, &pots) <= 1e-9, "{d1}/{d2}");
            let plan = primal_from_dual(&prob, &pots).plan;
            let gap = primal_value(&prob, &plan) - dual_value(&prob, &pots);
            assert!(gap.abs() <= 1e-6, "{d1}/{d2}: gap {gap}");
        }
    }
}

#[test]
fn balanced_plan_has_prescribed_marginals() {
    let inst = random_instance(3, Divergence::Balanced, Divergence::Balanced, 6);
    let prob = inst.problem(&inst.theta_star);
    let pots = solve_sinkhorn(&prob, 1e-12, 100_000, None).unwrap();
    let c = primal_from_dual(&prob, &pots);
    assert!((c.first_marginal() - inst.alpha.weights()).amax() < 1e-10);
    assert!((c.second_marginal() - inst.beta.weights()).amax() < 1e-10);
    assert!(pots.f.dot(inst.alpha.weights()).abs() < 1e-10);
}

#[test]
fn warm_start_is_cheaper_and_agrees() {
    let inst = random_instance(4, Divergence::Kl { tau: 0.5 }, Divergence::ChiSquared { tau: 1.0 }, 6);
    let prob = inst.problem(&inst.theta_star);
    let cold = solve_sinkhorn_traced(&prob, 1e-11, 100_000, None).unwrap();
    let warm = solve_sinkhorn_traced(&prob, 1e-11, 100_000, Some(&cold.potentials)).unwrap();
    assert!(warm.residuals.len() < cold.residuals.len());
    assert!((&warm.potentials.f - &cold.potentials.f).amax() < 1e-9);
}

#[test]
fn rejects_infeasible_masses() {
    let pts = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
    let alpha = DiscreteMeasure::uniform(pts.clone(), 1.0).unwrap();
    let beta = DiscreteMeasure::uniform(pts, 2.0).unwrap();
    let cost = DMatrix::zeros(2, 2);
    let b = Divergence::Balanced;
    assert!(UotProblem::new(alpha.clone(), beta.clone(), cost.clone(), 1.0, b, b).is_err());
    assert!(UotProblem::new(alpha, beta, cost, 1.0, b, Divergence::Kl { tau: 1.0 }).is_ok());
}

#[test]
fn nonconvergence_is_reported() {
    let inst = random_instance(5, Divergence::Kl { tau: 1.0 }, Divergence::Kl { tau: 1.0 }, 6);
    let prob = inst.problem(&inst.theta_star);
    assert!(solve_sinkhorn(&prob, 1e-14, 2, None).is_err());
}

proptest! {
    #[test]
    fn weak_duality(seed in 0u64..1000, k in 0usize..7, l in 0usize..7) {
        let cat = catalogue();
        let inst = random_instance(seed, cat[k], cat[l], 5);
        let prob = inst.problem(&inst.theta_star);
        let mut r = rng(seed + 7);
        let pots = DualPotentials {
            f: DVector::from_fn(prob.n(), |_, _| rand::Rng::random_range(&mut r, -0.5..0.3)),
            g: DVector::from_fn(prob.m(), |_, _| rand::Rng::random_range(&mut r, -0.5..0.3)),
            gauge: ifyot::forward_uot::Gauge::None,
        };
        let opt = solve_sinkhorn(&prob, 1e-10, 1_000_000, None).unwrap();
        let plan = primal_from_dual(&prob, &opt).plan;
        let d = dual_value(&prob, &pots);
        let p = primal_value(&prob, &plan);
        prop_assert!(d <= p + 1e-7, "{} > {}", d, p);
    }
}
