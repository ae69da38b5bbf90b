mod common;

use common::{fd_grad, random_measure, rel_err};
use ifyot::cost_basis::{symmetric_quadratic_features, Feature};
use ifyot::ijko::{kl_expansion_probe, IjkoInstance, IjkoStarQuadratic};
use ifyot::measures::{rng, DiscreteMeasure};
use ifyot::solver::LbfgsOptions;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

fn features() -> Vec<Feature> {
    let mut f = symmetric_quadratic_features(2);
    f.push(Feature::XCoord { i: 0 });
    f
}

fn instance(seed: u64, r: f64) -> IjkoInstance {
    let mut g = rng(seed);
    let ak = random_measure(&mut g, 6, 2, 1.0);
    let ak1 = random_measure(&mut g, 5, 2, 1.0);
    IjkoInstance::new(ak, ak1, 0.5, 0.2, r, features()).unwrap()
}

fn theta(seed: u64) -> DVector<f64> {
    let mut g = rng(seed);
    DVector::from_fn(4, |_, _| g.random_range(-1.0..1.0))
}

fn tight() -> LbfgsOptions {
    LbfgsOptions {
        grad_tol: 1e-12,
        max_iter: 5000,
        ..Default::default()
    }
}

#[test]
fn semidual_gradients() {
    let inst = instance(1, 2.0);
    let th = theta(2);
    let f = DVector::from_fn(5, |i, _| 0.1 * i as f64 - 0.2);
    let (_, gt, gf) = inst.semidual(&th, &f).unwrap();
    let fdt = fd_grad(|t| inst.semidual(t, &f).unwrap().0, &th, 1e-6);
    let fdf = fd_grad(|x| inst.semidual(&th, x).unwrap().0, &f, 1e-6);
    assert!(rel_err(&gt, &fdt) < 1e-7);
    assert!(rel_err(&gf, &fdf) < 1e-7);
}

#[test]
fn one_point_value_is_the_kl_weight() {
    let pt = DMatrix::from_row_slice(2, 1, &[0.3, -0.7]);
    let m = DiscreteMeasure::uniform(pt, 1.0).unwrap();
    let inst = IjkoInstance::new(m.clone(), m, 1.0, 1.0, 3.0, features()).unwrap();
    for s in [0.5, 2.0, 7.0] {
        let (v, _, _) = inst.semidual_with_s(&theta(3), &DVector::zeros(1), s).unwrap();
        assert!((v - s).abs() < 1e-13);
    }
}

#[test]
fn semidual_minimum_tracks_the_iuot_reduction() {
    let inst = instance(4, 2.0);
    let mut loss = inst.fy_loss().unwrap().with_inner_tol(1e-13).with_max_inner_iter(1_000_000);
    let mut offsets = Vec::new();
    for k in 0..3 {
        let th = theta(10 + k);
        let (min_s, f, _) = inst.semidual_min(&th, None, &tight()).unwrap();
        let ev = loss.loss_and_grad(&th).unwrap();
        offsets.push(ev.kantorovich - min_s);
        let (_, gt, _) = inst.semidual(&th, &f).unwrap();
        assert!(rel_err(&gt, &ev.grad) < 1e-6, "{gt} vs {}", ev.grad);
    }
    assert!((offsets[0] - offsets[1]).abs() < 1e-9 && (offsets[1] - offsets[2]).abs() < 1e-9, "{offsets:?}");
}

#[test]
fn reduction_needs_positive_r_prime() {
    // ε = η/τ = 0.4
    let inst = instance(5, 0.3);
    assert!(inst.fy_loss().is_err());
    assert!(inst.semidual(&theta(1), &DVector::zeros(5)).is_err());
    assert!(instance(5, 0.5).fy_loss().is_ok());
    let (ak, ak1) = (inst.alpha_k().clone(), inst.alpha_k1().clone());
    assert!(IjkoInstance::new(ak.clone(), ak1.clone(), 0.5, 0.2, -1.0, features()).is_err());
    let heavy = ak.with_weights(ak.weights() * 2.0).unwrap();
    assert!(IjkoInstance::new(heavy, ak1, 0.5, 0.2, 1.0, features()).is_err());
}

#[test]
fn kl_expansion_against_direct_sum() {
    let q = DVector::from_vec(vec![0.1, 0.2, 0.3, 0.4]);
    let g = DVector::from_vec(vec![1.0, -0.5, 2.0, 0.3]);
    for t in [1e-1, 1e-2, 1e-3] {
        let (kl, pred) = kl_expansion_probe(&q, &g, t).unwrap();
        let w: Vec<f64> = (0..4).map(|i| q[i] * (-t * g[i]).exp()).collect();
        let z: f64 = w.iter().sum();
        let direct: f64 = (0..4).map(|i| w[i] / z * (w[i] / z / q[i]).ln()).sum();
        // the direct sum cancels to about 1e-16/KL relative accuracy
        assert!((kl - direct).abs() < 1e-7 * direct);
        let mean = q.dot(&g);
        let var: f64 = (0..4).map(|i| q[i] * (g[i] - mean).powi(2)).sum();
        assert!((pred - 0.5 * t * t * var).abs() < 1e-15);
        assert!((kl / pred - 1.0).abs() < 3.0 * t);
    }
    assert!(kl_expansion_probe(&q, &g, 0.0).is_err());
}

#[test]
fn ijko_star_quadratic_matches_direct_sum() {
    let inst = instance(6, 2.0);
    let plan = inst.snapshot_ot(1e-12, 1_000_000).unwrap().plan;
    let q = IjkoStarQuadratic::new(&inst, &plan).unwrap();
    let th = theta(7);
    let direct = |th: &DVector<f64>| {
        let mut v = 0.0;
        for i in 0..inst.alpha_k1().len() {
            let y = inst.alpha_k1().point(i);
            // V = θ₀ y₀² + 2θ₁ y₀y₁ + θ₂ y₁² + θ₃ y₀
            let grad = [2.0 * th[0] * y[0] + 2.0 * th[1] * y[1] + th[3], 2.0 * th[1] * y[0] + 2.0 * th[2] * y[1]];
            for j in 0..inst.alpha_k().len() {
                let x = inst.alpha_k().point(j);
                let r0 = grad[0] + (y[0] - x[0]) / inst.tau();
                let r1 = grad[1] + (y[1] - x[1]) / inst.tau();
                v += plan[(i, j)] * (r0 * r0 + r1 * r1);
            }
        }
        v
    };
    let (v, g) = q.value_grad(&th);
    assert!((v - direct(&th)).abs() < 1e-10 * v.abs());
    assert!(rel_err(&g, &fd_grad(direct, &th, 1e-6)) < 1e-7);
    let star = q.argmin().unwrap();
    assert!(q.value_grad(&star).1.amax() < 1e-9);
    let (v2, _) = inst.ijko_star_loss(&th, &plan).unwrap();
    assert_eq!(v, v2);
    assert!(IjkoStarQuadratic::new(&inst, &(plan * 2.0)).is_err());
}
