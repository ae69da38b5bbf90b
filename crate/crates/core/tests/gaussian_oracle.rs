use ifyot::gaussian_oracle::{
    fit_quadratic, gauss_hermite_measure, gaussian_at, isserlis_matrix, limiting_losses, moment_matched_sample, trajectory,
    QuadraticKantorovich, QuadraticPotentialTruth,
};
use ifyot::measures::{empirical_from_samples, sample_gaussian, GaussianSpec};
use nalgebra::{DMatrix, DVector};

fn truth() -> QuadraticPotentialTruth {
    let theta = DMatrix::from_row_slice(3, 3, &[1.0, 0.3, 0.0, 0.3, 0.5, -0.2, 0.0, -0.2, 0.8]);
    let m0 = DVector::from_vec(vec![1.0, -2.0, 0.5]);
    let s0 = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.1, 0.2, 0.5, 0.0, 0.1, 0.0, 0.7]);
    QuadraticPotentialTruth::new(theta, m0, s0).unwrap()
}

/// RK4 on `m' = −2θm`, `Σ' = −2(θΣ + Σθ)`.
fn moment_ode(t: &QuadraticPotentialTruth, horizon: f64, steps: usize) -> (DVector<f64>, DMatrix<f64>) {
    let h = horizon / steps as f64;
    let th = &t.theta_star;
    let fm = |m: &DVector<f64>| -(th * m) * 2.0;
    let fs = |s: &DMatrix<f64>| -(th * s + s * th) * 2.0;
    let (mut m, mut s) = (t.m0.clone(), t.sigma0.clone());
    for _ in 0..steps {
        let k1 = fm(&m);
        let k2 = fm(&(&m + &k1 * (h / 2.0)));
        let k3 = fm(&(&m + &k2 * (h / 2.0)));
        let k4 = fm(&(&m + &k3 * h));
        m += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        let l1 = fs(&s);
        let l2 = fs(&(&s + &l1 * (h / 2.0)));
        let l3 = fs(&(&s + &l2 * (h / 2.0)));
        let l4 = fs(&(&s + &l3 * h));
        s += (l1 + l2 * 2.0 + l3 * 2.0 + l4) * (h / 6.0);
    }
    (m, s)
}

#[test]
fn closed_form_flow_matches_ode() {
    let t = truth();
    for horizon in [0.1, 0.5, 1.3] {
        let spec = gaussian_at(&t, horizon).unwrap();
        let (m, s) = moment_ode(&t, horizon, 4000);
        assert!((&spec.mean - m).amax() < 1e-10);
        assert!((&spec.covariance - s).amax() < 1e-10);
    }
    let traj = trajectory(&t, 0.25, 4).unwrap();
    assert_eq!(traj.len(), 5);
    assert_eq!(traj[2], gaussian_at(&t, 0.5).unwrap());
    assert!(trajectory(&t, 0.25, 0).is_err());
}

#[test]
fn rejects_asymmetric_truth() {
    let t = truth();
    let mut th = t.theta_star.clone();
    th[(0, 1)] += 1.0;
    assert!(QuadraticPotentialTruth::new(th, t.m0, t.sigma0).is_err());
}

#[test]
fn moment_matching_is_exact() {
    let spec = gaussian_at(&truth(), 0.2).unwrap();
    let x = moment_matched_sample(&spec, 50, 3).unwrap();
    let (m, s) = empirical_from_samples(&x, 1.0).unwrap().moments();
    assert!((m - &spec.mean).amax() < 1e-12);
    assert!((s - &spec.covariance).amax() < 1e-12);
    assert!(moment_matched_sample(&spec, 3, 3).is_err());
}

#[test]
fn fit_recovers_an_exact_quadratic() {
    let spec = gaussian_at(&truth(), 0.0).unwrap();
    let x = moment_matched_sample(&spec, 40, 1).unwrap();
    let alpha = empirical_from_samples(&x, 1.0).unwrap();
    let w = DMatrix::from_row_slice(3, 3, &[0.5, -0.1, 0.2, -0.1, 1.0, 0.0, 0.2, 0.0, -0.3]);
    let b = DVector::from_vec(vec![0.3, -1.0, 2.0]);
    let vals = DVector::from_fn(alpha.len(), |i, _| {
        let p = DVector::from_column_slice(alpha.point(i));
        p.dot(&(&w * &p)) + b.dot(&p) - 0.7
    });
    let fit = fit_quadratic(&alpha, &vals).unwrap();
    assert!((fit.w - w).amax() < 1e-9);
    assert!((fit.b - b).amax() < 1e-9);
    assert!((fit.constant + 0.7).abs() < 1e-9);
    assert!(fit.residual < 1e-15 && !fit.poor_fit);
}

#[test]
fn limiting_losses_match_sample_moments() {
    let spec = gaussian_at(&truth(), 0.3).unwrap();
    let d = 3;
    let x = sample_gaussian(&spec, 100_000, 5).unwrap();
    let fitted = QuadraticKantorovich {
        w: DMatrix::from_row_slice(3, 3, &[0.1, 0.0, 0.2, 0.0, -0.3, 0.1, 0.2, 0.1, 0.0]),
        b: DVector::from_vec(vec![0.2, 0.0, -0.4]),
        constant: 0.0,
        residual: 0.0,
        poor_fit: false,
    };
    let tau = 0.5;
    let theta = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.0, -0.1, 0.2, 0.0, 0.0, 0.0, 0.4]);
    let (fy, star) = limiting_losses(&spec, &fitted, tau, &theta).unwrap();
    let a = (&theta + theta.transpose()) * 0.5 + &fitted.w / tau;
    let n = x.ncols() as f64;
    let (mut s1, mut s2, mut g2) = (0.0, 0.0, 0.0);
    for c in x.column_iter() {
        let h = c.dot(&(&a * c)) + fitted.b.dot(&c) / tau;
        s1 += h;
        s2 += h * h;
        g2 += (&a * c * 2.0 + &fitted.b / tau).norm_squared();
    }
    let var = s2 / n - (s1 / n).powi(2);
    assert!((fy - var).abs() < 0.02 * var, "{fy} vs {var}");
    assert!((star - g2 / n).abs() < 0.02 * star, "{star} vs {}", g2 / n);
    assert!(limiting_losses(&spec, &fitted, tau, &DMatrix::zeros(d, d + 1)).is_err());
}

#[test]
fn isserlis_matches_monte_carlo() {
    let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 0.6]);
    let spec = GaussianSpec::new(DVector::zeros(2), sigma.clone()).unwrap();
    let x = sample_gaussian(&spec, 100_000, 8).unwrap();
    let n = x.ncols() as f64;
    let mut cov = DMatrix::zeros(4, 4);
    let mut mean = DVector::zeros(4);
    let vecs: Vec<DVector<f64>> = x.column_iter().map(|c| (c * c.transpose()).reshape_generic(nalgebra::Dyn(4), nalgebra::U1)).collect();
    for v in &vecs {
        mean += v;
    }
    mean /= n;
    for v in &vecs {
        let u = v - &mean;
        cov += &u * u.transpose();
    }
    cov /= n;
    let k = isserlis_matrix(&sigma);
    assert!((&cov - &k).norm() < 0.02 * k.norm(), "{cov} vs {k}");
}

#[test]
fn three_point_hermite_rule() {
    let spec = GaussianSpec::new(DVector::from_vec(vec![0.0]), DMatrix::identity(1, 1)).unwrap();
    let q = gauss_hermite_measure(&spec, 3, 0.0).unwrap();
    let mut nodes: Vec<(f64, f64)> = q.points().row(0).iter().zip(q.weights().iter()).map(|(&x, &w)| (x, w)).collect();
    nodes.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let want = [(-3f64.sqrt(), 1.0 / 6.0), (0.0, 2.0 / 3.0), (3f64.sqrt(), 1.0 / 6.0)];
    for (got, want) in nodes.iter().zip(want) {
        assert!((got.0 - want.0).abs() < 1e-12 && (got.1 - want.1).abs() < 1e-12, "{got:?} {want:?}");
    }
}

#[test]
fn hermite_grid_integrates_quartics() {
    let t = truth();
    let spec = gaussian_at(&t, 0.3).unwrap();
    let q = gauss_hermite_measure(&spec, 4, 0.0).unwrap();
    assert_eq!(q.points().ncols(), 64);
    let (m, s) = (&spec.mean, &spec.covariance);
    let a = DVector::from_vec(vec![0.4, -1.0, 0.7]);
    let var = (a.transpose() * s * &a)[(0, 0)];
    let mut mean = DVector::zeros(3);
    let mut cov = DMatrix::zeros(3, 3);
    let mut fourth = 0.0;
    for (x, &w) in q.points().column_iter().zip(q.weights().iter()) {
        mean += x * w;
        let c = x - m;
        cov += &c * c.transpose() * w;
        fourth += w * a.dot(&c).powi(4);
    }
    assert!((mean - m).amax() < 1e-12);
    assert!((cov - s).amax() < 1e-12);
    assert!((fourth - 3.0 * var * var).abs() < 1e-10 * var * var);

    let pruned = gauss_hermite_measure(&spec, 12, 1e-8).unwrap();
    assert!(pruned.points().ncols() < 12usize.pow(3));
    assert!((pruned.weights().sum() - 1.0).abs() < 1e-14);
}
