#![allow(dead_code)]

use ifyot::certificates::ModelTangent;
use ifyot::cost_basis::BasisMatrices;
use ifyot::divergences::Divergence;
use ifyot::forward_uot::{primal_from_dual, solve_sinkhorn, UotProblem};
use ifyot::fy_loss::FyIuotLoss;
use ifyot::measures::{rng, DiscreteMeasure};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

pub struct Instance {
    pub alpha: DiscreteMeasure,
    pub beta: DiscreteMeasure,
    pub basis: BasisMatrices,
    pub theta_star: DVector<f64>,
    pub eta: f64,
    pub div1: Divergence,
    pub div2: Divergence,
}

pub fn random_measure<R: Rng>(r: &mut R, n: usize, d: usize, mass: f64) -> DiscreteMeasure {
    let pts = DMatrix::from_fn(d, n, |_, _| r.random_range(0.0..1.0));
    let w = DVector::from_fn(n, |_, _| r.random_range(0.2..1.0));
    let w = &w * (mass / w.sum());
    DiscreteMeasure::new(pts, w).unwrap()
}

/// Random iUOT instance with `n, m ≤ max_size` and three random features.
pub fn random_instance(seed: u64, div1: Divergence, div2: Divergence, max_size: usize) -> Instance {
    let mut r = rng(seed);
    let n = r.random_range(2..=max_size);
    let m = r.random_range(2..=max_size);
    let (ma, mb) = if div1.is_hard_constraint() || div2.is_hard_constraint() {
        (1.0, 1.0)
    } else {
        (r.random_range(0.5..2.0), r.random_range(0.5..2.0))
    };
    let alpha = random_measure(&mut r, n, 2, ma);
    let beta = random_measure(&mut r, m, 2, mb);
    let phi0 = DMatrix::from_fn(n, m, |i, j| {
        let (x, y) = (alpha.point(i), beta.point(j));
        (x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2)
    });
    let phi: Vec<DMatrix<f64>> = (0..3).map(|_| DMatrix::from_fn(n, m, |_, _| r.random_range(-1.0..1.0))).collect();
    let basis = BasisMatrices::from_parts(phi0, phi, alpha.weights().clone(), beta.weights().clone());
    let theta_star = DVector::from_fn(3, |_, _| r.random_range(-1.0..1.0));
    let eta = r.random_range(0.3..1.0);
    Instance {
        alpha,
        beta,
        basis,
        theta_star,
        eta,
        div1,
        div2,
    }
}

impl Instance {
    pub fn problem(&self, theta: &DVector<f64>) -> UotProblem {
        UotProblem::new(self.alpha.clone(), self.beta.clone(), self.basis.cost(theta), self.eta, self.div1, self.div2).unwrap()
    }

    pub fn plan(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let prob = self.problem(theta);
        let pots = solve_sinkhorn(&prob, 1e-13, 1_000_000, None).unwrap();
        primal_from_dual(&prob, &pots).plan
    }

    pub fn loss(&self, pi_hat: DMatrix<f64>, r: f64) -> FyIuotLoss {
        FyIuotLoss::from_matrices(
            self.alpha.clone(),
            self.beta.clone(),
            pi_hat,
            self.basis.clone(),
            self.eta,
            self.div1,
            self.div2,
        )
        .unwrap()
        .with_sharpening(r)
        .unwrap()
        .with_inner_tol(1e-13)
        .with_max_inner_iter(1_000_000)
    }
}

/// Central finite-difference gradient.
pub fn fd_grad<F: FnMut(&DVector<f64>) -> f64>(mut f: F, x: &DVector<f64>, h: f64) -> DVector<f64> {
    DVector::from_fn(x.len(), |k, _| {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += h;
        xm[k] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    })
}

pub fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-12)
}

/// `τφ'(x)` written out per kind, independently of the conjugate formulas.
pub fn generator_deriv(d: &Divergence, x: f64) -> f64 {
    match *d {
        Divergence::Kl { tau } => tau * x.ln(),
        Divergence::ChiSquared { tau } => 2.0 * tau * (x - 1.0),
        Divergence::Hellinger { tau } => tau * (1.0 - 1.0 / x.sqrt()),
        Divergence::JensenShannon { tau } => tau * (2.0 * x / (1.0 + x)).ln(),
        Divergence::Alpha { a, tau } => tau * 2.0 / (1.0 - a) * (1.0 - x.powf(0.5 * (a - 1.0))),
        Divergence::Balanced | Divergence::Range { .. } => panic!("no derivative for hard constraints"),
    }
}

fn bisect<F: Fn(f64) -> f64>(h: F, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if h(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// `argmax_x xy − τφ(x)` by bisection on `τφ'(x) = y`.
pub fn conj_deriv_oracle(d: &Divergence, y: f64) -> f64 {
    if y >= d.recession_slope() {
        return f64::INFINITY;
    }
    if generator_deriv(d, 0.0) >= y {
        return 0.0;
    }
    let mut hi = 1.0;
    while generator_deriv(d, hi) < y {
        hi *= 2.0;
    }
    bisect(|x| generator_deriv(d, x) - y, 0.0, hi)
}

/// `argmin_q η e^{(p−q)/η} + φ*(q)` from the stationarity condition
/// `(φ*)'(q) = e^{(p−q)/η}`, solved by nested bisection.
pub fn aprox_oracle(d: &Divergence, p: f64, eta: f64) -> f64 {
    let h = |q: f64| conj_deriv_oracle(d, q) - ((p - q) / eta).exp();
    let sup = d.recession_slope();
    let mut step = 1.0;
    let mut lo = p - step;
    while h(lo) >= 0.0 {
        step *= 2.0;
        lo = p - step;
    }
    let mut step = 1.0;
    let mut hi = (p + step).min(sup);
    while h(hi) < 0.0 {
        step *= 2.0;
        hi = (p + step).min(sup);
    }
    bisect(h, lo, hi)
}

/// Primal objective written from scratch on the plan entries.
pub fn primal_oracle(prob: &UotProblem, pi: &DMatrix<f64>) -> f64 {
    let (a, b) = (prob.alpha.weights(), prob.beta.weights());
    let mut v = 0.0;
    for i in 0..pi.nrows() {
        for j in 0..pi.ncols() {
            let (p, ab) = (pi[(i, j)], a[i] * b[j]);
            v += prob.cost[(i, j)] * p + prob.eta * ab;
            if p > 0.0 {
                v += prob.eta * (p * (p / ab).ln() - p);
            }
        }
    }
    for i in 0..pi.nrows() {
        v += a[i] * prob.div1.generator(pi.row(i).sum() / a[i]);
    }
    for j in 0..pi.ncols() {
        v += b[j] * prob.div2.generator(pi.column(j).sum() / b[j]);
    }
    v
}

/// Minimizes [`primal_oracle`] over 2×2 plans by a shrinking grid search.
pub fn zoom_grid_min(prob: &UotProblem) -> f64 {
    let mut center = [0.25f64; 4];
    let mut radius = 0.5;
    let mut best = f64::INFINITY;
    let offsets = [-1.0, -0.5, 0.0, 0.5, 1.0];
    while radius > 1e-9 {
        let mut improved = center;
        for &o0 in &offsets {
            for &o1 in &offsets {
                for &o2 in &offsets {
                    for &o3 in &offsets {
                        let c = [
                            (center[0] + o0 * radius).max(0.0),
                            (center[1] + o1 * radius).max(0.0),
                            (center[2] + o2 * radius).max(0.0),
                            (center[3] + o3 * radius).max(0.0),
                        ];
                        let pi = DMatrix::from_row_slice(2, 2, &c);
                        let v = primal_oracle(prob, &pi);
                        if v < best {
                            best = v;
                            improved = c;
                        }
                    }
                }
            }
        }
        if improved == center {
            radius *= 0.6;
        }
        center = improved;
    }
    best
}

pub fn two_by_two(seed: u64, div1: Divergence, div2: Divergence) -> UotProblem {
    let mut r = rng(seed);
    let alpha = random_measure(&mut r, 2, 1, 1.0);
    let beta = random_measure(&mut r, 2, 1, 0.8);
    let cost = DMatrix::from_fn(2, 2, |i, j| (alpha.point(i)[0] - beta.point(j)[0]).powi(2) * 3.0);
    UotProblem::new(alpha, beta, cost, 0.5, div1, div2).unwrap()
}

/// Solves `[H⁻¹ Q; Qᵀ 0] (z, μ) = (0, QᵀS)`, the optimality system of
/// `min ⟨z, H⁻¹z⟩` subject to `P_T z = S_T`.
pub fn kkt_oracle(h: &DMatrix<f64>, t: &ModelTangent) -> DVector<f64> {
    let p = h.nrows();
    let q = &t.basis;
    let k = q.ncols();
    let hinv = h.clone().try_inverse().unwrap();
    let mut m = DMatrix::zeros(p + k, p + k);
    m.view_mut((0, 0), (p, p)).copy_from(&hinv);
    m.view_mut((0, p), (p, k)).copy_from(q);
    m.view_mut((p, 0), (k, p)).copy_from(&q.transpose());
    let mut rhs = DVector::zeros(p + k);
    rhs.rows_mut(p, k).copy_from(&(q.transpose() * &t.sign));
    m.lu().solve(&rhs).unwrap().rows(0, p).into_owned()
}
