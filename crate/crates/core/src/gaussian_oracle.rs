//! Gaussian ground truth: gradient-flow trajectories of quadratic potentials,
//! quadratic fits of entropic Kantorovich potentials, and the closed-form
//! limiting losses.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::cost_basis::symmetric_quadratic_features;
use crate::divergences::Divergence;
use crate::error::{invalid, Result};
use crate::forward_uot::{solve_sinkhorn, UotProblem};
use crate::measures::{psd_sqrt, sample_gaussian, DiscreteMeasure, GaussianSpec};

const SYM_TOL: f64 = 1e-12;
const POOR_FIT: f64 = 0.1;

/// `V★(x) = xᵀθ★x` and the initial law `N(m₀, Σ₀)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticPotentialTruth {
    pub theta_star: DMatrix<f64>,
    pub m0: DVector<f64>,
    pub sigma0: DMatrix<f64>,
}

impl QuadraticPotentialTruth {
    pub fn new(theta_star: DMatrix<f64>, m0: DVector<f64>, sigma0: DMatrix<f64>) -> Result<Self> {
        let d = m0.len();
        if theta_star.shape() != (d, d) {
            return invalid("theta_star must be d × d");
        }
        if (&theta_star - theta_star.transpose()).amax() > SYM_TOL * theta_star.amax().max(1.0) {
            return invalid("theta_star must be symmetric");
        }
        GaussianSpec::new(m0.clone(), sigma0.clone())?;
        Ok(Self { theta_star, m0, sigma0 })
    }

    pub fn dim(&self) -> usize {
        self.m0.len()
    }
}

/// `f*(x) ≈ xᵀWx + bᵀx + c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticKantorovich {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
    pub constant: f64,
    /// Weighted residual variance over potential variance.
    pub residual: f64,
    pub poor_fit: bool,
}

fn sym_expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(a.clone());
    let q = &eig.eigenvectors;
    q * DMatrix::from_diagonal(&eig.eigenvalues.map(f64::exp)) * q.transpose()
}

/// Law at time `t` of `dX = −∇V★(X) dt = −2θ★X dt`.
pub fn gaussian_at(truth: &QuadraticPotentialTruth, t: f64) -> Result<GaussianSpec> {
    let e = sym_expm(&(&truth.theta_star * (-2.0 * t)));
    let cov = &e * &truth.sigma0 * &e;
    GaussianSpec::new(&e * &truth.m0, (&cov + cov.transpose()) * 0.5)
}

/// Snapshots at `t = kτ`, `k = 0..=T`.
pub fn trajectory(truth: &QuadraticPotentialTruth, tau: f64, steps: usize) -> Result<Vec<GaussianSpec>> {
    if steps == 0 {
        return invalid("need at least one step");
    }
    if !(tau > 0.0) {
        return invalid("tau must be positive");
    }
    (0..=steps).map(|k| gaussian_at(truth, k as f64 * tau)).collect()
}

/// Samples whose empirical mean and covariance equal the spec exactly.
pub fn moment_matched_sample(spec: &GaussianSpec, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    let d = spec.dim();
    if n <= d {
        return invalid("moment matching needs more samples than dimensions");
    }
    let mut z = sample_gaussian(&GaussianSpec::new(DVector::zeros(d), DMatrix::identity(d, d))?, n, seed)?;
    let mean = z.column_mean();
    for mut c in z.column_iter_mut() {
        c -= &mean;
    }
    let cov = &z * z.transpose() / n as f64;
    let chol = cov
        .cholesky()
        .ok_or_else(|| crate::error::Error::InvalidInput("degenerate standard normal sample".into()))?;
    let white = chol.l().solve_lower_triangular(&z).expect("cholesky factor is invertible");
    let mut out = psd_sqrt(&spec.covariance) * white;
    for mut c in out.column_iter_mut() {
        c += &spec.mean;
    }
    Ok(out)
}

/// Tensor Gauss-Hermite quadrature of `N(m, Σ)` with `nodes` points per axis,
/// mapped through `Σ^½`. Nodes whose weight falls below `prune` times the
/// largest weight are dropped and the rest renormalized.
pub fn gauss_hermite_measure(spec: &GaussianSpec, nodes: usize, prune: f64) -> Result<DiscreteMeasure> {
    if nodes == 0 {
        return invalid("need at least one node per axis");
    }
    // Golub-Welsch for the probabilists' Hermite polynomials
    let mut jac = DMatrix::zeros(nodes, nodes);
    for i in 1..nodes {
        let b = (i as f64).sqrt();
        jac[(i, i - 1)] = b;
        jac[(i - 1, i)] = b;
    }
    let eig = SymmetricEigen::new(jac);
    let z: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let w: Vec<f64> = (0..nodes).map(|k| eig.eigenvectors[(0, k)].powi(2)).collect();
    let d = spec.dim();
    let root = psd_sqrt(&spec.covariance);
    let total = nodes.pow(d as u32);
    let wmax = w.iter().copied().fold(0.0, f64::max).powi(d as i32);
    let mut pts = Vec::new();
    let mut weights = Vec::new();
    let mut idx = vec![0usize; d];
    for _ in 0..total {
        let wt: f64 = idx.iter().map(|&k| w[k]).product();
        if wt > prune * wmax {
            let zeta = DVector::from_iterator(d, idx.iter().map(|&k| z[k]));
            pts.extend((&spec.mean + &root * zeta).iter().copied());
            weights.push(wt);
        }
        for slot in idx.iter_mut() {
            *slot += 1;
            if *slot < nodes {
                break;
            }
            *slot = 0;
        }
    }
    let sum: f64 = weights.iter().sum();
    let n = weights.len();
    DiscreteMeasure::new(DMatrix::from_vec(d, n, pts), DVector::from_vec(weights) / sum)
}

/// Weighted least-squares fit of `xᵀWx + bᵀx + c` to values on `alpha`.
pub fn fit_quadratic(alpha: &DiscreteMeasure, values: &DVector<f64>) -> Result<QuadraticKantorovich> {
    let d = alpha.dim();
    let n = alpha.len();
    if values.len() != n {
        return invalid("one value per atom expected");
    }
    let quad = symmetric_quadratic_features(d);
    let p = quad.len() + d + 1;
    let w = alpha.weights();
    let mut design = DMatrix::zeros(n, p);
    let mut rhs = DVector::zeros(n);
    for i in 0..n {
        let x = alpha.point(i);
        let sw = w[i].sqrt();
        for (k, f) in quad.iter().enumerate() {
            design[(i, k)] = sw * f.eval_potential(x);
        }
        for k in 0..d {
            design[(i, quad.len() + k)] = sw * x[k];
        }
        design[(i, p - 1)] = sw;
        rhs[i] = sw * values[i];
    }
    let sol = design
        .clone()
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|e| crate::error::Error::InvalidInput(e.to_string()))?;
    let mut wm = DMatrix::zeros(d, d);
    for (k, f) in quad.iter().enumerate() {
        if let crate::cost_basis::Feature::SymQuad { i, j } = f {
            wm[(*i, *j)] = sol[k];
            wm[(*j, *i)] = sol[k];
        }
    }
    let b = sol.rows(quad.len(), d).into_owned();
    let resid = &design * &sol - &rhs;
    let mass = w.sum();
    let mean = w.dot(values) / mass;
    let var = w.iter().zip(values.iter()).map(|(wi, v)| wi * (v - mean).powi(2)).sum::<f64>() / mass;
    let residual = if var > 0.0 { resid.norm_squared() / mass / var } else { 0.0 };
    Ok(QuadraticKantorovich {
        w: wm,
        b,
        constant: sol[p - 1],
        residual,
        poor_fit: residual > POOR_FIT,
    })
}

/// Fits the `alpha`-side potential of balanced entropic OT with cost
/// `‖x − y‖²` at scale `η`.
pub fn fit_quadratic_potential(alpha: &DiscreteMeasure, beta: &DiscreteMeasure, eta: f64) -> Result<QuadraticKantorovich> {
    let alpha = alpha.normalized();
    let beta = beta.normalized();
    let cost = DMatrix::from_fn(alpha.len(), beta.len(), |i, j| {
        alpha.point(i).iter().zip(beta.point(j)).map(|(a, b)| (a - b) * (a - b)).sum()
    });
    let prob = UotProblem::new(alpha.clone(), beta, cost, eta, Divergence::Balanced, Divergence::Balanced)?;
    let pots = solve_sinkhorn(&prob, 1e-10, 1_000_000, None)?;
    fit_quadratic(&alpha, &pots.f)
}

fn sym(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// `(fy_limit, ijko_star)` at `θ` for the snapshot `N(m, Σ)` with fitted
/// potential `(W, b)`:
///
/// ```text
/// fy_limit  = 2‖Σ^½ A Σ^½‖²_F + ‖Σ^½ (2A m + b/τ)‖²
/// ijko_star = 4‖Σ^½ A‖²_F + ‖2A m + b/τ‖²
/// ```
///
/// with `A = sym(θ + W/τ)`.
pub fn limiting_losses(spec: &GaussianSpec, kanto: &QuadraticKantorovich, tau: f64, theta: &DMatrix<f64>) -> Result<(f64, f64)> {
    let d = spec.dim();
    if theta.shape() != (d, d) || kanto.w.shape() != (d, d) || kanto.b.len() != d {
        return invalid("dimension mismatch");
    }
    let a = sym(&(theta + &kanto.w / tau));
    let root = spec.sqrt_cov();
    let lin = &a * &spec.mean * 2.0 + &kanto.b / tau;
    let fy = 2.0 * (&root * &a * &root).norm_squared() + (&root * &lin).norm_squared();
    let star = 4.0 * (&root * &a).norm_squared() + lin.norm_squared();
    Ok((fy, star))
}

/// `Σ⊗Σ + (Σ⊗Σ)𝕋`, the covariance of `vec(xxᵀ)` under `N(0, Σ)`.
pub fn isserlis_matrix(sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let k = sigma.kronecker(sigma);
    let t = crate::cost_basis::transpose_operator(sigma.nrows());
    &k + &k * t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_identity_decay() {
        let truth = QuadraticPotentialTruth::new(
            DMatrix::identity(2, 2) * 0.5,
            DVector::from_vec(vec![1.0, -2.0]),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
        )
        .unwrap();
        let g = gaussian_at(&truth, 1.0).unwrap();
        assert!((&g.mean - &truth.m0 * (-1.0f64).exp()).amax() < 1e-14);
        assert!((&g.covariance - &truth.sigma0 * (-2.0f64).exp()).amax() < 1e-14);
    }

    #[test]
    fn moment_matching_is_exact() {
        let spec = GaussianSpec::new(DVector::from_vec(vec![1.0, 2.0]), DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 0.5])).unwrap();
        let x = moment_matched_sample(&spec, 50, 3).unwrap();
        let mean = x.column_mean();
        let mut c = x.clone();
        for mut col in c.column_iter_mut() {
            col -= &mean;
        }
        let cov = &c * c.transpose() / 50.0;
        assert!((mean - &spec.mean).amax() < 1e-12);
        assert!((cov - &spec.covariance).amax() < 1e-12);
    }

    #[test]
    fn identity_substitution() {
        let spec = GaussianSpec::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let kanto = QuadraticKantorovich {
            w: DMatrix::zeros(2, 2),
            b: DVector::zeros(2),
            constant: 0.0,
            residual: 0.0,
            poor_fit: false,
        };
        let th = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.1, 2.0]);
        let (fy, star) = limiting_losses(&spec, &kanto, 0.1, &th).unwrap();
        let a = sym(&th).norm_squared();
        assert!((fy - 2.0 * a).abs() < 1e-12 && (star - 4.0 * a).abs() < 1e-12);
    }
}
