//! Sharpened Fenchel-Young losses.
//!
//! For the iUOT loss with data `π̂` the gap is
//!
//! ```text
//! L(θ) = ⟨c_θ, π̂⟩ + Ω(π̂) − inf_π { ⟨c_θ, π⟩ + Ω(π) + D(π|π̂) }
//! Ω(π) = η KL(π|α⊗β) + D_φ₁(π₁|α) + D_φ₂(π₂|β)
//! ```
//!
//! with `D = 0` or `D = r KL(π|π̂)`. The sharpened inner problem is again an
//! entropic UOT problem, at scale `η + r` and with cost
//! `c_θ + r log(α⊗β / π̂)`, so one Sinkhorn solver serves both. The gradient
//! is `⟨φ, π̂⟩ − ⟨φ, π(θ)⟩` (envelope theorem).

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::cost_basis::{evaluate, BasisMatrices, CostBasis};
use crate::divergences::Divergence;
use crate::error::{invalid, Error, Result};
use crate::forward_uot::{
    col_sums, dual_objective, generalized_kl, primal_from_dual, row_sums, solve_sinkhorn, Coupling, DualPotentials,
    UotProblem, DEFAULT_MAX_ITER,
};
use crate::measures::DiscreteMeasure;

const INNER_TOL_CAP: f64 = 1e-9;
const INNER_TOL_FLOOR: f64 = 1e-12;

/// One evaluation of an iUOT loss.
#[derive(Debug, Clone)]
pub struct LossEval {
    /// The Fenchel-Young gap (nonnegative up to solver accuracy).
    pub value: f64,
    /// `inf_{f,g} K^{π̂,α,β}(f, g, c_θ) = ⟨c_θ, π̂⟩ + min K`.
    pub kantorovich: f64,
    pub grad: DVector<f64>,
    pub coupling: Coupling,
    pub potentials: DualPotentials,
}

#[derive(Debug, Clone)]
pub struct FyIuotLoss {
    prob: UotProblem,
    pi_hat: DMatrix<f64>,
    basis: BasisMatrices,
    eta: f64,
    sharpen: f64,
    shift: Option<DMatrix<f64>>,
    data_term: DVector<f64>,
    omega_hat: f64,
    warm: Option<DualPotentials>,
    inner_tol: Option<f64>,
    max_inner_iter: usize,
    last_grad_norm: f64,
    inner_solves: usize,
}

impl FyIuotLoss {
    /// `pi_hat` holds the data masses on `supp α × supp β`.
    pub fn new(
        alpha: DiscreteMeasure,
        beta: DiscreteMeasure,
        pi_hat: DMatrix<f64>,
        basis: &CostBasis,
        eta: f64,
        div1: Divergence,
        div2: Divergence,
    ) -> Result<Self> {
        let bm = evaluate(basis, &alpha, &beta)?;
        Self::from_matrices(alpha, beta, pi_hat, bm, eta, div1, div2)
    }

    pub fn from_matrices(
        alpha: DiscreteMeasure,
        beta: DiscreteMeasure,
        pi_hat: DMatrix<f64>,
        basis: BasisMatrices,
        eta: f64,
        div1: Divergence,
        div2: Divergence,
    ) -> Result<Self> {
        if pi_hat.shape() != (alpha.len(), beta.len()) || basis.phi0.shape() != pi_hat.shape() {
            return invalid("data coupling and basis must live on supp α × supp β");
        }
        if pi_hat.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || pi_hat.sum() <= 0.0 {
            return invalid("data coupling must be a nonnegative, nonzero mass matrix");
        }
        let prob = UotProblem::new(alpha, beta, basis.phi0.clone(), eta, div1, div2)?;
        let (a, b) = (prob.alpha.weights(), prob.beta.weights());
        let omega_hat = eta * generalized_kl(&pi_hat, a, b)
            + div1.divergence_value(row_sums(&pi_hat).as_slice(), a.as_slice())
            + div2.divergence_value(col_sums(&pi_hat).as_slice(), b.as_slice());
        let data_term = basis.integrate(&pi_hat);
        Ok(Self {
            prob,
            pi_hat,
            basis,
            eta,
            sharpen: 0.0,
            shift: None,
            data_term,
            omega_hat,
            warm: None,
            inner_tol: None,
            max_inner_iter: DEFAULT_MAX_ITER,
            last_grad_norm: f64::INFINITY,
            inner_solves: 0,
        })
    }

    /// Uses `D = r KL(π | π̂)`.
    pub fn with_sharpening(mut self, r: f64) -> Result<Self> {
        if !(r >= 0.0) || !r.is_finite() {
            return invalid("sharpening parameter must be nonnegative");
        }
        self.sharpen = r;
        self.warm = None;
        if r == 0.0 {
            self.shift = None;
            self.prob.eta = self.eta;
            return Ok(self);
        }
        let (a, b) = (self.prob.alpha.weights(), self.prob.beta.weights());
        let shift = DMatrix::from_fn(self.pi_hat.nrows(), self.pi_hat.ncols(), |i, j| {
            let ab = a[i] * b[j];
            let p = self.pi_hat[(i, j)];
            if ab == 0.0 {
                0.0
            } else if p == 0.0 {
                f64::INFINITY
            } else {
                r * (ab / p).ln()
            }
        });
        // validates that every row and column keeps an admissible cell
        UotProblem::new(
            self.prob.alpha.clone(),
            self.prob.beta.clone(),
            &self.basis.phi0 + &shift,
            self.eta + r,
            self.prob.div1,
            self.prob.div2,
        )?;
        self.shift = Some(shift);
        self.prob.eta = self.eta + r;
        Ok(self)
    }

    /// Fixes the inner Sinkhorn tolerance instead of the adaptive schedule.
    pub fn with_inner_tol(mut self, tol: f64) -> Self {
        self.inner_tol = Some(tol);
        self
    }

    pub fn with_max_inner_iter(mut self, max_iter: usize) -> Self {
        self.max_inner_iter = max_iter;
        self
    }

    pub fn basis(&self) -> &BasisMatrices {
        &self.basis
    }

    pub fn alpha(&self) -> &DiscreteMeasure {
        &self.prob.alpha
    }

    pub fn beta(&self) -> &DiscreteMeasure {
        &self.prob.beta
    }

    pub fn pi_hat(&self) -> &DMatrix<f64> {
        &self.pi_hat
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn sharpening(&self) -> f64 {
        self.sharpen
    }

    pub fn divergences(&self) -> (Divergence, Divergence) {
        (self.prob.div1, self.prob.div2)
    }

    /// `⟨φ, π̂⟩`.
    pub fn data_term(&self) -> &DVector<f64> {
        &self.data_term
    }

    /// `Ω(π̂)`, possibly `+∞`.
    pub fn omega_hat(&self) -> f64 {
        self.omega_hat
    }

    pub fn inner_solves(&self) -> usize {
        self.inner_solves
    }

    pub fn dim(&self) -> usize {
        self.basis.s()
    }

    pub fn reset_warm_start(&mut self) {
        self.warm = None;
    }

    /// The UOT problem solved inside the loss at `θ`.
    pub fn inner_problem(&self, theta: &DVector<f64>) -> UotProblem {
        let mut prob = self.prob.clone();
        prob.cost = self.basis.cost(theta);
        if let Some(s) = &self.shift {
            prob.cost += s;
        }
        prob
    }

    fn current_tol(&self) -> f64 {
        self.inner_tol
            .unwrap_or_else(|| (1e-3 * self.last_grad_norm).clamp(INNER_TOL_FLOOR, INNER_TOL_CAP))
    }

    /// Value and gradient of the loss at `θ`.
    pub fn loss_and_grad(&mut self, theta: &DVector<f64>) -> Result<LossEval> {
        if theta.len() != self.dim() || theta.iter().any(|v| !v.is_finite()) {
            return invalid("theta must be finite with one entry per feature");
        }
        let cost = self.basis.cost(theta);
        let prob = self.inner_problem(theta);
        let tol = self.current_tol();
        self.inner_solves += 1;
        let pots = match solve_sinkhorn(&prob, tol, self.max_inner_iter, self.warm.as_ref()) {
            Ok(p) => p,
            Err(Error::Diverged { residual, iterations }) => {
                return Err(Error::InnerDiverged {
                    theta: theta.iter().copied().collect(),
                    residual,
                    iterations,
                })
            }
            Err(e) => return Err(e),
        };
        let (k, _, _) = dual_objective(&prob, &pots);
        let coupling = primal_from_dual(&prob, &pots);
        let data_cost = cost.component_mul(&self.pi_hat).sum();
        let (ma, mb) = (self.prob.alpha.mass(), self.prob.beta.mass());
        let inner_value = prob.eta * ma * mb - k + self.sharpen * (self.pi_hat.sum() - ma * mb);
        let value = data_cost + self.omega_hat - inner_value;
        let grad = &self.data_term - self.basis.integrate(&coupling.plan);
        if grad.norm().is_finite() {
            self.last_grad_norm = grad.norm();
            self.warm = Some(pots.clone());
        }
        Ok(LossEval {
            value,
            kantorovich: data_cost + k,
            grad,
            coupling,
            potentials: pots,
        })
    }
}

/// The vector-space example `Ω(y) = ½ yᵀAy`, `D(y|ŷ) = (r/2)‖y − ŷ‖²`, with
/// loss `Ω(ŷ) + Λ*(−x) + ⟨x, ŷ⟩`.
#[derive(Debug, Clone)]
pub struct QuadraticSharpenedInstance {
    pub a: DMatrix<f64>,
    pub r: f64,
    pub y_hat: DVector<f64>,
}

impl QuadraticSharpenedInstance {
    pub fn new(a: DMatrix<f64>, r: f64, y_hat: DVector<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() || a.nrows() != y_hat.len() {
            return invalid("shape mismatch");
        }
        if (&a - a.transpose()).amax() > 1e-12 * a.amax().max(1.0) {
            return invalid("A must be symmetric");
        }
        if Cholesky::new(a.clone()).is_none() {
            return invalid("A must be positive definite");
        }
        if !(r >= 0.0) {
            return invalid("r must be nonnegative");
        }
        Ok(Self { a, r, y_hat })
    }

    fn shifted(&self) -> DMatrix<f64> {
        &self.a + DMatrix::identity(self.a.nrows(), self.a.nrows()) * self.r
    }

    /// Evaluation through the inner maximization `max_y ⟨−x, y⟩ − Λ(y)`.
    pub fn max_form(&self, x: &DVector<f64>) -> f64 {
        let b = self.shifted();
        let chol = Cholesky::new(b).expect("A + rI is positive definite");
        let y = chol.solve(&(-x + &self.y_hat * self.r));
        let lam = 0.5 * y.dot(&(&self.a * &y)) + 0.5 * self.r * (&y - &self.y_hat).norm_squared();
        let omega_hat = 0.5 * self.y_hat.dot(&(&self.a * &self.y_hat));
        omega_hat + (-x).dot(&y) - lam + x.dot(&self.y_hat)
    }

    /// `½‖(A+rI)^{−½}(x − rŷ) + (A+rI)^{½}ŷ‖²`.
    pub fn closed_form(&self, x: &DVector<f64>) -> f64 {
        let eig = nalgebra::SymmetricEigen::new(self.shifted());
        let q = &eig.eigenvectors;
        let sq = eig.eigenvalues.map(f64::sqrt);
        let u = q.transpose() * (x - &self.y_hat * self.r);
        let w = q.transpose() * &self.y_hat;
        let v = DVector::from_fn(u.len(), |k, _| u[k] / sq[k] + sq[k] * w[k]);
        0.5 * v.norm_squared()
    }

    /// Both evaluation paths, `(max_form, closed_form)`.
    pub fn value(&self, x: &DVector<f64>) -> (f64, f64) {
        (self.max_form(x), self.closed_form(x))
    }

    pub fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        let chol = Cholesky::new(self.shifted()).expect("A + rI is positive definite");
        chol.solve(&(x - &self.y_hat * self.r)) + &self.y_hat
    }

    /// `(A + rI)^{−1}`.
    pub fn hessian(&self) -> DMatrix<f64> {
        Cholesky::new(self.shifted()).expect("A + rI is positive definite").inverse()
    }
}

/// Monotonicity of sharpening: a loss with a larger discrepancy never exceeds
/// the one with a smaller discrepancy.
pub fn sharpening_monotonicity_probe(loss_small_d: f64, loss_large_d: f64) -> bool {
    loss_small_d >= loss_large_d - 1e-9
}
