//! Inverse JKO losses.
//!
//! Rows carry the later snapshot `α^{k+1}` (points `y_i`, weights `a_i`) and
//! columns the earlier one `α^k` (points `x_j`, weights `b_j`). With
//! `ε = η/τ`, `r′ = r − ε` and `c_V(y, x) = V(y) + ‖y − x‖²/τ`, the sharpened
//! loss is an iUOT loss with a KL(`r′`) first marginal, a balanced second
//! marginal and the product data coupling `α^{k+1} ⊗ α^k`.

use nalgebra::{DMatrix, DVector};

use crate::cost_basis::{BasisMatrices, Feature};
use crate::divergences::Divergence;
use crate::error::{invalid, Result};
use crate::forward_uot::{dual_objective, primal_from_dual, solve_sinkhorn, DualPotentials, UotProblem};
use crate::fy_loss::FyIuotLoss;
use crate::measures::DiscreteMeasure;
use crate::solver::{lbfgs, FnObjective, LbfgsOptions, Status};

const PROBABILITY_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct IjkoInstance {
    alpha_k: DiscreteMeasure,
    alpha_k1: DiscreteMeasure,
    tau: f64,
    eta: f64,
    r: f64,
    potential: Vec<Feature>,
    /// `V_s(y_i)`, `n × S`.
    pot: DMatrix<f64>,
    /// `‖y_i − x_j‖²`, `n × m`.
    dist: DMatrix<f64>,
}

/// Balanced entropic OT between the snapshots with cost `‖y − x‖²` at scale `η`.
#[derive(Debug, Clone)]
pub struct SnapshotOt {
    /// Potential on `α^{k+1}`, gauge-fixed to zero `α^{k+1}`-mean.
    pub f: DVector<f64>,
    pub g: DVector<f64>,
    /// `W²_{2,η}(α^{k+1}, α^k)`, primal value including the entropic term.
    pub value: f64,
    /// The Sinkhorn plan rounded onto the exact marginals.
    pub plan: DMatrix<f64>,
}

/// Rounds a nonnegative plan onto marginals `(a, b)` of equal mass by row and
/// column down-scaling followed by a rank-one correction.
fn round_to_marginals(mut plan: DMatrix<f64>, a: &DVector<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    for (i, mut row) in plan.row_iter_mut().enumerate() {
        let s = row.sum();
        if s > a[i] {
            row *= a[i] / s;
        }
    }
    for (j, mut col) in plan.column_iter_mut().enumerate() {
        let s = col.sum();
        if s > b[j] {
            col *= b[j] / s;
        }
    }
    let er = a - plan.column_sum();
    let ec = b - plan.row_sum().transpose();
    let mass = er.sum();
    if mass > 0.0 {
        plan += er * ec.transpose() / mass;
    }
    plan
}

impl IjkoInstance {
    pub fn new(
        alpha_k: DiscreteMeasure,
        alpha_k1: DiscreteMeasure,
        tau: f64,
        eta: f64,
        r: f64,
        potential: Vec<Feature>,
    ) -> Result<Self> {
        if !(tau > 0.0 && eta > 0.0 && r > 0.0) || !(tau * eta * r).is_finite() {
            return invalid("tau, eta and r must be positive");
        }
        for m in [&alpha_k, &alpha_k1] {
            if (m.mass() - 1.0).abs() > PROBABILITY_TOL {
                return invalid(format!("snapshots must be probability measures, got mass {}", m.mass()));
            }
        }
        if alpha_k.dim() != alpha_k1.dim() {
            return invalid("snapshots live in different dimensions");
        }
        if potential.is_empty() {
            return invalid("potential basis is empty");
        }
        if let Some(f) = potential.iter().find(|f| !f.is_potential()) {
            return invalid(format!("{f:?} is not a potential feature"));
        }
        let (n, m) = (alpha_k1.len(), alpha_k.len());
        let pot = DMatrix::from_fn(n, potential.len(), |i, s| potential[s].eval_potential(alpha_k1.point(i)));
        if pot.iter().any(|v| !v.is_finite()) {
            return invalid("potential features are not finite on the data");
        }
        let dist = DMatrix::from_fn(n, m, |i, j| {
            alpha_k1
                .point(i)
                .iter()
                .zip(alpha_k.point(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        });
        Ok(Self {
            alpha_k,
            alpha_k1,
            tau,
            eta,
            r,
            potential,
            pot,
            dist,
        })
    }

    pub fn alpha_k(&self) -> &DiscreteMeasure {
        &self.alpha_k
    }

    pub fn alpha_k1(&self) -> &DiscreteMeasure {
        &self.alpha_k1
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    /// `ε = η/τ`.
    pub fn epsilon(&self) -> f64 {
        self.eta / self.tau
    }

    /// `r′ = r − η/τ`; the reduction needs it positive.
    pub fn r_prime(&self) -> f64 {
        self.r - self.epsilon()
    }

    pub fn potential(&self) -> &[Feature] {
        &self.potential
    }

    pub fn dim(&self) -> usize {
        self.potential.len()
    }

    pub fn with_r(&self, r: f64) -> Result<Self> {
        if !(r > 0.0) || !r.is_finite() {
            return invalid("r must be positive");
        }
        let mut out = self.clone();
        out.r = r;
        Ok(out)
    }

    /// `V_θ(y_i)` on the support of `α^{k+1}`.
    pub fn potential_values(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.pot * theta
    }

    /// Feature values `V_s(y_i)`, `n × S`.
    pub fn potential_matrix(&self) -> &DMatrix<f64> {
        &self.pot
    }

    /// `⟨‖y − x‖², α^{k+1} ⊗ α^k⟩ / τ`, the constant separating the reduction
    /// from the gap.
    pub fn product_transport(&self) -> f64 {
        let (a, b) = (self.alpha_k1.weights(), self.alpha_k.weights());
        a.dot(&(&self.dist * b)) / self.tau
    }

    /// The iUOT loss of the reduction (product data coupling).
    pub fn fy_loss(&self) -> Result<FyIuotLoss> {
        let rp = self.r_prime();
        if !(rp > 0.0) {
            return invalid(format!("r′ = r − η/τ = {rp} must be positive for the iUOT reduction"));
        }
        let (a, b) = (self.alpha_k1.weights().clone(), self.alpha_k.weights().clone());
        let phi0 = &self.dist / self.tau;
        let m = self.alpha_k.len();
        let phi = (0..self.dim())
            .map(|s| DMatrix::from_fn(self.alpha_k1.len(), m, |i, _| self.pot[(i, s)]))
            .collect();
        let basis = BasisMatrices::from_parts(phi0, phi, a.clone(), b.clone());
        let prod = &a * b.transpose();
        FyIuotLoss::from_matrices(
            self.alpha_k1.clone(),
            self.alpha_k.clone(),
            prod,
            basis,
            self.epsilon(),
            Divergence::Kl { tau: rp },
            Divergence::Balanced,
        )
    }

    /// `S(V_θ, f)` with KL weight `s`, and its gradients in `θ` and `f`.
    pub fn semidual_with_s(
        &self,
        theta: &DVector<f64>,
        f: &DVector<f64>,
        s: f64,
    ) -> Result<(f64, DVector<f64>, DVector<f64>)> {
        let n = self.alpha_k1.len();
        if theta.len() != self.dim() || f.len() != n {
            return invalid("theta or f has the wrong length");
        }
        if theta.iter().chain(f.iter()).any(|v| !v.is_finite()) {
            return invalid("theta and f must be finite");
        }
        if !(s > 0.0) {
            return invalid("semi-dual KL weight must be positive");
        }
        let eps = self.epsilon();
        let a = self.alpha_k1.weights();
        let b = self.alpha_k.weights();
        let v = self.potential_values(theta);
        let log_a: Vec<f64> = a.iter().map(|w| w.ln()).collect();
        let base: Vec<f64> = (0..n).map(|i| (f[i] - v[i]) / eps + log_a[i]).collect();
        let mut value = 0.0;
        let mut grad_f = DVector::zeros(n);
        let mut grad_v = a.clone();
        for i in 0..n {
            let e = (-f[i] / s).exp();
            value += a[i] * (v[i] + s * e);
            grad_f[i] = -a[i] * e;
        }
        let mut z = vec![0.0; n];
        for j in 0..self.alpha_k.len() {
            if b[j] == 0.0 {
                continue;
            }
            let col = self.dist.column(j);
            let mut zmax = f64::NEG_INFINITY;
            for i in 0..n {
                z[i] = base[i] - col[i] / self.eta;
                zmax = zmax.max(z[i]);
            }
            let sum: f64 = z.iter().map(|t| (t - zmax).exp()).sum();
            let lse = zmax + sum.ln();
            value += b[j] * eps * lse;
            for i in 0..n {
                let p = b[j] * (z[i] - lse).exp();
                grad_f[i] += p;
                grad_v[i] -= p;
            }
        }
        let grad_theta = self.pot.transpose() * grad_v;
        Ok((value, grad_theta, grad_f))
    }

    /// `S(V_θ, f)` at `s = r′`.
    pub fn semidual(&self, theta: &DVector<f64>, f: &DVector<f64>) -> Result<(f64, DVector<f64>, DVector<f64>)> {
        self.semidual_with_s(theta, f, self.r_prime())
    }

    /// `min_f S(V_θ, f)` and the minimizer, from `f0` (zeros if absent).
    pub fn semidual_min(&self, theta: &DVector<f64>, f0: Option<&DVector<f64>>, opts: &LbfgsOptions) -> Result<(f64, DVector<f64>, Status)> {
        let n = self.alpha_k1.len();
        let x0 = f0.cloned().unwrap_or_else(|| DVector::zeros(n));
        let mut obj = FnObjective::new(n, |f: &DVector<f64>| {
            let (v, _, gf) = self.semidual(theta, f)?;
            Ok((v, gf))
        });
        let res = lbfgs(&mut obj, x0, opts)?;
        Ok((res.value, res.x, res.status))
    }

    /// Balanced entropic OT `α^{k+1} → α^k` with cost `‖y − x‖²` at scale `η`.
    pub fn snapshot_ot(&self, tol: f64, max_iter: usize) -> Result<SnapshotOt> {
        let problem = |eta: f64| {
            UotProblem::new(
                self.alpha_k1.clone(),
                self.alpha_k.clone(),
                self.dist.clone(),
                eta,
                Divergence::Balanced,
                Divergence::Balanced,
            )
        };
        // η-scaling: warm-start from a coarse regularization down to `eta`.
        let mut eta = self.dist.amax().max(self.eta);
        let mut warm: Option<DualPotentials> = None;
        while eta > self.eta {
            let p = problem(eta)?;
            warm = Some(solve_sinkhorn(&p, tol.max(1e-6), max_iter, warm.as_ref())?);
            eta = (eta / 4.0).max(self.eta);
        }
        let prob = problem(self.eta)?;
        let pots: DualPotentials = solve_sinkhorn(&prob, tol, max_iter, warm.as_ref())?;
        let (k, _, _) = dual_objective(&prob, &pots);
        let plan = round_to_marginals(primal_from_dual(&prob, &pots).plan, self.alpha_k1.weights(), self.alpha_k.weights());
        Ok(SnapshotOt {
            value: self.eta - k,
            f: pots.f,
            g: pots.g,
            plan,
        })
    }

    /// The gap `F̃_r(θ) = min_f S(V_θ, f) − r′ + W²_{2,η}/τ`.
    pub fn sharpened_gap(&self, theta: &DVector<f64>, w: f64, opts: &LbfgsOptions) -> Result<(f64, Status)> {
        let (min_s, _, status) = self.semidual_min(theta, None, opts)?;
        Ok((min_s - self.r_prime() + w / self.tau, status))
    }

    /// The iJKO* loss `Σ γ_ij ‖∇V_θ(y_i) + (y_i − x_j)/τ‖²` and its gradient.
    pub fn ijko_star_loss(&self, theta: &DVector<f64>, plan: &DMatrix<f64>) -> Result<(f64, DVector<f64>)> {
        let q = IjkoStarQuadratic::new(self, plan)?;
        Ok(q.value_grad(theta))
    }
}

/// `F(θ) = θᵀQθ + 2ℓᵀθ + c`, the iJKO* loss as an explicit quadratic.
#[derive(Debug, Clone)]
pub struct IjkoStarQuadratic {
    pub q: DMatrix<f64>,
    pub l: DVector<f64>,
    pub c: f64,
}

impl IjkoStarQuadratic {
    pub fn new(inst: &IjkoInstance, plan: &DMatrix<f64>) -> Result<Self> {
        let (n, m) = (inst.alpha_k1.len(), inst.alpha_k.len());
        if plan.shape() != (n, m) {
            return invalid("plan shape does not match the snapshots");
        }
        let rows = plan.column_sum();
        let cols = plan.row_sum().transpose();
        let scale = 1e-6 * inst.alpha_k1.mass().max(1.0);
        if (rows - inst.alpha_k1.weights()).amax() > scale || (cols - inst.alpha_k.weights()).amax() > scale {
            return invalid("plan marginals do not match the snapshots");
        }
        let d = inst.alpha_k1.dim();
        let s = inst.dim();
        let tau = inst.tau;
        let mut q = DMatrix::zeros(s, s);
        let mut l = DVector::zeros(s);
        let mut c = 0.0;
        for i in 0..n {
            let y = inst.alpha_k1.point(i);
            let mut jac = DMatrix::zeros(d, s);
            for (k, feat) in inst.potential.iter().enumerate() {
                let g = feat.grad_potential(y)?;
                jac.column_mut(k).copy_from_slice(&g);
            }
            let bi: f64 = plan.row(i).sum();
            let mut disp = DVector::zeros(d);
            for j in 0..m {
                let w = plan[(i, j)];
                if w == 0.0 {
                    continue;
                }
                let x = inst.alpha_k.point(j);
                let mut sq = 0.0;
                for t in 0..d {
                    let u = (y[t] - x[t]) / tau;
                    disp[t] += w * u;
                    sq += u * u;
                }
                c += w * sq;
            }
            q += jac.transpose() * &jac * bi;
            l += jac.transpose() * disp;
        }
        Ok(Self { q, l, c })
    }

    pub fn value_grad(&self, theta: &DVector<f64>) -> (f64, DVector<f64>) {
        let qt = &self.q * theta;
        let value = theta.dot(&qt) + 2.0 * self.l.dot(theta) + self.c;
        (value, (qt + &self.l) * 2.0)
    }

    /// The minimizer `−Q⁻¹ℓ`, when `Q` is invertible.
    pub fn argmin(&self) -> Option<DVector<f64>> {
        self.q.clone().cholesky().map(|ch| -ch.solve(&self.l))
    }
}

/// `½ Var_{α^{k+1}}[V_θ + f*/τ]`, the `r → ∞` limit of `r F̃_r`.
pub fn variance_limit_loss(inst: &IjkoInstance, theta: &DVector<f64>, f_star: &DVector<f64>) -> Result<f64> {
    if f_star.len() != inst.alpha_k1.len() {
        return invalid("potential has the wrong length");
    }
    let h = inst.potential_values(theta) + f_star / inst.tau;
    Ok(0.5 * weighted_variance(inst.alpha_k1.weights(), &h))
}

fn weighted_variance(w: &DVector<f64>, h: &DVector<f64>) -> f64 {
    let mass = w.sum();
    let mean = w.dot(h) / mass;
    w.iter().zip(h.iter()).map(|(wi, hi)| wi * (hi - mean).powi(2)).sum::<f64>() / mass
}

/// `(KL(p_t | q), t² Var_q[g] / 2)` with `p_t ∝ e^{−tg} q`.
pub fn kl_expansion_probe(q: &DVector<f64>, g: &DVector<f64>, t: f64) -> Result<(f64, f64)> {
    if q.len() != g.len() || q.is_empty() {
        return invalid("q and g must have the same nonzero length");
    }
    if !(t > 0.0) {
        return invalid("t must be positive");
    }
    if q.iter().any(|w| *w < 0.0) || (q.sum() - 1.0).abs() > PROBABILITY_TOL {
        return invalid("q must be a probability vector");
    }
    let gmin = g.iter().zip(q.iter()).filter(|(_, w)| **w > 0.0).map(|(v, _)| *v).fold(f64::INFINITY, f64::min);
    // log Z relative to the shift e^{−t gmin}
    let terms: Vec<f64> = g.iter().map(|v| (-t * (v - gmin)).exp()).collect();
    let z: f64 = q.iter().zip(&terms).map(|(w, e)| w * e).sum();
    let log_z = z.ln();
    let mut kl = 0.0;
    for i in 0..q.len() {
        if q[i] == 0.0 {
            continue;
        }
        let p = q[i] * terms[i] / z;
        kl += p * (-t * (g[i] - gmin) - log_z);
    }
    Ok((kl, 0.5 * t * t * weighted_variance(q, g)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_point_semidual() {
        let pt = DMatrix::from_element(1, 1, 0.0);
        let m = DiscreteMeasure::uniform(pt, 1.0).unwrap();
        let inst = IjkoInstance::new(m.clone(), m, 1.0, 1.0, 3.0, vec![Feature::XCoord { i: 0 }]).unwrap();
        let (v, _, _) = inst.semidual_with_s(&DVector::zeros(1), &DVector::zeros(1), 2.0).unwrap();
        assert!((v - 2.0).abs() < 1e-15);
        assert!(inst.semidual_with_s(&DVector::zeros(1), &DVector::zeros(1), 0.0).is_err());
    }

    #[test]
    fn constant_tilt_has_zero_kl() {
        let q = DVector::from_vec(vec![0.2, 0.3, 0.5]);
        let (kl, pred) = kl_expansion_probe(&q, &DVector::from_element(3, 4.0), 0.1).unwrap();
        assert!(kl.abs() < 1e-17 && pred == 0.0);
    }
}
