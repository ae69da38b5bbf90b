//! Forward entropic unbalanced optimal transport.
//!
//! Primal:
//!
//! ```text
//! min_π ⟨c, π⟩ + η KL(π | α⊗β) + D_φ₁(π₁|α) + D_φ₂(π₂|β)
//! ```
//!
//! Dual (minimized):
//!
//! ```text
//! K(f, g) = ⟨φ₁*(−f), α⟩ + ⟨φ₂*(−g), β⟩ + η ⟨exp((f⊕g − c)/η), α⊗β⟩
//! ```
//!
//! with `primal = η m_α m_β − min K`. The optimal plan has density
//! `p = exp((f⊕g − c)/η)` with respect to `α⊗β`. Cost entries may be `+∞`,
//! which forbids the corresponding cell.

use nalgebra::{DMatrix, DVector};

use crate::divergences::{Divergence, EQUALITY_TOL};
use crate::error::{invalid, Error, Result};
use crate::measures::DiscreteMeasure;

pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone)]
pub struct UotProblem {
    pub alpha: DiscreteMeasure,
    pub beta: DiscreteMeasure,
    pub cost: DMatrix<f64>,
    pub eta: f64,
    pub div1: Divergence,
    pub div2: Divergence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gauge {
    None,
    AlphaMeanZero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualPotentials {
    pub f: DVector<f64>,
    pub g: DVector<f64>,
    pub gauge: Gauge,
}

impl DualPotentials {
    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            f: DVector::zeros(n),
            g: DVector::zeros(m),
            gauge: Gauge::None,
        }
    }
}

/// Optimal plan `π = p · (α⊗β)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    pub density: DMatrix<f64>,
    /// Cell masses `p_ij α_i β_j`.
    pub plan: DMatrix<f64>,
    pub mass: f64,
}

impl Coupling {
    pub fn first_marginal(&self) -> DVector<f64> {
        row_sums(&self.plan)
    }

    pub fn second_marginal(&self) -> DVector<f64> {
        col_sums(&self.plan)
    }
}

pub(crate) fn row_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.nrows(), m.row_iter().map(|r| r.sum()))
}

pub(crate) fn col_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum()))
}

/// Iteration trace of [`solve_sinkhorn_traced`].
#[derive(Debug, Clone)]
pub struct SinkhornTrace {
    pub potentials: DualPotentials,
    pub residuals: Vec<f64>,
}

impl UotProblem {
    pub fn new(
        alpha: DiscreteMeasure,
        beta: DiscreteMeasure,
        cost: DMatrix<f64>,
        eta: f64,
        div1: Divergence,
        div2: Divergence,
    ) -> Result<Self> {
        if cost.nrows() != alpha.len() || cost.ncols() != beta.len() {
            return invalid(format!(
                "cost is {}×{} but measures have {} and {} atoms",
                cost.nrows(),
                cost.ncols(),
                alpha.len(),
                beta.len()
            ));
        }
        if !(eta > 0.0) || !eta.is_finite() {
            return invalid(format!("eta must be positive, got {eta}"));
        }
        if cost.iter().any(|c| c.is_nan() || *c == f64::NEG_INFINITY) {
            return invalid("cost entries must be finite or +inf");
        }
        div1.validate()?;
        div2.validate()?;
        let (lo1, hi1) = div1.generator_domain();
        let (lo2, hi2) = div2.generator_domain();
        let (ma, mb) = (alpha.mass(), beta.mass());
        let lo = (lo1 * ma).max(lo2 * mb);
        let hi = (hi1 * ma).min(hi2 * mb);
        if lo > hi * (1.0 + EQUALITY_TOL) {
            return invalid(format!(
                "no coupling mass is compatible with {div1} on mass {ma} and {div2} on mass {mb}"
            ));
        }
        let (a, b) = (alpha.weights(), beta.weights());
        for i in 0..cost.nrows() {
            if a[i] > 0.0 && !(0..cost.ncols()).any(|j| b[j] > 0.0 && cost[(i, j)].is_finite()) {
                return invalid(format!("row {i} has no admissible cell"));
            }
        }
        for j in 0..cost.ncols() {
            if b[j] > 0.0 && !(0..cost.nrows()).any(|i| a[i] > 0.0 && cost[(i, j)].is_finite()) {
                return invalid(format!("column {j} has no admissible cell"));
            }
        }
        Ok(Self {
            alpha,
            beta,
            cost,
            eta,
            div1,
            div2,
        })
    }

    pub fn n(&self) -> usize {
        self.alpha.len()
    }

    pub fn m(&self) -> usize {
        self.beta.len()
    }

    fn balanced(&self) -> bool {
        self.div1 == Divergence::Balanced && self.div2 == Divergence::Balanced
    }
}

fn log_weights(w: &DVector<f64>) -> Vec<f64> {
    w.iter().map(|v| if *v > 0.0 { v.ln() } else { f64::NEG_INFINITY }).collect()
}

/// `−η log Σ_j exp(log w_j + (g_j − c_j)/η)`; `+∞` when every term vanishes.
pub fn soft_c_transform(cost_row: &[f64], g: &[f64], log_w: &[f64], eta: f64) -> f64 {
    let mut mx = f64::NEG_INFINITY;
    for j in 0..g.len() {
        let v = log_w[j] + (g[j] - cost_row[j]) / eta;
        if v > mx {
            mx = v;
        }
    }
    if mx == f64::NEG_INFINITY {
        return f64::INFINITY;
    }
    let mut s = 0.0;
    for j in 0..g.len() {
        let v = log_w[j] + (g[j] - cost_row[j]) / eta;
        s += (v - mx).exp();
    }
    -eta * (mx + s.ln())
}

struct Workspace {
    ct: DMatrix<f64>,
    la: Vec<f64>,
    lb: Vec<f64>,
}

impl Workspace {
    fn new(prob: &UotProblem) -> Self {
        Self {
            ct: prob.cost.transpose(),
            la: log_weights(prob.alpha.weights()),
            lb: log_weights(prob.beta.weights()),
        }
    }

    fn update_f(&self, prob: &UotProblem, g: &DVector<f64>, out: &mut DVector<f64>) {
        let n = prob.n();
        let m = prob.m();
        let ct = self.ct.as_slice();
        for i in 0..n {
            let s = soft_c_transform(&ct[i * m..(i + 1) * m], g.as_slice(), &self.lb, prob.eta);
            out[i] = if s.is_finite() {
                -prob.div1.aprox(-s, prob.eta)
            } else {
                0.0
            };
        }
    }

    fn update_g(&self, prob: &UotProblem, f: &DVector<f64>, out: &mut DVector<f64>) {
        let n = prob.n();
        let c = prob.cost.as_slice();
        for j in 0..prob.m() {
            let s = soft_c_transform(&c[j * n..(j + 1) * n], f.as_slice(), &self.la, prob.eta);
            out[j] = if s.is_finite() {
                -prob.div2.aprox(-s, prob.eta)
            } else {
                0.0
            };
        }
    }
}

fn sup_dist(a: &DVector<f64>, b: &DVector<f64>, w: &DVector<f64>) -> f64 {
    let mut r: f64 = 0.0;
    for i in 0..a.len() {
        if w[i] > 0.0 {
            r = r.max((a[i] - b[i]).abs());
        }
    }
    r
}

/// Sinkhorn fixed point `f = −Aprox(−S_β(g))`, `g = −Aprox(−S_α(f))`.
///
/// Stops once `max(‖f − T₁(g)‖∞, ‖g − T₂(f)‖∞) ≤ tol` over atoms of positive
/// weight. Balanced problems are returned with `Σ f_i α_i = 0`.
pub fn solve_sinkhorn(
    prob: &UotProblem,
    tol: f64,
    max_iter: usize,
    warm: Option<&DualPotentials>,
) -> Result<DualPotentials> {
    solve_sinkhorn_traced(prob, tol, max_iter, warm).map(|t| t.potentials)
}

/// [`solve_sinkhorn`] keeping the residual of every iteration.
pub fn solve_sinkhorn_traced(
    prob: &UotProblem,
    tol: f64,
    max_iter: usize,
    warm: Option<&DualPotentials>,
) -> Result<SinkhornTrace> {
    if !(tol > 0.0) {
        return invalid("tol must be positive");
    }
    let (n, m) = (prob.n(), prob.m());
    let ws = Workspace::new(prob);
    let mut f = match warm {
        Some(p) if p.f.len() == n && p.f.iter().all(|v| v.is_finite()) => p.f.clone(),
        _ => DVector::zeros(n),
    };
    let mut g = DVector::zeros(m);
    ws.update_g(prob, &f, &mut g);
    let mut f_next = DVector::zeros(n);
    let mut residuals = Vec::new();
    let a = prob.alpha.weights();
    let mut converged = false;
    for _ in 0..max_iter {
        ws.update_f(prob, &g, &mut f_next);
        let r = sup_dist(&f_next, &f, a);
        residuals.push(r);
        if r <= tol {
            converged = true;
            break;
        }
        std::mem::swap(&mut f, &mut f_next);
        ws.update_g(prob, &f, &mut g);
    }
    if !converged {
        return Err(Error::Diverged {
            residual: residuals.last().copied().unwrap_or(f64::INFINITY),
            iterations: max_iter,
        });
    }
    let mut pots = DualPotentials {
        f,
        g,
        gauge: Gauge::None,
    };
    if prob.balanced() {
        let lambda = pots.f.dot(a) / prob.alpha.mass();
        pots.f.add_scalar_mut(-lambda);
        pots.g.add_scalar_mut(lambda);
        pots.gauge = Gauge::AlphaMeanZero;
    }
    Ok(SinkhornTrace {
        potentials: pots,
        residuals,
    })
}

/// `max(‖f − T₁(g)‖∞, ‖g − T₂(f)‖∞)` over atoms of positive weight.
pub fn fixed_point_residual(prob: &UotProblem, pots: &DualPotentials) -> f64 {
    let ws = Workspace::new(prob);
    let mut tf = DVector::zeros(prob.n());
    let mut tg = DVector::zeros(prob.m());
    ws.update_f(prob, &pots.g, &mut tf);
    ws.update_g(prob, &pots.f, &mut tg);
    sup_dist(&tf, &pots.f, prob.alpha.weights()).max(sup_dist(&tg, &pots.g, prob.beta.weights()))
}

/// `K(f, g)` and its gradient `(∂_f K, ∂_g K)`.
pub fn dual_objective(prob: &UotProblem, pots: &DualPotentials) -> (f64, DVector<f64>, DVector<f64>) {
    let (a, b) = (prob.alpha.weights(), prob.beta.weights());
    let (n, m) = (prob.n(), prob.m());
    let eta = prob.eta;
    let mut value = 0.0;
    let mut gf = DVector::zeros(n);
    let mut gg = DVector::zeros(m);
    for i in 0..n {
        if a[i] > 0.0 {
            value += a[i] * prob.div1.conjugate(-pots.f[i]);
            gf[i] = -a[i] * prob.div1.conjugate_deriv(-pots.f[i]);
        }
    }
    for j in 0..m {
        if b[j] > 0.0 {
            value += b[j] * prob.div2.conjugate(-pots.g[j]);
            gg[j] = -b[j] * prob.div2.conjugate_deriv(-pots.g[j]);
        }
    }
    for j in 0..m {
        if b[j] == 0.0 {
            continue;
        }
        for i in 0..n {
            if a[i] == 0.0 {
                continue;
            }
            let e = ((pots.f[i] + pots.g[j] - prob.cost[(i, j)]) / eta).exp() * a[i] * b[j];
            value += eta * e;
            gf[i] += e;
            gg[j] += e;
        }
    }
    (value, gf, gg)
}

/// Plan density `p_ij = exp((f_i + g_j − c_ij)/η)`.
pub fn primal_from_dual(prob: &UotProblem, pots: &DualPotentials) -> Coupling {
    let (a, b) = (prob.alpha.weights(), prob.beta.weights());
    let density = DMatrix::from_fn(prob.n(), prob.m(), |i, j| {
        ((pots.f[i] + pots.g[j] - prob.cost[(i, j)]) / prob.eta).exp()
    });
    let plan = DMatrix::from_fn(prob.n(), prob.m(), |i, j| density[(i, j)] * a[i] * b[j]);
    let mass = plan.sum();
    Coupling { density, plan, mass }
}

/// Primal objective at a plan given by its cell masses.
pub fn primal_value(prob: &UotProblem, plan: &DMatrix<f64>) -> f64 {
    let (a, b) = (prob.alpha.weights(), prob.beta.weights());
    let transport: f64 = prob
        .cost
        .iter()
        .zip(plan.iter())
        .map(|(c, p)| if *p > 0.0 { c * p } else { 0.0 })
        .sum();
    let ent = generalized_kl(plan, a, b);
    let d1 = prob.div1.divergence_value(row_sums(plan).as_slice(), a.as_slice());
    let d2 = prob.div2.divergence_value(col_sums(plan).as_slice(), b.as_slice());
    transport + prob.eta * ent + d1 + d2
}

/// `KL(π | α⊗β) = Σ π log(π/(αβ)) − π + αβ`.
pub fn generalized_kl(plan: &DMatrix<f64>, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let mut s = 0.0;
    for j in 0..plan.ncols() {
        for i in 0..plan.nrows() {
            let p = plan[(i, j)];
            let r = a[i] * b[j];
            if p > 0.0 {
                if r == 0.0 {
                    return f64::INFINITY;
                }
                s += p * (p / r).ln() - p + r;
            } else {
                s += r;
            }
        }
    }
    s
}

/// `η m_α m_β − K(f, g)`, the primal value certified by a dual pair.
pub fn dual_value(prob: &UotProblem, pots: &DualPotentials) -> f64 {
    prob.eta * prob.alpha.mass() * prob.beta.mass() - dual_objective(prob, pots).0
}

/// `⟨h, π⟩ = Σ h_ij p_ij α_i β_j`.
pub fn test_integral(coupling: &Coupling, prob: &UotProblem, h: &DMatrix<f64>) -> Result<f64> {
    if h.shape() != coupling.density.shape() || h.shape() != (prob.n(), prob.m()) {
        return invalid("test function shape does not match the coupling");
    }
    Ok(h.component_mul(&coupling.plan).sum())
}
