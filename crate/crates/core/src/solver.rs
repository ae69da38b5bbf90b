//! L-BFGS with a strong-Wolfe line search, and variational penalties.
//!
//! Nonsmooth penalties are handled by overparametrization:
//!
//! * `λ‖θ‖₁ = min_{u∘v=θ} λ/2 (‖u‖² + ‖v‖²)`
//! * `λ Σθ` on `θ ≥ 0` via `θ = u∘u`
//! * `λ‖Θ‖_* = min_{XY=Θ} λ/2 (‖X‖²_F + ‖Y‖²_F)`
//!
//! so that the penalized problem becomes smooth in the factors.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::thin_svd;
use crate::measures::rng;

/// A smooth objective over `x = (θ, aux)`. Only the first [`dim`](Self::dim)
/// coordinates are penalized.
pub trait Objective {
    fn dim(&self) -> usize;

    fn aux_dim(&self) -> usize {
        0
    }

    fn eval(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)>;
}

/// Closure adapter for unpenalized objectives.
pub struct FnObjective<F> {
    dim: usize,
    aux_dim: usize,
    f: F,
}

impl<F> FnObjective<F>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, aux_dim: 0, f }
    }

    pub fn with_aux(dim: usize, aux_dim: usize, f: F) -> Self {
        Self { dim, aux_dim, f }
    }
}

impl<F> Objective for FnObjective<F>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn aux_dim(&self) -> usize {
        self.aux_dim
    }

    fn eval(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        (self.f)(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LbfgsOptions {
    pub memory: usize,
    /// Stop when `‖∇f‖_∞ ≤ grad_tol`.
    pub grad_tol: f64,
    pub max_iter: usize,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 10,
            grad_tol: 1e-8,
            max_iter: 1000,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Converged,
    MaxIter,
    /// No further decrease could be found in floating point.
    Stalled,
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad: DVector<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: Status,
}

impl LbfgsResult {
    pub fn grad_norm_inf(&self) -> f64 {
        self.grad.amax()
    }
}

struct Point {
    alpha: f64,
    f: f64,
    g: DVector<f64>,
    dphi: f64,
}

struct LineSearch<'a, O: Objective> {
    obj: &'a mut O,
    x: &'a DVector<f64>,
    d: &'a DVector<f64>,
    f0: f64,
    dphi0: f64,
    opts: &'a LbfgsOptions,
    evals: usize,
    best: Option<Point>,
}

impl<O: Objective> LineSearch<'_, O> {
    fn probe(&mut self, alpha: f64) -> Result<Point> {
        self.evals += 1;
        let (f, g) = self.obj.eval(&(self.x + self.d * alpha))?;
        let f = if f.is_finite() && g.iter().all(|v| v.is_finite()) { f } else { f64::INFINITY };
        let dphi = if f.is_finite() { g.dot(self.d) } else { f64::NAN };
        let p = Point { alpha, f, g, dphi };
        if p.f < self.f0 + self.opts.c1 * alpha * self.dphi0 && self.best.as_ref().is_none_or(|b| p.f < b.f) {
            self.best = Some(Point {
                alpha,
                f: p.f,
                g: p.g.clone(),
                dphi: p.dphi,
            });
        }
        Ok(p)
    }

    fn armijo_fails(&self, p: &Point) -> bool {
        !(p.f <= self.f0 + self.opts.c1 * p.alpha * self.dphi0)
    }

    fn curvature_ok(&self, p: &Point) -> bool {
        p.dphi.abs() <= -self.opts.c2 * self.dphi0
    }

    fn run(mut self, step0: f64) -> Result<(Option<Point>, usize)> {
        let mut prev = Point {
            alpha: 0.0,
            f: self.f0,
            g: DVector::zeros(0),
            dphi: self.dphi0,
        };
        let mut alpha = step0;
        for i in 0..self.opts.max_line_search {
            let p = self.probe(alpha)?;
            if self.armijo_fails(&p) || (i > 0 && p.f >= prev.f) {
                return self.zoom(prev, p);
            }
            if self.curvature_ok(&p) {
                return Ok((Some(p), self.evals));
            }
            if p.dphi >= 0.0 {
                return self.zoom(p, prev);
            }
            alpha *= 2.0;
            prev = p;
        }
        let evals = self.evals;
        Ok((self.best.take(), evals))
    }

    fn zoom(mut self, mut lo: Point, mut hi: Point) -> Result<(Option<Point>, usize)> {
        for _ in 0..self.opts.max_line_search {
            let width = (hi.alpha - lo.alpha).abs();
            if width <= 1e-16 * lo.alpha.abs().max(hi.alpha.abs()).max(1e-300) {
                break;
            }
            let alpha = interpolate(&lo, &hi);
            let p = self.probe(alpha)?;
            if self.armijo_fails(&p) || p.f >= lo.f {
                hi = p;
            } else {
                if self.curvature_ok(&p) {
                    return Ok((Some(p), self.evals));
                }
                if p.dphi * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = lo;
                }
                lo = p;
            }
        }
        let evals = self.evals;
        Ok((self.best.take(), evals))
    }
}

/// Safeguarded cubic step inside `(lo, hi)`, bisection when unreliable.
fn interpolate(lo: &Point, hi: &Point) -> f64 {
    let (a, b) = (lo.alpha, hi.alpha);
    let mid = 0.5 * (a + b);
    if !hi.f.is_finite() || !hi.dphi.is_finite() {
        return mid;
    }
    let d1 = lo.dphi + hi.dphi - 3.0 * (lo.f - hi.f) / (a - b);
    let disc = d1 * d1 - lo.dphi * hi.dphi;
    if disc < 0.0 {
        return mid;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (hi.dphi + d2 - d1) / (hi.dphi - lo.dphi + 2.0 * d2);
    let (left, right) = (a.min(b), a.max(b));
    let margin = 0.1 * (right - left);
    if t.is_finite() && t > left + margin && t < right - margin {
        t
    } else {
        mid
    }
}

fn two_loop(g: &DVector<f64>, mem: &VecDeque<(DVector<f64>, DVector<f64>, f64)>) -> DVector<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(mem.len());
    for (s, y, rho) in mem.iter().rev() {
        let a = rho * s.dot(&q);
        q.axpy(-a, y, 1.0);
        alphas.push(a);
    }
    if let Some((s, y, _)) = mem.back() {
        q *= s.dot(y) / y.norm_squared();
    }
    for ((s, y, rho), a) in mem.iter().zip(alphas.into_iter().rev()) {
        let b = rho * y.dot(&q);
        q.axpy(a - b, s, 1.0);
    }
    -q
}

/// Minimizes a smooth objective from `x0`.
pub fn lbfgs<O: Objective>(obj: &mut O, x0: DVector<f64>, opts: &LbfgsOptions) -> Result<LbfgsResult> {
    if x0.len() != obj.dim() + obj.aux_dim() {
        return invalid("initial point has the wrong length");
    }
    let mut x = x0;
    let (mut f, mut g) = obj.eval(&x)?;
    if !f.is_finite() {
        return invalid("objective is not finite at the initial point");
    }
    let mut evals = 1;
    let mut mem: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut status = Status::MaxIter;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        if g.amax() <= opts.grad_tol {
            status = Status::Converged;
            break;
        }
        iterations += 1;
        let mut d = two_loop(&g, &mem);
        if !(g.dot(&d) < 0.0) {
            mem.clear();
            d = -&g;
        }
        let step0 = if mem.is_empty() { (1.0 / g.norm()).min(1.0) } else { 1.0 };
        let dphi0 = g.dot(&d);
        let ls = LineSearch {
            obj,
            x: &x,
            d: &d,
            f0: f,
            dphi0,
            opts,
            evals: 0,
            best: None,
        };
        let (point, used) = ls.run(step0)?;
        evals += used;
        let Some(p) = point else {
            if mem.is_empty() {
                status = Status::Stalled;
                break;
            }
            mem.clear();
            continue;
        };
        let s = &d * p.alpha;
        let y = &p.g - &g;
        let sy = s.dot(&y);
        x += &s;
        let decrease = f - p.f;
        f = p.f;
        g = p.g;
        if sy > 1e-12 * s.norm() * y.norm() {
            if mem.len() == opts.memory {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        }
        if decrease <= 0.0 && mem.is_empty() {
            status = Status::Stalled;
            break;
        }
    }
    if status == Status::MaxIter && g.amax() <= opts.grad_tol {
        status = Status::Converged;
    }
    Ok(LbfgsResult {
        x,
        value: f,
        grad: g,
        iterations,
        evaluations: evals,
        status,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Penalty {
    None,
    /// `λ‖θ‖₁`.
    L1 { lambda: f64 },
    /// `λ Σ θ` restricted to `θ ≥ 0`.
    NonnegL1 { lambda: f64 },
    /// `λ‖mat(θ)‖_*` with `θ` the column-major vectorization of a
    /// `rows × cols` matrix.
    Nuclear { lambda: f64, rows: usize, cols: usize },
}

impl Penalty {
    pub fn lambda(&self) -> f64 {
        match *self {
            Penalty::None => 0.0,
            Penalty::L1 { lambda } | Penalty::NonnegL1 { lambda } | Penalty::Nuclear { lambda, .. } => lambda,
        }
    }

    pub fn with_lambda(&self, lambda: f64) -> Penalty {
        match *self {
            Penalty::None => Penalty::None,
            Penalty::L1 { .. } => Penalty::L1 { lambda },
            Penalty::NonnegL1 { .. } => Penalty::NonnegL1 { lambda },
            Penalty::Nuclear { rows, cols, .. } => Penalty::Nuclear { lambda, rows, cols },
        }
    }

    /// Penalty value at `θ` (`+∞` off the nonnegative orthant for `NonnegL1`).
    pub fn value(&self, theta: &DVector<f64>) -> f64 {
        match *self {
            Penalty::None => 0.0,
            Penalty::L1 { lambda } => lambda * theta.lp_norm(1),
            Penalty::NonnegL1 { lambda } => {
                if theta.iter().any(|t| *t < 0.0) {
                    f64::INFINITY
                } else {
                    lambda * theta.sum()
                }
            }
            Penalty::Nuclear { lambda, rows, cols } => {
                let m = DMatrix::from_column_slice(rows, cols, theta.as_slice());
                lambda * m.singular_values().sum()
            }
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        let lambda = self.lambda();
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return invalid("penalty weight must be nonnegative");
        }
        if let Penalty::Nuclear { rows, cols, .. } = *self {
            if rows * cols != dim {
                return invalid(format!("nuclear penalty expects {rows}×{cols} = {dim} parameters"));
            }
        }
        Ok(())
    }

    fn factor_len(&self, dim: usize) -> usize {
        match *self {
            Penalty::None | Penalty::NonnegL1 { .. } => dim,
            Penalty::L1 { .. } => 2 * dim,
            Penalty::Nuclear { rows, cols, .. } => (rows + cols) * rows.min(cols),
        }
    }

    /// `θ` from the factors.
    pub fn assemble(&self, w: &[f64], dim: usize) -> DVector<f64> {
        match *self {
            Penalty::None => DVector::from_column_slice(w),
            Penalty::L1 { .. } => DVector::from_fn(dim, |i, _| w[i] * w[dim + i]),
            Penalty::NonnegL1 { .. } => DVector::from_fn(dim, |i, _| w[i] * w[i]),
            Penalty::Nuclear { rows, cols, .. } => {
                let k = rows.min(cols);
                let x = DMatrix::from_column_slice(rows, k, &w[..rows * k]);
                let y = DMatrix::from_column_slice(k, cols, &w[rows * k..]);
                let m = x * y;
                DVector::from_column_slice(m.as_slice())
            }
        }
    }

    /// Smooth penalty in factor space and the chain rule for `∇_θ`.
    fn factor_value_grad(&self, w: &[f64], g_theta: &DVector<f64>, dim: usize) -> (f64, Vec<f64>) {
        match *self {
            Penalty::None => (0.0, g_theta.iter().copied().collect()),
            Penalty::L1 { lambda } => {
                let mut grad = vec![0.0; 2 * dim];
                let mut pen = 0.0;
                for i in 0..dim {
                    let (u, v) = (w[i], w[dim + i]);
                    pen += 0.5 * lambda * (u * u + v * v);
                    grad[i] = g_theta[i] * v + lambda * u;
                    grad[dim + i] = g_theta[i] * u + lambda * v;
                }
                (pen, grad)
            }
            Penalty::NonnegL1 { lambda } => {
                let mut pen = 0.0;
                let grad = (0..dim)
                    .map(|i| {
                        pen += lambda * w[i] * w[i];
                        2.0 * w[i] * (g_theta[i] + lambda)
                    })
                    .collect();
                (pen, grad)
            }
            Penalty::Nuclear { lambda, rows, cols } => {
                let k = rows.min(cols);
                let x = DMatrix::from_column_slice(rows, k, &w[..rows * k]);
                let y = DMatrix::from_column_slice(k, cols, &w[rows * k..]);
                let g = DMatrix::from_column_slice(rows, cols, g_theta.as_slice());
                let gx = &g * y.transpose() + &x * lambda;
                let gy = x.transpose() * &g + &y * lambda;
                let pen = 0.5 * lambda * (x.norm_squared() + y.norm_squared());
                let mut grad = gx.as_slice().to_vec();
                grad.extend_from_slice(gy.as_slice());
                (pen, grad)
            }
        }
    }

    /// Balanced factors of `θ` plus Gaussian jitter of size `scale`.
    fn factorize(&self, theta: &DVector<f64>, scale: f64, seed: u64) -> Vec<f64> {
        let mut r = rng(seed);
        let mut jitter = move || -> f64 { let z: f64 = StandardNormal.sample(&mut r);
            scale * z };
        match *self {
            Penalty::None => theta.iter().map(|t| t + jitter()).collect(),
            Penalty::L1 { .. } => {
                let dim = theta.len();
                let mut w = vec![0.0; 2 * dim];
                for i in 0..dim {
                    let s = theta[i].abs().sqrt();
                    w[i] = theta[i].signum() * s + jitter();
                    w[dim + i] = s + jitter();
                }
                w
            }
            Penalty::NonnegL1 { .. } => theta.iter().map(|t| t.max(0.0).sqrt() + jitter()).collect(),
            Penalty::Nuclear { rows, cols, .. } => {
                let k = rows.min(cols);
                let m = DMatrix::from_column_slice(rows, cols, theta.as_slice());
                let (u, s, v) = thin_svd(&m, 0.0);
                let r = s.len();
                let x = DMatrix::from_fn(rows, k, |i, j| (if j < r { u[(i, j)] * s[j].sqrt() } else { 0.0 }) + jitter());
                let y = DMatrix::from_fn(k, cols, |i, j| (if i < r { s[i].sqrt() * v[(j, i)] } else { 0.0 }) + jitter());
                let mut w = x.as_slice().to_vec();
                w.extend_from_slice(y.as_slice());
                w
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizedOptions {
    pub lbfgs: LbfgsOptions,
    pub seed: u64,
    /// Standard deviation of the factor jitter.
    pub init_scale: f64,
}

impl Default for RegularizedOptions {
    fn default() -> Self {
        Self {
            lbfgs: LbfgsOptions::default(),
            seed: 0,
            init_scale: 1e-2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RegularizedResult {
    pub theta: DVector<f64>,
    pub aux: DVector<f64>,
    /// Smooth part plus penalty, evaluated in factor space.
    pub objective: f64,
    pub factors: Vec<f64>,
    pub status: Status,
    pub iterations: usize,
    pub evaluations: usize,
    /// `‖∇‖_∞` in factor space at exit.
    pub grad_norm: f64,
}

struct Lifted<'a, O: Objective> {
    inner: &'a mut O,
    penalty: Penalty,
    dim: usize,
    flen: usize,
}

impl<O: Objective> Objective for Lifted<'_, O> {
    fn dim(&self) -> usize {
        self.flen
    }

    fn aux_dim(&self) -> usize {
        self.inner.aux_dim()
    }

    fn eval(&mut self, w: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let theta = self.penalty.assemble(&w.as_slice()[..self.flen], self.dim);
        let mut x = theta.as_slice().to_vec();
        x.extend_from_slice(&w.as_slice()[self.flen..]);
        let (f, g) = self.inner.eval(&DVector::from_vec(x))?;
        let g_theta = g.rows(0, self.dim).into_owned();
        let (pen, mut grad) = self.penalty.factor_value_grad(&w.as_slice()[..self.flen], &g_theta, self.dim);
        grad.extend(g.iter().skip(self.dim));
        Ok((f + pen, DVector::from_vec(grad)))
    }
}

/// Minimizes `F(θ, aux) + penalty(θ)` in factor form, optionally warm
/// started from `(θ0, aux0)`.
pub fn solve_regularized<O: Objective>(
    obj: &mut O,
    penalty: Penalty,
    warm: Option<(&DVector<f64>, &DVector<f64>)>,
    opts: &RegularizedOptions,
) -> Result<RegularizedResult> {
    let dim = obj.dim();
    let aux_dim = obj.aux_dim();
    penalty.validate(dim)?;
    let (theta0, aux0) = match warm {
        Some((t, a)) => {
            if t.len() != dim || a.len() != aux_dim {
                return invalid("warm start has the wrong shape");
            }
            (t.clone(), a.clone())
        }
        None => (DVector::zeros(dim), DVector::zeros(aux_dim)),
    };
    let mut w0 = penalty.factorize(&theta0, opts.init_scale, opts.seed);
    w0.extend(aux0.iter());
    let flen = penalty.factor_len(dim);
    let mut lifted = Lifted {
        inner: obj,
        penalty,
        dim,
        flen,
    };
    let res = lbfgs(&mut lifted, DVector::from_vec(w0), &opts.lbfgs)?;
    let theta = penalty.assemble(&res.x.as_slice()[..flen], dim);
    Ok(RegularizedResult {
        theta,
        aux: res.x.rows(flen, aux_dim).into_owned(),
        objective: res.value,
        factors: res.x.as_slice()[..flen].to_vec(),
        status: res.status,
        iterations: res.iterations,
        evaluations: res.evaluations,
        grad_norm: res.grad_norm_inf(),
    })
}

/// Indices with `|θ_i| > tol`.
pub fn support(theta: &DVector<f64>, tol: f64) -> Vec<usize> {
    (0..theta.len()).filter(|&i| theta[i].abs() > tol).collect()
}

/// Number of singular values `≥ tol`.
pub fn numerical_rank(m: &DMatrix<f64>, tol: f64) -> usize {
    m.singular_values().iter().filter(|s| **s >= tol).count()
}

/// `(support, rank)` of `θ`. With a square `shape` the rank counts
/// eigenvalues of the symmetric part with `|λ| ≥ rank_tol`.
pub fn support_and_rank(
    theta: &DVector<f64>,
    shape: Option<(usize, usize)>,
    support_tol: f64,
    rank_tol: f64,
) -> (Vec<usize>, Option<usize>) {
    let rank = shape.map(|(r, c)| {
        let m = DMatrix::from_column_slice(r, c, theta.as_slice());
        if r == c {
            numerical_rank(&((&m + m.transpose()) * 0.5), rank_tol)
        } else {
            numerical_rank(&m, rank_tol)
        }
    });
    (support(theta, support_tol), rank)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = DVector::from_vec(vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)]);
        Ok((f, g))
    }

    #[test]
    fn rosenbrock_converges() {
        let mut obj = FnObjective::new(2, rosenbrock);
        let res = lbfgs(&mut obj, DVector::from_vec(vec![-1.2, 1.0]), &LbfgsOptions::default()).unwrap();
        assert_eq!(res.status, Status::Converged);
        assert!((res.x[0] - 1.0).abs() < 1e-7 && (res.x[1] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn l1_soft_threshold() {
        let c = DVector::from_vec(vec![3.0, -0.5, 0.2, -2.0]);
        let cc = c.clone();
        let mut obj = FnObjective::new(4, move |x: &DVector<f64>| Ok((0.5 * (x - &cc).norm_squared(), x - &cc)));
        let res = solve_regularized(&mut obj, Penalty::L1 { lambda: 1.0 }, None, &RegularizedOptions::default()).unwrap();
        let expect = [2.0, 0.0, 0.0, -1.0];
        for i in 0..4 {
            assert!((res.theta[i] - expect[i]).abs() < 1e-6, "{:?}", res.theta);
        }
        assert_eq!(support(&res.theta, 1e-4), vec![0, 3]);
    }

    #[test]
    fn penalty_values() {
        let t = DVector::from_vec(vec![1.0, 0.0, 0.0, -2.0]);
        assert_eq!(Penalty::L1 { lambda: 2.0 }.value(&t), 6.0);
        assert!(Penalty::NonnegL1 { lambda: 1.0 }.value(&t).is_infinite());
        let nuc = Penalty::Nuclear { lambda: 1.0, rows: 2, cols: 2 }.value(&t);
        assert!((nuc - 3.0).abs() < 1e-12);
    }
}
