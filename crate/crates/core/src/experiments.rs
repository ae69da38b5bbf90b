//! Synthetic experiments: sample-complexity sweeps, certificate sweeps,
//! support and rank recovery from Gaussian trajectories, and the `r → ∞`
//! sharpening limit.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::certificates::{
    gaussian_fy_hessian, gaussian_ijko_star_hessian, precertificate, symmetric_hessian, upper_triangular_hessian,
    ModelTangent,
};
use crate::cost_basis::{
    full_quadratic_features, symmetric_flatten, symmetric_quadratic_features, BasisMatrices, Feature,
};
use crate::divergences::Divergence;
use crate::error::{invalid, Result};
use crate::forward_uot::{primal_from_dual, solve_sinkhorn, UotProblem};
use crate::fy_loss::FyIuotLoss;
use crate::gaussian_oracle::{
    fit_quadratic, gauss_hermite_measure, limiting_losses, trajectory, QuadraticPotentialTruth,
};
use crate::ijko::{variance_limit_loss, IjkoInstance, IjkoStarQuadratic};
use crate::measures::{derive_seed, rng, sample_gaussian, DiscreteMeasure, GaussianSpec};
use crate::solver::{solve_regularized, LbfgsOptions, Objective, Penalty, RegularizedOptions, Status};

/// Default support threshold on `|θ_i|`.
pub const SUPPORT_TOL: f64 = 1e-5;
/// Default eigenvalue threshold for the rank.
pub const RANK_TOL: f64 = 1e-4;

const QUADRATURE_PRUNE: f64 = 1e-8;

impl Objective for FyIuotLoss {
    fn dim(&self) -> usize {
        FyIuotLoss::dim(self)
    }

    /// The `θ`-dependent Kantorovich value; it differs from the gap by a
    /// constant and stays finite when `Ω(π̂) = +∞`.
    fn eval(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let e = self.loss_and_grad(x)?;
        Ok((e.kantorovich, e.grad))
    }
}

/// `θᵀQθ + 2ℓᵀθ + c`.
impl Objective for IjkoStarQuadratic {
    fn dim(&self) -> usize {
        self.l.len()
    }

    fn eval(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        Ok(self.value_grad(x))
    }
}

/// Sum of iJKO semi-duals over consecutive snapshots, jointly in `θ` and the
/// per-step potentials `f^k`.
#[derive(Debug, Clone)]
pub struct JointSemidual {
    insts: Vec<IjkoInstance>,
    offsets: Vec<usize>,
    dim: usize,
}

impl JointSemidual {
    pub fn new(insts: Vec<IjkoInstance>) -> Result<Self> {
        let dim = insts.first().map(|i| i.dim()).ok_or_else(|| crate::Error::InvalidInput("no steps".into()))?;
        if insts.iter().any(|i| i.dim() != dim) {
            return invalid("steps use different potential bases");
        }
        let mut offsets = Vec::with_capacity(insts.len());
        let mut off = dim;
        for i in &insts {
            offsets.push(off);
            off += i.alpha_k1().len();
        }
        Ok(Self { insts, offsets, dim })
    }

    pub fn steps(&self) -> &[IjkoInstance] {
        &self.insts
    }
}

impl Objective for JointSemidual {
    fn dim(&self) -> usize {
        self.dim
    }

    fn aux_dim(&self) -> usize {
        self.insts.iter().map(|i| i.alpha_k1().len()).sum()
    }

    fn eval(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let theta = x.rows(0, self.dim).into_owned();
        let mut grad = DVector::zeros(x.len());
        let mut value = 0.0;
        for (inst, &off) in self.insts.iter().zip(&self.offsets) {
            let n = inst.alpha_k1().len();
            let f = x.rows(off, n).into_owned();
            let (v, gt, gf) = inst.semidual(&theta, &f)?;
            value += v;
            let mut head = grad.rows_mut(0, self.dim);
            head += gt;
            grad.rows_mut(off, n).copy_from(&gf);
        }
        Ok((value, grad))
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return invalid("need at least two points");
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return invalid("log-log fit needs positive data");
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// `per_decade` log-spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, per_decade: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo) || per_decade == 0 {
        return invalid("log grid needs 0 < lo ≤ hi and a positive density");
    }
    let decades = (hi / lo).log10();
    let steps = (decades * per_decade as f64).round() as usize;
    if steps == 0 {
        return Ok(vec![lo]);
    }
    Ok((0..=steps).map(|k| lo * 10f64.powf(decades * k as f64 / steps as f64)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearch {
    pub best_lambda: f64,
    pub best_metric: f64,
    /// `(λ, metric)` in grid order.
    pub curve: Vec<(f64, f64)>,
}

/// Evaluates `metric(λ)` on the grid and returns the minimizer, ties going to
/// the largest `λ`.
pub fn grid_search_lambda<F>(grid: &[f64], mut metric: F) -> Result<GridSearch>
where
    F: FnMut(f64) -> Result<f64>,
{
    if grid.is_empty() {
        return invalid("empty λ grid");
    }
    let mut curve = Vec::with_capacity(grid.len());
    for &l in grid {
        curve.push((l, metric(l)?));
    }
    Ok(best_of_curve(&curve))
}

/// Minimizer of a precomputed curve, ties going to the largest `λ`.
pub fn best_of_curve(curve: &[(f64, f64)]) -> GridSearch {
    let mut best = curve[0];
    for &(l, m) in &curve[1..] {
        if m < best.1 || (m == best.1 && l > best.0) {
            best = (l, m);
        }
    }
    GridSearch {
        best_lambda: best.0,
        best_metric: best.1,
        curve: curve.to_vec(),
    }
}

// ---------------------------------------------------------------------------
// Sample complexity

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSweepConfig {
    /// Atoms of the finite space `{0, 1/(K−1), …, 1}`.
    pub grid_points: usize,
    pub ns: Vec<usize>,
    pub seeds: usize,
    pub eta: f64,
    pub div1: Divergence,
    pub div2: Divergence,
    pub theta_star: Vec<f64>,
    /// `λ = lambda0 / √n`.
    pub lambda0: f64,
    pub seed: u64,
    #[serde(default)]
    pub lbfgs: LbfgsOptions,
}

impl Default for SampleSweepConfig {
    fn default() -> Self {
        Self {
            grid_points: 8,
            ns: vec![100, 200, 400, 800, 1600, 3200, 6400],
            seeds: 10,
            eta: 1.0,
            div1: Divergence::Kl { tau: 1.0 },
            div2: Divergence::Kl { tau: 1.0 },
            theta_star: vec![1.0, -0.5, 0.0],
            lambda0: 0.05,
            seed: 7,
            lbfgs: LbfgsOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSweepRow {
    pub n: usize,
    pub seed: usize,
    pub forward_error: f64,
    pub theta_error: f64,
    pub status: Status,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSweepResult {
    pub rows: Vec<SampleSweepRow>,
    pub mean_forward: Vec<f64>,
    pub mean_theta: Vec<f64>,
    pub forward_slope: f64,
    pub theta_slope: f64,
}

/// The population instance of the sample sweep.
#[derive(Debug, Clone)]
pub struct FinitePopulation {
    pub alpha: DiscreteMeasure,
    pub beta: DiscreteMeasure,
    pub basis: BasisMatrices,
    pub plan: DMatrix<f64>,
    pub test: DMatrix<f64>,
}

fn sample_features(k: usize, s: usize, seed: u64) -> Vec<DMatrix<f64>> {
    let mut r = rng(seed);
    (0..s)
        .map(|_| DMatrix::from_fn(k, k, |_, _| r.random_range(-1.0..1.0)))
        .collect()
}

impl SampleSweepConfig {
    pub fn population(&self) -> Result<FinitePopulation> {
        let k = self.grid_points;
        if k < 2 || self.theta_star.is_empty() {
            return invalid("sample sweep needs ≥ 2 grid points and a nonempty θ★");
        }
        let pts = DMatrix::from_fn(1, k, |_, i| i as f64 / (k - 1) as f64);
        let wa = DVector::from_fn(k, |i, _| (-(pts[i] - 0.3).powi(2) / 0.2).exp());
        let wb = DVector::from_fn(k, |i, _| (-(pts[i] - 0.7).powi(2) / 0.3).exp());
        let alpha = DiscreteMeasure::new(pts.clone(), &wa / wa.sum())?;
        let beta = DiscreteMeasure::new(pts.clone(), &wb / wb.sum())?;
        let phi0 = DMatrix::from_fn(k, k, |i, j| (pts[i] - pts[j]).powi(2));
        let phi = sample_features(k, self.theta_star.len(), derive_seed(self.seed, u64::MAX));
        let basis = BasisMatrices::from_parts(phi0, phi, alpha.weights().clone(), beta.weights().clone());
        let theta = DVector::from_column_slice(&self.theta_star);
        let plan = forward_plan(&alpha, &beta, basis.cost(&theta), self.eta, self.div1, self.div2)?;
        let test = DMatrix::from_fn(k, k, |i, j| (pts[i] + 2.0 * pts[j]).cos());
        Ok(FinitePopulation {
            alpha,
            beta,
            basis,
            plan,
            test,
        })
    }
}

fn forward_plan(
    alpha: &DiscreteMeasure,
    beta: &DiscreteMeasure,
    cost: DMatrix<f64>,
    eta: f64,
    div1: Divergence,
    div2: Divergence,
) -> Result<DMatrix<f64>> {
    let prob = UotProblem::new(alpha.clone(), beta.clone(), cost, eta, div1, div2)?;
    let pots = solve_sinkhorn(&prob, 1e-12, 1_000_000, None)?;
    Ok(primal_from_dual(&prob, &pots).plan)
}

/// Empirical version of a discrete law: `n` draws, counts scaled to `mass`.
fn empirical_counts<R: Rng>(probs: &[f64], n: usize, mass: f64, r: &mut R) -> Vec<f64> {
    let total: f64 = probs.iter().sum();
    let mut cdf = Vec::with_capacity(probs.len());
    let mut acc = 0.0;
    for p in probs {
        acc += p / total;
        cdf.push(acc);
    }
    let mut counts = vec![0.0; probs.len()];
    for _ in 0..n {
        let u: f64 = r.random();
        let idx = cdf.iter().position(|c| u < *c).unwrap_or(probs.len() - 1);
        counts[idx] += 1.0;
    }
    counts.iter().map(|c| mass * c / n as f64).collect()
}

/// One `(n, seed)` cell of the sample sweep.
pub fn sample_sweep_cell(cfg: &SampleSweepConfig, pop: &FinitePopulation, n: usize, seed_index: usize) -> Result<SampleSweepRow> {
    let k = cfg.grid_points;
    let cell_seed = derive_seed(cfg.seed, (n as u64) << 16 | seed_index as u64);
    let mut r = rng(cell_seed);
    let wa = empirical_counts(pop.alpha.weights().as_slice(), n, pop.alpha.mass(), &mut r);
    let wb = empirical_counts(pop.beta.weights().as_slice(), n, pop.beta.mass(), &mut r);
    let wp = empirical_counts(pop.plan.as_slice(), n, pop.plan.sum(), &mut r);
    let alpha_n = pop.alpha.with_weights(DVector::from_vec(wa))?;
    let beta_n = pop.beta.with_weights(DVector::from_vec(wb))?;
    let pi_n = DMatrix::from_vec(k, k, wp);
    let theta_star = DVector::from_column_slice(&cfg.theta_star);

    let plan_n = forward_plan(&alpha_n, &beta_n, pop.basis.cost(&theta_star), cfg.eta, cfg.div1, cfg.div2)?;
    let forward_error = (pop.test.component_mul(&(plan_n - &pop.plan))).sum().abs();

    let basis_n = BasisMatrices::from_parts(
        pop.basis.phi0.clone(),
        pop.basis.phi.clone(),
        alpha_n.weights().clone(),
        beta_n.weights().clone(),
    );
    let mut loss = FyIuotLoss::from_matrices(alpha_n, beta_n, pi_n, basis_n, cfg.eta, cfg.div1, cfg.div2)?;
    let lambda = cfg.lambda0 / (n as f64).sqrt();
    let opts = RegularizedOptions {
        lbfgs: cfg.lbfgs,
        seed: cell_seed,
        init_scale: 1e-2,
    };
    let res = solve_regularized(&mut loss, Penalty::L1 { lambda }, None, &opts)?;
    Ok(SampleSweepRow {
        n,
        seed: seed_index,
        forward_error,
        theta_error: (&res.theta - &theta_star).norm(),
        status: res.status,
    })
}

/// Aggregates sweep rows into per-`n` means and log-log slopes.
pub fn summarize_sample_sweep(ns: &[usize], rows: Vec<SampleSweepRow>) -> Result<SampleSweepResult> {
    let mut mean_forward = Vec::with_capacity(ns.len());
    let mut mean_theta = Vec::with_capacity(ns.len());
    for &n in ns {
        let cell: Vec<&SampleSweepRow> = rows.iter().filter(|r| r.n == n).collect();
        if cell.is_empty() {
            return invalid(format!("no rows for n = {n}"));
        }
        let c = cell.len() as f64;
        mean_forward.push(cell.iter().map(|r| r.forward_error).sum::<f64>() / c);
        mean_theta.push(cell.iter().map(|r| r.theta_error).sum::<f64>() / c);
    }
    let xs: Vec<f64> = ns.iter().map(|n| *n as f64).collect();
    Ok(SampleSweepResult {
        forward_slope: loglog_slope(&xs, &mean_forward)?,
        theta_slope: loglog_slope(&xs, &mean_theta)?,
        rows,
        mean_forward,
        mean_theta,
    })
}

pub fn sample_sweep(cfg: &SampleSweepConfig) -> Result<SampleSweepResult> {
    let pop = cfg.population()?;
    let mut rows = Vec::new();
    for &n in &cfg.ns {
        for s in 0..cfg.seeds {
            rows.push(sample_sweep_cell(cfg, &pop, n, s)?);
        }
    }
    summarize_sample_sweep(&cfg.ns, rows)
}

// ---------------------------------------------------------------------------
// Gaussian settings

/// Adjacency matrix of the cycle on `d` vertices.
pub fn circular_graph(d: usize) -> DMatrix<f64> {
    let mut th = DMatrix::zeros(d, d);
    if d < 2 {
        return th;
    }
    for i in 0..d {
        let j = (i + 1) % d;
        if i != j {
            th[(i, j)] = 1.0;
            th[(j, i)] = 1.0;
        }
    }
    th
}

/// `θ★ = e₀e₀ᵀ`, `Σ★ = δI + u_ω u_ωᵀ` with `u_ω = cos ω e₀ + sin ω e₁`.
pub fn lowrank_setting(d: usize, omega: f64, delta: f64) -> Result<QuadraticPotentialTruth> {
    if d < 2 {
        return invalid("low-rank setting needs d ≥ 2");
    }
    let mut u = DVector::zeros(d);
    u[0] = 1.0;
    let mut uo = DVector::zeros(d);
    uo[0] = omega.cos();
    uo[1] = omega.sin();
    QuadraticPotentialTruth::new(&u * u.transpose(), DVector::zeros(d), DMatrix::identity(d, d) * delta + &uo * uo.transpose())
}

/// `θ★` = cycle adjacency, `N(m·1, σ²I)` start.
pub fn sparse_setting(d: usize, sigma: f64, mean: f64) -> Result<QuadraticPotentialTruth> {
    QuadraticPotentialTruth::new(circular_graph(d), DVector::from_element(d, mean), DMatrix::identity(d, d) * sigma * sigma)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Fy,
    FyLimit,
    IjkoStar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateRow {
    pub loss: LossKind,
    pub steps: usize,
    /// `σ` for the sparse setting, `ω` for the low-rank one.
    pub parameter: f64,
    pub z_max: f64,
    pub margin: f64,
}

fn gaussian_hessian(loss: LossKind, specs: &[GaussianSpec]) -> Result<DMatrix<f64>> {
    match loss {
        LossKind::Fy | LossKind::FyLimit => gaussian_fy_hessian(specs),
        LossKind::IjkoStar => gaussian_ijko_star_hessian(specs),
    }
}

/// Nonnegative-ℓ1 precertificates over `σ` and `T` in upper-triangular
/// coordinates.
pub fn sparse_certificate_sweep(
    d: usize,
    mean: f64,
    sigmas: &[f64],
    steps: &[usize],
    tau: f64,
    loss: LossKind,
) -> Result<Vec<CertificateRow>> {
    let tangent = ModelTangent::l1(&symmetric_flatten(&circular_graph(d)), 1e-12, true)?;
    let mut rows = Vec::new();
    for &t in steps {
        for &sigma in sigmas {
            let specs = trajectory(&sparse_setting(d, sigma, mean)?, tau, t)?;
            let h = upper_triangular_hessian(&gaussian_hessian(loss, &specs[1..])?, d);
            let c = precertificate(&h, &tangent)?;
            rows.push(CertificateRow {
                loss,
                steps: t,
                parameter: sigma,
                z_max: c.z_max,
                margin: c.margin,
            });
        }
    }
    Ok(rows)
}

/// Nuclear precertificates over `ω` in orthonormal symmetric coordinates.
pub fn lowrank_certificate_sweep(
    d: usize,
    omegas: &[f64],
    steps: usize,
    tau: f64,
    delta: f64,
    loss: LossKind,
) -> Result<Vec<CertificateRow>> {
    let mut rows = Vec::new();
    for &omega in omegas {
        let truth = lowrank_setting(d, omega, delta)?;
        let tangent = ModelTangent::nuclear_symmetric(&truth.theta_star, 1e-10)?;
        let specs = trajectory(&truth, tau, steps)?;
        let h = symmetric_hessian(&gaussian_hessian(loss, &specs[1..])?, d);
        let c = precertificate(&h, &tangent)?;
        rows.push(CertificateRow {
            loss,
            steps,
            parameter: omega,
            z_max: c.z_max,
            margin: c.margin,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Recovery

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Model {
    Sparse,
    LowRank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecoveryConfig {
    pub model: Model,
    pub loss: LossKind,
    pub d: usize,
    /// Time steps `T` (snapshots `0..=T`).
    pub steps: usize,
    pub tau: f64,
    pub eta: f64,
    pub r: f64,
    /// `σ` (sparse) or `ω` (low-rank).
    pub parameter: f64,
    /// Initial mean `m·1` (sparse setting).
    #[serde(default = "default_mean")]
    pub mean: f64,
    /// `δ` in `Σ★ = δI + u_ω u_ωᵀ` (low-rank setting).
    #[serde(default = "default_delta")]
    pub delta: f64,
    pub ns: Vec<usize>,
    /// Solved from the largest to the smallest, warm-starting along the path.
    pub lambdas: Vec<f64>,
    pub seed: u64,
    #[serde(default = "default_support_tol")]
    pub support_tol: f64,
    #[serde(default = "default_rank_tol")]
    pub rank_tol: f64,
    #[serde(default)]
    pub lbfgs: LbfgsOptions,
}

fn default_mean() -> f64 {
    2.0
}

fn default_delta() -> f64 {
    1e-4
}

fn default_support_tol() -> f64 {
    SUPPORT_TOL
}

fn default_rank_tol() -> f64 {
    RANK_TOL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRow {
    pub n: usize,
    pub lambda: f64,
    /// Sparse: fraction of incorrectly estimated positions. Low-rank:
    /// `‖ŨŨᵀ − U★U★ᵀ‖₂ + |rank error|`.
    pub error: f64,
    pub rank: Option<usize>,
    pub status: Status,
    pub iterations: usize,
    pub theta: Vec<f64>,
}

impl RecoveryConfig {
    pub fn truth(&self) -> Result<QuadraticPotentialTruth> {
        match self.model {
            Model::Sparse => sparse_setting(self.d, self.parameter, self.mean),
            Model::LowRank => lowrank_setting(self.d, self.parameter, self.delta),
        }
    }

    fn features(&self) -> Vec<Feature> {
        match self.model {
            Model::Sparse => symmetric_quadratic_features(self.d),
            Model::LowRank => full_quadratic_features(self.d),
        }
    }

    fn penalty(&self, lambda: f64) -> Penalty {
        match self.model {
            Model::Sparse => Penalty::NonnegL1 { lambda },
            Model::LowRank => Penalty::Nuclear {
                lambda,
                rows: self.d,
                cols: self.d,
            },
        }
    }

    /// Per-step instances on `n` fresh samples per snapshot.
    pub fn instances(&self, n: usize) -> Result<Vec<IjkoInstance>> {
        let specs = trajectory(&self.truth()?, self.tau, self.steps)?;
        let snaps = specs
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let pts = sample_gaussian(s, n, derive_seed(self.seed, ((n as u64) << 8) | k as u64))?;
                DiscreteMeasure::uniform(pts, 1.0)
            })
            .collect::<Result<Vec<_>>>()?;
        snaps
            .windows(2)
            .map(|w| IjkoInstance::new(w[0].clone(), w[1].clone(), self.tau, self.eta, self.r, self.features()))
            .collect()
    }

    /// Error of `θ̂` against the truth, with the estimated rank for low-rank.
    pub fn score(&self, theta: &DVector<f64>) -> Result<(f64, Option<usize>)> {
        let truth = self.truth()?;
        match self.model {
            Model::Sparse => {
                let star = symmetric_flatten(&truth.theta_star);
                let wrong = (0..star.len())
                    .filter(|&i| (star[i].abs() > 0.0) != (theta[i].abs() > self.support_tol))
                    .count();
                Ok((wrong as f64 / star.len() as f64, None))
            }
            Model::LowRank => {
                let (err, rank) = lowrank_error(&truth.theta_star, theta, self.d, self.rank_tol);
                Ok((err, Some(rank)))
            }
        }
    }
}

/// `‖ŨŨᵀ − U★U★ᵀ‖₂ + |rank(θ̂) − rank(θ★)|` with eigenvectors of `sym(θ̂)`
/// kept when `|λ| ≥ tol`.
pub fn lowrank_error(theta_star: &DMatrix<f64>, theta: &DVector<f64>, d: usize, tol: f64) -> (f64, usize) {
    let proj = |m: &DMatrix<f64>| -> (DMatrix<f64>, usize) {
        let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
        let mut p = DMatrix::zeros(d, d);
        let mut k = 0;
        for (i, l) in eig.eigenvalues.iter().enumerate() {
            if l.abs() >= tol {
                let v = eig.eigenvectors.column(i);
                p += v * v.transpose();
                k += 1;
            }
        }
        (p, k)
    };
    let (ps, ks) = proj(theta_star);
    let (ph, kh) = proj(&DMatrix::from_column_slice(d, d, theta.as_slice()));
    let spec = (ph - ps).singular_values().max();
    (spec + (kh as f64 - ks as f64).abs(), kh)
}

/// Solves the regularization path for one `n`, warm-starting from the
/// previous (larger) `λ`.
pub fn recovery_path(cfg: &RecoveryConfig, n: usize) -> Result<Vec<RecoveryRow>> {
    let insts = cfg.instances(n)?;
    let mut lambdas = cfg.lambdas.clone();
    lambdas.sort_by(|a, b| b.partial_cmp(a).expect("finite λ"));
    let opts = RegularizedOptions {
        lbfgs: cfg.lbfgs,
        seed: derive_seed(cfg.seed, n as u64),
        init_scale: 1e-2,
    };
    let mut rows = Vec::with_capacity(lambdas.len());
    match cfg.loss {
        LossKind::Fy => {
            let mut obj = JointSemidual::new(insts)?;
            let mut warm: Option<(DVector<f64>, DVector<f64>)> = None;
            for &lambda in &lambdas {
                let w = warm.as_ref().map(|(t, a)| (t, a));
                let res = solve_regularized(&mut obj, cfg.penalty(lambda), w, &opts)?;
                let (error, rank) = cfg.score(&res.theta)?;
                rows.push(RecoveryRow {
                    n,
                    lambda,
                    error,
                    rank,
                    status: res.status,
                    iterations: res.iterations,
                    theta: res.theta.iter().copied().collect(),
                });
                warm = Some((res.theta, res.aux));
            }
        }
        LossKind::IjkoStar | LossKind::FyLimit => {
            let mut quad = quadratic_surrogate(cfg.loss, &insts)?;
            let empty = DVector::zeros(0);
            let mut warm: Option<DVector<f64>> = None;
            for &lambda in &lambdas {
                let w = warm.as_ref().map(|t| (t, &empty));
                let res = solve_regularized(&mut quad, cfg.penalty(lambda), w, &opts)?;
                let (error, rank) = cfg.score(&res.theta)?;
                rows.push(RecoveryRow {
                    n,
                    lambda,
                    error,
                    rank,
                    status: res.status,
                    iterations: res.iterations,
                    theta: res.theta.iter().copied().collect(),
                });
                warm = Some(res.theta);
            }
        }
    }
    Ok(rows)
}

/// Sum over steps of the quadratic iJKO* or variance-limit losses.
pub fn quadratic_surrogate(loss: LossKind, insts: &[IjkoInstance]) -> Result<IjkoStarQuadratic> {
    let s = insts.first().map(|i| i.dim()).ok_or_else(|| crate::Error::InvalidInput("no steps".into()))?;
    let mut acc = IjkoStarQuadratic {
        q: DMatrix::zeros(s, s),
        l: DVector::zeros(s),
        c: 0.0,
    };
    for inst in insts {
        let ot = inst.snapshot_ot(1e-7, 200_000)?;
        let part = match loss {
            LossKind::IjkoStar => IjkoStarQuadratic::new(inst, &ot.plan)?,
            _ => variance_quadratic(inst, &ot.f),
        };
        acc.q += part.q;
        acc.l += part.l;
        acc.c += part.c;
    }
    Ok(acc)
}

/// `½ Var_a[Φθ + h]` written as `θᵀQθ + 2ℓᵀθ + c`.
fn variance_quadratic(inst: &IjkoInstance, f_star: &DVector<f64>) -> IjkoStarQuadratic {
    let a = inst.alpha_k1().weights();
    let mass = a.sum();
    let mut phi = inst.potential_matrix().clone();
    let mut h = f_star / inst.tau();
    let mean_phi = phi.transpose() * a / mass;
    let mean_h = h.dot(a) / mass;
    for i in 0..phi.nrows() {
        let mut row = phi.row_mut(i);
        row -= mean_phi.transpose();
        h[i] -= mean_h;
    }
    let wphi = DMatrix::from_fn(phi.nrows(), phi.ncols(), |i, s| a[i] * phi[(i, s)] / mass);
    IjkoStarQuadratic {
        q: phi.transpose() * &wphi * 0.5,
        l: wphi.transpose() * &h * 0.5,
        c: 0.5 * h.iter().zip(a.iter()).map(|(v, w)| w * v * v).sum::<f64>() / mass,
    }
}

// ---------------------------------------------------------------------------
// r → ∞ limit

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RLimitConfig {
    pub truth: QuadraticPotentialTruth,
    pub tau: f64,
    pub eta: f64,
    /// Gauss-Hermite nodes per axis.
    pub nodes: usize,
    pub rs: Vec<f64>,
    pub theta: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RLimitRow {
    pub r: f64,
    pub scaled_gap: f64,
    pub error_vs_sample_limit: f64,
    pub rel_error_vs_closed_form: f64,
    pub status: Status,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RLimitResult {
    pub rows: Vec<RLimitRow>,
    /// `½ Var_{α^{k+1}}[V_θ + f*/τ]` on the quadrature measure.
    pub sample_limit: f64,
    /// Half the Gaussian closed form.
    pub closed_form_limit: f64,
    pub fit_residual: f64,
}

/// `r F̃_r` for one step of the Gaussian trajectory, against the discrete and
/// closed-form variance limits. Snapshots are Gauss-Hermite quadratures.
pub fn r_limit(cfg: &RLimitConfig) -> Result<RLimitResult> {
    let d = cfg.truth.dim();
    if cfg.theta.shape() != (d, d) {
        return invalid("theta must be d × d");
    }
    let specs = trajectory(&cfg.truth, cfg.tau, 1)?;
    let first_r = cfg.rs.first().copied().ok_or_else(|| crate::Error::InvalidInput("no r values".into()))?;
    let base = IjkoInstance::new(
        gauss_hermite_measure(&specs[0], cfg.nodes, QUADRATURE_PRUNE)?,
        gauss_hermite_measure(&specs[1], cfg.nodes, QUADRATURE_PRUNE)?,
        cfg.tau,
        cfg.eta,
        first_r,
        symmetric_quadratic_features(d),
    )?;
    let ot = base.snapshot_ot(1e-11, 1_000_000)?;
    let kanto = fit_quadratic(base.alpha_k1(), &ot.f)?;
    let sym = (&cfg.theta + cfg.theta.transpose()) * 0.5;
    let theta = symmetric_flatten(&sym);
    let sample_limit = variance_limit_loss(&base, &theta, &ot.f)?;
    let closed_form_limit = 0.5 * limiting_losses(&specs[1], &kanto, cfg.tau, &sym)?.0;
    let opts = LbfgsOptions {
        grad_tol: 1e-13,
        max_iter: 20_000,
        ..LbfgsOptions::default()
    };
    let mut rows = Vec::with_capacity(cfg.rs.len());
    for &r in &cfg.rs {
        let inst = base.with_r(r)?;
        let (gap, status) = inst.sharpened_gap(&theta, ot.value, &opts)?;
        let scaled = r * gap;
        rows.push(RLimitRow {
            r,
            scaled_gap: scaled,
            error_vs_sample_limit: (scaled - sample_limit).abs(),
            rel_error_vs_closed_form: (scaled - closed_form_limit).abs() / closed_form_limit.abs(),
            status,
        });
    }
    Ok(RLimitResult {
        rows,
        sample_limit,
        closed_form_limit,
        fit_residual: kanto.residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(-0.5)).collect();
        assert!((loglog_slope(&xs, &ys).unwrap() + 0.5).abs() < 1e-12);
    }

    #[test]
    fn grid_ties_go_to_largest() {
        let g = grid_search_lambda(&[0.1, 1.0, 10.0], |l| Ok(if l > 0.5 { 0.0 } else { 1.0 })).unwrap();
        assert_eq!(g.best_lambda, 10.0);
        let single = grid_search_lambda(&[0.3], |_| Ok(2.0)).unwrap();
        assert_eq!(single.best_lambda, 0.3);
    }

    #[test]
    fn cycle_is_regular() {
        let g = circular_graph(5);
        for i in 0..5 {
            assert_eq!(g.row(i).sum(), 2.0);
        }
    }
}
