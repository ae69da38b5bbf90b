//! Hessians, precertificates and minimal-norm certificates for ℓ1 and nuclear
//! models.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::cost_basis::{symmetric_orthonormal_basis, transpose_operator};
use crate::error::{invalid, Error, Result};
use crate::forward_uot::{primal_from_dual, solve_sinkhorn, DualPotentials};
use crate::fy_loss::FyIuotLoss;
use crate::linalg::thin_svd;
use crate::measures::GaussianSpec;

/// Inner tolerance used when assembling Hessians.
pub const HESSIAN_INNER_TOL: f64 = 1e-11;

/// Margins with `|margin|` below this are reported as inconclusive.
pub const INCONCLUSIVE_BAND: f64 = 0.05;

/// `∇²F(θ)` by the Schur complement of the inner dual Hessian.
pub fn hessian_at(loss: &FyIuotLoss, theta: &DVector<f64>, warm: Option<&DualPotentials>) -> Result<DMatrix<f64>> {
    let prob = loss.inner_problem(theta);
    let pots = solve_sinkhorn(&prob, HESSIAN_INNER_TOL, 1_000_000, warm)?;
    let plan = primal_from_dual(&prob, &pots).plan;
    let eta = prob.eta;
    let (a, b) = (prob.alpha.weights(), prob.beta.weights());
    let rows: Vec<usize> = (0..prob.n()).filter(|&i| a[i] > 0.0).collect();
    let cols: Vec<usize> = (0..prob.m()).filter(|&j| b[j] > 0.0).collect();
    let (n, m) = (rows.len(), cols.len());
    let basis = loss.basis();
    let s = basis.s();

    let mut kzz = DMatrix::zeros(n + m, n + m);
    for (p, &i) in rows.iter().enumerate() {
        let mass: f64 = cols.iter().map(|&j| plan[(i, j)]).sum();
        kzz[(p, p)] = a[i] * prob.div1.conjugate_deriv2(-pots.f[i]) + mass / eta;
        for (q, &j) in cols.iter().enumerate() {
            kzz[(p, n + q)] = plan[(i, j)] / eta;
            kzz[(n + q, p)] = plan[(i, j)] / eta;
        }
    }
    for (q, &j) in cols.iter().enumerate() {
        let mass: f64 = rows.iter().map(|&i| plan[(i, j)]).sum();
        kzz[(n + q, n + q)] = b[j] * prob.div2.conjugate_deriv2(-pots.g[j]) + mass / eta;
    }
    if prob.div1.is_hard_constraint() && prob.div2.is_hard_constraint() {
        let mut v = DVector::from_element(n + m, 1.0);
        v.rows_mut(n, m).fill(-1.0);
        v /= v.norm();
        kzz += &v * v.transpose();
    }

    let mut kzt = DMatrix::zeros(n + m, s);
    let mut ktt = DMatrix::zeros(s, s);
    for t in 0..s {
        let phi_t = &basis.phi[t];
        for (p, &i) in rows.iter().enumerate() {
            kzt[(p, t)] = -cols.iter().map(|&j| plan[(i, j)] * phi_t[(i, j)]).sum::<f64>() / eta;
        }
        for (q, &j) in cols.iter().enumerate() {
            kzt[(n + q, t)] = -rows.iter().map(|&i| plan[(i, j)] * phi_t[(i, j)]).sum::<f64>() / eta;
        }
        for u in 0..=t {
            let phi_u = &basis.phi[u];
            let mut acc = 0.0;
            for &i in &rows {
                for &j in &cols {
                    acc += plan[(i, j)] * phi_t[(i, j)] * phi_u[(i, j)];
                }
            }
            ktt[(t, u)] = acc / eta;
            ktt[(u, t)] = acc / eta;
        }
    }

    let chol = match Cholesky::new(kzz.clone()) {
        Some(c) => c,
        None => {
            let min_eig = SymmetricEigen::new(kzz).eigenvalues.min();
            return Err(Error::SingularInnerHessian { min_eig });
        }
    };
    let sol = chol.solve(&kzt);
    let h = ktt - kzt.transpose() * sol;
    Ok((&h + h.transpose()) * 0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TangentKind {
    /// Coordinates on the support; `nonneg` for `Σθ + ι_{θ≥0}`.
    L1 { support: Vec<usize>, nonneg: bool },
    /// Low-rank model in column-major `vec` coordinates of a `rows × cols`
    /// matrix, or in the orthonormal symmetric coordinates when `symmetric`.
    Nuclear { rank: usize, rows: usize, cols: usize, symmetric: bool },
}

/// The model subspace `T` at `θ★` and the sign object `S_T(θ★)`.
#[derive(Debug, Clone)]
pub struct ModelTangent {
    pub kind: TangentKind,
    /// Orthonormal basis of `T` in working coordinates.
    pub basis: DMatrix<f64>,
    pub sign: DVector<f64>,
    u: DMatrix<f64>,
    v: DMatrix<f64>,
    embed: Option<DMatrix<f64>>,
}

impl ModelTangent {
    /// Support `{i : |θ_i| > tol}` with signs.
    pub fn l1(theta: &DVector<f64>, tol: f64, nonneg: bool) -> Result<Self> {
        let p = theta.len();
        let support: Vec<usize> = (0..p).filter(|&i| theta[i].abs() > tol).collect();
        if nonneg && theta.iter().any(|t| *t < -tol) {
            return invalid("nonnegative model needs θ★ ≥ 0");
        }
        let mut basis = DMatrix::zeros(p, support.len());
        let mut sign = DVector::zeros(p);
        for (k, &i) in support.iter().enumerate() {
            basis[(i, k)] = 1.0;
            sign[i] = theta[i].signum();
        }
        Ok(Self {
            kind: TangentKind::L1 { support, nonneg },
            basis,
            sign,
            u: DMatrix::zeros(0, 0),
            v: DMatrix::zeros(0, 0),
            embed: None,
        })
    }

    /// Tangent of the rank-`k` manifold at `θ★` (`k` = numerical rank at `tol`).
    pub fn nuclear(theta: &DMatrix<f64>, tol: f64) -> Result<Self> {
        let (rows, cols) = theta.shape();
        let (u, _, v) = thin_svd(theta, tol);
        let pu = &u * u.transpose();
        let pv = &v * v.transpose();
        let proj = DMatrix::identity(cols, cols).kronecker(&pu) + pv.kronecker(&DMatrix::identity(rows, rows))
            - pv.kronecker(&pu);
        let basis = range_basis(&proj);
        let uv = &u * v.transpose();
        Ok(Self {
            kind: TangentKind::Nuclear {
                rank: u.ncols(),
                rows,
                cols,
                symmetric: false,
            },
            basis,
            sign: DVector::from_column_slice(uv.as_slice()),
            u,
            v,
            embed: None,
        })
    }

    /// Nuclear tangent restricted to symmetric matrices, in the coordinates of
    /// [`symmetric_orthonormal_basis`].
    pub fn nuclear_symmetric(theta: &DMatrix<f64>, tol: f64) -> Result<Self> {
        let d = theta.nrows();
        if theta.ncols() != d || (theta - theta.transpose()).amax() > 1e-12 * theta.amax().max(1.0) {
            return invalid("symmetric model needs a symmetric θ★");
        }
        let full = Self::nuclear(theta, tol)?;
        let b = symmetric_orthonormal_basis(d);
        let proj = full.basis.clone() * full.basis.transpose();
        let reduced = b.transpose() * proj * &b;
        let basis = range_basis(&reduced);
        let sign = b.transpose() * &full.sign;
        let TangentKind::Nuclear { rank, .. } = full.kind else { unreachable!() };
        Ok(Self {
            kind: TangentKind::Nuclear {
                rank,
                rows: d,
                cols: d,
                symmetric: true,
            },
            basis,
            sign,
            u: full.u,
            v: full.v,
            embed: Some(b),
        })
    }

    pub fn dim(&self) -> usize {
        self.sign.len()
    }

    /// `P_T` in working coordinates.
    pub fn projector(&self) -> DMatrix<f64> {
        &self.basis * self.basis.transpose()
    }

    fn matrix_of(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let TangentKind::Nuclear { rows, cols, .. } = self.kind else {
            unreachable!("matrix view of an ℓ1 vector")
        };
        let full = match &self.embed {
            Some(b) => b * z,
            None => z.clone(),
        };
        DMatrix::from_column_slice(rows, cols, full.as_slice())
    }

    fn vector_of(&self, m: &DMatrix<f64>) -> DVector<f64> {
        let flat = DVector::from_column_slice(m.as_slice());
        match &self.embed {
            Some(b) => b.transpose() * flat,
            None => flat,
        }
    }

    /// Norm of the off-model part: `max_{i∉I} |z_i|` (`max z_i` when
    /// nonnegative), or `‖P_T^⊥ z‖₂` in spectral norm.
    pub fn off_model_norm(&self, z: &DVector<f64>) -> f64 {
        match &self.kind {
            TangentKind::L1 { support, nonneg } => {
                let mut best = f64::NEG_INFINITY;
                for i in 0..z.len() {
                    if support.binary_search(&i).is_err() {
                        best = best.max(if *nonneg { z[i] } else { z[i].abs() });
                    }
                }
                if best == f64::NEG_INFINITY {
                    0.0
                } else {
                    best
                }
            }
            TangentKind::Nuclear { .. } => {
                let w = z - self.projector() * z;
                let m = self.matrix_of(&w);
                m.singular_values().max()
            }
        }
    }

    /// Projection of `w ∈ T^⊥` onto the dual-norm unit ball within `T^⊥`.
    fn project_off_model(&self, w: &DVector<f64>) -> DVector<f64> {
        let w = w - self.projector() * w;
        match &self.kind {
            TangentKind::L1 { nonneg, .. } => w.map(|x| if *nonneg { x.min(1.0) } else { x.clamp(-1.0, 1.0) }),
            TangentKind::Nuclear { .. } => {
                let m = self.matrix_of(&w);
                let (u, s, v) = thin_svd(&m, 0.0);
                let out = &u * DMatrix::from_diagonal(&s.map(|x| x.min(1.0))) * v.transpose();
                let out = self.vector_of(&out);
                &out - self.projector() * &out
            }
        }
    }

    /// `‖P_T z − S_T‖`.
    pub fn on_model_residual(&self, z: &DVector<f64>) -> f64 {
        (self.projector() * z - &self.sign).norm()
    }
}

fn range_basis(proj: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new((proj + proj.transpose()) * 0.5);
    let keep: Vec<usize> = (0..eig.eigenvalues.len()).filter(|&k| eig.eigenvalues[k] > 0.5).collect();
    DMatrix::from_fn(proj.nrows(), keep.len(), |i, k| eig.eigenvectors[(i, keep[k])])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateKind {
    Precertificate,
    MinimalNorm,
}

#[derive(Debug, Clone)]
pub struct Certificate {
    pub z: DVector<f64>,
    /// Off-model norm of `z`.
    pub z_max: f64,
    /// `1 − z_max`.
    pub margin: f64,
    pub kind: CertificateKind,
    /// `⟨z, H⁻¹ z⟩`.
    pub objective: f64,
}

impl Certificate {
    pub fn nondegenerate(&self) -> bool {
        self.margin > 0.0
    }

    pub fn verdict(&self) -> &'static str {
        if self.margin.abs() < INCONCLUSIVE_BAND {
            "inconclusive"
        } else if self.margin > 0.0 {
            "nondegenerate"
        } else {
            "degenerate"
        }
    }
}

fn check_hessian(h: &DMatrix<f64>, tangent: &ModelTangent) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    if h.nrows() != tangent.dim() || h.ncols() != tangent.dim() {
        return invalid("Hessian and tangent dimensions differ");
    }
    Cholesky::new((h + h.transpose()) * 0.5).ok_or_else(|| Error::InvalidInput("Hessian is not positive definite".into()))
}

/// `ẑ = H Q (QᵀHQ)⁻¹ QᵀS`.
pub fn precertificate(h: &DMatrix<f64>, tangent: &ModelTangent) -> Result<Certificate> {
    let chol = check_hessian(h, tangent)?;
    let q = &tangent.basis;
    let reduced = q.transpose() * h * q;
    let inner = Cholesky::new((&reduced + reduced.transpose()) * 0.5).ok_or(Error::RankDeficientTangent)?;
    let rhs = q.transpose() * &tangent.sign;
    let z = h * q * inner.solve(&rhs);
    let z_max = tangent.off_model_norm(&z);
    let objective = z.dot(&chol.solve(&z));
    Ok(Certificate {
        z,
        z_max,
        margin: 1.0 - z_max,
        kind: CertificateKind::Precertificate,
        objective,
    })
}

/// `argmin {⟨z, H⁻¹z⟩ : z ∈ ∂R(θ★)}` by accelerated projected gradient over
/// the off-model part. Returns the precertificate when it is nondegenerate.
pub fn minimal_norm_certificate(h: &DMatrix<f64>, tangent: &ModelTangent, tol: f64, max_iter: usize) -> Result<Certificate> {
    let pre = precertificate(h, tangent)?;
    if pre.nondegenerate() {
        return Ok(pre);
    }
    let chol = check_hessian(h, tangent)?;
    let hinv = chol.inverse();
    let lip = 2.0 * SymmetricEigen::new(hinv.clone()).eigenvalues.max();
    let step = 1.0 / lip;
    let s = tangent.sign.clone();
    let grad = |w: &DVector<f64>| -> DVector<f64> { &hinv * (&s + w) * 2.0 };
    let mut w = tangent.project_off_model(&(&pre.z - &s));
    let mut y = w.clone();
    let mut t = 1.0f64;
    for _ in 0..max_iter {
        let w_next = tangent.project_off_model(&(&y - grad(&y) * step));
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &w_next + (&w_next - &w) * ((t - 1.0) / t_next);
        let moved = (&w_next - &w).amax();
        w = w_next;
        t = t_next;
        let kkt = (&w - tangent.project_off_model(&(&w - grad(&w) * step))).amax();
        if kkt <= tol && moved <= tol {
            break;
        }
    }
    let z = &s + &w;
    let z_max = tangent.off_model_norm(&z);
    let objective = z.dot(&(&hinv * &z));
    Ok(Certificate {
        z,
        z_max,
        margin: 1.0 - z_max,
        kind: CertificateKind::MinimalNorm,
        objective,
    })
}

fn with_swap(m: DMatrix<f64>, d: usize) -> DMatrix<f64> {
    let id = DMatrix::identity(d * d, d * d);
    m * (id + transpose_operator(d))
}

/// `Σ_k 2(Σ⊗Σ + mmᵀ⊗Σ + Σ⊗mmᵀ)(I + 𝕋)` over column-major `vec(θ)`.
pub fn gaussian_fy_hessian(specs: &[GaussianSpec]) -> Result<DMatrix<f64>> {
    let d = specs.first().map(|s| s.dim()).ok_or_else(|| Error::InvalidInput("no snapshots".into()))?;
    let mut h = DMatrix::zeros(d * d, d * d);
    for s in specs {
        if s.dim() != d {
            return invalid("snapshots differ in dimension");
        }
        let mm = &s.mean * s.mean.transpose();
        let sig = &s.covariance;
        let k = sig.kronecker(sig) + mm.kronecker(sig) + sig.kronecker(&mm);
        h += with_swap(k, d) * 2.0;
    }
    Ok(h)
}

/// `Σ_k 2((Σ+mmᵀ)⊗I + I⊗(Σ+mmᵀ))(I + 𝕋)`.
pub fn gaussian_ijko_star_hessian(specs: &[GaussianSpec]) -> Result<DMatrix<f64>> {
    let d = specs.first().map(|s| s.dim()).ok_or_else(|| Error::InvalidInput("no snapshots".into()))?;
    let id = DMatrix::identity(d, d);
    let mut h = DMatrix::zeros(d * d, d * d);
    for s in specs {
        if s.dim() != d {
            return invalid("snapshots differ in dimension");
        }
        let m2 = s.second_moment();
        let k = m2.kronecker(&id) + id.kronecker(&m2);
        h += with_swap(k, d) * 2.0;
    }
    Ok(h)
}

/// `EᵀHE`, the Hessian in upper-triangular coordinates `θ ↦ vec(θ̄)`.
pub fn upper_triangular_hessian(h_full: &DMatrix<f64>, d: usize) -> DMatrix<f64> {
    let e = crate::cost_basis::symmetric_embed_matrix(d);
    e.transpose() * h_full * e
}

/// `BᵀHB` in orthonormal symmetric coordinates.
pub fn symmetric_hessian(h_full: &DMatrix<f64>, d: usize) -> DMatrix<f64> {
    let b = symmetric_orthonormal_basis(d);
    b.transpose() * h_full * b
}
