//! Linear cost parameterizations `c_θ = φ₀ + Σ_s θ_s φ_s` and their
//! marginalized / centered variants.
//!
//! Marginal means use the normalized measures, `φ⁽¹⁾(x) = ∫ φ(x, ·) dβ / m_β`
//! and so on, so the centered features integrate to zero against `α` and `β`
//! whatever their masses. Gram matrices integrate against `α ⊗ β` itself.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::measures::{rng, DiscreteMeasure};

/// Closed-form feature families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Feature {
    Zero,
    Constant { value: f64 },
    /// `x_i`
    XCoord { i: usize },
    /// `y_j`
    YCoord { j: usize },
    /// `x_i y_j`
    Product { i: usize, j: usize },
    /// `x_i x_j`
    XMonomial { i: usize, j: usize },
    /// `y_i y_j`
    YMonomial { i: usize, j: usize },
    /// `(2 − δ_ij) x_i x_j`, the coordinate feature of `xᵀθ̄x` for `θ̄_ij`.
    SymQuad { i: usize, j: usize },
    /// `scale ‖x − y‖²`
    SqDist { scale: f64 },
    /// Values on the sample grid, indexed by atom.
    #[serde(skip)]
    Tabulated { values: Arc<DMatrix<f64>> },
}

impl Feature {
    pub fn eval(&self, i: usize, j: usize, x: &[f64], y: &[f64]) -> f64 {
        match self {
            Feature::Zero => 0.0,
            Feature::Constant { value } => *value,
            Feature::XCoord { i } => x[*i],
            Feature::YCoord { j } => y[*j],
            Feature::Product { i, j } => x[*i] * y[*j],
            Feature::XMonomial { i, j } => x[*i] * x[*j],
            Feature::YMonomial { i, j } => y[*i] * y[*j],
            Feature::SymQuad { i, j } => {
                if i == j {
                    x[*i] * x[*i]
                } else {
                    2.0 * x[*i] * x[*j]
                }
            }
            Feature::SqDist { scale } => {
                scale * x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            }
            Feature::Tabulated { values } => values[(i, j)],
        }
    }

    /// Value as a potential on `x` alone.
    pub fn eval_potential(&self, x: &[f64]) -> f64 {
        self.eval(0, 0, x, &[])
    }

    /// True when the feature depends on `x` only.
    pub fn is_potential(&self) -> bool {
        matches!(
            self,
            Feature::Zero
                | Feature::Constant { .. }
                | Feature::XCoord { .. }
                | Feature::XMonomial { .. }
                | Feature::SymQuad { .. }
        )
    }

    /// `∇_x` of a potential feature.
    pub fn grad_potential(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; x.len()];
        match self {
            Feature::Zero | Feature::Constant { .. } => {}
            Feature::XCoord { i } => g[*i] = 1.0,
            Feature::XMonomial { i, j } => {
                g[*i] += x[*j];
                g[*j] += x[*i];
            }
            Feature::SymQuad { i, j } => {
                let w = if i == j { 1.0 } else { 2.0 };
                g[*i] += w * x[*j];
                g[*j] += w * x[*i];
            }
            _ => return invalid("feature is not a potential on x"),
        }
        Ok(g)
    }

    fn max_index(&self) -> (usize, usize) {
        match self {
            Feature::XCoord { i } => (i + 1, 0),
            Feature::YCoord { j } => (0, j + 1),
            Feature::Product { i, j } => (i + 1, j + 1),
            Feature::XMonomial { i, j } | Feature::SymQuad { i, j } => ((*i).max(*j) + 1, 0),
            Feature::YMonomial { i, j } => (0, (*i).max(*j) + 1),
            _ => (0, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Structure {
    Generic,
    /// `V(x) = xᵀθ̄x` with `θ ∈ ℝ^{d(d+1)/2}` upper-triangular coordinates.
    SymmetricQuadratic { d: usize },
    /// `c_V(x, x') = V(x) + ‖x − x'‖²/τ`.
    PotentialPlusSqDist { tau: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostBasis {
    pub phi0: Feature,
    pub phis: Vec<Feature>,
    pub structure: Structure,
}

impl CostBasis {
    pub fn generic(phi0: Feature, phis: Vec<Feature>) -> Result<Self> {
        if phis.is_empty() {
            return invalid("a cost basis needs at least one feature");
        }
        Ok(Self {
            phi0,
            phis,
            structure: Structure::Generic,
        })
    }

    /// Potential basis `x_i x_j (2 − δ_ij)` for `i ≤ j`, row-major over the
    /// upper triangle.
    pub fn symmetric_quadratic(d: usize) -> Result<Self> {
        if d == 0 {
            return invalid("dimension must be positive");
        }
        Ok(Self {
            phi0: Feature::Zero,
            phis: symmetric_quadratic_features(d),
            structure: Structure::SymmetricQuadratic { d },
        })
    }

    /// `c_V(x, x') = Σ_s θ_s φ_s(x) + ‖x − x'‖²/τ`.
    pub fn potential_plus_sq_dist(potential: Vec<Feature>, tau: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return invalid("tau must be positive");
        }
        if potential.is_empty() {
            return invalid("a cost basis needs at least one feature");
        }
        if let Some(f) = potential.iter().find(|f| !f.is_potential()) {
            return invalid(format!("{f:?} is not a potential feature"));
        }
        Ok(Self {
            phi0: Feature::SqDist { scale: 1.0 / tau },
            phis: potential,
            structure: Structure::PotentialPlusSqDist { tau },
        })
    }

    pub fn len(&self) -> usize {
        self.phis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phis.is_empty()
    }

    pub fn check_dims(&self, dx: usize, dy: usize) -> Result<()> {
        for f in std::iter::once(&self.phi0).chain(&self.phis) {
            let (mx, my) = f.max_index();
            if mx > dx || my > dy {
                return invalid(format!("feature {f:?} indexes beyond dims ({dx}, {dy})"));
            }
        }
        Ok(())
    }

    /// Largest finite-difference slope of the features over random pairs in
    /// the bounding box of the supports.
    pub fn lipschitz_probe(&self, alpha: &DiscreteMeasure, beta: &DiscreteMeasure, pairs: usize, seed: u64) -> f64 {
        let bbox = |m: &DiscreteMeasure| -> Vec<(f64, f64)> {
            (0..m.dim())
                .map(|k| {
                    let row = m.points().row(k);
                    (row.min(), row.max())
                })
                .collect()
        };
        let (bx, by) = (bbox(alpha), bbox(beta));
        let mut r = rng(seed);
        let mut draw = |b: &[(f64, f64)]| -> Vec<f64> {
            b.iter()
                .map(|(lo, hi)| if hi > lo { r.random_range(*lo..=*hi) } else { *lo })
                .collect()
        };
        let mut best: f64 = 0.0;
        for _ in 0..pairs {
            let (x0, y0, x1, y1) = (draw(&bx), draw(&by), draw(&bx), draw(&by));
            let dist = x0
                .iter()
                .zip(&x1)
                .chain(y0.iter().zip(&y1))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if dist == 0.0 {
                continue;
            }
            for f in std::iter::once(&self.phi0).chain(&self.phis) {
                if matches!(f, Feature::Tabulated { .. }) {
                    continue;
                }
                let slope = (f.eval(0, 0, &x1, &y1) - f.eval(0, 0, &x0, &y0)).abs() / dist;
                best = best.max(slope);
            }
        }
        best
    }
}

/// Upper-triangular `SymQuad` features for dimension `d`.
pub fn symmetric_quadratic_features(d: usize) -> Vec<Feature> {
    let mut out = Vec::with_capacity(d * (d + 1) / 2);
    for i in 0..d {
        for j in i..d {
            out.push(Feature::SymQuad { i, j });
        }
    }
    out
}

/// Full quadratic features `x_i x_j`, ordered as `vec(θ)` column-major.
pub fn full_quadratic_features(d: usize) -> Vec<Feature> {
    let mut out = Vec::with_capacity(d * d);
    for j in 0..d {
        for i in 0..d {
            out.push(Feature::XMonomial { i, j });
        }
    }
    out
}

/// Feature tensors on an `n × m` grid.
#[derive(Debug, Clone)]
pub struct BasisMatrices {
    pub phi0: DMatrix<f64>,
    pub phi: Vec<DMatrix<f64>>,
    /// `φ⁽¹⁾`, `n × S`: β-mean over `j`.
    pub phi1: DMatrix<f64>,
    /// `φ⁽²⁾`, `m × S`: α-mean over `i`.
    pub phi2: DMatrix<f64>,
    /// `φ⁽¹²⁾`, length `S`.
    pub phi12: DVector<f64>,
    a: DVector<f64>,
    b: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GramKind {
    Centered0,
    Centered1,
    Centered2,
    Raw,
}

/// Evaluates every feature on `supp α × supp β`.
pub fn evaluate(basis: &CostBasis, alpha: &DiscreteMeasure, beta: &DiscreteMeasure) -> Result<BasisMatrices> {
    basis.check_dims(alpha.dim(), beta.dim())?;
    let (n, m) = (alpha.len(), beta.len());
    let build = |f: &Feature| -> Result<DMatrix<f64>> {
        if let Feature::Tabulated { values } = f {
            if values.nrows() != n || values.ncols() != m {
                return invalid("tabulated feature does not match the grid");
            }
        }
        let mat = DMatrix::from_fn(n, m, |i, j| f.eval(i, j, alpha.point(i), beta.point(j)));
        if mat.iter().any(|v| !v.is_finite()) {
            return invalid(format!("non-finite value in feature {f:?}"));
        }
        Ok(mat)
    };
    let phi0 = build(&basis.phi0)?;
    let phi = basis.phis.iter().map(build).collect::<Result<Vec<_>>>()?;
    Ok(BasisMatrices::from_parts(phi0, phi, alpha.weights().clone(), beta.weights().clone()))
}

impl BasisMatrices {
    pub fn from_parts(phi0: DMatrix<f64>, phi: Vec<DMatrix<f64>>, a: DVector<f64>, b: DVector<f64>) -> Self {
        let (n, m, s) = (a.len(), b.len(), phi.len());
        let (ma, mb) = (a.sum(), b.sum());
        let mut phi1 = DMatrix::zeros(n, s);
        let mut phi2 = DMatrix::zeros(m, s);
        let mut phi12 = DVector::zeros(s);
        for (k, p) in phi.iter().enumerate() {
            let rowmean = p * &b / mb;
            let colmean = p.transpose() * &a / ma;
            phi12[k] = rowmean.dot(&a) / ma;
            phi1.set_column(k, &rowmean);
            phi2.set_column(k, &colmean);
        }
        Self {
            phi0,
            phi,
            phi1,
            phi2,
            phi12,
            a,
            b,
        }
    }

    pub fn n(&self) -> usize {
        self.phi0.nrows()
    }

    pub fn m(&self) -> usize {
        self.phi0.ncols()
    }

    pub fn s(&self) -> usize {
        self.phi.len()
    }

    /// `c_θ` on the grid.
    pub fn cost(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let mut c = self.phi0.clone();
        for (t, p) in theta.iter().zip(&self.phi) {
            if *t != 0.0 {
                c += p * *t;
            }
        }
        c
    }

    /// `⟨φ_s, π⟩` for a grid mass matrix `π`.
    pub fn integrate(&self, pi: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_iterator(self.s(), self.phi.iter().map(|p| p.component_mul(pi).sum()))
    }

    /// `φ̄⁽⁰⁾ = φ − φ⁽¹⁾ − φ⁽²⁾ + φ⁽¹²⁾`.
    pub fn centered0(&self, s: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.n(), self.m(), |i, j| {
            self.phi[s][(i, j)] - self.phi1[(i, s)] - self.phi2[(j, s)] + self.phi12[s]
        })
    }

    /// `φ̄⁽¹⁾ = φ − φ⁽¹⁾`.
    pub fn centered1(&self, s: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.n(), self.m(), |i, j| self.phi[s][(i, j)] - self.phi1[(i, s)])
    }

    /// `φ̄⁽²⁾ = φ − φ⁽²⁾`.
    pub fn centered2(&self, s: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.n(), self.m(), |i, j| self.phi[s][(i, j)] - self.phi2[(j, s)])
    }

    /// `⟨ψ ψᵀ, α ⊗ β⟩` for the requested variant `ψ`.
    pub fn gram(&self, kind: GramKind) -> DMatrix<f64> {
        let s = self.s();
        let feats: Vec<DMatrix<f64>> = (0..s)
            .map(|k| match kind {
                GramKind::Centered0 => self.centered0(k),
                GramKind::Centered1 => self.centered1(k),
                GramKind::Centered2 => self.centered2(k),
                GramKind::Raw => self.phi[k].clone(),
            })
            .collect();
        let w = &self.a * self.b.transpose();
        let weighted: Vec<DMatrix<f64>> = feats.iter().map(|f| f.component_mul(&w)).collect();
        let mut g = DMatrix::zeros(s, s);
        for p in 0..s {
            for q in p..s {
                let v = weighted[p].dot(&feats[q]);
                g[(p, q)] = v;
                g[(q, p)] = v;
            }
        }
        g
    }

    pub fn rho_min(&self, kind: GramKind) -> f64 {
        rho_min(&self.gram(kind))
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn rho_min(gram: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(gram.clone()).eigenvalues.min()
}

/// `d` with `d(d+1)/2 = len`.
pub fn sym_dim(len: usize) -> Result<usize> {
    let d = (((8 * len + 1) as f64).sqrt() as usize).saturating_sub(1) / 2;
    if d * (d + 1) / 2 == len && d > 0 {
        Ok(d)
    } else {
        invalid(format!("length {len} is not triangular"))
    }
}

/// Upper-triangular coordinates to the symmetric matrix `θ̄`.
pub fn symmetric_embed(theta_upper: &DVector<f64>) -> Result<DMatrix<f64>> {
    let d = sym_dim(theta_upper.len())?;
    let mut out = DMatrix::zeros(d, d);
    let mut k = 0;
    for i in 0..d {
        for j in i..d {
            out[(i, j)] = theta_upper[k];
            out[(j, i)] = theta_upper[k];
            k += 1;
        }
    }
    Ok(out)
}

/// Adjoint of [`symmetric_embed`] for the Frobenius product.
pub fn symmetric_embed_adjoint(a: &DMatrix<f64>) -> DVector<f64> {
    let d = a.nrows();
    let mut out = Vec::with_capacity(d * (d + 1) / 2);
    for i in 0..d {
        for j in i..d {
            out.push(if i == j { a[(i, i)] } else { a[(i, j)] + a[(j, i)] });
        }
    }
    DVector::from_vec(out)
}

/// Upper-triangular coordinates of a symmetric matrix (left inverse of the embedding).
pub fn symmetric_flatten(a: &DMatrix<f64>) -> DVector<f64> {
    let d = a.nrows();
    let mut out = Vec::with_capacity(d * (d + 1) / 2);
    for i in 0..d {
        for j in i..d {
            out.push(a[(i, j)]);
        }
    }
    DVector::from_vec(out)
}

/// Matrix `E` of the embedding: `vec(θ̄) = E θ`, `vec` column-major.
pub fn symmetric_embed_matrix(d: usize) -> DMatrix<f64> {
    let p = d * (d + 1) / 2;
    let mut e = DMatrix::zeros(d * d, p);
    let mut k = 0;
    for i in 0..d {
        for j in i..d {
            e[(i + j * d, k)] = 1.0;
            e[(j + i * d, k)] = 1.0;
            k += 1;
        }
    }
    e
}

/// Orthonormal basis (Frobenius) of the symmetric matrices, as columns in
/// `vec` coordinates.
pub fn symmetric_orthonormal_basis(d: usize) -> DMatrix<f64> {
    let mut e = symmetric_embed_matrix(d);
    for mut col in e.column_iter_mut() {
        let n = col.norm();
        col /= n;
    }
    e
}

/// The transposition operator `𝕋 vec(M) = vec(Mᵀ)`.
pub fn transpose_operator(d: usize) -> DMatrix<f64> {
    let mut t = DMatrix::zeros(d * d, d * d);
    for i in 0..d {
        for j in 0..d {
            t[(j + i * d, i + j * d)] = 1.0;
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unif(points: &[f64]) -> DiscreteMeasure {
        DiscreteMeasure::uniform(DMatrix::from_row_slice(1, points.len(), points), 1.0).unwrap()
    }

    #[test]
    fn constants_center_away() {
        let a = unif(&[0.0, 1.0, 3.0]);
        let b = unif(&[-1.0, 2.0]);
        let basis = CostBasis::generic(Feature::Zero, vec![Feature::Constant { value: 2.5 }]).unwrap();
        let bm = evaluate(&basis, &a, &b).unwrap();
        assert!(bm.centered0(0).amax() < 1e-15);
    }

    #[test]
    fn symmetric_marginals_vanish() {
        let a = unif(&[-1.0, 1.0]);
        let basis = CostBasis::generic(Feature::Zero, vec![Feature::Product { i: 0, j: 0 }]).unwrap();
        let bm = evaluate(&basis, &a, &a).unwrap();
        assert!(bm.phi1.amax() < 1e-15 && bm.phi2.amax() < 1e-15);
        assert!((bm.centered0(0) - &bm.phi[0]).amax() < 1e-15);
    }

    #[test]
    fn embed_examples() {
        let s = symmetric_embed(&DVector::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        assert_eq!(s, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 3.0]));
        assert!(symmetric_embed(&DVector::from_vec(vec![1.0, 2.0])).is_err());
        assert_eq!(sym_dim(10).unwrap(), 4);
    }

    #[test]
    fn embed_matrix_matches_embed() {
        let u = DVector::from_fn(6, |k, _| k as f64 + 0.5);
        let m = symmetric_embed(&u).unwrap();
        let v = symmetric_embed_matrix(3) * &u;
        assert_eq!(DVector::from_column_slice(m.as_slice()), v);
        let t = transpose_operator(3);
        let a = DMatrix::from_fn(3, 3, |i, j| (3 * i + j) as f64);
        let ta = &t * DVector::from_column_slice(a.as_slice());
        assert_eq!(ta, DVector::from_column_slice(a.transpose().as_slice()));
    }

    #[test]
    fn duplicate_feature_is_rank_deficient() {
        let a = unif(&[0.0, 1.0, 2.0]);
        let b = unif(&[0.5, 1.5]);
        let f = Feature::Product { i: 0, j: 0 };
        let basis = CostBasis::generic(Feature::Zero, vec![f.clone(), f]).unwrap();
        let bm = evaluate(&basis, &a, &b).unwrap();
        assert!(bm.rho_min(GramKind::Raw).abs() < 1e-10);
    }
}
