//! Discrete positive measures, coupled samples and Gaussian sampling.
//!
//! Points are stored column-wise: a measure on `ℝ^d` with `n` atoms holds a
//! `d × n` matrix. Masses are always explicit.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Result};

/// Weighted point cloud `Σ_i w_i δ_{x_i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    points: DMatrix<f64>,
    weights: DVector<f64>,
    mass: f64,
}

impl DiscreteMeasure {
    /// Builds a measure from a `d × n` point matrix and `n` weights.
    pub fn new(points: DMatrix<f64>, weights: DVector<f64>) -> Result<Self> {
        if points.ncols() != weights.len() {
            return invalid(format!(
                "{} points but {} weights",
                points.ncols(),
                weights.len()
            ));
        }
        if points.ncols() == 0 {
            return invalid("measure has no atoms");
        }
        if points.iter().any(|v| !v.is_finite()) {
            return invalid("non-finite point coordinate");
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return invalid("weights must be finite and nonnegative");
        }
        let mass = weights.sum();
        if mass <= 0.0 {
            return invalid("measure has zero mass");
        }
        Ok(Self {
            points,
            weights,
            mass,
        })
    }

    /// Uniform weights `mass / n` on the given points.
    pub fn uniform(points: DMatrix<f64>, mass: f64) -> Result<Self> {
        if !(mass > 0.0) || !mass.is_finite() {
            return invalid(format!("mass must be positive, got {mass}"));
        }
        let n = points.ncols();
        if n == 0 {
            return invalid("empty sample list");
        }
        Self::new(points, DVector::from_element(n, mass / n as f64))
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.nrows()
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    pub fn point(&self, i: usize) -> &[f64] {
        let d = self.points.nrows();
        &self.points.as_slice()[i * d..(i + 1) * d]
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    /// Same support with new weights.
    pub fn with_weights(&self, weights: DVector<f64>) -> Result<Self> {
        Self::new(self.points.clone(), weights)
    }

    /// Probability version `w / mass`.
    pub fn normalized(&self) -> Self {
        Self {
            points: self.points.clone(),
            weights: &self.weights / self.mass,
            mass: 1.0,
        }
    }

    /// Weighted mean and covariance (normalized by mass).
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.dim();
        let mut mean = DVector::zeros(d);
        for i in 0..self.len() {
            let w = self.weights[i] / self.mass;
            for k in 0..d {
                mean[k] += w * self.points[(k, i)];
            }
        }
        let mut cov = DMatrix::zeros(d, d);
        for i in 0..self.len() {
            let w = self.weights[i] / self.mass;
            for k in 0..d {
                let dk = self.points[(k, i)] - mean[k];
                for l in 0..d {
                    cov[(k, l)] += w * dk * (self.points[(l, i)] - mean[l]);
                }
            }
        }
        (mean, cov)
    }

    pub fn read_csv(path: impl AsRef<Path>, mass: Option<f64>) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.clone();
        let weight_col = headers.iter().position(|h| h.trim() == "weight");
        let mut coords = Vec::new();
        let mut weights = Vec::new();
        let mut d = None;
        for rec in rdr.records() {
            let rec = rec?;
            let mut row = Vec::new();
            for (c, field) in rec.iter().enumerate() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| crate::Error::InvalidInput(format!("bad number {field:?}")))?;
                if Some(c) == weight_col {
                    weights.push(v);
                } else {
                    row.push(v);
                }
            }
            match d {
                None => d = Some(row.len()),
                Some(d0) if d0 != row.len() => return invalid("ragged CSV rows"),
                _ => {}
            }
            coords.extend(row);
        }
        let d = d.ok_or_else(|| crate::Error::InvalidInput("empty CSV".into()))?;
        let n = coords.len() / d.max(1);
        let points = DMatrix::from_vec(d, n, coords);
        if weight_col.is_some() {
            Self::new(points, DVector::from_vec(weights))
        } else {
            Self::uniform(points, mass.unwrap_or(1.0))
        }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (1..=self.dim()).map(|k| format!("x{k}")).collect();
        header.push("weight".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut row: Vec<String> = self.point(i).iter().map(|v| format!("{v:e}")).collect();
            row.push(format!("{:e}", self.weights[i]));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Empirical measure `(mass / n) Σ δ_{z_i}` from a `d × n` sample matrix.
pub fn empirical_from_samples(samples: &DMatrix<f64>, mass: f64) -> Result<DiscreteMeasure> {
    if samples.ncols() == 0 {
        return invalid("empty sample list");
    }
    DiscreteMeasure::uniform(samples.clone(), mass)
}

/// Samples of a coupling `π^n = (m_π / n) Σ δ_{(x_i, y_i)}`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledSample {
    xs: DMatrix<f64>,
    ys: DMatrix<f64>,
    mass: f64,
}

impl CoupledSample {
    pub fn new(xs: DMatrix<f64>, ys: DMatrix<f64>, mass: f64) -> Result<Self> {
        if xs.ncols() == 0 || xs.ncols() != ys.ncols() {
            return invalid("coupled sample needs matching, nonempty x and y lists");
        }
        if !(mass > 0.0) {
            return invalid("coupled sample mass must be positive");
        }
        Ok(Self { xs, ys, mass })
    }

    pub fn len(&self) -> usize {
        self.xs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.ncols() == 0
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn xs(&self) -> &DMatrix<f64> {
        &self.xs
    }

    pub fn ys(&self) -> &DMatrix<f64> {
        &self.ys
    }

    /// Lays the sample out on a grid built from the marginal measures.
    ///
    /// The supports of `alpha` and `beta` are extended with the sample points
    /// (carrying zero marginal weight), and the returned matrix holds the
    /// mass of `π^n` on each grid cell.
    pub fn on_grid(
        &self,
        alpha: &DiscreteMeasure,
        beta: &DiscreteMeasure,
    ) -> Result<(DiscreteMeasure, DiscreteMeasure, DMatrix<f64>)> {
        if alpha.dim() != self.xs.nrows() || beta.dim() != self.ys.nrows() {
            return invalid("dimension mismatch between coupling and marginals");
        }
        let n = self.len();
        let (na, nb) = (alpha.len(), beta.len());
        let a_pts = concat_cols(alpha.points(), &self.xs);
        let b_pts = concat_cols(beta.points(), &self.ys);
        let mut a_w = DVector::zeros(na + n);
        a_w.rows_mut(0, na).copy_from(alpha.weights());
        let mut b_w = DVector::zeros(nb + n);
        b_w.rows_mut(0, nb).copy_from(beta.weights());
        let mut pi = DMatrix::zeros(na + n, nb + n);
        let w = self.mass / n as f64;
        for k in 0..n {
            pi[(na + k, nb + k)] = w;
        }
        Ok((
            DiscreteMeasure::new(a_pts, a_w)?,
            DiscreteMeasure::new(b_pts, b_w)?,
            pi,
        ))
    }
}

fn concat_cols(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

/// `N(mean, covariance)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSpec {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianSpec {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if covariance.nrows() != d || covariance.ncols() != d {
            return invalid("covariance shape does not match mean");
        }
        let scale = covariance.amax().max(1.0);
        if (&covariance - covariance.transpose()).amax() > 1e-12 * scale {
            return invalid("covariance is not symmetric");
        }
        let eig = SymmetricEigen::new(covariance.clone());
        if eig.eigenvalues.min() < -1e-12 * scale {
            return invalid("covariance is not positive semi-definite");
        }
        Ok(Self { mean, covariance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Symmetric PSD square root, negative eigenvalues clipped at zero.
    pub fn sqrt_cov(&self) -> DMatrix<f64> {
        psd_sqrt(&self.covariance)
    }

    /// Second moment `Σ + m mᵀ`.
    pub fn second_moment(&self) -> DMatrix<f64> {
        &self.covariance + &self.mean * self.mean.transpose()
    }
}

pub(crate) fn psd_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(a.clone());
    let s = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose()
}

/// `n` draws `mean + L ξ` as a `d × n` matrix, `L` the symmetric square root.
pub fn sample_gaussian(spec: &GaussianSpec, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    if n == 0 {
        return invalid("n must be at least 1");
    }
    let spec = GaussianSpec::new(spec.mean.clone(), spec.covariance.clone())?;
    let d = spec.dim();
    let l = spec.sqrt_cov();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xi = DMatrix::from_fn(d, n, |_, _| StandardNormal.sample(&mut rng));
    let mut out = l * xi;
    for mut col in out.column_iter_mut() {
        col += &spec.mean;
    }
    Ok(out)
}

/// Deterministic per-task seed from a base seed and a task index (splitmix64).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base) ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded generator used throughout the crate.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
