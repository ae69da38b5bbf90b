//! Experiment configuration files.

use std::path::{Path, PathBuf};

use ifyot::divergences::Divergence;
use ifyot::experiments::{log_grid, LossKind, Model};
use ifyot::solver::LbfgsOptions;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "kebab-case")]
pub enum ExperimentConfig {
    ForwardUot(ForwardUotConfig),
    Iuot(IuotConfig),
    Ijko(IjkoConfig),
    CertificateSweep(CertificateSweepConfig),
    SampleSweep(SampleSweepRun),
    SparseGraph(RecoveryRun),
    LowRank(RecoveryRun),
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::ForwardUot(_) => "forward-uot",
            Self::Iuot(_) => "iuot",
            Self::Ijko(_) => "ijko",
            Self::CertificateSweep(_) => "certificate-sweep",
            Self::SampleSweep(_) => "sample-sweep",
            Self::SparseGraph(_) => "sparse-graph",
            Self::LowRank(_) => "low-rank",
        }
    }

    pub fn output(&self) -> Option<&PathBuf> {
        match self {
            Self::ForwardUot(c) => c.output.as_ref(),
            Self::Iuot(c) => c.output.as_ref(),
            Self::Ijko(c) => c.output.as_ref(),
            Self::CertificateSweep(c) => c.output.as_ref(),
            Self::SampleSweep(c) => c.output.as_ref(),
            Self::SparseGraph(c) | Self::LowRank(c) => c.output.as_ref(),
        }
    }

    /// Semantic checks that the schema cannot express.
    fn check(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        match self {
            Self::ForwardUot(c) => {
                if c.eta <= 0.0 {
                    return bad("eta must be positive");
                }
            }
            Self::Iuot(c) => {
                if c.eta <= 0.0 || c.r < 0.0 {
                    return bad("eta must be positive and r nonnegative");
                }
                c.lambdas.values()?;
            }
            Self::Ijko(c) => {
                if c.rs.is_empty() || c.rs.iter().any(|r| *r <= 0.0) {
                    return bad("rs must be a nonempty list of positive values");
                }
                matrix(&c.theta_star, "theta_star")?;
                matrix(&c.sigma0, "sigma0")?;
                matrix(&c.theta, "theta")?;
            }
            Self::CertificateSweep(c) => {
                if c.parameters.is_empty() || c.steps.is_empty() || c.steps.contains(&0) {
                    return bad("parameters and steps must be nonempty, steps positive");
                }
            }
            Self::SampleSweep(c) => {
                if c.ns.len() < 2 || c.seeds == 0 {
                    return bad("sample sweep needs at least two sample sizes and one seed");
                }
            }
            Self::SparseGraph(c) | Self::LowRank(c) => {
                if c.ns.is_empty() || c.steps == 0 {
                    return bad("ns must be nonempty and steps positive");
                }
                c.lambdas.values()?;
            }
        }
        Ok(())
    }
}

fn default_tol() -> f64 {
    1e-9
}

fn default_max_iter() -> usize {
    10_000
}

fn default_mass() -> f64 {
    1.0
}

fn default_mean() -> f64 {
    2.0
}

fn default_delta() -> f64 {
    1e-4
}

fn default_support_tol() -> f64 {
    ifyot::experiments::SUPPORT_TOL
}

fn default_rank_tol() -> f64 {
    ifyot::experiments::RANK_TOL
}

/// Rows of a dense matrix.
pub fn matrix(rows: &[Vec<f64>], name: &str) -> Result<nalgebra::DMatrix<f64>, CliError> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(CliError::Config(format!("{name} must be a nonempty rectangular matrix")));
    }
    Ok(nalgebra::DMatrix::from_fn(n, rows[0].len(), |i, j| rows[i][j]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MeasureSource {
    /// One point per row; an optional `weight` column.
    Csv { path: PathBuf, mass: Option<f64> },
    /// `n` samples of `N(mean, std² I)` with uniform weights.
    Gaussian {
        n: usize,
        mean: Vec<f64>,
        std: f64,
        #[serde(default = "default_mass")]
        mass: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BasisSpec {
    /// `‖x − y‖² + Σ θ_ij x_i y_j`, `θ` column-major `d × d`.
    Bilinear,
    /// `xᵀθ̄x + ‖x − y‖²/τ`, `θ` over the upper triangle.
    PotentialQuadratic { tau: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyKind {
    None,
    L1,
    NonnegL1,
    Nuclear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaGrid {
    List(Vec<f64>),
    Log { lo: f64, hi: f64, per_decade: usize },
}

impl Default for LambdaGrid {
    fn default() -> Self {
        LambdaGrid::Log {
            lo: 1e-6,
            hi: 1.0,
            per_decade: 20,
        }
    }
}

impl LambdaGrid {
    pub fn values(&self) -> Result<Vec<f64>, CliError> {
        match self {
            LambdaGrid::List(v) => {
                if v.is_empty() || v.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
                    return Err(CliError::Config("λ grid must be nonempty, finite and nonnegative".into()));
                }
                Ok(v.clone())
            }
            LambdaGrid::Log { lo, hi, per_decade } => {
                log_grid(*lo, *hi, *per_decade).map_err(|e| CliError::Config(e.to_string()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForwardUotConfig {
    pub alpha: MeasureSource,
    pub beta: MeasureSource,
    pub basis: BasisSpec,
    pub theta: Vec<f64>,
    pub eta: f64,
    pub div1: Divergence,
    pub div2: Divergence,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IuotConfig {
    pub alpha: MeasureSource,
    pub beta: MeasureSource,
    pub basis: BasisSpec,
    /// Generates the observed plan and scores `θ̂`.
    pub theta_star: Vec<f64>,
    pub eta: f64,
    #[serde(default)]
    pub r: f64,
    pub div1: Divergence,
    pub div2: Divergence,
    pub penalty: PenaltyKind,
    #[serde(default)]
    pub lambdas: LambdaGrid,
    #[serde(default = "default_support_tol")]
    pub support_tol: f64,
    #[serde(default)]
    pub lbfgs: LbfgsOptions,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

/// `r F̃_r` against its variance limit on a Gaussian step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IjkoConfig {
    pub theta_star: Vec<Vec<f64>>,
    pub m0: Vec<f64>,
    pub sigma0: Vec<Vec<f64>>,
    pub tau: f64,
    pub eta: f64,
    /// Gauss-Hermite nodes per axis.
    pub nodes: usize,
    pub rs: Vec<f64>,
    pub theta: Vec<Vec<f64>>,
    #[serde(default = "default_limit_tol")]
    pub rel_tol: f64,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_limit_tol() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateSweepConfig {
    pub setting: Model,
    pub loss: LossKind,
    pub d: usize,
    /// `σ` values (sparse) or `ω` values (low-rank).
    pub parameters: Vec<f64>,
    pub steps: Vec<usize>,
    pub tau: f64,
    #[serde(default = "default_mean")]
    pub mean: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSweepRun {
    pub grid_points: usize,
    pub ns: Vec<usize>,
    pub seeds: usize,
    pub eta: f64,
    pub div1: Divergence,
    pub div2: Divergence,
    pub theta_star: Vec<f64>,
    pub lambda0: f64,
    pub seed: u64,
    #[serde(default)]
    pub lbfgs: LbfgsOptions,
    /// Accepted range of the fitted log-log slopes.
    #[serde(default = "default_slope_range")]
    pub slope_range: [f64; 2],
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_slope_range() -> [f64; 2] {
    [-0.7, -0.3]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecoveryRun {
    pub loss: LossKind,
    pub d: usize,
    pub steps: usize,
    pub tau: f64,
    pub eta: f64,
    pub r: f64,
    /// `σ` (sparse-graph) or `ω` (low-rank).
    pub parameter: f64,
    #[serde(default = "default_mean")]
    pub mean: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    pub ns: Vec<usize>,
    #[serde(default)]
    pub lambdas: LambdaGrid,
    pub seed: u64,
    #[serde(default = "default_support_tol")]
    pub support_tol: f64,
    #[serde(default = "default_rank_tol")]
    pub rank_tol: f64,
    #[serde(default)]
    pub lbfgs: LbfgsOptions,
    /// Expected recovery at the largest `n`, reported in the summary.
    #[serde(default)]
    pub expect_recovery: Option<bool>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl SampleSweepRun {
    pub fn core(&self) -> ifyot::experiments::SampleSweepConfig {
        ifyot::experiments::SampleSweepConfig {
            grid_points: self.grid_points,
            ns: self.ns.clone(),
            seeds: self.seeds,
            eta: self.eta,
            div1: self.div1,
            div2: self.div2,
            theta_star: self.theta_star.clone(),
            lambda0: self.lambda0,
            seed: self.seed,
            lbfgs: self.lbfgs,
        }
    }
}

impl RecoveryRun {
    pub fn core(&self, model: Model) -> Result<ifyot::experiments::RecoveryConfig, CliError> {
        Ok(ifyot::experiments::RecoveryConfig {
            model,
            loss: self.loss,
            d: self.d,
            steps: self.steps,
            tau: self.tau,
            eta: self.eta,
            r: self.r,
            parameter: self.parameter,
            mean: self.mean,
            delta: self.delta,
            ns: self.ns.clone(),
            lambdas: self.lambdas.values()?,
            seed: self.seed,
            support_tol: self.support_tol,
            rank_tol: self.rank_tol,
            lbfgs: self.lbfgs,
        })
    }
}
