use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("fixed-point iteration did not converge: residual {residual:.3e} after {iterations} iterations")]
    Diverged { residual: f64, iterations: usize },

    #[error("inner solve diverged at theta = {theta:?}: residual {residual:.3e} after {iterations} iterations")]
    InnerDiverged {
        theta: Vec<f64>,
        residual: f64,
        iterations: usize,
    },

    #[error("inner dual hessian is singular (smallest eigenvalue {min_eig:.3e})")]
    SingularInnerHessian { min_eig: f64 },

    #[error("hessian restricted to the model tangent space is singular")]
    RankDeficientTangent,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
