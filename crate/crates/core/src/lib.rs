//! Inverse unbalanced optimal transport with sharpened Fenchel-Young losses.

pub mod certificates;
pub mod cost_basis;
pub mod divergences;
pub mod error;
pub mod experiments;
pub mod forward_uot;
pub mod fy_loss;
pub mod gaussian_oracle;
pub mod ijko;
pub mod linalg;
pub mod measures;
pub mod solver;

pub use error::{Error, Result};
