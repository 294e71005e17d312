//! Robust topology optimization laboratory.
//!
//! The pipeline has four stages:
//! 1. `simp` generates deterministic compliance-minimal designs at sampled
//!    load realizations (`grid`, `fem`).
//! 2. `dataset` labels each design with its robust compliance (`robust`) and
//!    persists the corpus.
//! 3. `vae` learns a low-dimensional latent design space over the corpus and
//!    `surrogate` learns a robust-compliance regressor (`nn` is the shared
//!    neural substrate).
//! 4. `latent` minimizes the surrogate through the frozen decoder by gradient
//!    descent in latent space and re-verifies the winner with finite elements.

pub mod dataset;
pub mod fem;
pub mod grid;
pub mod latent;
pub mod nn;
pub mod parallel;
pub mod robust;
pub mod simp;
pub mod surrogate;
pub mod vae;

use thiserror::Error;

/// Errors shared across the pipeline stages.
#[derive(Error, Debug)]
pub enum RtoError {
    #[error("invalid problem geometry: {0}")]
    Geometry(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("solver did not converge after {iterations} iterations (residual {residual:.3e})")]
    SolverDiverged { iterations: usize, residual: f64 },
    #[error("matrix is not positive definite (pivot {pivot:.3e} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },
    #[error("volume bisection failed after {halvings} halvings, bracket [{lo:.3e}, {hi:.3e}]")]
    BisectionFailed { halvings: usize, lo: f64, hi: f64 },
    #[error("training diverged: {0}")]
    TrainingDiverged(String),
    #[error("bad file format: {0}")]
    Format(String),
    #[error("corpus generation aborted: {failed} of {total} samples failed")]
    CorpusFailures { failed: usize, total: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RtoError>;
