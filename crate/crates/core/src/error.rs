//! Error type shared across the crate.

use crate::instanton::InstantonSolution;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("time grids differ in {context}")]
    GridMismatch { context: &'static str },

    #[error("state became non-finite at step {step} of the forward sweep")]
    Divergence { step: usize },

    #[error("model callback `{callback}` returned a non-finite value at x = {state:?}")]
    NonFiniteModel {
        callback: &'static str,
        state: Vec<f64>,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("projection reference vector has zero norm")]
    DegenerateReference,

    #[error("eigenvalue equals 1 exactly; Id - B is singular")]
    SingularEigenvalue,

    #[error("nondegeneracy violated: eigenvalue {eigenvalue} >= 1")]
    NondegeneracyViolation { eigenvalue: f64 },

    #[error("operator asymmetry detected: relative measure {measure:.3e}")]
    AsymmetricOperator { measure: f64 },

    #[error("dense spectrum refused: dim {dim} exceeds cap {cap}; use the iterative solver")]
    DenseCapExceeded { dim: usize, cap: usize },

    #[error("eigensolver converged only {converged} of {requested} pairs")]
    SpectrumIncomplete { converged: usize, requested: usize },

    #[error("optimizer did not converge: {detail}")]
    NonConvergence {
        detail: String,
        best: Box<InstantonSolution>,
    },

    #[error("all {attempted} Monte Carlo samples diverged")]
    AllSamplesDiverged { attempted: u64 },

    #[error("sample divergence at step {step} with abort-on-divergence policy")]
    SampleDiverged { step: usize },

    #[error("Riccati factor matrix det(U) vanished (pseudo-singularity)")]
    PseudoSingularity,

    #[error("{0}")]
    Unsupported(String),
}
