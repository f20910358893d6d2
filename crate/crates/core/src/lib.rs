//! Sharp small-noise tail-probability estimation for SDEs.
//!
//! Given an SDE `dX = b(X) dt + sqrt(eps) sigma(X) dW` and a final-time
//! observable `f`, this crate computes the asymptotically sharp estimate
//!
//! ```text
//! P[f(X_T) >= z] ~ sqrt(eps) (2 pi)^{-1/2} C(z) exp(-I(z) / eps)
//! ```
//!
//! by solving for the most probable noise realization (the design point or
//! instanton), extracting the leading spectrum of matrix-free second-variation
//! operators, and assembling the prefactor from a Carleman-Fredholm
//! determinant, a regularized operator trace, and a singular quadratic form.
//! Monte Carlo estimation with Wilson score intervals provides the ground
//! truth to validate against, and a Riccati route cross-checks additive-noise
//! prefactors.

pub mod error;
pub mod grid;
pub mod instanton;
pub mod lbfgs;
pub mod model;
pub mod models;
pub mod montecarlo;
pub mod operators;
pub mod path;
pub mod prefactor;
pub mod propagation;
pub mod riccati;
pub mod spectrum;

pub use error::{Error, Result};
pub use grid::TimeGrid;
pub use instanton::{
    find_instanton, find_instanton_mgf, rate_function_scan, InstantonMode, InstantonSolution,
    OptimizerConfig,
};
pub use model::{validate_derivatives, DerivativeReport, NoiseConvention, Observable, SdeSystem};
pub use models::{builtin_model, ModelInstance};
pub use montecarlo::{
    compare_sweep, estimate_tail, wilson_interval, AsymptoticPoint, CompareTable, McConfig,
    TailEstimateMc,
};
pub use operators::{
    atilde_apply, compose_projected, hessian_apply, project_perp, regularized_apply,
    regularized_part, second_variation, singular_part, OperatorHandle, OperatorWorkspace,
};
pub use path::{inner_product, NoiseVector, StatePath};
pub use prefactor::{
    carleman_fredholm_det, compute_mgf_prefactor, compute_mgf_prefactor_detailed,
    compute_prefactor, fredholm_det, hutchinson_trace, log_tail_probability,
    naive_discrete_prefactor, tail_prefactor_via_mgf, tail_probability, trace_by_eigensum,
    MgfPrefactor, PrefactorBreakdown,
};
pub use propagation::{gradient, sample_path, solve_forward, DivergencePolicy, SolutionContext};
pub use riccati::{riccati_prefactor, RiccatiOutcome};
pub use spectrum::{
    dense_spectrum, leading_eigenvalues, matvec_scaling_report, SpectrumResult, SpectrumSettings,
    DEFAULT_DENSE_CAP,
};
