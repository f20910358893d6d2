//! Determinants, regularized traces, and assembly of the sharp tail
//! prefactor `C(z)` and the multiplier-mode prefactor `R_lambda`.
//!
//! All products and exponentials are carried in log space: the exponent
//! `I(z)/eps` spans hundreds of nats and the determinant factors vary over
//! many orders of magnitude.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::instanton::{InstantonMode, InstantonSolution};
use crate::model::{NoiseConvention, Observable, SdeSystem};
use crate::operators::{
    compose_projected, regularized_part, second_variation, OperatorHandle, OperatorWorkspace,
};
use crate::path::{inner_product, NoiseVector};
use crate::spectrum::{leading_eigenvalues_with, SpectrumResult, SpectrumSettings};

/// Margin below 1 that projected eigenvalues must respect; anything closer is
/// treated as a nondegeneracy violation rather than clamped.
const NONDEGENERACY_MARGIN: f64 = 1e-10;

fn check_spectrum_valid(eigenvalues: &[f64]) -> Result<()> {
    for &mu in eigenvalues {
        if !mu.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "non-finite eigenvalue {mu} in determinant input"
            )));
        }
        if mu == 1.0 {
            return Err(Error::SingularEigenvalue);
        }
        if mu > 1.0 - NONDEGENERACY_MARGIN {
            return Err(Error::NondegeneracyViolation { eigenvalue: mu });
        }
    }
    Ok(())
}

/// `log det(Id - B) = sum log(1 - mu_i)` for eigenvalues `mu_i < 1`.
pub fn log_fredholm_det(eigenvalues: &[f64]) -> Result<f64> {
    check_spectrum_valid(eigenvalues)?;
    Ok(eigenvalues.iter().map(|&mu| (-mu).ln_1p()).sum())
}

/// Fredholm determinant `prod (1 - mu_i)`; empty input gives 1.
pub fn fredholm_det(eigenvalues: &[f64]) -> Result<f64> {
    Ok(log_fredholm_det(eigenvalues)?.exp())
}

/// `log det_2(Id - B) = sum [log(1 - mu_i) + mu_i]`.
pub fn log_carleman_fredholm_det(eigenvalues: &[f64]) -> Result<f64> {
    check_spectrum_valid(eigenvalues)?;
    Ok(eigenvalues.iter().map(|&mu| (-mu).ln_1p() + mu).sum())
}

/// Carleman-Fredholm determinant `prod (1 - mu_i) exp(mu_i)`; well-defined
/// whenever the eigenvalues are square-summable.
pub fn carleman_fredholm_det(eigenvalues: &[f64]) -> Result<f64> {
    Ok(log_carleman_fredholm_det(eigenvalues)?.exp())
}

/// Partial sums `log det_2` over the leading `m = 1..=len` eigenvalues,
/// useful to diagnose truncation convergence.
pub fn det2_truncation_curve(eigenvalues: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    eigenvalues
        .iter()
        .map(|&mu| {
            acc += (-mu).ln_1p() + mu;
            acc
        })
        .collect()
}

/// Trace estimate as the sum of the `m` leading eigenvalues (by |mu|).
pub fn trace_by_eigensum(
    op: &OperatorHandle,
    m: usize,
    settings: &SpectrumSettings,
) -> Result<f64> {
    let spectrum = leading_eigenvalues_with(op, &settings.with_requested(m))?;
    if !spectrum.converged {
        return Err(Error::SpectrumIncomplete {
            converged: spectrum
                .residuals
                .iter()
                .filter(|&&r| r <= settings.tol)
                .count(),
            requested: m,
        });
    }
    Ok(spectrum.eigenvalues.iter().sum())
}

/// Hutchinson estimator of `tr[op]` with probes `xi ~ N(0, Id / dt)`.
/// Returns the mean and its standard error.
pub fn hutchinson_trace(op: &OperatorHandle, n_samples: usize, seed: u64) -> Result<(f64, f64)> {
    if n_samples < 2 {
        return Err(Error::InvalidParameter(
            "hutchinson_trace needs at least 2 probes".into(),
        ));
    }
    let scale = 1.0 / op.grid().dt().sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_samples {
        let mut probe = NoiseVector::zeros(op.grid(), op.state_dim());
        for x in probe.as_mut_slice() {
            *x = scale * rng.sample::<f64, _>(StandardNormal);
        }
        let image = op.apply(&probe)?;
        let quad = probe.dot_unchecked(&image);
        sum += quad;
        sum_sq += quad * quad;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let variance = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    Ok((mean, (variance / n).sqrt()))
}

/// Every term entering the sharp tail prefactor, kept for diagnostics.
#[derive(Debug, Clone)]
pub struct PrefactorBreakdown {
    pub lambda_z: f64,
    /// Rate function value `I(z)`.
    pub rate: f64,
    /// `det_2(Id - pr A pr)`
    pub det2_projected: f64,
    pub log_det2_projected: f64,
    /// `tr[pr (A - Atilde) pr]` via the leading-eigenvalue sum.
    pub trace_reg_projected: f64,
    /// `<e_z, Atilde e_z>`
    pub quad_atilde: f64,
    /// `1/2 int tr[sigma^T grad sigma theta] dt`; zero for Ito systems.
    pub strato_correction: f64,
    pub c: f64,
    pub log_c: f64,
    pub m_used: usize,
    pub hessian_eigenvalues: Vec<f64>,
    pub hessian_residuals: Vec<f64>,
    pub regularized_eigenvalues: Vec<f64>,
    pub regularized_residuals: Vec<f64>,
}

impl PrefactorBreakdown {
    /// Single labeled CSV row with the assembled prefactor terms.
    pub fn to_csv(&self) -> String {
        format!(
            "lambda_z,I_z,det2_projected,trace_reg_projected,quad_atilde,C_z\n{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
            self.lambda_z,
            self.rate,
            self.det2_projected,
            self.trace_reg_projected,
            self.quad_atilde,
            self.c
        )
    }

    pub fn to_json(&self) -> String {
        let mut s = String::from("{\n");
        let mut field = |name: &str, value: f64, last: bool| {
            s.push_str(&format!(
                "  \"{name}\": {:.16e}{}\n",
                value,
                if last { "" } else { "," }
            ));
        };
        field("lambda_z", self.lambda_z, false);
        field("I_z", self.rate, false);
        field("det2_projected", self.det2_projected, false);
        field("trace_reg_projected", self.trace_reg_projected, false);
        field("quad_atilde", self.quad_atilde, false);
        field("strato_correction", self.strato_correction, false);
        field("C_z", self.c, false);
        field("log_C_z", self.log_c, false);
        field("M", self.m_used as f64, true);
        s.push('}');
        s.push('\n');
        s
    }
}

fn converged_spectrum(op: &OperatorHandle, settings: &SpectrumSettings) -> Result<SpectrumResult> {
    let spectrum = leading_eigenvalues_with(op, settings)?;
    if !spectrum.converged {
        return Err(Error::SpectrumIncomplete {
            converged: spectrum
                .residuals
                .iter()
                .filter(|&&r| r <= settings.tol)
                .count(),
            requested: settings.requested,
        });
    }
    Ok(spectrum)
}

/// Left-endpoint quadrature of `1/2 int_0^T tr[sigma^T grad sigma theta] dt`
/// along the instanton pair `(phi_z, theta_z)`.
pub fn stratonovich_correction(system: &dyn SdeSystem, sol: &InstantonSolution) -> f64 {
    let n = system.dim();
    let grid = sol.phi_z.grid();
    let mut sig = vec![0.0; n * n];
    let mut diff_jac = vec![0.0; n * n * n];
    let mut acc = 0.0;
    for k in 0..grid.n_t() {
        let x = sol.phi_z.state(k);
        let theta = sol.theta_z.state(k);
        system.diffusion(x, &mut sig);
        system.diffusion_jacobian(x, &mut diff_jac);
        for i in 0..n {
            let mut corr = 0.0;
            for j in 0..n {
                for l in 0..n {
                    corr += sig[j * n + l] * diff_jac[(i * n + l) * n + j];
                }
            }
            acc += corr * theta[i];
        }
    }
    0.5 * grid.dt() * acc
}

/// Assemble the sharp tail prefactor `C(z)` from the converged instanton:
/// Carleman-Fredholm determinant of the projected second variation, the
/// regularized projected trace, the singular quadratic form, and (for
/// Stratonovich systems) the drift-correction integral.
pub fn compute_prefactor(
    system: &dyn SdeSystem,
    obs: &dyn Observable,
    grid: TimeGrid,
    sol: &InstantonSolution,
    settings: &SpectrumSettings,
) -> Result<PrefactorBreakdown> {
    if !sol.converged {
        return Err(Error::InvalidParameter(
            "compute_prefactor requires a converged instanton".into(),
        ));
    }
    if sol.rate <= 0.0 {
        return Err(Error::InvalidParameter(
            "prefactor undefined for the trivial (zero-rate) instanton".into(),
        ));
    }

    let ctx = sol.context();
    let ws = std::sync::Arc::new(OperatorWorkspace::new(system, obs, grid, &ctx)?);

    let hessian_proj = compose_projected(&second_variation(&ws), &sol.eta_z)?;
    let hessian_spectrum = converged_spectrum(&hessian_proj, settings)?;
    check_spectrum_valid(&hessian_spectrum.eigenvalues)?;
    let log_det2 = log_carleman_fredholm_det(&hessian_spectrum.eigenvalues)?;

    let regularized_proj = compose_projected(&regularized_part(&ws), &sol.eta_z)?;
    let regularized_spectrum = converged_spectrum(&regularized_proj, settings)?;
    let trace_reg: f64 = regularized_spectrum.eigenvalues.iter().sum();

    let norm = sol.eta_z.norm();
    let e_z = sol.eta_z.scaled(1.0 / norm);
    let quad_atilde = inner_product(&e_z, &ws.singular_part_apply(&e_z))?;

    let strato = match system.convention() {
        NoiseConvention::Stratonovich => stratonovich_correction(system, sol),
        NoiseConvention::Ito => 0.0,
    };

    let log_c =
        -0.5 * ((2.0 * sol.rate).ln() + log_det2) + 0.5 * trace_reg - 0.5 * quad_atilde + strato;

    Ok(PrefactorBreakdown {
        lambda_z: sol.lambda_z,
        rate: sol.rate,
        det2_projected: log_det2.exp(),
        log_det2_projected: log_det2,
        trace_reg_projected: trace_reg,
        quad_atilde,
        strato_correction: strato,
        c: log_c.exp(),
        log_c,
        m_used: settings.requested,
        hessian_eigenvalues: hessian_spectrum.eigenvalues,
        hessian_residuals: hessian_spectrum.residuals,
        regularized_eigenvalues: regularized_spectrum.eigenvalues,
        regularized_residuals: regularized_spectrum.residuals,
    })
}

/// Terms of the multiplier-mode prefactor `R_lambda` (unprojected operators).
#[derive(Debug, Clone)]
pub struct MgfPrefactor {
    pub r_lambda: f64,
    pub log_r: f64,
    pub det2: f64,
    pub trace_reg: f64,
    pub m_used: usize,
    pub hessian_eigenvalues: Vec<f64>,
    pub regularized_eigenvalues: Vec<f64>,
}

/// `R_lambda = det_2(Id - A)^{-1/2} exp(tr[A - Atilde] / 2)` at the solution's
/// multiplier. Requires `Id - A` positive definite (all eigenvalues < 1).
pub fn compute_mgf_prefactor_detailed(
    system: &dyn SdeSystem,
    obs: &dyn Observable,
    grid: TimeGrid,
    sol: &InstantonSolution,
    settings: &SpectrumSettings,
) -> Result<MgfPrefactor> {
    let ctx = sol.context();
    let ws = std::sync::Arc::new(OperatorWorkspace::new(system, obs, grid, &ctx)?);

    let hessian_spectrum = converged_spectrum(&second_variation(&ws), settings)?;
    check_spectrum_valid(&hessian_spectrum.eigenvalues)?;
    let log_det2 = log_carleman_fredholm_det(&hessian_spectrum.eigenvalues)?;

    let regularized_spectrum = converged_spectrum(&regularized_part(&ws), settings)?;
    let trace_reg: f64 = regularized_spectrum.eigenvalues.iter().sum();

    let log_r = -0.5 * log_det2 + 0.5 * trace_reg;
    Ok(MgfPrefactor {
        r_lambda: log_r.exp(),
        log_r,
        det2: log_det2.exp(),
        trace_reg,
        m_used: settings.requested,
        hessian_eigenvalues: hessian_spectrum.eigenvalues,
        regularized_eigenvalues: regularized_spectrum.eigenvalues,
    })
}

pub fn compute_mgf_prefactor(
    system: &dyn SdeSystem,
    obs: &dyn Observable,
    grid: TimeGrid,
    sol: &InstantonSolution,
    settings: &SpectrumSettings,
) -> Result<f64> {
    Ok(compute_mgf_prefactor_detailed(system, obs, grid, sol, settings)?.r_lambda)
}

/// `log P = log sqrt(eps) - log sqrt(2 pi) + log C - I/eps`.
pub fn log_tail_probability_parts(epsilon: f64, rate: f64, log_c: f64) -> f64 {
    0.5 * epsilon.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() + log_c - rate / epsilon
}

pub fn log_tail_probability(
    epsilon: f64,
    sol: &InstantonSolution,
    breakdown: &PrefactorBreakdown,
) -> f64 {
    log_tail_probability_parts(epsilon, sol.rate, breakdown.log_c)
}

/// Sharp estimate `sqrt(eps) (2 pi)^{-1/2} C(z) exp(-I(z)/eps)`.
pub fn tail_probability(
    epsilon: f64,
    sol: &InstantonSolution,
    breakdown: &PrefactorBreakdown,
) -> f64 {
    log_tail_probability(epsilon, sol, breakdown).exp()
}

/// Plain-Fredholm truncation of the discrete prefactor: correct for additive
/// noise, but for multiplicative noise it needs ever more eigenvalues as the
/// grid is refined. Kept to reproduce that breakdown.
pub fn naive_discrete_prefactor(
    system: &dyn SdeSystem,
    obs: &dyn Observable,
    grid: TimeGrid,
    sol: &InstantonSolution,
    m: usize,
    settings: &SpectrumSettings,
) -> Result<f64> {
    let ctx = sol.context();
    let ws = std::sync::Arc::new(OperatorWorkspace::new(system, obs, grid, &ctx)?);
    let hessian = second_variation(&ws);
    let op = match sol.mode {
        InstantonMode::Tail => compose_projected(&hessian, &sol.eta_z)?,
        InstantonMode::Mgf => hessian,
    };
    let spectrum = converged_spectrum(&op, &settings.with_requested(m))?;
    naive_prefactor_from_eigenvalues(sol, &spectrum.eigenvalues, m)
}

/// Truncated plain-Fredholm prefactor from precomputed eigenvalues.
pub fn naive_prefactor_from_eigenvalues(
    sol: &InstantonSolution,
    eigenvalues: &[f64],
    m: usize,
) -> Result<f64> {
    let m = m.min(eigenvalues.len());
    let log_det = log_fredholm_det(&eigenvalues[..m])?;
    let log_value = match sol.mode {
        InstantonMode::Tail => -0.5 * ((2.0 * sol.rate).ln() + log_det),
        InstantonMode::Mgf => -0.5 * log_det,
    };
    Ok(log_value.exp())
}

/// Cross-check value of `C(z)` at an interior scan point via the
/// multiplier-route transform `C = R sqrt(I'') / lambda`.
#[derive(Debug, Clone)]
pub struct MgfRoutePoint {
    pub z: f64,
    /// Second derivative of the rate function by central differences.
    pub i_second: f64,
    /// None when the local rate function is not strictly convex.
    pub c: Option<f64>,
}

/// Transform multiplier-mode prefactors into tail prefactors at the interior
/// points of a scan, using finite-difference curvature of the rate function.
/// Non-convex points are flagged rather than evaluated.
pub fn tail_prefactor_via_mgf(
    scan: &[InstantonSolution],
    mgf_prefactors: &[f64],
) -> Result<Vec<MgfRoutePoint>> {
    if scan.len() < 3 {
        return Err(Error::InvalidParameter(
            "the multiplier-route transform needs at least 3 scan points".into(),
        ));
    }
    if scan.len() != mgf_prefactors.len() {
        return Err(Error::DimensionMismatch {
            context: "tail_prefactor_via_mgf",
            expected: scan.len(),
            got: mgf_prefactors.len(),
        });
    }
    let mut points = Vec::with_capacity(scan.len() - 2);
    for i in 1..scan.len() - 1 {
        let (prev, here, next) = (&scan[i - 1], &scan[i], &scan[i + 1]);
        let h_minus = here.achieved_z - prev.achieved_z;
        let h_plus = next.achieved_z - here.achieved_z;
        if h_minus <= 0.0 || h_plus <= 0.0 {
            return Err(Error::InvalidParameter(
                "scan targets must be strictly increasing".into(),
            ));
        }
        let i_second = 2.0
            * (h_minus * next.rate - (h_minus + h_plus) * here.rate + h_plus * prev.rate)
            / (h_minus * h_plus * (h_minus + h_plus));
        let c = if i_second > 0.0 {
            Some(mgf_prefactors[i] * i_second.sqrt() / here.lambda_z)
        } else {
            None
        };
        points.push(MgfRoutePoint {
            z: here.achieved_z,
            i_second,
            c,
        });
    }
    Ok(points)
}

/// Quadratic form `<e_z, Atilde e_z>` on its own, for diagnostics.
pub fn singular_quadratic_form(
    system: &dyn SdeSystem,
    obs: &dyn Observable,
    grid: TimeGrid,
    sol: &InstantonSolution,
) -> Result<f64> {
    let ctx = sol.context();
    let ws = OperatorWorkspace::new(system, obs, grid, &ctx)?;
    let norm = sol.eta_z.norm();
    if norm <= 0.0 {
        return Err(Error::DegenerateReference);
    }
    let e_z = sol.eta_z.scaled(1.0 / norm);
    inner_product(&e_z, &ws.singular_part_apply(&e_z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instanton::{find_instanton, find_instanton_mgf, OptimizerConfig};
    use crate::model::NoiseConvention;
    use crate::models::{
        AdditiveOrnsteinUhlenbeck, CoordinateObservable, GeometricBrownianMotion,
        LogSquaredObservable,
    };
    use crate::path::StatePath;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use std::sync::Arc;

    #[test]
    fn fredholm_det_basics() {
        assert!((fredholm_det(&[0.5, 0.5]).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(fredholm_det(&[]).unwrap(), 1.0);
        assert!(matches!(
            fredholm_det(&[1.0]),
            Err(Error::SingularEigenvalue)
        ));
        assert!(matches!(
            fredholm_det(&[1.5]),
            Err(Error::NondegeneracyViolation { .. })
        ));
    }

    #[test]
    fn wallis_product_gives_two_over_pi() {
        // eigenvalues 1/(2i)^2 are trace-class; det(Id - B) = 2/pi
        let eigs: Vec<f64> = (1..=1_000_000u64)
            .map(|i| 1.0 / ((2 * i) as f64).powi(2))
            .collect();
        let det = fredholm_det(&eigs).unwrap();
        assert!((det - 2.0 / std::f64::consts::PI).abs() < 1e-6, "det {det}");
    }

    #[test]
    fn carleman_fredholm_trace_class_example() {
        let eigs: Vec<f64> = (1..=1_000_000u64)
            .map(|i| 1.0 / ((2 * i) as f64).powi(2))
            .collect();
        let det2 = carleman_fredholm_det(&eigs).unwrap();
        let expected = 2.0 / std::f64::consts::PI * (std::f64::consts::PI.powi(2) / 24.0).exp();
        assert!((det2 - expected).abs() < 1e-4, "det2 {det2} vs {expected}");
    }

    #[test]
    fn carleman_fredholm_hilbert_schmidt_example() {
        // eigenvalues 1/(2i) are only square-summable; det_2 converges to
        // exp(gamma/2)/sqrt(pi)
        const EULER_GAMMA: f64 = 0.5772156649015329;
        let eigs: Vec<f64> = (1..=10_000_000u64).map(|i| 1.0 / (2 * i) as f64).collect();
        let det2 = carleman_fredholm_det(&eigs).unwrap();
        let expected = (EULER_GAMMA / 2.0).exp() / std::f64::consts::PI.sqrt();
        assert!((det2 - expected).abs() < 1e-3, "det2 {det2} vs {expected}");
    }

    #[test]
    fn single_factor_carleman_fredholm() {
        let det2 = carleman_fredholm_det(&[-2.0]).unwrap();
        assert!((det2 - 3.0 * (-2.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn truncation_curve_settles_monotonically() {
        // decaying alternating spectrum: increments shrink monotonically
        let eigs: Vec<f64> = (1..=2000u64)
            .map(|i| if i % 2 == 0 { -1.0 } else { 1.0 } * 0.5 / (i * i) as f64)
            .collect();
        let curve = det2_truncation_curve(&eigs);
        let last = *curve.last().unwrap();
        let gaps: Vec<f64> = curve.iter().map(|v| (v - last).abs()).collect();
        for w in gaps.windows(2).take(100) {
            assert!(w[1] <= w[0] + 1e-15);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn cf_det_factorizes_for_trace_class_input(
            eigs in proptest::collection::vec(-2.0f64..0.9, 1..40)
        ) {
            let det2 = carleman_fredholm_det(&eigs).unwrap();
            let det = fredholm_det(&eigs).unwrap();
            let trace: f64 = eigs.iter().sum();
            let factored = det * trace.exp();
            prop_assert!(
                (det2 - factored).abs() <= 1e-10 * det2.abs().max(factored.abs()),
                "{det2} vs {factored}"
            );
        }
    }

    fn random_symmetric_contraction(dim: usize, rng: &mut rand_chacha::ChaCha8Rng) -> DMatrix<f64> {
        let raw = DMatrix::<f64>::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let qr = raw.qr();
        let q = qr.q();
        let eigs = DVector::<f64>::from_fn(dim, |_, _| rng.random_range(-1.5..0.9));
        &q * DMatrix::from_diagonal(&eigs) * q.transpose()
    }

    fn matrix_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
        m.clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .collect()
    }

    #[test]
    fn generalized_cramer_and_trace_projection_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(314);
        for trial in 0..25 {
            let dim = 5 + (trial % 20);
            let b = random_symmetric_contraction(dim, &mut rng);
            let mut e = DVector::<f64>::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            e /= e.norm();

            // <e, (Id - B)^{-1} e>
            let id = DMatrix::<f64>::identity(dim, dim);
            let solved = (&id - &b).lu().solve(&e).unwrap();
            let lhs = e.dot(&solved);

            let projector = &id - &e * e.transpose();
            let pbp = &projector * &b * &projector;
            let quad = e.dot(&(&b * &e));

            let det2_proj = carleman_fredholm_det(&matrix_eigenvalues(&pbp)).unwrap();
            let det2_full = carleman_fredholm_det(&matrix_eigenvalues(&b)).unwrap();
            let rhs = det2_proj / det2_full * quad.exp();
            assert!(
                (lhs - rhs).abs() <= 1e-8 * lhs.abs().max(rhs.abs()),
                "cramer: {lhs} vs {rhs}"
            );

            // tr[B] = tr[pr B pr] + <e, B e>
            let tr_b = b.trace();
            let tr_pbp = pbp.trace();
            assert!(
                (tr_b - (tr_pbp + quad)).abs() <= 1e-10 * tr_b.abs().max(1.0),
                "trace projection: {tr_b} vs {}",
                tr_pbp + quad
            );
        }
    }

    #[test]
    fn hutchinson_zero_operator() {
        let grid = TimeGrid::new(32, 1.0).unwrap();
        let op = OperatorHandle::new(
            "zero",
            grid,
            1,
            Arc::new(|v: &NoiseVector| Ok(NoiseVector::zeros(v.grid(), v.dim()))),
        );
        let (mean, se) = hutchinson_trace(&op, 100, 5).unwrap();
        assert_eq!(mean, 0.0);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn hutchinson_unbiased_on_diagonal_operator() {
        let grid = TimeGrid::new(50, 1.0).unwrap();
        // diagonal operator with matrix trace 3.0
        let entries: Vec<f64> = (0..50).map(|i| if i < 30 { 0.1 } else { 0.0 }).collect();
        let op = OperatorHandle::new(
            "diag",
            grid,
            1,
            Arc::new(move |v: &NoiseVector| {
                let mut out = v.clone();
                for (x, d) in out.as_mut_slice().iter_mut().zip(&entries) {
                    *x *= d;
                }
                Ok(out)
            }),
        );
        let (mean, se) = hutchinson_trace(&op, 10_000, 11).unwrap();
        assert!((mean - 3.0).abs() < 4.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn additive_linear_prefactor_reduces_to_rate_only() {
        let system = AdditiveOrnsteinUhlenbeck::new(1.0);
        let obs = CoordinateObservable::new(0);
        let grid = TimeGrid::new(400, 1.0).unwrap();
        let sol = find_instanton(&system, &obs, grid, 0.8, &OptimizerConfig::default()).unwrap();
        let settings = SpectrumSettings {
            requested: 20,
            ..Default::default()
        };
        let breakdown = compute_prefactor(&system, &obs, grid, &sol, &settings).unwrap();
        assert!((breakdown.det2_projected - 1.0).abs() < 1e-10);
        assert!(breakdown.trace_reg_projected.abs() < 1e-12);
        assert!(breakdown.quad_atilde.abs() < 1e-12);
        assert_eq!(breakdown.strato_correction, 0.0);
        let expected = 1.0 / (2.0 * sol.rate).sqrt();
        assert!((breakdown.c - expected).abs() < 1e-10 * expected);

        // the naive truncation agrees for additive noise
        let naive = naive_discrete_prefactor(&system, &obs, grid, &sol, 20, &settings).unwrap();
        assert!((naive - breakdown.c).abs() < 1e-10 * expected);
    }

    #[test]
    fn gbm_mgf_prefactor_near_exact_value() {
        let system = GeometricBrownianMotion::new(1.0, NoiseConvention::Ito);
        let obs = LogSquaredObservable;
        let grid = TimeGrid::new(500, 1.0).unwrap();
        let sol =
            find_instanton_mgf(&system, &obs, grid, -1.0, &OptimizerConfig::default()).unwrap();
        let settings = SpectrumSettings {
            requested: 30,
            ..Default::default()
        };
        let detail = compute_mgf_prefactor_detailed(&system, &obs, grid, &sol, &settings).unwrap();
        let exact = (1.0f64 / 3.0).sqrt() * (-1.0f64 / 3.0).exp();
        assert!(
            (detail.r_lambda - exact).abs() / exact < 0.02,
            "R {} vs {exact}",
            detail.r_lambda
        );
        // leading eigenvalue approx 2 lambda T = -2, trace of A - Atilde approx -8/3
        assert!((detail.hessian_eigenvalues[0] + 2.0).abs() < 0.05);
        assert!((detail.trace_reg + 8.0 / 3.0).abs() < 0.05);
    }

    #[test]
    fn mgf_prefactor_reduces_to_plain_fredholm_for_additive_noise() {
        // additive noise with a quadratic observable: A is trace-class and
        // Atilde = 0, so R computed via det_2 and the regularized trace must
        // match det(Id - A)^{-1/2} computed independently.
        struct Square;
        impl Observable for Square {
            fn value(&self, x: &[f64]) -> f64 {
                x[0] * x[0]
            }
            fn gradient(&self, x: &[f64], out: &mut [f64]) {
                out[0] = 2.0 * x[0];
            }
            fn hessian(&self, _x: &[f64], out: &mut [f64]) {
                out[0] = 2.0;
            }
        }
        let system = AdditiveOrnsteinUhlenbeck::new(1.0);
        let obs = Square;
        let grid = TimeGrid::new(300, 1.0).unwrap();
        let sol =
            find_instanton_mgf(&system, &obs, grid, 0.3, &OptimizerConfig::default()).unwrap();
        let settings = SpectrumSettings {
            requested: 12,
            ..Default::default()
        };
        let detail = compute_mgf_prefactor_detailed(&system, &obs, grid, &sol, &settings).unwrap();
        let plain = fredholm_det(&detail.hessian_eigenvalues)
            .unwrap()
            .powf(-0.5);
        assert!(
            (detail.r_lambda - plain).abs() < 1e-6 * plain,
            "{} vs {plain}",
            detail.r_lambda
        );
    }

    #[test]
    fn tail_probability_formula() {
        let p = log_tail_probability_parts(1.0, 0.0, 0.0).exp();
        assert!((p - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-15);

        // affine in 1/eps with slope -I after removing the sqrt(eps) factor
        let (rate, log_c) = (0.31, 0.42);
        for &(e1, e2) in &[(0.01, 0.004), (0.004, 0.001)] {
            let a1 = log_tail_probability_parts(e1, rate, log_c) + rate / e1 - 0.5 * e1.ln();
            let a2 = log_tail_probability_parts(e2, rate, log_c) + rate / e2 - 0.5 * e2.ln();
            assert!((a1 - a2).abs() < 1e-12);
        }
    }

    fn synthetic_solution(z: f64, rate: f64, lambda: f64) -> InstantonSolution {
        let grid = TimeGrid::new(4, 1.0).unwrap();
        InstantonSolution {
            eta_z: NoiseVector::zeros(grid, 1),
            phi_z: StatePath::zeros(grid, 1),
            theta_z: StatePath::zeros(grid, 1),
            lambda_z: lambda,
            rate,
            achieved_z: z,
            target_z: z,
            iterations: 0,
            converged: true,
            mode: InstantonMode::Tail,
            optimality_residual: 0.0,
            constraint_violation: 0.0,
        }
    }

    #[test]
    fn mgf_route_exact_for_quadratic_rate() {
        // I(z) = z^2 / (2q): central differences are exact, lambda = z / q,
        // R = 1 gives C = sqrt(I'') / lambda = sqrt(q) / z
        let q: f64 = 0.43;
        let zs = [0.9, 1.0, 1.1];
        let scan: Vec<InstantonSolution> = zs
            .iter()
            .map(|&z| synthetic_solution(z, z * z / (2.0 * q), z / q))
            .collect();
        let points = tail_prefactor_via_mgf(&scan, &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(points.len(), 1);
        let expected = q.sqrt() / 1.0;
        let c = points[0].c.unwrap();
        assert!((c - expected).abs() < 1e-12, "{c} vs {expected}");
        assert!((points[0].i_second - 1.0 / q).abs() < 1e-10);
    }

    #[test]
    fn mgf_route_flags_nonconvex_points() {
        let scan = vec![
            synthetic_solution(0.9, 0.10, 1.0),
            synthetic_solution(1.0, 0.25, 1.0),
            synthetic_solution(1.1, 0.30, 1.0),
        ];
        let points = tail_prefactor_via_mgf(&scan, &[1.0, 1.0, 1.0]).unwrap();
        assert!(points[0].i_second < 0.0);
        assert!(points[0].c.is_none());
    }
}
