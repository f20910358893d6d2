//! Design-point (instanton) optimization: the constrained minimization
//! `min 1/2 ||eta||^2 subject to F[eta] = z` via an augmented Lagrangian with
//! L-BFGS inner solves, and the unconstrained multiplier-mode variant
//! `min 1/2 ||eta||^2 - lambda F[eta]`.

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::lbfgs::{self, LbfgsParams};
use crate::model::{Observable, SdeSystem};
use crate::path::{NoiseVector, StatePath};
use crate::propagation::{gradient, SolutionContext};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstantonMode {
    /// Constrained tail problem at a target observable value z.
    Tail,
    /// Unconstrained problem at a fixed multiplier (moment-generating mode).
    Mgf,
}

/// Converged design point with its trajectories and diagnostics.
#[derive(Debug, Clone)]
pub struct InstantonSolution {
    pub eta_z: NoiseVector,
    pub phi_z: StatePath,
    pub theta_z: StatePath,
    pub lambda_z: f64,
    /// `I(z) = 1/2 ||eta_z||^2`
    pub rate: f64,
    pub achieved_z: f64,
    pub target_z: f64,
    pub iterations: usize,
    pub converged: bool,
    pub mode: InstantonMode,
    /// `||eta - lambda dF/deta|| / max(||eta||, eps)`
    pub optimality_residual: f64,
    /// `|achieved - target| / max(|target|, eps)`
    pub constraint_violation: f64,
}

impl InstantonSolution {
    /// Rebuild the adjoint-side context used by the operator machinery.
    pub fn context(&self) -> SolutionContext {
        SolutionContext {
            eta: self.eta_z.clone(),
            phi: self.phi_z.clone(),
            theta: self.theta_z.clone(),
            lambda: self.lambda_z,
            observable_value: self.achieved_z,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    /// Strictly increasing penalty parameters for the outer loop.
    pub mu_schedule: Vec<f64>,
    pub lbfgs_memory: usize,
    /// Iteration cap per inner L-BFGS solve.
    pub lbfgs_max_iter: usize,
    /// Absolute target for the weighted gradient norm of the inner problem
    /// (best effort; the outer acceptance test is `residual_tol`).
    pub grad_tol: f64,
    /// Relative first-order optimality tolerance
    /// `||eta - lambda dF/deta|| / ||eta||` accepted by the outer loop.
    pub residual_tol: f64,
    /// Relative tolerance on |F - z|.
    pub constraint_tol: f64,
    pub initial_eta: Option<NoiseVector>,
    pub initial_lambda: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            mu_schedule: vec![1.0, 10.0, 100.0, 1e3, 1e4, 1e5],
            lbfgs_memory: 10,
            lbfgs_max_iter: 500,
            grad_tol: 1e-8,
            residual_tol: 1e-4,
            constraint_tol: 1e-3,
            initial_eta: None,
            initial_lambda: 0.0,
        }
    }
}

impl OptimizerConfig {
    fn validate(&self) -> Result<()> {
        if self.mu_schedule.is_empty() {
            return Err(Error::InvalidParameter("empty penalty schedule".into()));
        }
        let increasing = self
            .mu_schedule
            .windows(2)
            .all(|w| w[1] > w[0] && w[0] > 0.0);
        if !increasing || self.mu_schedule[0] <= 0.0 {
            return Err(Error::InvalidParameter(
                "penalty schedule must be positive and strictly increasing".into(),
            ));
        }
        if !(self.grad_tol > 0.0) || !(self.constraint_tol > 0.0) || !(self.residual_tol > 0.0) {
            return Err(Error::InvalidParameter(
                "tolerances must be positive".into(),
            ));
        }
        Ok(())
    }

    fn lbfgs_params(&self) -> LbfgsParams {
        LbfgsParams {
            memory: self.lbfgs_memory,
            max_iter: self.lbfgs_max_iter,
            grad_tol: self.grad_tol,
            ..Default::default()
        }
    }
}

fn finish_solution(
    system: &dyn SdeSystem,
    obs: &dyn Observable,
    grid: TimeGrid,
    eta: NoiseVector,
    lambda: f64,
    target_z: f64,
    iterations: usize,
    converged: bool,
    mode: InstantonMode,
) -> Result<InstantonSolution> {
    let (grad_lambda_f, ctx) = gradient(system, obs, grid, &eta, lambda)?;
    let mut residual = eta.clone();
    residual.add_scaled(-1.0, &grad_lambda_f);
    let optimality_residual = residual.norm() / eta.norm().max(1e-12);
    let achieved = ctx.observable_value;
    let rate = 0.5 * eta.norm_sq();
    Ok(InstantonSolution {
        eta_z: eta,
        phi_z: ctx.phi,
        theta_z: ctx.theta,
        lambda_z: lambda,
        rate,
        achieved_z: achieved,
        target_z,
        iterations,
        converged,
        mode,
        optimality_residual,
        constraint_violation: (achieved - target_z).abs() / target_z.abs().max(1e-8),
    })
}

/// Solve the constrained problem `min 1/2 ||eta||^2 s.t. F[eta] = z` with an
/// augmented Lagrangian outer loop and L-BFGS inner solves. The multiplier is
/// updated as `lambda <- lambda - mu (F - z)` after each inner solve.
pub fn find_instanton(
    system: &dyn SdeSystem,
    obs: &dyn Observable,
    grid: TimeGrid,
    z: f64,
    config: &OptimizerConfig,
) -> Result<InstantonSolution> {
    config.validate()?;
    let n = system.dim();
    let mut eta = config
        .initial_eta
        .clone()
        .unwrap_or_else(|| NoiseVector::zeros(grid, n));
    if eta.dim() != n || eta.grid() != grid {
        return Err(Error::GridMismatch {
            context: "find_instanton initial guess",
        });
    }
    let mut lambda = config.initial_lambda;
    let mut total_iterations = 0usize;
    let params = config.lbfgs_params();

    let mut converged = false;
    for &mu in &config.mu_schedule {
        let lambda_outer = lambda;
        let mut objective = |candidate: &NoiseVector| -> Result<(f64, NoiseVector)> {
            let (df, ctx) = gradient(system, obs, grid, candidate, 1.0)?;
            let mismatch = ctx.observable_value - z;
            let value = 0.5 * candidate.norm_sq() - lambda_outer * mismatch
                + 0.5 * mu * mismatch * mismatch;
            let mut grad = candidate.clone();
            grad.add_scaled(mu * mismatch - lambda_outer, &df);
            Ok((value, grad))
        };
        let outcome = lbfgs::minimize(&mut objective, eta, &params)?;
        total_iterations += outcome.iterations;
        eta = outcome.x;

        let (df, ctx) = gradient(system, obs, grid, &eta, 1.0)?;
        let mismatch = ctx.observable_value - z;
        lambda -= mu * mismatch;

        // outer acceptance: the original problem's KKT conditions
        let mut residual = eta.clone();
        residual.add_scaled(-lambda, &df);
        let residual_norm = residual.norm();
        let optimality_ok = residual_norm <= config.residual_tol * eta.norm().max(1e-12)
            || residual_norm <= config.grad_tol.max(1e-10);
        let violation = mismatch.abs() / z.abs().max(1e-8);
        if violation <= config.constraint_tol && optimality_ok {
            converged = true;
            break;
        }
    }

    let solution = finish_solution(
        system,
        obs,
        grid,
        eta,
        lambda,
        z,
        total_iterations,
        converged,
        InstantonMode::Tail,
    )?;
    if !converged {
        return Err(Error::NonConvergence {
            detail: format!(
                "constraint violation {:.3e} after penalty schedule (tol {:.1e})",
                solution.constraint_violation, config.constraint_tol
            ),
            best: Box::new(solution),
        });
    }
    Ok(solution)
}

/// Solve the unconstrained multiplier-mode problem
/// `min 1/2 ||eta||^2 - lambda F[eta]` at fixed `lambda`.
pub fn find_instanton_mgf(
    system: &dyn SdeSystem,
    obs: &dyn Observable,
    grid: TimeGrid,
    lambda: f64,
    config: &OptimizerConfig,
) -> Result<InstantonSolution> {
    config.validate()?;
    let n = system.dim();
    let eta0 = config
        .initial_eta
        .clone()
        .unwrap_or_else(|| NoiseVector::zeros(grid, n));
    let params = config.lbfgs_params();

    let mut objective = |candidate: &NoiseVector| -> Result<(f64, NoiseVector)> {
        let (df, ctx) = gradient(system, obs, grid, candidate, lambda)?;
        let value = 0.5 * candidate.norm_sq() - lambda * ctx.observable_value;
        let mut grad = candidate.clone();
        grad.add_scaled(-1.0, &df);
        Ok((value, grad))
    };
    let outcome = lbfgs::minimize(&mut objective, eta0, &params)?;
    let iterations = outcome.iterations;

    let achieved = {
        let (_, ctx) = gradient(system, obs, grid, &outcome.x, lambda)?;
        ctx.observable_value
    };
    let grad_norm = outcome.grad_norm;
    let accepted = outcome.converged
        || grad_norm <= config.residual_tol * outcome.x.norm().max(1e-12)
        || grad_norm <= config.grad_tol.max(1e-10);
    let solution = finish_solution(
        system,
        obs,
        grid,
        outcome.x,
        lambda,
        achieved,
        iterations,
        accepted,
        InstantonMode::Mgf,
    )?;
    if !accepted {
        return Err(Error::NonConvergence {
            detail: format!(
                "multiplier-mode minimization stalled with gradient norm {grad_norm:.3e}"
            ),
            best: Box::new(solution),
        });
    }
    Ok(solution)
}

/// Sequential continuation over target values: each solve warm-starts from the
/// previous solution's control and multiplier. Per-target failures are
/// recorded and the scan continues.
pub fn rate_function_scan(
    system: &dyn SdeSystem,
    obs: &dyn Observable,
    grid: TimeGrid,
    z_values: &[f64],
    config: &OptimizerConfig,
) -> Result<Vec<Result<InstantonSolution>>> {
    if z_values.is_empty() {
        return Err(Error::InvalidParameter(
            "rate_function_scan needs at least one target".into(),
        ));
    }
    let mut results = Vec::with_capacity(z_values.len());
    let mut warm: Option<(NoiseVector, f64)> = None;
    for &z in z_values {
        let mut local = config.clone();
        if let Some((eta, lambda)) = &warm {
            local.initial_eta = Some(eta.clone());
            local.initial_lambda = *lambda;
        }
        let result = find_instanton(system, obs, grid, z, &local);
        if let Ok(sol) = &result {
            warm = Some((sol.eta_z.clone(), sol.lambda_z));
        }
        results.push(result);
    }
    Ok(results)
}
