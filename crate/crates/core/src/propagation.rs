//! Forward solves of the controlled ODE, the discrete adjoint gradient, and
//! stochastic sampling of the SDE.
//!
//! Everything here differentiates the explicit-Euler discretization itself
//! (discretize-then-differentiate): gradients are exact transposes of the
//! discrete tangent map, scaled by `1/dt` so they live in the dt-weighted
//! inner product.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::model::{NoiseConvention, Observable, SdeSystem};
use crate::path::{NoiseVector, StatePath};

#[inline]
pub(crate) fn mat_vec(n: usize, a: &[f64], x: &[f64], out: &mut [f64]) {
    for i in 0..n {
        let mut acc = 0.0;
        let row = &a[i * n..(i + 1) * n];
        for j in 0..n {
            acc += row[j] * x[j];
        }
        out[i] = acc;
    }
}

#[inline]
pub(crate) fn mat_tvec(n: usize, a: &[f64], x: &[f64], out: &mut [f64]) {
    for j in 0..n {
        out[j] = 0.0;
    }
    for i in 0..n {
        let row = &a[i * n..(i + 1) * n];
        let xi = x[i];
        for j in 0..n {
            out[j] += row[j] * xi;
        }
    }
}

/// `L[eta, phi] = grad b + grad sigma . eta`, entry `(i, j)`:
/// `db_i/dx_j + (d sigma_il / dx_j) eta_l`.
pub(crate) fn assemble_l_matrix(
    n: usize,
    drift_jac: &[f64],
    diff_jac: &[f64],
    eta_k: &[f64],
    out: &mut [f64],
) {
    out.copy_from_slice(drift_jac);
    for i in 0..n {
        for l in 0..n {
            let el = eta_k[l];
            if el == 0.0 {
                continue;
            }
            let base = (i * n + l) * n;
            for j in 0..n {
                out[i * n + j] += diff_jac[base + j] * el;
            }
        }
    }
}

fn check_finite(state: &[f64], step: usize) -> Result<()> {
    if state.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence { step })
    }
}

/// Explicit-Euler solve of `phi' = b(phi) + sigma(phi) eta` from the system's
/// initial state; returns the trajectory and `F = f(phi(T))`.
///
/// Stratonovich systems are solved with the base drift: their eps-dependent
/// drift correction enters only the prefactor.
pub fn solve_forward(
    system: &dyn SdeSystem,
    obs: &dyn Observable,
    grid: TimeGrid,
    eta: &NoiseVector,
) -> Result<(StatePath, f64)> {
    let n = system.dim();
    if eta.dim() != n {
        return Err(Error::DimensionMismatch {
            context: "solve_forward",
            expected: n,
            got: eta.dim(),
        });
    }
    if eta.grid() != grid {
        return Err(Error::GridMismatch {
            context: "solve_forward",
        });
    }
    let n_t = grid.n_t();
    let dt = grid.dt();

    let mut phi = StatePath::zeros(grid, n);
    phi.state_mut(0).copy_from_slice(system.initial_state());

    let mut b = vec![0.0; n];
    let mut sig = vec![0.0; n * n];
    let mut push = vec![0.0; n];
    let mut xk = vec![0.0; n];
    for k in 0..n_t {
        xk.copy_from_slice(phi.state(k));
        system.drift(&xk, &mut b);
        system.diffusion(&xk, &mut sig);
        mat_vec(n, &sig, eta.step(k), &mut push);
        let next = phi.state_mut(k + 1);
        for i in 0..n {
            next[i] = xk[i] + dt * (b[i] + push[i]);
        }
        check_finite(next, k)?;
    }
    let value = obs.value(phi.final_state());
    if !value.is_finite() {
        return Err(Error::Divergence { step: n_t });
    }
    Ok((phi, value))
}

/// Instanton-side bundle produced by the adjoint sweep: the control, forward
/// trajectory, adjoint trajectory, multiplier, and observable value.
#[derive(Debug, Clone)]
pub struct SolutionContext {
    pub eta: NoiseVector,
    pub phi: StatePath,
    pub theta: StatePath,
    pub lambda: f64,
    pub observable_value: f64,
}

/// Exact gradient of the discrete map `eta -> lambda F[eta]` in the
/// dt-weighted inner product, together with the adjoint path.
///
/// The adjoint recursion is the transpose of the discrete Euler tangent:
/// `theta_k = (Id + dt L_k)^T theta_{k+1}`, `theta_{n_t} = lambda grad f`,
/// and the gradient reads `sigma(phi_k)^T theta_{k+1}` per step.
pub fn gradient(
    system: &dyn SdeSystem,
    obs: &dyn Observable,
    grid: TimeGrid,
    eta: &NoiseVector,
    lambda: f64,
) -> Result<(NoiseVector, SolutionContext)> {
    if !lambda.is_finite() {
        return Err(Error::InvalidParameter("lambda must be finite".into()));
    }
    let n = system.dim();
    let n_t = grid.n_t();
    let dt = grid.dt();
    let (phi, value) = solve_forward(system, obs, grid, eta)?;

    let mut theta = StatePath::zeros(grid, n);
    let mut grad_f = vec![0.0; n];
    obs.gradient(phi.final_state(), &mut grad_f);
    for (t, g) in theta.state_mut(n_t).iter_mut().zip(&grad_f) {
        *t = lambda * g;
    }

    let mut grad = NoiseVector::zeros(grid, n);
    let mut drift_jac = vec![0.0; n * n];
    let mut diff_jac = vec![0.0; n * n * n];
    let mut sig = vec![0.0; n * n];
    let mut l_mat = vec![0.0; n * n];
    let mut tmp = vec![0.0; n];
    for k in (0..n_t).rev() {
        let xk = phi.state(k);
        system.drift_jacobian(xk, &mut drift_jac);
        system.diffusion_jacobian(xk, &mut diff_jac);
        system.diffusion(xk, &mut sig);
        assemble_l_matrix(n, &drift_jac, &diff_jac, eta.step(k), &mut l_mat);

        let theta_next = theta.state(k + 1).to_vec();
        mat_tvec(n, &sig, &theta_next, grad.step_mut(k));
        mat_tvec(n, &l_mat, &theta_next, &mut tmp);
        let theta_k = theta.state_mut(k);
        for i in 0..n {
            theta_k[i] = theta_next[i] + dt * tmp[i];
        }
    }

    Ok((
        grad,
        SolutionContext {
            eta: eta.clone(),
            phi,
            theta,
            lambda,
            observable_value: value,
        },
    ))
}

/// Divergence handling for stochastic sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DivergencePolicy {
    /// Drop the sample and report it in the divergence count.
    Reject,
    /// Abort the whole estimation on the first divergent sample.
    Abort,
}

pub(crate) fn sample_final_state(
    system: &dyn SdeSystem,
    grid: TimeGrid,
    epsilon: f64,
    rng: &mut impl Rng,
    mut record: Option<&mut StatePath>,
) -> Result<Vec<f64>> {
    let n = system.dim();
    let n_t = grid.n_t();
    let dt = grid.dt();
    let noise_scale = (epsilon * dt).sqrt();
    let strato = system.convention() == NoiseConvention::Stratonovich && epsilon > 0.0;

    let mut x = system.initial_state().to_vec();
    if let Some(path) = record.as_deref_mut() {
        path.state_mut(0).copy_from_slice(&x);
    }
    let mut b = vec![0.0; n];
    let mut sig = vec![0.0; n * n];
    let mut diff_jac = vec![0.0; n * n * n];
    let mut xi = vec![0.0; n];
    let mut push = vec![0.0; n];
    for k in 0..n_t {
        system.drift(&x, &mut b);
        system.diffusion(&x, &mut sig);
        if strato {
            // Ito drift correction (eps/2) sigma_jl d_j sigma_il
            system.diffusion_jacobian(&x, &mut diff_jac);
            for i in 0..n {
                let mut corr = 0.0;
                for j in 0..n {
                    for l in 0..n {
                        corr += sig[j * n + l] * diff_jac[(i * n + l) * n + j];
                    }
                }
                b[i] += 0.5 * epsilon * corr;
            }
        }
        if epsilon > 0.0 {
            for v in xi.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            mat_vec(n, &sig, &xi, &mut push);
        } else {
            push.fill(0.0);
        }
        for i in 0..n {
            x[i] += dt * b[i] + noise_scale * push[i];
        }
        check_finite(&x, k)?;
        if let Some(path) = record.as_deref_mut() {
            path.state_mut(k + 1).copy_from_slice(&x);
        }
    }
    Ok(x)
}

/// Euler-Maruyama sample of the SDE at noise strength `epsilon`, returning the
/// full path and `F = f(X_T)`. Stratonovich systems are sampled through the
/// equivalent Ito SDE with drift correction `(eps/2) sigma_jl d_j sigma_il`.
pub fn sample_path(
    system: &dyn SdeSystem,
    obs: &dyn Observable,
    grid: TimeGrid,
    epsilon: f64,
    rng: &mut impl Rng,
) -> Result<(StatePath, f64)> {
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "epsilon must be >= 0, got {epsilon}"
        )));
    }
    let mut path = StatePath::zeros(grid, system.dim());
    let x = sample_final_state(system, grid, epsilon, rng, Some(&mut path))?;
    let value = obs.value(&x);
    if !value.is_finite() {
        return Err(Error::Divergence { step: grid.n_t() });
    }
    Ok((path, value))
}
