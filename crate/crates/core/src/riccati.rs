//! Independent prefactor computation for additive-noise systems through the
//! forward matrix Riccati equation, used as a cross-check oracle against the
//! operator-determinant route.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::instanton::InstantonSolution;
use crate::model::{Observable, SdeSystem};

/// Diagnostics of one Riccati integration.
#[derive(Debug, Clone)]
pub struct RiccatiOutcome {
    pub c: f64,
    /// `Q(T)` row-major.
    pub q_final: Vec<f64>,
    pub det_u: f64,
    /// Smallest eigenvalue of `Q(t)` observed along the integration.
    pub min_q_eigenvalue: f64,
}

fn ensure_additive(system: &dyn SdeSystem) -> Result<()> {
    let n = system.dim();
    let mut diff_jac = vec![0.0; n * n * n];
    system.diffusion_jacobian(system.initial_state(), &mut diff_jac);
    if diff_jac.iter().any(|&v| v != 0.0) {
        return Err(Error::Unsupported(
            "the Riccati prefactor route requires additive noise (constant sigma)".into(),
        ));
    }
    Ok(())
}

/// `<hess b(x), theta>` as a symmetric n x n matrix.
fn curvature_matrix(system: &dyn SdeSystem, x: &[f64], theta: &[f64], out: &mut DMatrix<f64>) {
    let n = system.dim();
    let mut hess = vec![0.0; n * n * n];
    system.drift_hessian(x, &mut hess);
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += theta[k] * hess[(k * n + i) * n + j];
            }
            out[(i, j)] = acc;
        }
    }
}

/// Right-hand side of the Riccati flow and the accumulated exponent:
/// `Q' = sigma sigma^T + Q Jb^T + Jb Q + Q <hess b, theta> Q`,
/// `w' = tr[<hess b, theta> Q] / 2`.
struct Flow<'a> {
    system: &'a dyn SdeSystem,
    sigma_sq: DMatrix<f64>,
}

impl Flow<'_> {
    fn eval(
        &self,
        x: &[f64],
        theta: &[f64],
        q: &DMatrix<f64>,
        dq: &mut DMatrix<f64>,
        dw: &mut f64,
    ) {
        let n = self.system.dim();
        let mut jac = vec![0.0; n * n];
        self.system.drift_jacobian(x, &mut jac);
        let jb = DMatrix::<f64>::from_row_slice(n, n, &jac);
        let mut curv = DMatrix::<f64>::zeros(n, n);
        curvature_matrix(self.system, x, theta, &mut curv);

        let cq = &curv * q;
        *dq = &self.sigma_sq + q * jb.transpose() + &jb * q + q * &cq;
        *dw = 0.5 * cq.trace();
    }
}

/// Prefactor `C(z)` for additive-noise systems via the Riccati equation,
/// integrated with RK4 along the instanton pair `(phi_z, theta_z)` with
/// linear interpolation to half-steps.
pub fn riccati_prefactor(
    system: &dyn SdeSystem,
    obs: &dyn Observable,
    grid: TimeGrid,
    sol: &InstantonSolution,
) -> Result<RiccatiOutcome> {
    ensure_additive(system)?;
    if sol.lambda_z == 0.0 {
        return Err(Error::InvalidParameter(
            "Riccati prefactor undefined at zero multiplier".into(),
        ));
    }
    let n = system.dim();
    let n_t = grid.n_t();
    let dt = grid.dt();

    let mut sigma = vec![0.0; n * n];
    system.diffusion(system.initial_state(), &mut sigma);
    let sigma_mat = DMatrix::<f64>::from_row_slice(n, n, &sigma);
    let flow = Flow {
        system,
        sigma_sq: &sigma_mat * sigma_mat.transpose(),
    };

    let interpolate = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect()
    };

    let mut q = DMatrix::<f64>::zeros(n, n);
    let mut w = 0.0f64;
    let mut min_eig = f64::INFINITY;
    let mut k1 = DMatrix::<f64>::zeros(n, n);
    let mut k2 = k1.clone();
    let mut k3 = k1.clone();
    let mut k4 = k1.clone();
    for k in 0..n_t {
        let x0 = sol.phi_z.state(k);
        let x1 = sol.phi_z.state(k + 1);
        let th0 = sol.theta_z.state(k);
        let th1 = sol.theta_z.state(k + 1);
        let xm = interpolate(x0, x1);
        let thm = interpolate(th0, th1);

        let (mut w1, mut w2, mut w3, mut w4) = (0.0, 0.0, 0.0, 0.0);
        flow.eval(x0, th0, &q, &mut k1, &mut w1);
        let q2 = &q + &k1 * (0.5 * dt);
        flow.eval(&xm, &thm, &q2, &mut k2, &mut w2);
        let q3 = &q + &k2 * (0.5 * dt);
        flow.eval(&xm, &thm, &q3, &mut k3, &mut w3);
        let q4 = &q + &k3 * dt;
        flow.eval(x1, th1, &q4, &mut k4, &mut w4);

        q += (&k1 + &k2 * 2.0 + &k3 * 2.0 + &k4) * (dt / 6.0);
        w += dt / 6.0 * (w1 + 2.0 * w2 + 2.0 * w3 + w4);

        if !q.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence { step: k });
        }
        // keep Q symmetric against round-off drift
        for i in 0..n {
            for j in 0..i {
                let s = 0.5 * (q[(i, j)] + q[(j, i)]);
                q[(i, j)] = s;
                q[(j, i)] = s;
            }
        }
        let smallest = q
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(f64::INFINITY, |a, &b| a.min(b));
        min_eig = min_eig.min(smallest);
    }

    let x_final = sol.phi_z.final_state();
    let mut obs_hess = vec![0.0; n * n];
    obs.hessian(x_final, &mut obs_hess);
    let hess_f = DMatrix::<f64>::from_row_slice(n, n, &obs_hess);
    let u = DMatrix::<f64>::identity(n, n) - hess_f * &q * sol.lambda_z;
    let det_u = u.determinant();
    if det_u.abs() < 1e-14 {
        return Err(Error::PseudoSingularity);
    }

    let mut grad_f = vec![0.0; n];
    obs.gradient(x_final, &mut grad_f);
    let grad = DMatrix::<f64>::from_row_slice(n, 1, &grad_f);
    let solved = u
        .clone()
        .lu()
        .solve(&(&q * &grad))
        .ok_or(Error::PseudoSingularity)?;
    let quad = (grad.transpose() * &solved)[(0, 0)];
    let radicand = det_u * quad;
    if radicand <= 0.0 {
        return Err(Error::PseudoSingularity);
    }

    let c = w.exp() / (sol.lambda_z * radicand.sqrt());
    Ok(RiccatiOutcome {
        c,
        q_final: q.transpose().iter().copied().collect(),
        det_u,
        min_q_eigenvalue: min_eig,
    })
}
