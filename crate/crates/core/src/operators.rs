//! Matrix-free symmetric operators on discretized noise space.
//!
//! All three operators are exact derivatives of the discrete Euler map: the
//! full second variation is obtained by differentiating the discrete adjoint
//! gradient once more (tangent-over-adjoint), which makes it symmetric to
//! round-off in the dt-weighted inner product. The singular part keeps only
//! the short (single-integration) chains through `grad sigma`; the
//! regularized part keeps the doubly-integrated remainder. The three are
//! implemented independently so that `A = (A - Atilde) + Atilde` is a real
//! consistency check rather than a tautology.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::model::{Observable, SdeSystem};
use crate::path::NoiseVector;
use crate::propagation::{assemble_l_matrix, mat_tvec, mat_vec, SolutionContext};

/// A linear operator on noise space, defined through its action on vectors.
#[derive(Clone)]
pub struct OperatorHandle {
    label: String,
    grid: TimeGrid,
    dim_per_step: usize,
    apply_fn: Arc<dyn Fn(&NoiseVector) -> Result<NoiseVector> + Send + Sync>,
}

impl OperatorHandle {
    pub fn new(
        label: impl Into<String>,
        grid: TimeGrid,
        dim_per_step: usize,
        apply_fn: Arc<dyn Fn(&NoiseVector) -> Result<NoiseVector> + Send + Sync>,
    ) -> Self {
        Self {
            label: label.into(),
            grid,
            dim_per_step,
            apply_fn,
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    /// State-space dimension n (entries per time step).
    pub fn state_dim(&self) -> usize {
        self.dim_per_step
    }

    /// Total operator dimension `n * n_t`.
    pub fn dim(&self) -> usize {
        self.dim_per_step * self.grid.n_t()
    }

    pub fn apply(&self, v: &NoiseVector) -> Result<NoiseVector> {
        if v.dim() != self.dim_per_step || v.grid() != self.grid {
            return Err(Error::GridMismatch {
                context: "OperatorHandle::apply",
            });
        }
        (self.apply_fn)(v)
    }
}

/// Per-step coefficient matrices of the linearized dynamics at an instanton
/// context, precomputed so each operator application is two cheap sweeps.
///
/// For step k (state `phi_k`, control `eta_k`, incoming adjoint `theta_{k+1}`):
/// - `sigma`:   `sigma(phi_k)`
/// - `l_mat`:   `L_k = grad b(phi_k) + grad sigma(phi_k) . eta_k`
/// - `coupling`: `G_k[j, l] = (d_j sigma_il)(phi_k) theta_{k+1, i}` — the
///   pairing of `grad sigma` with the adjoint, used both for the
///   `(grad sigma . deta)^T theta` source and the `<theta, (grad sigma .) gamma>`
///   output term (its transpose), which is what makes the sweeps symmetric.
/// - `curvature`: `C_k[i, j] = theta_{k+1, m} [d_i d_j b_m + d_i d_j sigma_ml eta_l](phi_k)`
pub struct OperatorWorkspace {
    grid: TimeGrid,
    n: usize,
    lambda: f64,
    sigma: Vec<f64>,
    l_mat: Vec<f64>,
    coupling: Vec<f64>,
    curvature: Vec<f64>,
    /// `lambda * hess f(phi(T))`
    terminal: Vec<f64>,
}

impl OperatorWorkspace {
    pub fn new(
        system: &dyn SdeSystem,
        obs: &dyn Observable,
        grid: TimeGrid,
        ctx: &SolutionContext,
    ) -> Result<Self> {
        let n = system.dim();
        if ctx.eta.dim() != n || ctx.eta.grid() != grid {
            return Err(Error::GridMismatch {
                context: "OperatorWorkspace::new",
            });
        }
        let n_t = grid.n_t();
        let nn = n * n;

        let mut sigma = vec![0.0; nn * n_t];
        let mut l_mat = vec![0.0; nn * n_t];
        let mut coupling = vec![0.0; nn * n_t];
        let mut curvature = vec![0.0; nn * n_t];

        let mut drift_jac = vec![0.0; nn];
        let mut drift_hess = vec![0.0; nn * n];
        let mut diff_jac = vec![0.0; nn * n];
        let mut diff_hess = vec![0.0; nn * nn];
        for k in 0..n_t {
            let xk = ctx.phi.state(k);
            let eta_k = ctx.eta.step(k);
            let theta_next = ctx.theta.state(k + 1);
            let block = k * nn;

            system.diffusion(xk, &mut sigma[block..block + nn]);
            system.drift_jacobian(xk, &mut drift_jac);
            system.diffusion_jacobian(xk, &mut diff_jac);
            assemble_l_matrix(
                n,
                &drift_jac,
                &diff_jac,
                eta_k,
                &mut l_mat[block..block + nn],
            );

            // G_k[j, l] = d_j sigma_il theta_i
            let g = &mut coupling[block..block + nn];
            g.fill(0.0);
            for i in 0..n {
                let th = theta_next[i];
                if th == 0.0 {
                    continue;
                }
                for l in 0..n {
                    let base = (i * n + l) * n;
                    for j in 0..n {
                        g[j * n + l] += diff_jac[base + j] * th;
                    }
                }
            }

            // C_k[i, j] = theta_m (d_i d_j b_m + d_i d_j sigma_ml eta_l)
            system.drift_hessian(xk, &mut drift_hess);
            system.diffusion_hessian(xk, &mut diff_hess);
            let c = &mut curvature[block..block + nn];
            c.fill(0.0);
            for m in 0..n {
                let th = theta_next[m];
                if th == 0.0 {
                    continue;
                }
                for i in 0..n {
                    for j in 0..n {
                        let mut v = drift_hess[(m * n + i) * n + j];
                        for l in 0..n {
                            v += diff_hess[((m * n + l) * n + i) * n + j] * eta_k[l];
                        }
                        c[i * n + j] += th * v;
                    }
                }
            }
        }

        let mut obs_hess = vec![0.0; nn];
        obs.hessian(ctx.phi.final_state(), &mut obs_hess);
        let terminal = obs_hess.iter().map(|h| ctx.lambda * h).collect();

        Ok(Self {
            grid,
            n,
            lambda: ctx.lambda,
            sigma,
            l_mat,
            coupling,
            curvature,
            terminal,
        })
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    #[inline]
    fn block<'a>(&self, store: &'a [f64], k: usize) -> &'a [f64] {
        let nn = self.n * self.n;
        &store[k * nn..(k + 1) * nn]
    }

    /// Forward tangent sweep: `gamma_{k+1} = gamma_k + dt (L_k gamma_k + sigma_k deta_k)`,
    /// `gamma_0 = 0`. Returns the full tangent path (length `n * (n_t + 1)`).
    fn tangent_sweep(&self, deta: &NoiseVector) -> Vec<f64> {
        let n = self.n;
        let n_t = self.grid.n_t();
        let dt = self.grid.dt();
        let mut gamma = vec![0.0; n * (n_t + 1)];
        let mut gk = vec![0.0; n];
        let mut lg = vec![0.0; n];
        let mut sd = vec![0.0; n];
        for k in 0..n_t {
            gk.copy_from_slice(&gamma[k * n..(k + 1) * n]);
            mat_vec(n, self.block(&self.l_mat, k), &gk, &mut lg);
            mat_vec(n, self.block(&self.sigma, k), deta.step(k), &mut sd);
            for i in 0..n {
                gamma[(k + 1) * n + i] = gk[i] + dt * (lg[i] + sd[i]);
            }
        }
        gamma
    }

    /// Backward sweep shared by the three operators. The adjoint tangent
    /// obeys `zeta_k = zeta_{k+1} + dt (L_k^T zeta_{k+1} + sources_k)` with
    /// sources selected by the flags; output is written per step as
    /// `sigma_k^T zeta_{k+1} (+ G_k^T gamma_k if with_coupling_output)`.
    fn backward_sweep(
        &self,
        deta: &NoiseVector,
        gamma: &[f64],
        with_coupling_source: bool,
        with_curvature_source: bool,
        with_terminal: bool,
        with_coupling_output: bool,
    ) -> NoiseVector {
        let n = self.n;
        let n_t = self.grid.n_t();
        let dt = self.grid.dt();

        let mut zeta = vec![0.0; n];
        if with_terminal {
            mat_vec(n, &self.terminal, &gamma[n_t * n..], &mut zeta);
        }

        let mut out = NoiseVector::zeros(self.grid, n);
        let mut lt = vec![0.0; n];
        let mut src = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        for k in (0..n_t).rev() {
            // output uses zeta_{k+1}, i.e. the current value before the step
            mat_tvec(n, self.block(&self.sigma, k), &zeta, out.step_mut(k));
            if with_coupling_output {
                mat_tvec(
                    n,
                    self.block(&self.coupling, k),
                    &gamma[k * n..(k + 1) * n],
                    &mut tmp,
                );
                for (o, t) in out.step_mut(k).iter_mut().zip(&tmp) {
                    *o += t;
                }
            }

            mat_tvec(n, self.block(&self.l_mat, k), &zeta, &mut lt);
            src.fill(0.0);
            if with_coupling_source {
                mat_vec(n, self.block(&self.coupling, k), deta.step(k), &mut tmp);
                for (s, t) in src.iter_mut().zip(&tmp) {
                    *s += t;
                }
            }
            if with_curvature_source {
                mat_vec(
                    n,
                    self.block(&self.curvature, k),
                    &gamma[k * n..(k + 1) * n],
                    &mut tmp,
                );
                for (s, t) in src.iter_mut().zip(&tmp) {
                    *s += t;
                }
            }
            for i in 0..n {
                zeta[i] += dt * (lt[i] + src[i]);
            }
        }
        out
    }

    /// Action of the full second variation `A_lambda` on `deta`.
    pub fn second_variation_apply(&self, deta: &NoiseVector) -> NoiseVector {
        let gamma = self.tangent_sweep(deta);
        self.backward_sweep(deta, &gamma, true, true, true, true)
    }

    /// Action of the singular part `Atilde_lambda` (single-integration chains
    /// through `grad sigma`; zero terminal condition, no curvature sources).
    pub fn singular_part_apply(&self, deta: &NoiseVector) -> NoiseVector {
        let gamma = self.tangent_sweep(deta);
        self.backward_sweep(deta, &gamma, true, false, false, true)
    }

    /// Action of the regularized (trace-class) part `A - Atilde`.
    pub fn regularized_part_apply(&self, deta: &NoiseVector) -> NoiseVector {
        let gamma = self.tangent_sweep(deta);
        self.backward_sweep(deta, &gamma, false, true, true, false)
    }
}

fn shared_workspace_handle(
    label: &str,
    ws: &Arc<OperatorWorkspace>,
    which: fn(&OperatorWorkspace, &NoiseVector) -> NoiseVector,
) -> OperatorHandle {
    let ws = Arc::clone(ws);
    OperatorHandle::new(
        label,
        ws.grid(),
        ws.state_dim(),
        Arc::new(move |v: &NoiseVector| Ok(which(&ws, v))),
    )
}

/// Second-variation operator `A_lambda` at the context in `ws`.
pub fn second_variation(ws: &Arc<OperatorWorkspace>) -> OperatorHandle {
    shared_workspace_handle("second_variation", ws, |w, v| w.second_variation_apply(v))
}

/// Singular (generically Hilbert-Schmidt-only) part `Atilde_lambda`.
pub fn singular_part(ws: &Arc<OperatorWorkspace>) -> OperatorHandle {
    shared_workspace_handle("singular_part", ws, |w, v| w.singular_part_apply(v))
}

/// Regularized trace-class part `A_lambda - Atilde_lambda`.
pub fn regularized_part(ws: &Arc<OperatorWorkspace>) -> OperatorHandle {
    shared_workspace_handle("regularized_part", ws, |w, v| w.regularized_part_apply(v))
}

/// One-call conveniences mirroring the per-direction operator applications.
pub fn hessian_apply(
    system: &dyn SdeSystem,
    obs: &dyn Observable,
    grid: TimeGrid,
    ctx: &SolutionContext,
    deta: &NoiseVector,
) -> Result<NoiseVector> {
    let ws = OperatorWorkspace::new(system, obs, grid, ctx)?;
    check_direction(&ws, deta)?;
    Ok(ws.second_variation_apply(deta))
}

pub fn atilde_apply(
    system: &dyn SdeSystem,
    obs: &dyn Observable,
    grid: TimeGrid,
    ctx: &SolutionContext,
    deta: &NoiseVector,
) -> Result<NoiseVector> {
    let ws = OperatorWorkspace::new(system, obs, grid, ctx)?;
    check_direction(&ws, deta)?;
    Ok(ws.singular_part_apply(deta))
}

pub fn regularized_apply(
    system: &dyn SdeSystem,
    obs: &dyn Observable,
    grid: TimeGrid,
    ctx: &SolutionContext,
    deta: &NoiseVector,
) -> Result<NoiseVector> {
    let ws = OperatorWorkspace::new(system, obs, grid, ctx)?;
    check_direction(&ws, deta)?;
    Ok(ws.regularized_part_apply(deta))
}

fn check_direction(ws: &OperatorWorkspace, deta: &NoiseVector) -> Result<()> {
    if deta.dim() != ws.state_dim() || deta.grid() != ws.grid() {
        return Err(Error::GridMismatch {
            context: "operator direction",
        });
    }
    Ok(())
}

/// Orthogonal projection of `v` onto the complement of `eta_ref` in the
/// dt-weighted inner product.
pub fn project_perp(eta_ref: &NoiseVector, v: &NoiseVector) -> Result<NoiseVector> {
    if !eta_ref.same_shape(v) {
        return Err(Error::GridMismatch {
            context: "project_perp",
        });
    }
    let ref_norm_sq = eta_ref.norm_sq();
    if ref_norm_sq <= 0.0 {
        return Err(Error::DegenerateReference);
    }
    let coefficient = eta_ref.dot_unchecked(v) / ref_norm_sq;
    let mut out = v.clone();
    out.add_scaled(-coefficient, eta_ref);
    Ok(out)
}

/// Wrap `op` as `pr_perp . op . pr_perp`; inherits symmetry.
pub fn compose_projected(op: &OperatorHandle, eta_ref: &NoiseVector) -> Result<OperatorHandle> {
    if eta_ref.norm_sq() <= 0.0 {
        return Err(Error::DegenerateReference);
    }
    if eta_ref.dim() != op.state_dim() || eta_ref.grid() != op.grid() {
        return Err(Error::GridMismatch {
            context: "compose_projected",
        });
    }
    let inner = op.clone();
    let reference = eta_ref.clone();
    Ok(OperatorHandle::new(
        format!("projected({})", op.label()),
        op.grid(),
        op.state_dim(),
        Arc::new(move |v: &NoiseVector| {
            let pv = project_perp(&reference, v)?;
            let apv = inner.apply(&pv)?;
            project_perp(&reference, &apv)
        }),
    ))
}
