//! Leading-eigenvalue extraction for matrix-free symmetric operators.
//!
//! The iterative solver is a thick-restart Lanczos method with full
//! reorthogonalization in the dt-weighted inner product. The projected matrix
//! is kept as a small dense symmetric matrix (diagonal-plus-coupling after a
//! restart), so restarts need no extra operator applications. The number of
//! matrix-vector products is governed by the operator's spectrum, not by the
//! time resolution.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::operators::OperatorHandle;
use crate::path::NoiseVector;

pub const DEFAULT_DENSE_CAP: usize = 4096;

/// Fraction of the leading |eigenvalue| used as the scale floor in the
/// convergence test and the reported residuals.
const RESIDUAL_SCALE_FLOOR: f64 = 1e-2;

/// Knobs for the iterative eigensolver, bundled so downstream consumers can
/// pass one value around.
#[derive(Debug, Clone, Copy)]
pub struct SpectrumSettings {
    /// Number of leading eigenvalues (by absolute value) to extract.
    pub requested: usize,
    /// Relative residual tolerance per eigenpair.
    pub tol: f64,
    /// Restart budget for the iterative solver.
    pub max_restarts: usize,
    /// Seed for the start vector.
    pub seed: u64,
}

impl Default for SpectrumSettings {
    fn default() -> Self {
        Self {
            requested: 200,
            tol: 1e-8,
            max_restarts: 400,
            seed: 7,
        }
    }
}

impl SpectrumSettings {
    pub fn with_requested(self, requested: usize) -> Self {
        Self { requested, ..self }
    }
}

/// `leading_eigenvalues` with bundled settings.
pub fn leading_eigenvalues_with(
    op: &OperatorHandle,
    settings: &SpectrumSettings,
) -> Result<SpectrumResult> {
    leading_eigenvalues(
        op,
        settings.requested,
        settings.tol,
        settings.max_restarts,
        settings.seed,
    )
}

/// Leading eigenvalues of a symmetric operator, sorted by descending |mu|.
#[derive(Debug, Clone)]
pub struct SpectrumResult {
    pub eigenvalues: Vec<f64>,
    /// Scaled residuals `||A v - mu v|| / max(|mu|, 0.01 |mu|_max)` per
    /// returned pair; the floor keeps the criterion meaningful deep in the
    /// spectrum where eigenvalues approach zero.
    pub residuals: Vec<f64>,
    pub requested: usize,
    pub matvec_count: usize,
    pub converged: bool,
    /// Maximum relative asymmetry observed during dense assembly (0 for the
    /// iterative path).
    pub max_asymmetry: f64,
}

impl SpectrumResult {
    /// CSV with columns `index,eigenvalue,residual`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,eigenvalue,residual\n");
        for (i, (ev, res)) in self.eigenvalues.iter().zip(&self.residuals).enumerate() {
            out.push_str(&format!("{i},{ev:.16e},{res:.16e}\n"));
        }
        out
    }
}

fn random_unit_vector(grid: TimeGrid, dim: usize, rng: &mut ChaCha8Rng) -> NoiseVector {
    let mut v = NoiseVector::zeros(grid, dim);
    for x in v.as_mut_slice() {
        *x = rng.sample::<f64, _>(StandardNormal);
    }
    let norm = v.norm();
    v.scale(1.0 / norm);
    v
}

/// Iterative (thick-restart Lanczos) computation of the `m` leading
/// eigenvalues of `op` by absolute value.
///
/// Deterministic for fixed `(seed, op, m, tol)`. If the solver runs out of
/// restarts the partial result is returned with `converged = false`.
pub fn leading_eigenvalues(
    op: &OperatorHandle,
    m: usize,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<SpectrumResult> {
    let n = op.dim();
    if m < 1 || m >= n {
        return Err(Error::InvalidParameter(format!(
            "requested {m} eigenvalues of a dim-{n} operator (need 1 <= M < dim)"
        )));
    }
    let cap = (2 * m + 20).max(100).min(n);
    let keep = (m + 20).min(cap.saturating_sub(2)).max(1);
    // convergence is tested every few columns once the subspace can hold all
    // requested pairs, so the matvec count tracks the operator's actual
    // difficulty rather than the restart granularity
    let check_interval = 25usize;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = random_unit_vector(op.grid(), op.state_dim(), &mut rng);
    check_symmetry(op, &start, &mut rng)?;
    let mut basis: Vec<NoiseVector> = vec![start];
    // projected matrix; entries (i, j) for i, j < basis length
    let mut t = DMatrix::<f64>::zeros(cap, cap);
    let mut matvec_count = 2usize; // symmetry probe
    let mut restarts_done = 0usize;
    let mut t_scale = 0.0f64;
    let mut exhausted = false;

    // Ritz extraction on the current subspace; the last basis vector is the
    // residual carrier. Returns the result when every requested pair meets
    // the tolerance (or `force` is set).
    let rayleigh_ritz = |t: &DMatrix<f64>,
                         basis: &[NoiseVector],
                         matvec_count: usize,
                         force: bool|
     -> Option<(
        SpectrumResult,
        Vec<usize>,
        nalgebra::SymmetricEigen<f64, nalgebra::Dyn>,
        f64,
    )> {
        let mb = basis.len() - 1;
        if mb == 0 {
            return None;
        }
        let beta_last = t[(mb, mb - 1)];
        let tm = t.view((0, 0), (mb, mb)).into_owned();
        let eig = tm.symmetric_eigen();

        let mut order: Vec<usize> = (0..mb).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .abs()
                .partial_cmp(&eig.eigenvalues[a].abs())
                .unwrap()
        });

        let wanted = m.min(mb);
        let theta_max = eig.eigenvalues[order[0]].abs().max(1e-300);
        let floor = RESIDUAL_SCALE_FLOOR * theta_max;
        let mut all_converged = wanted == m;
        let mut eigenvalues = Vec::with_capacity(wanted);
        let mut residuals = Vec::with_capacity(wanted);
        for &idx in order.iter().take(wanted) {
            let theta = eig.eigenvalues[idx];
            let resid = (beta_last * eig.eigenvectors[(mb - 1, idx)]).abs();
            if resid > tol * theta.abs().max(floor) {
                all_converged = false;
            }
            eigenvalues.push(theta);
            residuals.push(resid / theta.abs().max(floor));
        }

        if all_converged || force {
            let result = SpectrumResult {
                eigenvalues,
                residuals,
                requested: m,
                matvec_count,
                converged: all_converged,
                max_asymmetry: 0.0,
            };
            Some((result, order, eig, beta_last))
        } else {
            None
        }
    };

    loop {
        // grow the basis to cap vectors, applying the operator to each new one
        while basis.len() < cap {
            let j = basis.len() - 1;
            let mut w = op.apply(&basis[j])?;
            matvec_count += 1;

            // first pass records the Galerkin column, second pass cleans up
            for (i, vi) in basis.iter().enumerate() {
                let c = vi.dot_unchecked(&w);
                w.add_scaled(-c, vi);
                t[(i, j)] = c;
                t[(j, i)] = c;
                t_scale = t_scale.max(c.abs());
            }
            for vi in basis.iter() {
                let c = vi.dot_unchecked(&w);
                w.add_scaled(-c, vi);
            }

            let beta = w.norm();
            if beta <= 1e-13 * t_scale.max(1.0) {
                // invariant subspace: continue with a fresh random direction
                let mut fresh = random_unit_vector(op.grid(), op.state_dim(), &mut rng);
                for vi in basis.iter() {
                    let c = vi.dot_unchecked(&fresh);
                    fresh.add_scaled(-c, vi);
                }
                let norm = fresh.norm();
                if norm <= 1e-13 {
                    exhausted = true;
                    break; // basis spans the whole space
                }
                fresh.scale(1.0 / norm);
                t[(j + 1, j)] = 0.0;
                t[(j, j + 1)] = 0.0;
                basis.push(fresh);
            } else {
                t[(j + 1, j)] = beta;
                t[(j, j + 1)] = beta;
                w.scale(1.0 / beta);
                basis.push(w);
            }

            // within the first cycle the subspace is still filling up; test
            // for early exit only in restart cycles, where it saves real work
            if restarts_done > 0
                && basis.len() > m + 1
                && basis.len() < cap
                && basis.len() % check_interval == 0
            {
                if let Some((result, ..)) = rayleigh_ritz(&t, &basis, matvec_count, false) {
                    return Ok(result);
                }
            }
        }

        let mb = basis.len() - 1;
        let out_of_budget = exhausted || mb >= n || restarts_done >= max_iter;
        let (result, order, eig, beta_last) =
            rayleigh_ritz(&t, &basis, matvec_count, true).expect("basis holds >= 2 vectors");
        if result.converged || out_of_budget {
            return Ok(result);
        }

        // thick restart: keep the leading Ritz vectors plus the residual vector
        let k = keep.min(mb - 1);
        let mut new_basis: Vec<NoiseVector> = Vec::with_capacity(k + 1);
        for &idx in order.iter().take(k) {
            let mut ritz = NoiseVector::zeros(op.grid(), op.state_dim());
            for (row, v) in basis.iter().take(mb).enumerate() {
                ritz.add_scaled(eig.eigenvectors[(row, idx)], v);
            }
            new_basis.push(ritz);
        }
        let residual_vector = basis[mb].clone();

        t.fill(0.0);
        let theta_max = eig.eigenvalues[order[0]].abs().max(1e-300);
        for (new_col, &idx) in order.iter().take(k).enumerate() {
            let theta = eig.eigenvalues[idx];
            let coupling = beta_last * eig.eigenvectors[(mb - 1, idx)];
            t[(new_col, new_col)] = theta;
            // deflate converged pairs: drop their residual coupling so fresh
            // Krylov directions focus on the unconverged part of the spectrum
            if coupling.abs() > tol * theta.abs().max(RESIDUAL_SCALE_FLOOR * theta_max) {
                t[(new_col, k)] = coupling;
                t[(k, new_col)] = coupling;
            }
        }
        new_basis.push(residual_vector);
        basis = new_basis;
        restarts_done += 1;
    }
}

/// Two-application probe of `<u, A v> = <A u, v>`; gross violations indicate
/// a defective operator and abort the eigensolve. Operators whose action on
/// unit probes is numerically zero are accepted: at that scale the residual
/// carries no information beyond round-off.
fn check_symmetry(op: &OperatorHandle, u: &NoiseVector, rng: &mut ChaCha8Rng) -> Result<()> {
    let v = random_unit_vector(op.grid(), op.state_dim(), rng);
    let au = op.apply(u)?;
    let av = op.apply(&v)?;
    let lhs = u.dot_unchecked(&av);
    let rhs = au.dot_unchecked(&v);
    let scale = au.norm().max(av.norm());
    if scale <= 1e-12 {
        return Ok(());
    }
    let measure = (lhs - rhs).abs() / scale;
    if measure > 1e-6 {
        return Err(Error::AsymmetricOperator { measure });
    }
    Ok(())
}

/// Dense small-instance oracle: assembles the operator column by column,
/// symmetrizes, and performs a full symmetric eigendecomposition.
pub fn dense_spectrum(op: &OperatorHandle, cap: usize) -> Result<SpectrumResult> {
    let n = op.dim();
    if n > cap {
        return Err(Error::DenseCapExceeded { dim: n, cap });
    }
    let grid = op.grid();
    let dim_per_step = op.state_dim();

    let mut matrix = DMatrix::<f64>::zeros(n, n);
    for col in 0..n {
        let mut basis = NoiseVector::zeros(grid, dim_per_step);
        basis.as_mut_slice()[col] = 1.0;
        let out = op.apply(&basis)?;
        for row in 0..n {
            matrix[(row, col)] = out.as_slice()[row];
        }
    }

    let mut max_entry = 0.0f64;
    let mut max_asym = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            max_entry = max_entry.max(matrix[(i, j)].abs());
            max_asym = max_asym.max((matrix[(i, j)] - matrix[(j, i)]).abs());
            let s = 0.5 * (matrix[(i, j)] + matrix[(j, i)]);
            matrix[(i, j)] = s;
            matrix[(j, i)] = s;
        }
        max_entry = max_entry.max(matrix[(i, i)].abs());
    }

    let eig = matrix.symmetric_eigen();
    let mut eigenvalues: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(|a, b| b.abs().partial_cmp(&a.abs()).unwrap());

    Ok(SpectrumResult {
        residuals: vec![0.0; eigenvalues.len()],
        requested: eigenvalues.len(),
        eigenvalues,
        matvec_count: n,
        converged: true,
        max_asymmetry: if max_entry > 0.0 {
            max_asym / max_entry
        } else {
            0.0
        },
    })
}

/// One row per grid: how many operator applications the iterative solver
/// needed for a fixed number of requested eigenvalues.
#[derive(Debug, Clone)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
}

#[derive(Debug, Clone)]
pub struct ScalingRow {
    pub n_t: usize,
    pub matvec_count: usize,
    pub converged: bool,
}

pub fn matvec_scaling_report(
    op_factory: &dyn Fn(TimeGrid) -> Result<OperatorHandle>,
    grids: &[TimeGrid],
    m: usize,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<ScalingReport> {
    if grids.is_empty() {
        return Err(Error::InvalidParameter(
            "matvec_scaling_report needs at least one grid".into(),
        ));
    }
    let mut rows = Vec::with_capacity(grids.len());
    for &grid in grids {
        let op = op_factory(grid)?;
        let spectrum = leading_eigenvalues(&op, m, tol, max_iter, seed)?;
        rows.push(ScalingRow {
            n_t: grid.n_t(),
            matvec_count: spectrum.matvec_count,
            converged: spectrum.converged,
        });
    }
    Ok(ScalingReport { rows })
}
