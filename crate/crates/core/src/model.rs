//! SDE system and observable interfaces, plus finite-difference validation of
//! the user-supplied analytic derivatives.
//!
//! Tensor layouts (row-major, all slices of length `n^k`):
//! - diffusion `sigma`:          `out[i*n + j] = sigma_ij(x)`
//! - drift Jacobian:             `out[i*n + j] = d b_i / d x_j`
//! - drift Hessian:              `out[(k*n + i)*n + j] = d^2 b_k / (d x_i d x_j)`
//! - diffusion Jacobian:         `out[(i*n + j)*n + l] = d sigma_ij / d x_l`
//! - diffusion Hessian:          `out[((i*n + j)*n + l)*n + m] = d^2 sigma_ij / (d x_l d x_m)`

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Stochastic-calculus convention of the driving noise. Deterministic forward
/// solves always use the base drift; the convention matters for sampling and
/// for the prefactor correction term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseConvention {
    Ito,
    Stratonovich,
}

/// An SDE `dX = b(X) dt + sqrt(eps) sigma(X) dW` on `R^n` over `[0, T]`,
/// with analytic first and second derivatives of the drift and diffusion.
///
/// Callbacks must be pure and safe to invoke concurrently. Smoothness and
/// boundedness of `b` and `sigma` are assumed, not enforced; the expansion
/// underlying the estimates requires them.
pub trait SdeSystem: Send + Sync {
    fn dim(&self) -> usize;
    fn drift(&self, x: &[f64], out: &mut [f64]);
    fn diffusion(&self, x: &[f64], out: &mut [f64]);
    fn drift_jacobian(&self, x: &[f64], out: &mut [f64]);
    fn drift_hessian(&self, x: &[f64], out: &mut [f64]);
    fn diffusion_jacobian(&self, x: &[f64], out: &mut [f64]);
    fn diffusion_hessian(&self, x: &[f64], out: &mut [f64]);
    fn initial_state(&self) -> &[f64];
    fn horizon(&self) -> f64;
    fn convention(&self) -> NoiseConvention;
}

/// Final-time scalar observable `f(X_T)` with analytic gradient and Hessian.
pub trait Observable: Send + Sync {
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64], out: &mut [f64]);
    fn hessian(&self, x: &[f64], out: &mut [f64]);
}

/// Maximum relative finite-difference error observed for one callback.
#[derive(Debug, Clone)]
pub struct DerivativeCheck {
    pub callback: &'static str,
    pub max_rel_error: f64,
    /// true if `max_rel_error` exceeds the flag threshold (1e-4)
    pub flagged: bool,
}

#[derive(Debug, Clone)]
pub struct DerivativeReport {
    pub checks: Vec<DerivativeCheck>,
}

impl DerivativeReport {
    pub fn all_consistent(&self) -> bool {
        self.checks.iter().all(|c| !c.flagged)
    }

    pub fn flagged(&self) -> Vec<&DerivativeCheck> {
        self.checks.iter().filter(|c| c.flagged).collect()
    }
}

const FLAG_THRESHOLD: f64 = 1e-4;
const FD_STEP_SCALE: f64 = 1e-5;

fn ensure_finite(callback: &'static str, x: &[f64], values: &[f64]) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteModel {
            callback,
            state: x.to_vec(),
        });
    }
    Ok(())
}

/// Central finite difference of `eval` (producing `m` outputs) against the
/// analytic `deriv` (producing `m * n` outputs, derivative index innermost).
fn check_block(
    parent: &'static str,
    callback: &'static str,
    n: usize,
    m: usize,
    x: &[f64],
    eval: &dyn Fn(&[f64], &mut [f64]),
    deriv: &dyn Fn(&[f64], &mut [f64]),
) -> Result<f64> {
    let mut analytic = vec![0.0; m * n];
    deriv(x, &mut analytic);
    ensure_finite(callback, x, &analytic)?;

    let scale = analytic
        .iter()
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
        .max(1.0);

    let mut plus = vec![0.0; m];
    let mut minus = vec![0.0; m];
    let mut xp = x.to_vec();
    let mut max_err = 0.0f64;
    for l in 0..n {
        let h = FD_STEP_SCALE * (1.0 + x[l].abs());
        xp.copy_from_slice(x);
        xp[l] += h;
        eval(&xp, &mut plus);
        xp[l] -= 2.0 * h;
        eval(&xp, &mut minus);
        ensure_finite(parent, &xp, &plus)?;
        ensure_finite(parent, &xp, &minus)?;
        for r in 0..m {
            let fd = (plus[r] - minus[r]) / (2.0 * h);
            let err = (fd - analytic[r * n + l]).abs() / scale;
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

/// Verify every supplied derivative callback against central finite
/// differences of its parent at `n_points` sampled states near the initial
/// condition. Errors above 1e-4 (relative) are flagged.
pub fn validate_derivatives(
    system: &dyn SdeSystem,
    obs: &dyn Observable,
    n_points: usize,
    rng_seed: u64,
) -> Result<DerivativeReport> {
    if n_points == 0 {
        return Err(Error::InvalidParameter(
            "validate_derivatives needs n_points >= 1".into(),
        ));
    }
    let n = system.dim();
    let x0 = system.initial_state().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);

    let mut maxima = [0.0f64; 6];
    for _ in 0..n_points {
        // Offsets are kept positive so that models defined on the positive
        // orthant (square-root diffusions, log observables) stay in domain.
        let x: Vec<f64> = x0
            .iter()
            .map(|&c| c + rng.random_range(0.05..0.55) * (1.0 + c.abs()))
            .collect();

        let errs = [
            check_block(
                "drift",
                "drift_jacobian",
                n,
                n,
                &x,
                &|y, out| system.drift(y, out),
                &|y, out| system.drift_jacobian(y, out),
            )?,
            // Hessian of b_k laid out as (k, i, j); finite-differencing the
            // Jacobian rows (k, i) in j matches that layout directly.
            check_block(
                "drift_jacobian",
                "drift_hessian",
                n,
                n * n,
                &x,
                &|y, out| system.drift_jacobian(y, out),
                &|y, out| system.drift_hessian(y, out),
            )?,
            check_block(
                "diffusion",
                "diffusion_jacobian",
                n,
                n * n,
                &x,
                &|y, out| system.diffusion(y, out),
                &|y, out| system.diffusion_jacobian(y, out),
            )?,
            check_block(
                "diffusion_jacobian",
                "diffusion_hessian",
                n,
                n * n * n,
                &x,
                &|y, out| system.diffusion_jacobian(y, out),
                &|y, out| system.diffusion_hessian(y, out),
            )?,
            check_block(
                "observable_value",
                "observable_gradient",
                n,
                1,
                &x,
                &|y, out| out[0] = obs.value(y),
                &|y, out| obs.gradient(y, out),
            )?,
            check_block(
                "observable_gradient",
                "observable_hessian",
                n,
                n,
                &x,
                &|y, out| obs.gradient(y, out),
                &|y, out| obs.hessian(y, out),
            )?,
        ];
        for (m, e) in maxima.iter_mut().zip(errs) {
            *m = m.max(e);
        }
    }

    let names = [
        "drift_jacobian",
        "drift_hessian",
        "diffusion_jacobian",
        "diffusion_hessian",
        "observable_gradient",
        "observable_hessian",
    ];
    Ok(DerivativeReport {
        checks: names
            .iter()
            .zip(maxima)
            .map(|(&callback, max_rel_error)| DerivativeCheck {
                callback,
                max_rel_error,
                flagged: max_rel_error > FLAG_THRESHOLD,
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{
        AdditiveOrnsteinUhlenbeck, CoordinateObservable, GeometricBrownianMotion,
        LogSquaredObservable, PredatorPrey, PreyConcentration,
    };

    #[test]
    fn geometric_bm_derivatives_are_exact() {
        let system = GeometricBrownianMotion::new(1.0, NoiseConvention::Ito);
        let obs = LogSquaredObservable;
        let report = validate_derivatives(&system, &obs, 5, 42).unwrap();
        for check in &report.checks {
            assert!(
                check.max_rel_error < 1e-6,
                "{}: {}",
                check.callback,
                check.max_rel_error
            );
        }
        assert!(report.all_consistent());
    }

    #[test]
    fn predator_prey_derivatives_consistent() {
        let system = PredatorPrey::default();
        let obs = PreyConcentration;
        let report = validate_derivatives(&system, &obs, 5, 7).unwrap();
        assert!(report.all_consistent(), "{:?}", report.flagged());
    }

    #[test]
    fn additive_ou_diffusion_derivatives_vanish() {
        let system = AdditiveOrnsteinUhlenbeck::new(1.0);
        let obs = CoordinateObservable::new(0);
        let report = validate_derivatives(&system, &obs, 3, 1).unwrap();
        assert!(report.all_consistent());
        let dj = report
            .checks
            .iter()
            .find(|c| c.callback == "diffusion_jacobian")
            .unwrap();
        assert_eq!(dj.max_rel_error, 0.0);
    }

    /// Negative control: a deliberately wrong diffusion Jacobian is flagged.
    struct BrokenSigma(GeometricBrownianMotion);

    impl SdeSystem for BrokenSigma {
        fn dim(&self) -> usize {
            self.0.dim()
        }
        fn drift(&self, x: &[f64], out: &mut [f64]) {
            self.0.drift(x, out)
        }
        fn diffusion(&self, x: &[f64], out: &mut [f64]) {
            self.0.diffusion(x, out)
        }
        fn drift_jacobian(&self, x: &[f64], out: &mut [f64]) {
            self.0.drift_jacobian(x, out)
        }
        fn drift_hessian(&self, x: &[f64], out: &mut [f64]) {
            self.0.drift_hessian(x, out)
        }
        fn diffusion_jacobian(&self, x: &[f64], out: &mut [f64]) {
            self.0.diffusion_jacobian(x, out);
            out[0] += 0.5;
        }
        fn diffusion_hessian(&self, x: &[f64], out: &mut [f64]) {
            self.0.diffusion_hessian(x, out)
        }
        fn initial_state(&self) -> &[f64] {
            self.0.initial_state()
        }
        fn horizon(&self) -> f64 {
            self.0.horizon()
        }
        fn convention(&self) -> NoiseConvention {
            self.0.convention()
        }
    }

    #[test]
    fn wrong_diffusion_jacobian_is_flagged() {
        let system = BrokenSigma(GeometricBrownianMotion::new(1.0, NoiseConvention::Ito));
        let report = validate_derivatives(&system, &LogSquaredObservable, 3, 3).unwrap();
        let flagged = report.flagged();
        assert_eq!(flagged.len(), 1);
        assert_eq!(flagged[0].callback, "diffusion_jacobian");
    }

    /// Non-finite callback output surfaces as a model error naming the callback.
    struct NanDrift(AdditiveOrnsteinUhlenbeck);

    impl SdeSystem for NanDrift {
        fn dim(&self) -> usize {
            self.0.dim()
        }
        fn drift(&self, _x: &[f64], out: &mut [f64]) {
            out[0] = f64::NAN;
        }
        fn diffusion(&self, x: &[f64], out: &mut [f64]) {
            self.0.diffusion(x, out)
        }
        fn drift_jacobian(&self, x: &[f64], out: &mut [f64]) {
            self.0.drift_jacobian(x, out)
        }
        fn drift_hessian(&self, x: &[f64], out: &mut [f64]) {
            self.0.drift_hessian(x, out)
        }
        fn diffusion_jacobian(&self, x: &[f64], out: &mut [f64]) {
            self.0.diffusion_jacobian(x, out)
        }
        fn diffusion_hessian(&self, x: &[f64], out: &mut [f64]) {
            self.0.diffusion_hessian(x, out)
        }
        fn initial_state(&self) -> &[f64] {
            self.0.initial_state()
        }
        fn horizon(&self) -> f64 {
            self.0.horizon()
        }
        fn convention(&self) -> NoiseConvention {
            self.0.convention()
        }
    }

    #[test]
    fn non_finite_callback_is_reported() {
        let system = NanDrift(AdditiveOrnsteinUhlenbeck::new(1.0));
        let err = validate_derivatives(&system, &CoordinateObservable::new(0), 2, 9).unwrap_err();
        match err {
            Error::NonFiniteModel { callback, .. } => assert_eq!(callback, "drift"),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
