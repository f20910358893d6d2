//! Brute-force tail-probability estimation with binomial confidence
//! intervals: the ground truth the asymptotic estimates are compared against.
//!
//! Sample i draws from an independent counter-indexed RNG stream, so results
//! are reproducible and independent of the worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::model::{Observable, SdeSystem};
use crate::propagation::{sample_final_state, DivergencePolicy};

pub const Z_95: f64 = 1.959963984540054;
pub const Z_99: f64 = 2.5758293035489004;

/// Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: u64, n: u64, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

#[derive(Debug, Clone)]
pub struct TailEstimateMc {
    pub p_hat: f64,
    pub wilson_95: (f64, f64),
    pub wilson_99: (f64, f64),
    pub n_success: u64,
    /// Samples entering the denominator (requested minus diverged).
    pub n_effective: u64,
    pub n_requested: u64,
    pub n_diverged: u64,
}

fn force_sequential() -> bool {
    std::env::var("RARE_SORM_DETERMINISTIC").map(|v| v == "1") == Ok(true)
}

#[derive(Clone, Copy)]
struct SampleCounts {
    successes: u64,
    diverged: u64,
}

fn run_one(
    system: &dyn SdeSystem,
    obs: &dyn Observable,
    grid: TimeGrid,
    epsilon: f64,
    z: f64,
    seed: u64,
    index: u64,
    policy: DivergencePolicy,
) -> Result<SampleCounts> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    match sample_final_state(system, grid, epsilon, &mut rng, None) {
        Ok(x) => {
            let f = obs.value(&x);
            if !f.is_finite() {
                return match policy {
                    DivergencePolicy::Reject => Ok(SampleCounts {
                        successes: 0,
                        diverged: 1,
                    }),
                    DivergencePolicy::Abort => Err(Error::SampleDiverged { step: grid.n_t() }),
                };
            }
            Ok(SampleCounts {
                successes: u64::from(f >= z),
                diverged: 0,
            })
        }
        Err(Error::Divergence { step }) => match policy {
            DivergencePolicy::Reject => Ok(SampleCounts {
                successes: 0,
                diverged: 1,
            }),
            DivergencePolicy::Abort => Err(Error::SampleDiverged { step }),
        },
        Err(e) => Err(e),
    }
}

/// Estimate `P[f(X_T) >= z]` at noise strength `epsilon` from `n_samples`
/// Euler-Maruyama samples. `workers = 0` uses the global thread pool; any
/// other value pins a dedicated pool of that size. The result is identical
/// for every worker count.
#[allow(clippy::too_many_arguments)]
pub fn estimate_tail(
    system: &dyn SdeSystem,
    obs: &dyn Observable,
    grid: TimeGrid,
    epsilon: f64,
    z: f64,
    n_samples: u64,
    seed: u64,
    workers: usize,
    policy: DivergencePolicy,
) -> Result<TailEstimateMc> {
    if n_samples == 0 {
        return Err(Error::InvalidParameter(
            "estimate_tail needs n_samples >= 1".into(),
        ));
    }

    let tally = |range: std::ops::Range<u64>| -> Result<SampleCounts> {
        let mut acc = SampleCounts {
            successes: 0,
            diverged: 0,
        };
        for i in range {
            let c = run_one(system, obs, grid, epsilon, z, seed, i, policy)?;
            acc.successes += c.successes;
            acc.diverged += c.diverged;
        }
        Ok(acc)
    };

    let totals = if force_sequential() || workers == 1 {
        tally(0..n_samples)?
    } else {
        let run_parallel = || -> Result<SampleCounts> {
            let chunk = 1024u64;
            let n_chunks = n_samples.div_ceil(chunk);
            (0..n_chunks)
                .into_par_iter()
                .map(|c| tally(c * chunk..((c + 1) * chunk).min(n_samples)))
                .try_reduce(
                    || SampleCounts {
                        successes: 0,
                        diverged: 0,
                    },
                    |a, b| {
                        Ok(SampleCounts {
                            successes: a.successes + b.successes,
                            diverged: a.diverged + b.diverged,
                        })
                    },
                )
        };
        if workers == 0 {
            run_parallel()?
        } else {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
            pool.install(run_parallel)?
        }
    };

    let n_effective = n_samples - totals.diverged;
    if n_effective == 0 {
        return Err(Error::AllSamplesDiverged {
            attempted: n_samples,
        });
    }
    let p_hat = totals.successes as f64 / n_effective as f64;
    Ok(TailEstimateMc {
        p_hat,
        wilson_95: wilson_interval(totals.successes, n_effective, Z_95),
        wilson_99: wilson_interval(totals.successes, n_effective, Z_99),
        n_success: totals.successes,
        n_effective,
        n_requested: n_samples,
        n_diverged: totals.diverged,
    })
}

/// Asymptotic inputs for one target value of the comparison sweep.
#[derive(Debug, Clone)]
pub struct AsymptoticPoint {
    pub z: f64,
    pub rate: f64,
    pub log_prefactor: f64,
}

#[derive(Debug, Clone)]
pub struct CompareCell {
    pub epsilon: f64,
    pub z: f64,
    pub mc: Option<TailEstimateMc>,
    pub mc_error: Option<String>,
    pub sorm_estimate: f64,
    /// `const * exp(-I/eps)` with the constant matched at the largest target.
    pub prefactor_free: f64,
}

#[derive(Debug, Clone)]
pub struct CompareTable {
    pub cells: Vec<CompareCell>,
}

impl CompareTable {
    /// CSV with the pinned comparison schema.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "epsilon,z,p_hat,wilson95_lo,wilson95_hi,wilson99_lo,wilson99_hi,sorm_estimate,n_samples,n_diverged\n",
        );
        for cell in &self.cells {
            match &cell.mc {
                Some(mc) => out.push_str(&format!(
                    "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{},{}\n",
                    cell.epsilon,
                    cell.z,
                    mc.p_hat,
                    mc.wilson_95.0,
                    mc.wilson_95.1,
                    mc.wilson_99.0,
                    mc.wilson_99.1,
                    cell.sorm_estimate,
                    mc.n_requested,
                    mc.n_diverged
                )),
                None => out.push_str(&format!(
                    "{:.16e},{:.16e},,,,,,{:.16e},,\n",
                    cell.epsilon, cell.z, cell.sorm_estimate
                )),
            }
        }
        out
    }

    /// Companion CSV for the prefactor-free fit column.
    pub fn fit_to_csv(&self) -> String {
        let mut out = String::from("epsilon,z,prefactor_free_estimate\n");
        for cell in &self.cells {
            out.push_str(&format!(
                "{:.16e},{:.16e},{:.16e}\n",
                cell.epsilon, cell.z, cell.prefactor_free
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct McConfig {
    pub n_samples: u64,
    pub seed: u64,
    pub workers: usize,
    pub policy: DivergencePolicy,
}

/// Compare the sharp asymptotic estimate against Monte Carlo over a grid of
/// `(epsilon, z)` pairs, also producing the prefactor-free exponential fit
/// whose constant is matched at the largest target value.
#[allow(clippy::too_many_arguments)]
pub fn compare_sweep(
    system: &dyn SdeSystem,
    obs: &dyn Observable,
    grid: TimeGrid,
    epsilons: &[f64],
    points: &[AsymptoticPoint],
    mc: &McConfig,
) -> Result<CompareTable> {
    if epsilons.is_empty() || points.is_empty() {
        return Err(Error::InvalidParameter(
            "compare_sweep needs non-empty epsilon and z lists".into(),
        ));
    }
    let anchor = points
        .iter()
        .max_by(|a, b| a.z.partial_cmp(&b.z).unwrap())
        .unwrap();

    let mut cells = Vec::with_capacity(epsilons.len() * points.len());
    for &epsilon in epsilons {
        let log_anchor = crate::prefactor::log_tail_probability_parts(
            epsilon,
            anchor.rate,
            anchor.log_prefactor,
        );
        let log_const = log_anchor + anchor.rate / epsilon;
        for point in points {
            let sorm_estimate = crate::prefactor::log_tail_probability_parts(
                epsilon,
                point.rate,
                point.log_prefactor,
            )
            .exp();
            let prefactor_free = (log_const - point.rate / epsilon).exp();
            let (mc_result, mc_error) = match estimate_tail(
                system,
                obs,
                grid,
                epsilon,
                point.z,
                mc.n_samples,
                mc.seed,
                mc.workers,
                mc.policy,
            ) {
                Ok(est) => (Some(est), None),
                Err(e) => (None, Some(e.to_string())),
            };
            cells.push(CompareCell {
                epsilon,
                z: point.z,
                mc: mc_result,
                mc_error,
                sorm_estimate,
                prefactor_free,
            });
        }
    }
    Ok(CompareTable { cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{AdditiveOrnsteinUhlenbeck, CoordinateObservable};
    use rand::Rng;

    #[test]
    fn wilson_interval_symmetric_at_half() {
        let (lo, hi) = wilson_interval(500, 1000, Z_95);
        assert!((lo + hi - 1.0).abs() < 1e-12);
        assert!(lo < 0.5 && hi > 0.5);
    }

    #[test]
    fn wilson_interval_coverage_near_nominal() {
        // 500 synthetic binomial replications at p = 0.01
        let p = 0.01;
        let n = 5000u64;
        let mut covered = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        for _ in 0..500 {
            let mut successes = 0u64;
            for _ in 0..n {
                if rng.random::<f64>() < p {
                    successes += 1;
                }
            }
            let (lo, hi) = wilson_interval(successes, n, Z_95);
            if lo <= p && p <= hi {
                covered += 1;
            }
        }
        let rate = covered as f64 / 500.0;
        assert!((0.93..=0.97).contains(&rate), "coverage {rate}");
    }

    #[test]
    fn gaussian_tail_probability_recovered() {
        // kappa = 0 gives X_T ~ N(0, eps T) exactly, including in discrete
        // time; pick z at the 10% tail
        let system = AdditiveOrnsteinUhlenbeck::new(0.0);
        let obs = CoordinateObservable::new(0);
        let grid = TimeGrid::new(100, 1.0).unwrap();
        let z_alpha = 1.2815515655446004; // 90th percentile of N(0,1)
        let est = estimate_tail(
            &system,
            &obs,
            grid,
            1.0,
            z_alpha,
            100_000,
            99,
            0,
            DivergencePolicy::Reject,
        )
        .unwrap();
        assert!(
            est.wilson_99.0 <= 0.1 && 0.1 <= est.wilson_99.1,
            "99% interval {:?} should contain 0.1",
            est.wilson_99
        );
        assert!((est.p_hat - 0.1).abs() < 5e-3);
        assert_eq!(est.n_diverged, 0);
    }

    #[test]
    fn worker_count_does_not_change_counts() {
        let system = AdditiveOrnsteinUhlenbeck::new(1.0);
        let obs = CoordinateObservable::new(0);
        let grid = TimeGrid::new(50, 1.0).unwrap();
        let run = |workers: usize| {
            estimate_tail(
                &system,
                &obs,
                grid,
                0.5,
                0.6,
                20_000,
                7,
                workers,
                DivergencePolicy::Reject,
            )
            .unwrap()
        };
        let sequential = run(1);
        let parallel = run(4);
        assert_eq!(sequential.n_success, parallel.n_success);
        assert_eq!(sequential.n_diverged, parallel.n_diverged);
        assert_eq!(sequential.p_hat, parallel.p_hat);
    }

    #[test]
    fn fully_divergent_sampling_is_an_error() {
        // at this noise strength every path overflows to a non-finite state
        let m =
            crate::models::GeometricBrownianMotion::new(1.0, crate::model::NoiseConvention::Ito);
        let obs = crate::models::LogSquaredObservable;
        let grid = TimeGrid::new(50, 1.0).unwrap();
        let err = estimate_tail(
            &m,
            &obs,
            grid,
            1e20,
            0.5,
            64,
            3,
            1,
            DivergencePolicy::Reject,
        )
        .unwrap_err();
        assert!(matches!(err, Error::AllSamplesDiverged { attempted: 64 }));
    }

    #[test]
    fn compare_sweep_single_cell_matches_parts() {
        let system = AdditiveOrnsteinUhlenbeck::new(0.0);
        let obs = CoordinateObservable::new(0);
        let grid = TimeGrid::new(50, 1.0).unwrap();
        let point = AsymptoticPoint {
            z: 0.5,
            rate: 0.125, // z^2 / (2 T) for kappa = 0
            log_prefactor: (1.0f64 / 0.5).ln() / 2.0,
        };
        let mc = McConfig {
            n_samples: 50_000,
            seed: 3,
            workers: 0,
            policy: DivergencePolicy::Reject,
        };
        let table = compare_sweep(
            &system,
            &obs,
            grid,
            &[0.25],
            std::slice::from_ref(&point),
            &mc,
        )
        .unwrap();
        assert_eq!(table.cells.len(), 1);
        let cell = &table.cells[0];
        let direct = estimate_tail(
            &system,
            &obs,
            grid,
            0.25,
            0.5,
            50_000,
            3,
            0,
            DivergencePolicy::Reject,
        )
        .unwrap();
        assert_eq!(cell.mc.as_ref().unwrap().n_success, direct.n_success);
        let expected_sorm =
            crate::prefactor::log_tail_probability_parts(0.25, point.rate, point.log_prefactor)
                .exp();
        assert!((cell.sorm_estimate - expected_sorm).abs() < 1e-15);
        // at the anchor (largest z) the fit equals the sorm estimate
        assert!((cell.prefactor_free - cell.sorm_estimate).abs() < 1e-15 * cell.sorm_estimate);

        let csv = table.to_csv();
        assert!(csv.starts_with(
            "epsilon,z,p_hat,wilson95_lo,wilson95_hi,wilson99_lo,wilson99_hi,sorm_estimate,n_samples,n_diverged"
        ));
        assert_eq!(csv.trim().lines().count(), 2);
    }
}
