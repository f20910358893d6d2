//! Limited-memory BFGS with a strong-Wolfe line search, working directly on
//! noise vectors in the dt-weighted inner product.
//!
//! Objective evaluations may fail (divergent forward solves); the line search
//! treats failures as infinite values and backtracks.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::path::NoiseVector;

#[derive(Debug, Clone)]
pub struct LbfgsParams {
    pub memory: usize,
    pub max_iter: usize,
    /// Absolute tolerance on the weighted gradient norm.
    pub grad_tol: f64,
    pub c1: f64,
    pub c2: f64,
    /// Cap on objective evaluations within one line search.
    pub max_line_search_evals: usize,
}

impl Default for LbfgsParams {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iter: 500,
            grad_tol: 1e-8,
            c1: 1e-4,
            c2: 0.9,
            max_line_search_evals: 40,
        }
    }
}

#[derive(Debug)]
pub struct LbfgsOutcome {
    pub x: NoiseVector,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

struct Pair {
    s: NoiseVector,
    y: NoiseVector,
    rho: f64,
}

/// Evaluate, mapping divergence to +inf so the line search can recover; other
/// errors are fatal.
fn try_eval(
    objective: &mut dyn FnMut(&NoiseVector) -> Result<(f64, NoiseVector)>,
    x: &NoiseVector,
    evaluations: &mut usize,
) -> Result<Option<(f64, NoiseVector)>> {
    *evaluations += 1;
    match objective(x) {
        Ok((f, g)) if f.is_finite() => Ok(Some((f, g))),
        Ok(_) => Ok(None),
        Err(Error::Divergence { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Minimize `objective` starting from `x0`. The objective returns the value
/// and its gradient in the dt-weighted inner product.
pub fn minimize(
    objective: &mut dyn FnMut(&NoiseVector) -> Result<(f64, NoiseVector)>,
    x0: NoiseVector,
    params: &LbfgsParams,
) -> Result<LbfgsOutcome> {
    let mut evaluations = 1usize;
    // a divergent or non-finite initial iterate is not recoverable here
    let (mut f, mut g) = objective(&x0)?;
    if !f.is_finite() {
        return Err(Error::InvalidParameter(
            "objective is non-finite at the initial iterate".into(),
        ));
    }
    let mut x = x0;
    let mut history: VecDeque<Pair> = VecDeque::with_capacity(params.memory);
    let mut iterations = 0usize;

    while iterations < params.max_iter {
        let grad_norm = g.norm();
        if grad_norm <= params.grad_tol {
            return Ok(LbfgsOutcome {
                x,
                value: f,
                grad_norm,
                iterations,
                evaluations,
                converged: true,
            });
        }

        let mut direction = two_loop(&history, &g);
        let mut dg = direction.dot_unchecked(&g);
        if !dg.is_finite() || dg >= 0.0 {
            // not a descent direction: restart from steepest descent
            history.clear();
            direction = g.scaled(-1.0);
            dg = -g.norm_sq();
        }

        match line_search(
            objective,
            &x,
            f,
            &g,
            &direction,
            dg,
            params,
            &mut evaluations,
        )? {
            Some((alpha, f_new, g_new)) => {
                let mut s = direction;
                s.scale(alpha);
                let mut x_new = x.clone();
                x_new.add_scaled(1.0, &s);

                let mut y = g_new.clone();
                y.add_scaled(-1.0, &g);
                let sy = s.dot_unchecked(&y);
                if sy > 1e-12 * s.norm() * y.norm() {
                    if history.len() == params.memory {
                        history.pop_front();
                    }
                    history.push_back(Pair {
                        s,
                        y,
                        rho: 1.0 / sy,
                    });
                }
                x = x_new;
                f = f_new;
                g = g_new;
                iterations += 1;
            }
            None => {
                if history.is_empty() {
                    // steepest descent failed too; stop at the best iterate
                    return Ok(LbfgsOutcome {
                        grad_norm: g.norm(),
                        x,
                        value: f,
                        iterations,
                        evaluations,
                        converged: false,
                    });
                }
                history.clear();
            }
        }
    }

    Ok(LbfgsOutcome {
        grad_norm: g.norm(),
        x,
        value: f,
        iterations,
        evaluations,
        converged: false,
    })
}

fn two_loop(history: &VecDeque<Pair>, g: &NoiseVector) -> NoiseVector {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(history.len());
    for pair in history.iter().rev() {
        let alpha = pair.rho * pair.s.dot_unchecked(&q);
        q.add_scaled(-alpha, &pair.y);
        alphas.push(alpha);
    }
    if let Some(last) = history.back() {
        let gamma = last.s.dot_unchecked(&last.y) / last.y.norm_sq();
        q.scale(gamma);
    }
    for (pair, alpha) in history.iter().zip(alphas.into_iter().rev()) {
        let beta = pair.rho * pair.y.dot_unchecked(&q);
        q.add_scaled(alpha - beta, &pair.s);
    }
    q.scale(-1.0);
    q
}

type SearchPoint = (f64, f64, NoiseVector);

/// Strong-Wolfe line search (bracket and zoom). Returns `(alpha, f, g)` or
/// None when no acceptable step was found within the evaluation budget.
#[allow(clippy::too_many_arguments)]
fn line_search(
    objective: &mut dyn FnMut(&NoiseVector) -> Result<(f64, NoiseVector)>,
    x: &NoiseVector,
    f0: f64,
    g0: &NoiseVector,
    direction: &NoiseVector,
    dg0: f64,
    params: &LbfgsParams,
    evaluations: &mut usize,
) -> Result<Option<SearchPoint>> {
    let _ = g0;
    let eval_at = |alpha: f64,
                   objective: &mut dyn FnMut(&NoiseVector) -> Result<(f64, NoiseVector)>,
                   evaluations: &mut usize|
     -> Result<Option<(f64, f64, NoiseVector)>> {
        let mut xt = x.clone();
        xt.add_scaled(alpha, direction);
        Ok(try_eval(objective, &xt, evaluations)?.map(|(f, g)| {
            let slope = g.dot_unchecked(direction);
            (f, slope, g)
        }))
    };

    let budget = params.max_line_search_evals;
    let mut used = 0usize;
    let mut alpha_prev = 0.0f64;
    let mut f_prev = f0;
    let mut alpha = 1.0f64;
    let mut bracket: Option<(f64, f64, f64, f64)> = None; // (lo, f_lo, hi, f_hi-ish)

    while used < budget {
        used += 1;
        match eval_at(alpha, objective, evaluations)? {
            None => {
                // diverged: shrink toward the last good point
                alpha = 0.5 * (alpha_prev + alpha);
                if alpha < 1e-16 {
                    return Ok(None);
                }
                continue;
            }
            Some((fa, slope_a, ga)) => {
                if fa > f0 + params.c1 * alpha * dg0 || (fa >= f_prev && alpha_prev > 0.0) {
                    bracket = Some((alpha_prev, f_prev, alpha, fa));
                    break;
                }
                if slope_a.abs() <= -params.c2 * dg0 {
                    return Ok(Some((alpha, fa, ga)));
                }
                if slope_a >= 0.0 {
                    bracket = Some((alpha, fa, alpha_prev, f_prev));
                    break;
                }
                alpha_prev = alpha;
                f_prev = fa;
                alpha = (2.0 * alpha).min(1e8);
            }
        }
    }

    let (mut lo, mut f_lo, mut hi, _f_hi) = match bracket {
        Some(b) => b,
        None => return Ok(None),
    };

    // zoom phase: bisection with sufficient-decrease / curvature tests
    while used < budget {
        used += 1;
        let mid = 0.5 * (lo + hi);
        if (hi - lo).abs() < 1e-16 * (1.0 + lo.abs()) {
            return Ok(None);
        }
        match eval_at(mid, objective, evaluations)? {
            None => {
                hi = mid;
                continue;
            }
            Some((fm, slope_m, gm)) => {
                if fm > f0 + params.c1 * mid * dg0 || fm >= f_lo {
                    hi = mid;
                } else {
                    if slope_m.abs() <= -params.c2 * dg0 {
                        return Ok(Some((mid, fm, gm)));
                    }
                    if slope_m * (hi - lo) >= 0.0 {
                        hi = lo;
                    }
                    lo = mid;
                    f_lo = fm;
                }
            }
        }
    }
    Ok(None)
}
