//! Damped Gauss-Newton (Levenberg-Marquardt) solver for small nonlinear
//! least-squares problems.
//!
//! The residual Jacobian is formed by forward finite differences with step
//! `1e-7 * (1 + |x_j|)`. A step is accepted only if it strictly decreases
//! the residual norm; the damping factor is multiplied up on rejection and
//! down on acceptance. The best iterate seen is always returned, with a
//! flag telling whether the iteration budget ran out.
//!
//! Residual closures may fail (the decomposition's branch grids can
//! degenerate for a probed parameter vector); a failing candidate is
//! treated as a rejected step, and a failing probe during differentiation
//! falls back to a backward step before giving up on that column.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct LmOptions {
    pub max_iters: usize,
    pub damping_init: f64,
    pub damping_up: f64,
    pub damping_down: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions { max_iters: 50, damping_init: 1e-3, damping_up: 10.0, damping_down: 0.1 }
    }
}

#[derive(Debug, Clone)]
pub struct LmOutcome {
    pub x: Vec<f64>,
    /// Euclidean norm of the residual at `x`.
    pub residual_norm: f64,
    pub iterations: usize,
    /// False when the iteration budget was exhausted while steps were still
    /// being accepted.
    pub converged: bool,
}

const FD_STEP: f64 = 1e-7;
const DAMPING_MAX: f64 = 1e14;

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Minimizes `|residual(x)|^2` starting from `x0`.
///
/// Fails only if the residual cannot be evaluated at `x0` itself.
pub fn lm_solve<F>(mut residual: F, x0: &[f64], opts: &LmOptions) -> Result<LmOutcome>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let n = x0.len();
    let r0 = residual(x0)?;
    if r0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("residual at the initial point".into()));
    }
    let m = r0.len();

    let mut x = x0.to_vec();
    let mut r = r0;
    let mut best_x = x.clone();
    let mut best_norm = norm2(&r);
    let mut damping = opts.damping_init;
    let mut iterations = 0;
    let mut budget_hit = false;

    if best_norm == 0.0 {
        return Ok(LmOutcome { x, residual_norm: 0.0, iterations: 0, converged: true });
    }

    'outer: for iter in 0..opts.max_iters {
        iterations = iter + 1;

        // forward-difference Jacobian, column by column
        let mut jac = DMatrix::<f64>::zeros(m, n);
        for j in 0..n {
            let h = FD_STEP * (1.0 + x[j].abs());
            let mut probe = x.clone();
            probe[j] += h;
            let column = match residual(&probe) {
                Ok(rp) => Some((rp, h)),
                Err(_) => {
                    probe[j] = x[j] - h;
                    residual(&probe).ok().map(|rp| (rp, -h))
                }
            };
            if let Some((rp, step)) = column {
                if rp.len() != m {
                    return Err(Error::DimensionMismatch("residual length changed during LM".into()));
                }
                for i in 0..m {
                    jac[(i, j)] = (rp[i] - r[i]) / step;
                }
            }
            // both probes failed: leave the column zero, the parameter
            // simply does not move this iteration
        }

        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * DVector::from_column_slice(&r);
        let max_diag = (0..n).fold(0.0_f64, |acc, i| acc.max(jtj[(i, i)])).max(f64::MIN_POSITIVE);

        // inner loop: escalate damping until a step is accepted
        loop {
            let mut system = jtj.clone();
            for i in 0..n {
                // Marquardt scaling with a floor so dead columns stay solvable
                let d = jtj[(i, i)].max(1e-12 * max_diag);
                system[(i, i)] += damping * d;
            }
            let step = Cholesky::new(system).map(|c| c.solve(&jtr));
            let accepted = if let Some(step) = step {
                let candidate: Vec<f64> = x.iter().zip(step.iter()).map(|(xi, s)| xi - s).collect();
                match residual(&candidate) {
                    Ok(rc) if rc.iter().all(|v| v.is_finite()) => {
                        let norm = norm2(&rc);
                        if norm < norm2(&r) {
                            x = candidate;
                            r = rc;
                            if norm < best_norm {
                                best_norm = norm;
                                best_x = x.clone();
                            }
                            true
                        } else {
                            false
                        }
                    }
                    _ => false,
                }
            } else {
                false
            };

            if accepted {
                damping = (damping * opts.damping_down).max(1e-16);
                break;
            }
            damping *= opts.damping_up;
            if damping > DAMPING_MAX {
                // no descent direction left at any damping: stationary
                break 'outer;
            }
        }

        if best_norm == 0.0 || best_norm < 1e-300 {
            break;
        }
        if iter + 1 == opts.max_iters {
            budget_hit = true;
        }
    }

    Ok(LmOutcome { x: best_x, residual_norm: best_norm, iterations, converged: !budget_hit })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_residual_solves_in_one_step() {
        let out = lm_solve(|x| Ok(vec![x[0] - 3.0]), &[0.0], &LmOptions::default()).unwrap();
        assert!((out.x[0] - 3.0).abs() < 1e-10, "x = {}", out.x[0]);
        assert!(out.converged);
    }

    #[test]
    fn zero_residual_returns_immediately() {
        let out = lm_solve(|_| Ok(vec![0.0, 0.0]), &[1.0, 2.0], &LmOptions::default()).unwrap();
        assert_eq!(out.x, vec![1.0, 2.0]);
        assert_eq!(out.iterations, 0);
    }

    #[test]
    fn rosenbrock_reaches_the_valley_floor() {
        let rosenbrock = |x: &[f64]| -> Result<Vec<f64>> {
            Ok(vec![10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]])
        };
        let opts = LmOptions { max_iters: 200, ..Default::default() };
        let out = lm_solve(rosenbrock, &[-1.2, 1.0], &opts).unwrap();
        let f = out.residual_norm * out.residual_norm;
        assert!(f < 1e-10, "f = {f}");
        assert!((out.x[0] - 1.0).abs() < 1e-6 && (out.x[1] - 1.0).abs() < 1e-6, "{:?}", out.x);
    }

    #[test]
    fn initial_failure_is_fatal() {
        let out = lm_solve(|_| Err(Error::Numerical("nope".into())), &[0.0], &LmOptions::default());
        assert!(out.is_err());
    }

    #[test]
    fn failing_probes_are_stepped_around() {
        // residual refuses x[0] > 0.35; the solver must still approach the
        // constrained optimum from the left
        let f = |x: &[f64]| -> Result<Vec<f64>> {
            if x[0] > 0.35 {
                Err(Error::DegenerateGrid { branch: None })
            } else {
                Ok(vec![x[0] - 1.0])
            }
        };
        let out = lm_solve(f, &[0.0], &LmOptions { max_iters: 60, ..Default::default() }).unwrap();
        assert!(out.x[0] > 0.3 && out.x[0] <= 0.35, "{}", out.x[0]);
    }

    #[test]
    fn budget_exhaustion_is_flagged() {
        let rosenbrock = |x: &[f64]| -> Result<Vec<f64>> {
            Ok(vec![10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]])
        };
        let opts = LmOptions { max_iters: 2, ..Default::default() };
        let out = lm_solve(rosenbrock, &[-1.2, 1.0], &opts).unwrap();
        assert!(!out.converged);
    }
}
