//! State evolution: the scalar recursion `E <- mmse_scalar((E + delta) / R)`
//! that tracks the per-iteration MSE of Bayes-optimal AMP. Started from the
//! prior variance it descends to the largest stable fixed point, the
//! BP-predicted MSE.

use serde::Serialize;

use crate::error::{invalid, Result};
use crate::model::{mmse_scalar, ProblemParams};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, Serialize)]
pub struct SeTrace {
    /// `E_0, E_1, ...`; the first entry is the starting point.
    pub e_sequence: Vec<f64>,
    pub converged: bool,
    pub fixed_point: f64,
}

impl SeTrace {
    /// The last two iterates, useful when the recursion did not settle.
    pub fn last_two(&self) -> (f64, f64) {
        let n = self.e_sequence.len();
        if n >= 2 {
            (self.e_sequence[n - 2], self.e_sequence[n - 1])
        } else {
            (self.e_sequence[0], self.e_sequence[0])
        }
    }
}

/// One state-evolution step.
pub fn se_step(params: &ProblemParams, e: f64) -> Result<f64> {
    mmse_scalar(&params.prior(), params.effective_noise(e))
}

/// Iterates state evolution from `e0` until `|E_{t+1} - E_t| < tol * E_t`.
pub fn se_fixed_point(params: &ProblemParams, e0: f64, tol: f64, max_iter: usize) -> Result<SeTrace> {
    if !(e0 > 0.0 && e0 <= params.rho()) {
        return Err(invalid("E0", format!("starting MSE must lie in (0, rho], got {e0}")));
    }
    if !(tol > 0.0) {
        return Err(invalid("tol", format!("tolerance must be positive, got {tol}")));
    }
    if max_iter == 0 {
        return Err(invalid("max_iter", "need at least one iteration"));
    }
    let mut e_sequence = Vec::with_capacity(64);
    e_sequence.push(e0);
    let mut e = e0;
    let mut converged = false;
    for _ in 0..max_iter {
        let next = se_step(params, e)?;
        e_sequence.push(next);
        let change = (next - e).abs();
        e = next;
        if change < tol * e || next == 0.0 {
            converged = true;
            break;
        }
    }
    Ok(SeTrace {
        e_sequence,
        converged,
        fixed_point: e,
    })
}

/// The MSE that BP/AMP is predicted to reach: state evolution started from
/// the uninformative point `E_0 = rho`.
pub fn bp_predicted_mse(params: &ProblemParams) -> Result<f64> {
    Ok(se_fixed_point(params, params.rho(), DEFAULT_TOL, DEFAULT_MAX_ITER)?.fixed_point)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{from_db, PriorParams};

    fn params(rho: f64, j: usize, delta: f64, rate: f64) -> ProblemParams {
        ProblemParams::new(PriorParams::new(rho, j).unwrap(), delta, rate).unwrap()
    }

    #[test]
    fn gaussian_prior_quadratic_root() {
        let p = params(1.0, 1, 0.01, 1.0);
        let trace = se_fixed_point(&p, 1.0, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        // E^2 + (R + delta - 1) E - delta = 0 with R = 1.
        let exact = (-0.01 + (0.01f64 * 0.01 + 0.04).sqrt()) / 2.0;
        assert!(trace.converged);
        assert!((trace.fixed_point - exact).abs() < 1e-8);
    }

    #[test]
    fn sequence_is_monotone_from_prior_variance() {
        let p = params(0.1, 3, from_db(-35.0), 0.2);
        let trace = se_fixed_point(&p, 0.1, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!(trace.e_sequence.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
        assert!(trace.fixed_point >= 0.0 && trace.fixed_point <= 0.1);
    }

    #[test]
    fn measurement_rich_limit() {
        let p = params(0.1, 3, 1e-4, 10.0);
        let e = bp_predicted_mse(&p).unwrap();
        assert!(e < 5e-4, "{e}");
        // The fixed point is consistent with one more step.
        assert!((se_step(&p, e).unwrap() - e).abs() < 1e-12);
    }

    #[test]
    fn iteration_cap_reports_non_convergence() {
        let p = params(0.1, 3, from_db(-35.0), 0.2);
        let trace = se_fixed_point(&p, 0.1, 1e-300, 3).unwrap();
        assert!(!trace.converged);
        assert_eq!(trace.e_sequence.len(), 4);
        let (a, b) = trace.last_two();
        assert!(b < a);
    }

    #[test]
    fn rejects_bad_start() {
        let p = params(0.1, 3, 1e-3, 0.2);
        assert!(se_fixed_point(&p, 0.0, 1e-10, 10).is_err());
        assert!(se_fixed_point(&p, 0.2, 1e-10, 10).is_err());
        assert!(se_fixed_point(&p, 0.1, 0.0, 10).is_err());
    }
}
