//! Approximate message passing for MMV with the Bayes-optimal joint denoiser.
//!
//! Each vector `j` keeps its own residual, Onsager term and scalar-channel
//! variance `Sigma_j`; the `J` pseudodata entries of a super symbol are then
//! denoised jointly because they share a support.

use rand::RngCore;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, MmvError, Result};
use crate::linalg::Matrix;
use crate::model::{denoise_into, from_db, PriorParams, ProblemParams};
use crate::se::bp_predicted_mse;
use crate::sim::{generate, stream_rng, MeasurementEnsemble, Setting};

/// Starting value of the per-entry variances `v_l^j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum VarianceInit {
    /// `rho * delta`, the standard initialization of this algorithm.
    RhoDelta,
    /// `rho`, the prior variance. Makes the first iterations follow state
    /// evolution started from `E_0 = rho`.
    Rho,
}

impl std::str::FromStr for VarianceInit {
    type Err = MmvError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rho-delta" => Ok(VarianceInit::RhoDelta),
            "rho" => Ok(VarianceInit::Rho),
            _ => Err(invalid("v_init", format!("expected rho-delta or rho, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AmpConfig {
    /// Upper bound on the number of iterations.
    pub t_max: usize,
    /// Stop once the mean squared change of the estimate is at most this.
    pub epsilon: f64,
    /// Weight kept on the previous estimate and variance; 0 disables damping.
    pub damping: f64,
    pub v_init: VarianceInit,
}

impl Default for AmpConfig {
    fn default() -> Self {
        Self {
            t_max: 200,
            epsilon: 1e-8,
            damping: 0.0,
            v_init: VarianceInit::RhoDelta,
        }
    }
}

impl AmpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_max < 1 {
            return Err(invalid("t_max", "need at least one iteration"));
        }
        if !(self.epsilon > 0.0) {
            return Err(invalid("epsilon", format!("stopping threshold must be positive, got {}", self.epsilon)));
        }
        if !(0.0..1.0).contains(&self.damping) {
            return Err(invalid("damping", format!("damping must lie in [0, 1), got {}", self.damping)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AmpResult {
    /// `N x J` final estimate.
    pub estimates: Matrix,
    /// MSE against the true signal after each iteration.
    pub mse_trace: Vec<f64>,
    /// Mean squared change of the estimate at each iteration.
    pub delta_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl AmpResult {
    pub fn final_mse(&self) -> f64 {
        self.mse_trace.last().copied().unwrap_or(f64::NAN)
    }
}

/// Runs AMP on one ensemble. The prior must be the one that generated it.
pub fn amp_run(ensemble: &MeasurementEnsemble, prior: &PriorParams, config: &AmpConfig) -> Result<AmpResult> {
    config.validate()?;
    if ensemble.setting == Setting::ComplexComplex {
        return Err(MmvError::Unsupported(
            "AMP runs on real-matrix settings only (mmv1, mmv2, complex-real)".into(),
        ));
    }
    let j_count = prior.vectors();
    if j_count != ensemble.vectors() {
        return Err(invalid(
            "J",
            format!("prior has J = {j_count} but the ensemble has {} vectors", ensemble.vectors()),
        ));
    }
    let (n, m) = (ensemble.n, ensemble.m);
    let delta = ensemble.params.delta();
    let rho = prior.rho();
    let ratio = n as f64 / m as f64;

    let y: Vec<Vec<f64>> = (0..j_count).map(|j| ensemble.measurements.column(j)).collect();
    let truth: Vec<Vec<f64>> = (0..j_count).map(|j| ensemble.signal.column(j)).collect();

    let mut a = vec![vec![0.0; n]; j_count];
    let v0 = match config.v_init {
        VarianceInit::RhoDelta => rho * delta,
        VarianceInit::Rho => rho,
    };
    let mut v = vec![vec![v0; n]; j_count];
    let mut w = y.clone();
    let mut theta = vec![0.0; j_count];
    let mut sigma = vec![0.0; j_count];
    let mut pseudo = vec![vec![0.0; n]; j_count];
    let mut q = vec![0.0; m];
    let mut fa = vec![0.0; m];
    let mut back = vec![0.0; n];

    let mut mse_trace = Vec::new();
    let mut delta_trace = Vec::new();
    let mut converged = false;

    let mut r_l = vec![0.0; j_count];
    let mut mean_l = vec![0.0; j_count];
    let mut var_l = vec![0.0; j_count];

    for t in 1..=config.t_max {
        for j in 0..j_count {
            let f = &ensemble.matrices[j];
            let old = delta + theta[j];
            for mu in 0..m {
                q[mu] = (y[j][mu] - w[j][mu]) / old;
            }
            theta[j] = v[j].iter().sum::<f64>() / n as f64;
            if !theta[j].is_finite() {
                return Err(MmvError::Diverged { iteration: t, context: "Onsager variance" });
            }
            f.matvec_into(&a[j], &mut fa);
            for mu in 0..m {
                w[j][mu] = fa[mu] - theta[j] * q[mu];
            }
            let denom = delta + theta[j];
            sigma[j] = ratio * denom;
            for mu in 0..m {
                q[mu] = (y[j][mu] - w[j][mu]) / denom;
            }
            f.matvec_t_into(&q, &mut back);
            for l in 0..n {
                pseudo[j][l] = a[j][l] + sigma[j] * back[l];
            }
        }

        let mut change = 0.0;
        let mut sq_err = 0.0;
        for l in 0..n {
            for j in 0..j_count {
                r_l[j] = pseudo[j][l];
            }
            denoise_into(prior, &sigma, &r_l, &mut mean_l, &mut var_l);
            for j in 0..j_count {
                let previous = a[j][l];
                let next = config.damping * previous + (1.0 - config.damping) * mean_l[j];
                v[j][l] = config.damping * v[j][l] + (1.0 - config.damping) * var_l[j];
                a[j][l] = next;
                change += (previous - next).powi(2);
                sq_err += (next - truth[j][l]).powi(2);
            }
        }
        let total = (n * j_count) as f64;
        let change = change / total;
        if !change.is_finite() {
            return Err(MmvError::Diverged { iteration: t, context: "estimate change" });
        }
        delta_trace.push(change);
        mse_trace.push(sq_err / total);
        if change <= config.epsilon {
            converged = true;
            break;
        }
    }

    let mut estimates = Matrix::zeros(n, j_count);
    for (j, col) in a.iter().enumerate() {
        estimates.set_column(j, col);
    }
    Ok(AmpResult {
        estimates,
        iterations: mse_trace.len(),
        mse_trace,
        delta_trace,
        converged,
    })
}

/// Median and quartiles of a sample, by linear interpolation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Spread {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

impl Spread {
    /// Returns `None` for an empty sample or if any value is NaN.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() || values.iter().any(|x| x.is_nan()) {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let at = |p: f64| {
            let pos = p * (sorted.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
        };
        Some(Self {
            median: at(0.5),
            q1: at(0.25),
            q3: at(0.75),
        })
    }

    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

/// Seed of trial `trial` in cell `cell`, derived from the sweep's root seed.
pub fn trial_seed(root: u64, cell: usize, trial: usize) -> u64 {
    stream_rng(root, ((cell as u64) << 32) | trial as u64, u64::from(u32::MAX)).next_u64()
}

#[derive(Debug, Clone, Serialize)]
pub struct AmpTrial {
    pub delta_db: f64,
    pub rate: f64,
    pub setting: Setting,
    pub trial: usize,
    pub seed: u64,
    pub iterations: usize,
    pub converged: bool,
    /// Final MSE; NaN when the run diverged.
    pub mse: f64,
    pub se_mse: f64,
    pub error: Option<String>,
    /// Per-iteration traces, kept only when the sweep asks for them.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub mse_trace: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub delta_trace: Vec<f64>,
}

impl AmpTrial {
    pub fn ratio_ln(&self) -> f64 {
        (self.mse / self.se_mse).ln()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AmpCell {
    pub delta_db: f64,
    pub rate: f64,
    pub setting: Setting,
    /// Median final MSE over the trials that did not diverge.
    pub median_mse: f64,
    pub spread: Option<Spread>,
    pub se_mse: f64,
    pub diverged: usize,
    pub trials: Vec<AmpTrial>,
}

impl AmpCell {
    /// `ln(median AMP MSE / SE-predicted MSE)`.
    pub fn ratio_ln(&self) -> f64 {
        (self.median_mse / self.se_mse).ln()
    }
}

/// Sweep specification over `(delta in dB, R)` cells.
#[derive(Debug, Clone)]
pub struct AmpSweep {
    pub setting: Setting,
    pub prior: PriorParams,
    pub delta_db: Vec<f64>,
    pub rates: Vec<f64>,
    pub n: usize,
    pub n_trials: usize,
    pub config: AmpConfig,
    pub seed: u64,
    pub keep_traces: bool,
}

/// Runs every trial of every cell; cells come back row-major in
/// `(delta_db, rate)` order regardless of scheduling.
pub fn amp_sweep(sweep: &AmpSweep) -> Result<Vec<AmpCell>> {
    if sweep.n_trials < 1 {
        return Err(invalid("n_trials", "need at least one trial per cell"));
    }
    sweep.config.validate()?;
    let mut cells = Vec::new();
    for &d in &sweep.delta_db {
        for &r in &sweep.rates {
            let params = ProblemParams::new(sweep.prior, from_db(d), r)?;
            cells.push((d, params));
        }
    }
    let se: Vec<f64> = cells
        .par_iter()
        .map(|(_, p)| bp_predicted_mse(p))
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..sweep.n_trials).map(move |t| (c, t)))
        .collect();
    let trials: Vec<AmpTrial> = jobs
        .par_iter()
        .map(|&(c, t)| {
            let (d, params) = &cells[c];
            let seed = trial_seed(sweep.seed, c, t);
            let outcome = generate(sweep.setting, &sweep.prior, params.delta(), params.rate(), sweep.n, seed)
                .and_then(|e| amp_run(&e, &sweep.prior, &sweep.config));
            let mut trial = AmpTrial {
                delta_db: *d,
                rate: params.rate(),
                setting: sweep.setting,
                trial: t,
                seed,
                iterations: 0,
                converged: false,
                mse: f64::NAN,
                se_mse: se[c],
                error: None,
                mse_trace: Vec::new(),
                delta_trace: Vec::new(),
            };
            match outcome {
                Ok(res) => {
                    trial.iterations = res.iterations;
                    trial.converged = res.converged;
                    trial.mse = res.final_mse();
                    if sweep.keep_traces {
                        trial.mse_trace = res.mse_trace;
                        trial.delta_trace = res.delta_trace;
                    }
                }
                Err(e @ MmvError::Diverged { iteration, .. }) => {
                    trial.iterations = iteration;
                    trial.error = Some(e.to_string());
                }
                Err(e) => return Err(e),
            }
            Ok(trial)
        })
        .collect::<Result<_>>()?;

    let mut out = Vec::with_capacity(cells.len());
    let mut iter = trials.into_iter();
    for (c, (d, params)) in cells.iter().enumerate() {
        let trials: Vec<AmpTrial> = iter.by_ref().take(sweep.n_trials).collect();
        let finite: Vec<f64> = trials.iter().map(|t| t.mse).filter(|x| x.is_finite()).collect();
        let spread = Spread::of(&finite);
        out.push(AmpCell {
            delta_db: *d,
            rate: params.rate(),
            setting: sweep.setting,
            median_mse: spread.map_or(f64::NAN, |s| s.median),
            spread,
            se_mse: se[c],
            diverged: trials.len() - finite.len(),
            trials,
        });
    }
    Ok(out)
}
