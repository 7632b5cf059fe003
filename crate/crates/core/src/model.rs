//! The J-dimensional Bernoulli–Gaussian prior, its sampler, the posterior of
//! a super symbol observed through independent Gaussian scalar channels, and
//! the resulting scalar-channel MMSE.
//!
//! A super symbol `s` is the zero vector with probability `1 - rho` and a
//! standard `J`-dimensional Gaussian otherwise. Given pseudodata
//! `r_j = s_j + sqrt(sigma_j) n_j` the posterior is again a two-component
//! mixture; its support probability, mean and second moment are returned by
//! [`denoise`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, MmvError, Result};
use crate::linalg::Matrix;
use crate::quadrature::radial_gaussian_expectation;

/// Sparsity rate and number of jointly sparse vectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorParams {
    rho: f64,
    vectors: usize,
}

impl PriorParams {
    pub fn new(rho: f64, vectors: usize) -> Result<Self> {
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(invalid("rho", format!("sparsity rate must lie in (0, 1], got {rho}")));
        }
        if vectors == 0 {
            return Err(invalid("J", "number of signal vectors must be at least 1"));
        }
        Ok(Self { rho, vectors })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Number of jointly sparse signal vectors `J`.
    pub fn vectors(&self) -> usize {
        self.vectors
    }

    /// `ln((1 - rho) / rho)`, `-inf` when `rho = 1`.
    fn log_prior_odds(&self) -> f64 {
        (1.0 - self.rho).ln() - self.rho.ln()
    }
}

/// A point `(rho, J, delta, R)` of the phase plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProblemParams {
    prior: PriorParams,
    delta: f64,
    rate: f64,
}

impl ProblemParams {
    pub fn new(prior: PriorParams, delta: f64, rate: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(invalid("delta", format!("noise variance must be positive, got {delta}")));
        }
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(invalid("R", format!("measurement rate must be positive, got {rate}")));
        }
        Ok(Self { prior, delta, rate })
    }

    pub fn prior(&self) -> PriorParams {
        self.prior
    }

    pub fn rho(&self) -> f64 {
        self.prior.rho
    }

    pub fn vectors(&self) -> usize {
        self.prior.vectors
    }

    /// Linear-scale noise variance.
    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Measurement rate `R = M / N`.
    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn with_rate(&self, rate: f64) -> Result<Self> {
        Self::new(self.prior, self.delta, rate)
    }

    pub fn with_delta(&self, delta: f64) -> Result<Self> {
        Self::new(self.prior, delta, self.rate)
    }

    /// Effective scalar-channel noise `(E + delta) / R` seen by a denoiser
    /// when the current per-entry error is `mse`.
    pub fn effective_noise(&self, mse: f64) -> f64 {
        (mse + self.delta) / self.rate
    }
}

/// `10 log10(x)`.
pub fn to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// Inverse of [`to_db`].
pub fn from_db(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Posterior summary of one super symbol.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub mean: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub support_prob: f64,
}

impl DenoiserOutput {
    /// Per-component posterior variance, `second_moment - mean^2`.
    pub fn variance(&self) -> Vec<f64> {
        self.second_moment
            .iter()
            .zip(&self.mean)
            .map(|(m2, m)| (m2 - m * m).max(0.0))
            .collect()
    }
}

/// Draws `n` i.i.d. super symbols (rows of the returned `n x J` matrix).
pub fn sample_signal(prior: &PriorParams, n: usize, seed: u64) -> Result<Matrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_signal_with(prior, n, &mut rng)
}

pub fn sample_signal_with<R: Rng + ?Sized>(prior: &PriorParams, n: usize, rng: &mut R) -> Result<Matrix> {
    if n == 0 {
        return Err(invalid("N", "signal length must be at least 1"));
    }
    let j = prior.vectors;
    let mut out = Matrix::zeros(n, j);
    for l in 0..n {
        let active = rng.random::<f64>() < prior.rho;
        if active {
            for v in out.row_mut(l) {
                *v = rng.sample(StandardNormal);
            }
        }
    }
    Ok(out)
}

fn check_sigma(sigma: &[f64]) -> Result<()> {
    for &s in sigma {
        if !(s > 0.0 && s.is_finite()) {
            return Err(invalid("sigma", format!("scalar-channel noise variances must be positive, got {s}")));
        }
    }
    Ok(())
}

/// Posterior of a super symbol given pseudodata observed through scalar
/// Gaussian channels with per-component noise variance `sigma`.
pub fn denoise(prior: &PriorParams, sigma: &[f64], pseudodata: &[f64]) -> Result<DenoiserOutput> {
    let j = prior.vectors;
    if sigma.len() != j || pseudodata.len() != j {
        return Err(invalid(
            "pseudodata",
            format!("expected length-{j} sigma and pseudodata, got {} and {}", sigma.len(), pseudodata.len()),
        ));
    }
    check_sigma(sigma)?;
    if pseudodata.iter().any(|r| !r.is_finite()) {
        return Err(MmvError::NonFinite { context: "denoiser pseudodata" });
    }
    let mut mean = vec![0.0; j];
    let mut variance = vec![0.0; j];
    let support_prob = denoise_into(prior, sigma, pseudodata, &mut mean, &mut variance);
    let second_moment = mean
        .iter()
        .zip(&variance)
        .map(|(m, v)| v + m * m)
        .collect();
    Ok(DenoiserOutput {
        mean,
        second_moment,
        support_prob,
    })
}

/// Unchecked denoiser used inside AMP: writes the posterior mean and
/// variance of each component and returns the support probability.
#[inline]
pub(crate) fn denoise_into(
    prior: &PriorParams,
    sigma: &[f64],
    pseudodata: &[f64],
    mean: &mut [f64],
    variance: &mut [f64],
) -> f64 {
    let mut log_odds = prior.log_prior_odds();
    for (&s, &r) in sigma.iter().zip(pseudodata) {
        log_odds += 0.5 * (1.0 / s).ln_1p() - r * r / (2.0 * s * (s + 1.0));
    }
    let (pi, one_minus_pi) = logistic_pair(log_odds);
    for k in 0..sigma.len() {
        let s = sigma[k];
        let shrunk = pseudodata[k] / (s + 1.0);
        mean[k] = pi * shrunk;
        variance[k] = pi * one_minus_pi * shrunk * shrunk + pi * s / (s + 1.0);
    }
    pi
}

/// Returns `(1 / (1 + e^x), e^x / (1 + e^x))` without overflow.
#[inline]
fn logistic_pair(x: f64) -> (f64, f64) {
    if x == f64::NEG_INFINITY {
        (1.0, 0.0)
    } else if x > 0.0 {
        let e = (-x).exp();
        (e / (1.0 + e), 1.0 / (1.0 + e))
    } else {
        let e = x.exp();
        (1.0 / (1.0 + e), e / (1.0 + e))
    }
}

/// Per-entry MMSE of the prior through scalar channels of common noise
/// variance `sigma`, i.e. the expected posterior variance averaged over
/// the `J` components.
pub fn mmse_scalar(prior: &PriorParams, sigma: f64) -> Result<f64> {
    check_sigma(&[sigma])?;
    let j = prior.vectors as f64;
    let rho = prior.rho;
    let shrink = 1.0 / (sigma + 1.0);
    let base_odds = prior.log_prior_odds() + 0.5 * j * (1.0 / sigma).ln_1p();
    let inv_two = 1.0 / (2.0 * sigma * (sigma + 1.0));
    // Trace of the posterior covariance given |r|^2 = q.
    let trace_cov = |q: f64| {
        let (pi, one_minus_pi) = logistic_pair(base_odds - q * inv_two);
        pi * one_minus_pi * q * shrink * shrink + pi * j * sigma * shrink
    };
    // |r|^2 is sigma * chi2(J) off the support and (1 + sigma) * chi2(J) on it.
    let integrand = |x: f64| (1.0 - rho) * trace_cov(sigma * x) + rho * trace_cov((1.0 + sigma) * x);
    let total = radial_gaussian_expectation(integrand, prior.vectors)?;
    Ok((total / j).clamp(0.0, rho))
}
