//! Replica-symmetric free energy of the MMV channel as a function of the
//! trial MSE `E`, its local maxima, and the MMSE read off the global maximum.
//!
//! With `m = R / (E + delta)` the free energy is
//!
//! ```text
//! F(E) = -(J R / 2) [ ln(2 pi (delta + E)) + delta / (E + delta) ]
//!        + J R (1 - rho) / (2 (R + E + delta))
//!        + rho       E_g ln[ a + (1 - rho) exp(-R |g|^2 / (2 (E + delta))) ]
//!        + (1 - rho) E_h ln[ a + (1 - rho) exp(-R |h|^2 / (2 (R + E + delta))) ]
//! ```
//!
//! where `a = rho ((E + delta) / (R + E + delta))^{J/2}` and `g`, `h` are
//! standard J-dimensional Gaussians. Both expectations depend on `|g|^2`
//! only and are evaluated by [`radial_gaussian_expectation`].

use serde::Serialize;

use crate::error::{invalid, MmvError, Result};
use crate::model::ProblemParams;
use crate::quadrature::radial_gaussian_expectation;

/// Relative width at which golden-section refinement of a maximum stops.
pub const REFINE_REL_TOL: f64 = 1e-7;
/// Two maxima whose free energies differ by less than this are tied.
pub const TIE_TOL: f64 = 1e-10;
/// Default number of log-spaced grid points for [`mmse`].
pub const DEFAULT_GRID: usize = 256;

/// `ln(e^a + e^b)`.
#[inline]
pub(crate) fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// The four-term free energy at trial MSE `e`.
pub fn free_energy(params: &ProblemParams, e: f64) -> Result<f64> {
    if !(e > 0.0 && e.is_finite()) {
        return Err(invalid("E", format!("trial MSE must be positive, got {e}")));
    }
    let rho = params.rho();
    let dim = params.vectors();
    let j = dim as f64;
    let rate = params.rate();
    let noise = e + params.delta();
    let wide = rate + noise;
    if !(noise > 0.0) || !noise.is_finite() || noise.ln() == f64::NEG_INFINITY {
        return Err(invalid("delta", "delta + E underflows"));
    }

    let gaussian_part = -0.5 * j * rate * ((2.0 * std::f64::consts::PI * noise).ln() + params.delta() / noise)
        + j * rate * (1.0 - rho) / (2.0 * wide);

    let log_a = rho.ln() + 0.5 * j * (noise / wide).ln();
    let log_spike = (1.0 - rho).ln();
    let slab_rate = rate / (2.0 * noise);
    let spike_rate = rate / (2.0 * wide);

    let slab = radial_gaussian_expectation(|r2| log_add_exp(log_a, log_spike - slab_rate * r2), dim)?;
    let spike = if rho < 1.0 {
        radial_gaussian_expectation(|r2| log_add_exp(log_a, log_spike - spike_rate * r2), dim)?
    } else {
        0.0
    };
    let value = gaussian_part + rho * slab + (1.0 - rho) * spike;
    if !value.is_finite() {
        return Err(MmvError::NonFinite { context: "free energy" });
    }
    Ok(value)
}

/// Analytic `dF/dE`, differentiating under both expectations. With
/// `pi(q)` the posterior weight of the `a` term at squared radius `q`, each
/// log-mixture contributes `pi k + (1 - pi) c q / s`, where
/// `k = (J/2) (1/(E+delta) - 1/(R+E+delta))` and `c / s` is the decay rate
/// over its variance.
pub fn free_energy_slope(params: &ProblemParams, e: f64) -> Result<f64> {
    if !(e > 0.0 && e.is_finite()) {
        return Err(invalid("E", format!("trial MSE must be positive, got {e}")));
    }
    let rho = params.rho();
    let dim = params.vectors();
    let j = dim as f64;
    let rate = params.rate();
    let delta = params.delta();
    let noise = e + delta;
    let wide = rate + noise;

    let gaussian_part = -0.5 * j * rate * (1.0 / noise - delta / (noise * noise)) - j * rate * (1.0 - rho) / (2.0 * wide * wide);

    let log_a = rho.ln() + 0.5 * j * (noise / wide).ln();
    let log_spike = (1.0 - rho).ln();
    let k = 0.5 * j * (1.0 / noise - 1.0 / wide);
    let term = |decay: f64, scale: f64, r2: f64| {
        let x = log_spike - decay * r2 - log_a;
        // pi = 1 / (1 + e^x), written to avoid overflow.
        let (pi, rest) = if x > 0.0 {
            let t = (-x).exp();
            (t / (1.0 + t), 1.0 / (1.0 + t))
        } else {
            let t = x.exp();
            (1.0 / (1.0 + t), t / (1.0 + t))
        };
        pi * k + rest * decay * r2 / scale
    };
    let slab_rate = rate / (2.0 * noise);
    let spike_rate = rate / (2.0 * wide);
    let slab = radial_gaussian_expectation(|r2| term(slab_rate, noise, r2), dim)?;
    let spike = if rho < 1.0 {
        radial_gaussian_expectation(|r2| term(spike_rate, wide, r2), dim)?
    } else {
        0.0
    };
    let value = gaussian_part + rho * slab + (1.0 - rho) * spike;
    if !value.is_finite() {
        return Err(MmvError::NonFinite { context: "free energy slope" });
    }
    Ok(value)
}

/// A refined local maximum of `F`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LocalMax {
    pub e: f64,
    pub f: f64,
    /// True when the maximum sits on the edge of the search window rather
    /// than in its interior.
    pub at_boundary: bool,
}

/// Sampled `F(E)` with its refined local maxima.
#[derive(Debug, Clone, Serialize)]
pub struct FreeEnergyProfile {
    pub params: ProblemParams,
    pub e_grid: Vec<f64>,
    pub f_values: Vec<f64>,
    /// Sorted by increasing `E`.
    pub local_maxima: Vec<LocalMax>,
    pub global_max_index: usize,
    /// Two maxima tied within [`TIE_TOL`]; the smaller `E` was reported as global.
    pub degenerate: bool,
}

impl FreeEnergyProfile {
    pub fn global_max(&self) -> LocalMax {
        self.local_maxima[self.global_max_index]
    }

    /// More than two maxima, or a maximum pinned to the window edge.
    pub fn is_anomalous(&self) -> bool {
        self.local_maxima.len() > 2 || self.local_maxima.iter().any(|m| m.at_boundary)
    }

    /// The largest-`E` local maximum (the BP-predicted branch).
    pub fn largest_e_max(&self) -> LocalMax {
        *self.local_maxima.last().expect("profile has at least one maximum")
    }
}

/// Log-spaced grid of `n` points on `[lo, hi]`, endpoints included.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| {
            if i + 1 == n {
                hi
            } else {
                (a + (b - a) * i as f64 / (n - 1) as f64).exp()
            }
        })
        .collect()
}

/// Samples `F` on a log-spaced grid, refines each interior local maximum by
/// golden-section search in `ln E` followed by bisection on the slope, and
/// marks the global maximum.
pub fn profile(params: &ProblemParams, e_min: f64, e_max: f64, n_grid: usize) -> Result<FreeEnergyProfile> {
    if !(e_min > 0.0 && e_min < e_max && e_max.is_finite()) {
        return Err(invalid("E_range", format!("need 0 < E_min < E_max, got [{e_min}, {e_max}]")));
    }
    if n_grid < 64 {
        return Err(invalid("n_grid", format!("profile grid needs at least 64 points, got {n_grid}")));
    }
    let e_grid = log_grid(e_min, e_max, n_grid);
    let f_values = e_grid
        .iter()
        .map(|&e| free_energy(params, e))
        .collect::<Result<Vec<_>>>()?;

    let mut local_maxima = Vec::new();
    for i in 1..n_grid - 1 {
        // Strict on the left so a flat run yields a single candidate.
        if f_values[i] > f_values[i - 1] && f_values[i] >= f_values[i + 1] {
            let (e, f) = golden_section_max(params, e_grid[i - 1], e_grid[i + 1], e_grid[i], f_values[i])?;
            local_maxima.push(LocalMax {
                e,
                f,
                at_boundary: false,
            });
        }
    }
    if local_maxima.is_empty() {
        // F is monotone over the window; report the better edge.
        let last = n_grid - 1;
        let i = if f_values[0] >= f_values[last] { 0 } else { last };
        local_maxima.push(LocalMax {
            e: e_grid[i],
            f: f_values[i],
            at_boundary: true,
        });
    }
    local_maxima.sort_by(|a, b| a.e.total_cmp(&b.e));
    local_maxima.dedup_by(|b, a| ((b.e - a.e) / a.e).abs() < 10.0 * REFINE_REL_TOL);

    let (global_max_index, degenerate) = pick_global(&local_maxima);
    Ok(FreeEnergyProfile {
        params: *params,
        e_grid,
        f_values,
        local_maxima,
        global_max_index,
        degenerate,
    })
}

/// Index of the maximal `F`; ties within [`TIE_TOL`] go to the smaller `E`.
pub(crate) fn pick_global(maxima: &[LocalMax]) -> (usize, bool) {
    let mut best = 0;
    for (i, m) in maxima.iter().enumerate().skip(1) {
        if m.f > maxima[best].f + TIE_TOL {
            best = i;
        }
    }
    let degenerate = maxima
        .iter()
        .enumerate()
        .any(|(i, m)| i != best && (m.f - maxima[best].f).abs() < TIE_TOL);
    (best, degenerate)
}

fn golden_section_max(params: &ProblemParams, lo: f64, hi: f64, guess_e: f64, guess_f: f64) -> Result<(f64, f64)> {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let f = |x: f64| free_energy(params, x.exp());
    let (mut a, mut b) = (lo.ln(), hi.ln());
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    while b - a > REFINE_REL_TOL {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d)?;
        }
    }
    let (x, fx) = if fc >= fd { (c, fc) } else { (d, fd) };
    let (x, fx) = polish_on_slope(params, x, fx)?;
    if fx >= guess_f {
        Ok((x.exp(), fx))
    } else {
        Ok((guess_e, guess_f))
    }
}

/// Golden section cannot resolve a maximum finer than about the square root
/// of machine precision, since `F` is flat there. The slope has a simple
/// root at the same point, so bracket it around `x = ln E` and bisect.
fn polish_on_slope(params: &ProblemParams, x: f64, fx: f64) -> Result<(f64, f64)> {
    let slope = |y: f64| free_energy_slope(params, y.exp());
    let width = 10.0 * REFINE_REL_TOL;
    let (mut a, mut b) = (x - width, x + width);
    if !(slope(a)? > 0.0 && slope(b)? < 0.0) {
        return Ok((x, fx));
    }
    while b - a > 1e-15 * (1.0 + x.abs()) {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            break;
        }
        if slope(mid)? > 0.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    let root = 0.5 * (a + b);
    let f_root = free_energy(params, root.exp())?;
    // Keep the polished point unless it is visibly worse.
    if f_root >= fx - 1e-12 * fx.abs().max(1.0) {
        Ok((root, f_root))
    } else {
        Ok((x, fx))
    }
}

/// Search window `[delta * 1e-3, 1.05 rho]` used by [`mmse`].
pub fn mmse_window(params: &ProblemParams) -> (f64, f64) {
    (params.delta() * 1e-3, 1.05 * params.rho())
}

/// Profile over the default MMSE search window.
pub fn default_profile(params: &ProblemParams) -> Result<FreeEnergyProfile> {
    let (lo, hi) = mmse_window(params);
    profile(params, lo, hi, DEFAULT_GRID)
}

/// The `E` of the global free-energy maximum.
pub fn mmse(params: &ProblemParams) -> Result<f64> {
    Ok(default_profile(params)?.global_max().e)
}
