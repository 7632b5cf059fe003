//! Performance regions of the `(delta, R)` plane, the three threshold curves
//! that separate them, and dense phase-diagram sweeps.
//!
//! Decreasing `R` at fixed `delta` passes through
//!
//! * Region 1: one maximum, on the low-MSE branch;
//! * Region 2: two maxima `D1 < D2`, `F(D1)` global;
//! * Region 3: two maxima, `F(D2)` global;
//! * Region 4: one maximum, on the high-MSE branch,
//!
//! with the BP threshold between 1 and 2, the low-noise threshold between
//! 2 and 3, and the critical threshold between 3 and 4.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, MmvError, Result};
use crate::model::{from_db, to_db, PriorParams, ProblemParams};
use crate::replica::{default_profile, FreeEnergyProfile};
use crate::se::bp_predicted_mse;

/// Bisection stops once the bracket is narrower than this.
pub const THRESHOLD_TOL: f64 = 1e-4;
/// Number of rates probed before bisection to check there is one transition.
pub const PRESCAN_POINTS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Region {
    One = 1,
    Two = 2,
    Three = 3,
    Four = 4,
}

impl Region {
    pub fn number(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegionLabel {
    pub region: Region,
    /// The two maxima tie in free energy (the low-noise threshold itself).
    pub degenerate: bool,
    /// More than two maxima, or a maximum on the edge of the search window.
    pub anomalous: bool,
    /// `E` of the surviving maximum for single-maximum profiles, so callers
    /// can re-apply their own Region 1/4 separator.
    pub single_max_e: Option<f64>,
}

/// Separator between the low-MSE and high-MSE branches for single-maximum
/// profiles: the geometric mean of `delta` and `rho`.
pub fn branch_separator(params: &ProblemParams) -> f64 {
    (params.delta() * params.rho()).sqrt()
}

/// Reads the performance region off a free-energy profile.
pub fn classify(profile: &FreeEnergyProfile) -> Result<RegionLabel> {
    let maxima = &profile.local_maxima;
    if maxima.is_empty() {
        return Err(MmvError::Anomaly("profile has no local maximum".into()));
    }
    let anomalous = profile.is_anomalous();
    if maxima.len() == 1 {
        let e = maxima[0].e;
        let region = if e < branch_separator(&profile.params) {
            Region::One
        } else {
            Region::Four
        };
        return Ok(RegionLabel {
            region,
            degenerate: false,
            anomalous,
            single_max_e: Some(e),
        });
    }
    let region = if profile.global_max_index == 0 {
        Region::Two
    } else {
        Region::Three
    };
    Ok(RegionLabel {
        region,
        degenerate: profile.degenerate,
        anomalous,
        single_max_e: None,
    })
}

/// Profile over the MMSE window and its classification.
pub fn classify_params(params: &ProblemParams) -> Result<(FreeEnergyProfile, RegionLabel)> {
    let prof = default_profile(params)?;
    let label = classify(&prof)?;
    Ok((prof, label))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum ThresholdKind {
    /// Region 1 / Region 2: a second, non-global maximum appears.
    Bp,
    /// Region 2 / Region 3: the two maxima tie.
    LowNoise,
    /// Region 3 / Region 4: the low-MSE maximum disappears.
    Critical,
}

impl ThresholdKind {
    pub const ALL: [ThresholdKind; 3] = [ThresholdKind::Bp, ThresholdKind::LowNoise, ThresholdKind::Critical];

    pub fn name(self) -> &'static str {
        match self {
            ThresholdKind::Bp => "bp",
            ThresholdKind::LowNoise => "low_noise",
            ThresholdKind::Critical => "critical",
        }
    }

    /// True on the low-rate side of the threshold.
    fn below(self, region: Region) -> bool {
        match self {
            ThresholdKind::Bp => region >= Region::Two,
            ThresholdKind::LowNoise => region >= Region::Three,
            ThresholdKind::Critical => region == Region::Four,
        }
    }

    /// The regions that must sit directly above and below the boundary.
    fn adjacent(self) -> (Region, Region) {
        match self {
            ThresholdKind::Bp => (Region::One, Region::Two),
            ThresholdKind::LowNoise => (Region::Two, Region::Three),
            ThresholdKind::Critical => (Region::Three, Region::Four),
        }
    }
}

impl std::str::FromStr for ThresholdKind {
    type Err = MmvError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bp" | "BP" => Ok(ThresholdKind::Bp),
            "low_noise" | "low-noise" | "l" => Ok(ThresholdKind::LowNoise),
            "critical" | "c" => Ok(ThresholdKind::Critical),
            other => Err(invalid("kind", format!("unknown threshold kind `{other}`"))),
        }
    }
}

/// Bisection on a boolean classifier that is true at `lo` and false at `hi`.
/// Returns the midpoint of the final bracket together with that bracket.
pub fn bisect_transition<P>(mut pred: P, mut lo: f64, mut hi: f64, tol: f64) -> Result<(f64, f64, f64)>
where
    P: FnMut(f64) -> Result<bool>,
{
    if !(lo < hi) || !(tol > 0.0) {
        return Err(invalid("bracket", format!("need lo < hi and tol > 0, got [{lo}, {hi}], {tol}")));
    }
    while hi - lo >= tol {
        let mid = 0.5 * (lo + hi);
        if pred(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((0.5 * (lo + hi), lo, hi))
}

/// Locates one threshold on `[r_lo, r_hi]` at fixed noise variance.
///
/// Returns `Ok(None)` when the classifier does not change in the manner the
/// threshold requires (for example when Region 2 has vanished at large
/// `delta`), and an anomaly when the pre-scan sees more than one transition.
pub fn threshold(kind: ThresholdKind, prior: &PriorParams, delta: f64, r_lo: f64, r_hi: f64) -> Result<Option<f64>> {
    if !(r_lo > 0.0 && r_lo < r_hi) {
        return Err(invalid("R_range", format!("need 0 < R_lo < R_hi, got [{r_lo}, {r_hi}]")));
    }
    let region_at = |r: f64| -> Result<Region> {
        let p = ProblemParams::new(*prior, delta, r)?;
        Ok(classify_params(&p)?.1.region)
    };

    let step = (r_hi - r_lo) / (PRESCAN_POINTS - 1) as f64;
    let scan: Vec<(f64, bool)> = (0..PRESCAN_POINTS)
        .map(|i| {
            let r = if i + 1 == PRESCAN_POINTS { r_hi } else { r_lo + step * i as f64 };
            region_at(r).map(|reg| (r, kind.below(reg)))
        })
        .collect::<Result<_>>()?;
    if !scan[0].1 || scan[PRESCAN_POINTS - 1].1 {
        return Ok(None);
    }
    let flips: Vec<usize> = (1..PRESCAN_POINTS).filter(|&i| scan[i].1 != scan[i - 1].1).collect();
    if flips.len() != 1 {
        return Err(MmvError::Anomaly(format!(
            "{} threshold at delta={delta:e}: {} transitions in pre-scan of [{r_lo}, {r_hi}]",
            kind.name(),
            flips.len()
        )));
    }
    let i = flips[0];
    let (mid, lo, hi) = bisect_transition(|r| region_at(r).map(|reg| kind.below(reg)), scan[i - 1].0, scan[i].0, THRESHOLD_TOL)?;

    let (above, below) = kind.adjacent();
    if region_at(hi)? != above || region_at(lo)? != below {
        return Ok(None);
    }
    Ok(Some(mid))
}

/// One threshold kind evaluated over a list of noise variances (in dB).
#[derive(Debug, Clone, Serialize)]
pub struct ThresholdCurve {
    pub kind: ThresholdKind,
    pub delta_db: Vec<f64>,
    /// `None` where the threshold does not exist in the searched range.
    pub rates: Vec<Option<f64>>,
    /// Per-point error messages; the sweep itself never aborts.
    pub notes: Vec<Option<String>>,
}

pub fn threshold_curve(kind: ThresholdKind, prior: &PriorParams, delta_db: &[f64], r_lo: f64, r_hi: f64) -> ThresholdCurve {
    let results: Vec<Result<Option<f64>>> = delta_db
        .par_iter()
        .map(|&d| threshold(kind, prior, from_db(d), r_lo, r_hi))
        .collect();
    let mut rates = Vec::with_capacity(results.len());
    let mut notes = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(v) => {
                rates.push(v);
                notes.push(None);
            }
            Err(e) => {
                rates.push(None);
                notes.push(Some(e.to_string()));
            }
        }
    }
    ThresholdCurve {
        kind,
        delta_db: delta_db.to_vec(),
        rates,
        notes,
    }
}

/// `steps` evenly spaced values on `[lo, hi]`; a single step requires `lo == hi`.
pub fn linspace(name: &'static str, lo: f64, hi: f64, steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(invalid(name, "need at least one grid step"));
    }
    if steps == 1 {
        if lo != hi {
            return Err(invalid(name, "a one-step axis needs lo == hi"));
        }
        return Ok(vec![lo]);
    }
    if !(lo < hi) {
        return Err(invalid(name, format!("need lo < hi, got [{lo}, {hi}]")));
    }
    Ok((0..steps)
        .map(|i| {
            if i + 1 == steps {
                hi
            } else {
                lo + (hi - lo) * i as f64 / (steps - 1) as f64
            }
        })
        .collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct PhaseCell {
    pub delta_db: f64,
    pub rate: f64,
    pub mmse: f64,
    pub mmse_db: f64,
    pub ln_mmse: f64,
    pub label: Option<RegionLabel>,
    pub bp_mse: f64,
    pub note: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PhaseDiagram {
    pub prior: PriorParams,
    pub delta_db: Vec<f64>,
    pub rates: Vec<f64>,
    /// Row-major over `(delta_db, rate)`.
    pub cells: Vec<PhaseCell>,
}

impl PhaseDiagram {
    pub fn cell(&self, delta_index: usize, rate_index: usize) -> &PhaseCell {
        &self.cells[delta_index * self.rates.len() + rate_index]
    }
}

pub fn evaluate_cell(prior: &PriorParams, delta_db: f64, rate: f64) -> PhaseCell {
    let mut cell = PhaseCell {
        delta_db,
        rate,
        mmse: f64::NAN,
        mmse_db: f64::NAN,
        ln_mmse: f64::NAN,
        label: None,
        bp_mse: f64::NAN,
        note: None,
    };
    let outcome = (|| -> Result<()> {
        let p = ProblemParams::new(*prior, from_db(delta_db), rate)?;
        let (prof, label) = classify_params(&p)?;
        let mmse = prof.global_max().e;
        cell.mmse = mmse;
        cell.mmse_db = to_db(mmse);
        cell.ln_mmse = mmse.ln();
        cell.label = Some(label);
        if label.anomalous {
            cell.note = Some(format!("anomalous profile with {} maxima", prof.local_maxima.len()));
        }
        cell.bp_mse = bp_predicted_mse(&p)?;
        Ok(())
    })();
    if let Err(e) = outcome {
        cell.note = Some(e.to_string());
    }
    cell
}

/// Dense `(delta, R)` sweep of MMSE, region label and BP-predicted MSE.
pub fn phase_diagram(
    prior: &PriorParams,
    delta_range_db: (f64, f64, usize),
    rate_range: (f64, f64, usize),
) -> Result<PhaseDiagram> {
    let delta_db = linspace("delta_db", delta_range_db.0, delta_range_db.1, delta_range_db.2)?;
    let rates = linspace("R", rate_range.0, rate_range.1, rate_range.2)?;
    if rates[0] <= 0.0 {
        return Err(invalid("R", "measurement rates must be positive"));
    }
    let coords: Vec<(f64, f64)> = delta_db
        .iter()
        .flat_map(|&d| rates.iter().map(move |&r| (d, r)))
        .collect();
    let cells = coords
        .par_iter()
        .map(|&(d, r)| evaluate_cell(prior, d, r))
        .collect();
    Ok(PhaseDiagram {
        prior: *prior,
        delta_db,
        rates,
        cells,
    })
}
