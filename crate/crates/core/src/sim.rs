//! Synthetic channels for the four measurement settings, plus a Monte Carlo
//! estimate of the residual covariance used to compare MMV-1 with MMV-2.
//!
//! Every random quantity comes from its own ChaCha stream keyed by
//! `(seed, index)`: signal, matrices, noise and replica estimates never share
//! a stream. Two ensembles built from the same seed therefore share signal and
//! noise even when their matrix layouts differ, and MMV-2's shared matrix is
//! exactly the first matrix that MMV-1 would draw.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, MmvError, Result};
use crate::linalg::Matrix;
use crate::model::{sample_signal_with, PriorParams, ProblemParams};

pub const MIN_LENGTH: usize = 10;
pub const MIN_MONTE_CARLO: usize = 100;

const STREAM_SIGNAL: u64 = 0;
const STREAM_MATRICES: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_REPLICAS: u64 = 3;

const DUMP_MAGIC: &[u8; 4] = b"MMVE";
const DUMP_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Setting {
    /// `J` independent matrices.
    Mmv1,
    /// One matrix shared by all `J` vectors.
    Mmv2,
    /// Complex signal measured by a real matrix; identical to MMV-2 with `J = 2`.
    ComplexReal,
    /// Complex signal measured by a complex matrix.
    ComplexComplex,
}

impl Setting {
    pub const ALL: [Setting; 4] = [Setting::Mmv1, Setting::Mmv2, Setting::ComplexReal, Setting::ComplexComplex];

    pub fn name(self) -> &'static str {
        match self {
            Setting::Mmv1 => "mmv1",
            Setting::Mmv2 => "mmv2",
            Setting::ComplexReal => "complex-real",
            Setting::ComplexComplex => "complex-complex",
        }
    }

    pub fn is_complex(self) -> bool {
        matches!(self, Setting::ComplexReal | Setting::ComplexComplex)
    }

    fn code(self) -> u8 {
        match self {
            Setting::Mmv1 => 1,
            Setting::Mmv2 => 2,
            Setting::ComplexReal => 3,
            Setting::ComplexComplex => 4,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.code() == code)
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Setting {
    type Err = MmvError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "mmv1" | "mmv-1" => Ok(Setting::Mmv1),
            "mmv2" | "mmv-2" => Ok(Setting::Mmv2),
            "complex-real" => Ok(Setting::ComplexReal),
            "complex-complex" => Ok(Setting::ComplexComplex),
            _ => Err(invalid(
                "setting",
                format!("unknown setting {s:?}; expected mmv1, mmv2, complex-real or complex-complex"),
            )),
        }
    }
}

/// Independent generator for one purpose within one ensemble.
pub(crate) fn stream_rng(seed: u64, index: u64, stream: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&index.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream);
    rng
}

fn gaussian_matrix(rows: usize, cols: usize, variance: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let scale = variance.sqrt();
    let data = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// One realization of `y^j = F^j s^j + z^j`, `j = 1..J`.
#[derive(Debug, Clone)]
pub struct MeasurementEnsemble {
    pub setting: Setting,
    pub params: ProblemParams,
    pub seed: u64,
    pub n: usize,
    pub m: usize,
    /// `N x J`; for complex settings column 0 is the real part, column 1 the imaginary part.
    pub signal: Matrix,
    /// One `M x N` handle per vector. MMV-2 and complex-real clone one `Arc`;
    /// complex-complex holds the real and imaginary parts of the matrix.
    pub matrices: Vec<Arc<Matrix>>,
    /// The real `2M x 2N` form of a complex matrix acting on interleaved super symbols.
    pub stacked: Option<Matrix>,
    pub noise: Matrix,
    pub measurements: Matrix,
}

impl MeasurementEnsemble {
    pub fn vectors(&self) -> usize {
        self.signal.cols()
    }

    /// Signal flattened super symbol by super symbol, `[s_1^1, .., s_1^J, s_2^1, ..]`.
    pub fn interleaved_signal(&self) -> &[f64] {
        self.signal.as_slice()
    }

    /// Noiseless measurements `F x` of any `N x J` input, with the same
    /// arithmetic used to build `measurements`.
    pub fn apply(&self, x: &Matrix) -> Matrix {
        assert_eq!(x.shape(), self.signal.shape());
        let mut out = Matrix::zeros(self.m, self.vectors());
        match &self.stacked {
            Some(stacked) => {
                let y = stacked.matvec(x.as_slice());
                for mu in 0..self.m {
                    out.set(mu, 0, y[mu]);
                    out.set(mu, 1, y[mu + self.m]);
                }
            }
            None => {
                for (j, f) in self.matrices.iter().enumerate() {
                    out.set_column(j, &f.matvec(&x.column(j)));
                }
            }
        }
        out
    }

    /// Number of distinct matrices stored (1 when all handles share storage).
    pub fn distinct_matrices(&self) -> usize {
        let mut count = 0;
        for (i, f) in self.matrices.iter().enumerate() {
            if !self.matrices[..i].iter().any(|g| Arc::ptr_eq(f, g)) {
                count += 1;
            }
        }
        count
    }

    /// Writes the ensemble in the little-endian layout described in the README.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&DUMP_VERSION.to_le_bytes())?;
        w.write_all(&[self.setting.code(), 0, 0, 0])?;
        for v in [self.n as u64, self.m as u64, self.vectors() as u64, self.seed] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in [self.params.rho(), self.params.delta(), self.params.rate()] {
            w.write_all(&v.to_le_bytes())?;
        }
        let distinct: Vec<&Arc<Matrix>> = self
            .matrices
            .iter()
            .enumerate()
            .filter(|(i, f)| !self.matrices[..*i].iter().any(|g| Arc::ptr_eq(f, g)))
            .map(|(_, f)| f)
            .collect();
        w.write_all(&(distinct.len() as u64).to_le_bytes())?;
        let mut put = |m: &Matrix| -> std::io::Result<()> {
            for v in m.as_slice() {
                w.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        };
        put(&self.signal)?;
        for f in distinct {
            put(f)?;
        }
        put(&self.noise)?;
        put(&self.measurements)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let io = |e: std::io::Error| MmvError::Format(format!("truncated ensemble dump: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != DUMP_MAGIC {
            return Err(MmvError::Format("not an ensemble dump (bad magic)".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(io)?;
        let version = u32::from_le_bytes(b4);
        if version != DUMP_VERSION {
            return Err(MmvError::Format(format!("unsupported dump version {version}")));
        }
        r.read_exact(&mut b4).map_err(io)?;
        let setting = Setting::from_code(b4[0]).ok_or_else(|| MmvError::Format(format!("unknown setting code {}", b4[0])))?;
        let mut b8 = [0u8; 8];
        let mut u64s = [0u64; 4];
        for v in &mut u64s {
            r.read_exact(&mut b8).map_err(io)?;
            *v = u64::from_le_bytes(b8);
        }
        let [n, m, j, seed] = u64s;
        let mut f64s = [0f64; 3];
        for v in &mut f64s {
            r.read_exact(&mut b8).map_err(io)?;
            *v = f64::from_le_bytes(b8);
        }
        let [rho, delta, rate] = f64s;
        r.read_exact(&mut b8).map_err(io)?;
        let distinct = u64::from_le_bytes(b8) as usize;
        let (n, m, j) = (n as usize, m as usize, j as usize);
        let expected_distinct = match setting {
            Setting::Mmv1 | Setting::ComplexComplex => j,
            Setting::Mmv2 | Setting::ComplexReal => 1,
        };
        if distinct != expected_distinct || j == 0 || n == 0 || m == 0 {
            return Err(MmvError::Format("inconsistent ensemble header".into()));
        }
        let mut get = |rows: usize, cols: usize| -> Result<Matrix> {
            let mut data = vec![0.0; rows * cols];
            for v in &mut data {
                r.read_exact(&mut b8).map_err(io)?;
                *v = f64::from_le_bytes(b8);
            }
            Ok(Matrix::from_vec(rows, cols, data))
        };
        let signal = get(n, j)?;
        let mut stored = Vec::with_capacity(distinct);
        for _ in 0..distinct {
            stored.push(Arc::new(get(m, n)?));
        }
        let noise = get(m, j)?;
        let measurements = get(m, j)?;
        let params = ProblemParams::new(PriorParams::new(rho, j)?, delta, rate)?;
        let matrices = if distinct == 1 { vec![stored[0].clone(); j] } else { stored };
        let stacked = (setting == Setting::ComplexComplex).then(|| stack_complex(&matrices[0], &matrices[1]));
        Ok(Self {
            setting,
            params,
            seed,
            n,
            m,
            signal,
            matrices,
            stacked,
            noise,
            measurements,
        })
    }
}

/// Real form of `F^R + i F^I` acting on interleaved `(s^R_l, s^I_l)`:
/// row `mu` holds `[F^R, -F^I]` per super symbol, row `mu + M` holds `[F^I, F^R]`.
pub fn stack_complex(real: &Matrix, imag: &Matrix) -> Matrix {
    assert_eq!(real.shape(), imag.shape());
    let (m, n) = real.shape();
    let mut out = Matrix::zeros(2 * m, 2 * n);
    for mu in 0..m {
        for l in 0..n {
            let (fr, fi) = (real.get(mu, l), imag.get(mu, l));
            out.set(mu, 2 * l, fr);
            out.set(mu, 2 * l + 1, -fi);
            out.set(mu + m, 2 * l, fi);
            out.set(mu + m, 2 * l + 1, fr);
        }
    }
    out
}

/// Number of measurements for signal length `n` at rate `rate`.
pub fn measurement_count(rate: f64, n: usize) -> usize {
    (rate * n as f64).round() as usize
}

fn check_setting(setting: Setting, prior: &PriorParams) -> Result<()> {
    if setting.is_complex() && prior.vectors() != 2 {
        return Err(invalid(
            "J",
            format!("setting {setting} carries real and imaginary parts, so J must be 2 (got {})", prior.vectors()),
        ));
    }
    Ok(())
}

/// Builds one ensemble. Deterministic in `seed`.
pub fn generate(setting: Setting, prior: &PriorParams, delta: f64, rate: f64, n: usize, seed: u64) -> Result<MeasurementEnsemble> {
    let params = ProblemParams::new(*prior, delta, rate)?;
    generate_indexed(setting, &params, n, seed, 0)
}

pub(crate) fn generate_indexed(setting: Setting, params: &ProblemParams, n: usize, seed: u64, index: u64) -> Result<MeasurementEnsemble> {
    if n < MIN_LENGTH {
        return Err(invalid("N", format!("signal length must be at least {MIN_LENGTH}, got {n}")));
    }
    let prior = params.prior();
    check_setting(setting, &prior)?;
    let m = measurement_count(params.rate(), n);
    if m == 0 {
        return Err(invalid("R", format!("rate {} gives no measurements at N = {n}", params.rate())));
    }
    let j = prior.vectors();

    let signal = sample_signal_with(&prior, n, &mut stream_rng(seed, index, STREAM_SIGNAL))?;

    let mut matrix_rng = stream_rng(seed, index, STREAM_MATRICES);
    let (matrices, stacked) = match setting {
        Setting::Mmv1 => {
            let ms = (0..j)
                .map(|_| Arc::new(gaussian_matrix(m, n, 1.0 / n as f64, &mut matrix_rng)))
                .collect();
            (ms, None)
        }
        Setting::Mmv2 | Setting::ComplexReal => {
            let shared = Arc::new(gaussian_matrix(m, n, 1.0 / n as f64, &mut matrix_rng));
            (vec![shared; j], None)
        }
        Setting::ComplexComplex => {
            let half = 1.0 / (2.0 * n as f64);
            let real = gaussian_matrix(m, n, half, &mut matrix_rng);
            let imag = gaussian_matrix(m, n, half, &mut matrix_rng);
            let stacked = stack_complex(&real, &imag);
            (vec![Arc::new(real), Arc::new(imag)], Some(stacked))
        }
    };

    let noise = gaussian_matrix(m, j, params.delta(), &mut stream_rng(seed, index, STREAM_NOISE));

    let mut ensemble = MeasurementEnsemble {
        setting,
        params: *params,
        seed,
        n,
        m,
        signal,
        matrices,
        stacked,
        noise,
        measurements: Matrix::zeros(m, j),
    };
    let mut y = ensemble.apply(&ensemble.signal);
    for (yv, zv) in y.as_mut_slice().iter_mut().zip(ensemble.noise.as_slice()) {
        *yv += zv;
    }
    ensemble.measurements = y;
    Ok(ensemble)
}

/// How the replica estimates `x^a` are produced for the covariance check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimatorSpec {
    /// `x^a = s`.
    Exact,
    /// `x^a = 0`.
    Null,
    /// `x^a` drawn from the prior independently of `s` and of each other.
    IndependentDraw,
}

impl EstimatorSpec {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorSpec::Exact => "exact",
            EstimatorSpec::Null => "null",
            EstimatorSpec::IndependentDraw => "independent",
        }
    }
}

impl FromStr for EstimatorSpec {
    type Err = MmvError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(EstimatorSpec::Exact),
            "null" => Ok(EstimatorSpec::Null),
            "independent" | "independent-draw" => Ok(EstimatorSpec::IndependentDraw),
            _ => Err(invalid("estimator", format!("unknown estimator {s:?}; expected exact, null or independent"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
}

impl McEstimate {
    fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Self {
            mean,
            std_error: (var / n).sqrt(),
        }
    }

    /// `|a - b|` in units of the combined standard error.
    pub fn z_score(&self, other: &McEstimate) -> f64 {
        let se = self.std_error.hypot(other.std_error);
        if se == 0.0 {
            if self.mean == other.mean { 0.0 } else { f64::INFINITY }
        } else {
            (self.mean - other.mean).abs() / se
        }
    }
}

/// Monte Carlo estimates of the four residual covariance roles.
/// `w2`, `w4` pair different vectors and are absent when `J = 1`.
#[derive(Debug, Clone, Serialize)]
pub struct CovarianceEstimate {
    pub w1: McEstimate,
    pub w2: Option<McEstimate>,
    pub w3: McEstimate,
    pub w4: Option<McEstimate>,
    pub n_mc: usize,
}

impl CovarianceEstimate {
    pub fn roles(&self) -> [(&'static str, Option<McEstimate>); 4] {
        [("w1", Some(self.w1)), ("w2", self.w2), ("w3", Some(self.w3)), ("w4", self.w4)]
    }
}

const REPLICAS: usize = 2;

/// Per-ensemble averages `[w1, w2, w3, w4]` of the residual products.
fn ensemble_roles(ensemble: &MeasurementEnsemble, spec: EstimatorSpec, seed: u64, index: u64) -> Result<[f64; 4]> {
    let prior = ensemble.params.prior();
    let mut replica_rng = stream_rng(seed, index, STREAM_REPLICAS);
    let mut residuals = Vec::with_capacity(REPLICAS);
    for _ in 0..REPLICAS {
        let x = match spec {
            EstimatorSpec::Exact => ensemble.signal.clone(),
            EstimatorSpec::Null => Matrix::zeros(ensemble.n, ensemble.vectors()),
            EstimatorSpec::IndependentDraw => sample_signal_with(&prior, ensemble.n, &mut replica_rng)?,
        };
        let mut diff = ensemble.signal.clone();
        for (d, xv) in diff.as_mut_slice().iter_mut().zip(x.as_slice()) {
            *d -= xv;
        }
        let mut v = ensemble.apply(&diff);
        for (vv, zv) in v.as_mut_slice().iter_mut().zip(ensemble.noise.as_slice()) {
            *vv += zv;
        }
        residuals.push(v);
    }

    let j = ensemble.vectors();
    let mut sums = [0.0f64; 4];
    for mu in 0..ensemble.m {
        for a in 0..REPLICAS {
            let va = residuals[a].row(mu);
            for b in 0..REPLICAS {
                let vb = residuals[b].row(mu);
                for p in 0..j {
                    for q in 0..j {
                        let role = match (a == b, p == q) {
                            (true, true) => 0,
                            (true, false) => 1,
                            (false, true) => 2,
                            (false, false) => 3,
                        };
                        sums[role] += va[p] * vb[q];
                    }
                }
            }
        }
    }
    let (m, n, jf) = (ensemble.m as f64, REPLICAS as f64, j as f64);
    let counts = [m * n * jf, m * n * jf * (jf - 1.0), m * n * (n - 1.0) * jf, m * n * (n - 1.0) * jf * (jf - 1.0)];
    let mut out = [0.0; 4];
    for k in 0..4 {
        out[k] = if counts[k] > 0.0 { sums[k] / counts[k] } else { 0.0 };
    }
    Ok(out)
}

/// Monte Carlo over `n_mc` independent ensembles of the residual
/// `v^a = F (s - x^a) + z` for two replica estimates `x^a`.
#[allow(clippy::too_many_arguments)]
pub fn empirical_v_covariance(
    setting: Setting,
    prior: &PriorParams,
    delta: f64,
    rate: f64,
    n: usize,
    spec: EstimatorSpec,
    n_mc: usize,
    seed: u64,
) -> Result<CovarianceEstimate> {
    if n_mc < MIN_MONTE_CARLO {
        return Err(invalid("n_mc", format!("need at least {MIN_MONTE_CARLO} Monte Carlo ensembles, got {n_mc}")));
    }
    let params = ProblemParams::new(*prior, delta, rate)?;
    check_setting(setting, prior)?;
    let per_ensemble: Vec<[f64; 4]> = (0..n_mc as u64)
        .into_par_iter()
        .map(|i| {
            let ensemble = generate_indexed(setting, &params, n, seed, i)?;
            ensemble_roles(&ensemble, spec, seed, i)
        })
        .collect::<Result<_>>()?;
    let column = |k: usize| McEstimate::from_samples(&per_ensemble.iter().map(|w| w[k]).collect::<Vec<_>>());
    let paired = prior.vectors() > 1;
    Ok(CovarianceEstimate {
        w1: column(0),
        w2: paired.then(|| column(1)),
        w3: column(2),
        w4: paired.then(|| column(3)),
        n_mc,
    })
}
