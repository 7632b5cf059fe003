//! Batch front end behind the `mmv` binary.
//!
//! Every run reads a flat `key = value` file and/or `--set key=value`
//! overrides, validates all parameters before computing anything, and writes
//! one CSV plus a JSON sidecar. The CSV opens with a schema comment line so
//! `mmv plot-script` can recognise it. Data files are byte-identical across
//! reruns of the same config; timestamps live only in the sidecar.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::amp::{amp_sweep, AmpConfig, AmpSweep, VarianceInit};
use crate::error::MmvError;
use crate::model::{from_db, to_db, PriorParams, ProblemParams};
use crate::phase::{classify_params, evaluate_cell, linspace, threshold, ThresholdKind, THRESHOLD_TOL};
use crate::quadrature::QuadratureOptions;
use crate::replica::{free_energy, mmse, mmse_window, profile, DEFAULT_GRID, REFINE_REL_TOL, TIE_TOL};
use crate::se::{se_fixed_point, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::sim::{empirical_v_covariance, EstimatorSpec, Setting};

pub const CSV_SCHEMA_VERSION: u32 = 1;
const SCHEMA_PREFIX: &str = "# mmv-csv schema=";
const DB_NOTE: &str = "dB values are 10*log10 of the linear quantity (variances and MSEs)";

#[derive(Debug, Parser)]
#[command(name = "mmv", version, about = "MMSE, phase diagrams, state evolution and AMP for noisy MMV compressed sensing")]
pub struct Cli {
    /// Worker threads for grid and Monte Carlo evaluation (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Free energy F(E) on a log grid, one curve per rate.
    FreeEnergy(RunArgs),
    /// MMSE, region and BP-predicted MSE over (J, delta, R).
    Mmse(RunArgs),
    /// One free-energy profile with its refined local maxima.
    Profile(RunArgs),
    /// Region labels and MMSE over a (delta, R) grid.
    PhaseDiagram(RunArgs),
    /// BP, low-noise and critical threshold rates per noise level.
    Thresholds(RunArgs),
    /// State-evolution trace from a starting MSE.
    Se(RunArgs),
    /// AMP trials on synthetic ensembles over a (delta, R) grid.
    AmpSim(RunArgs),
    /// Residual covariance Monte Carlo, MMV-1 against MMV-2.
    Lemma1Check(RunArgs),
    /// MMSE of complex CS with a real or complex matrix.
    ComplexMmse(RunArgs),
    /// Write a matplotlib script that renders a CSV produced by this tool.
    PlotScript(PlotArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Flat `key = value` config file; `#` starts a comment.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Set or override one key; repeatable and applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output CSV; the sidecar is written next to it with a `.json` extension.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// CSV written by another subcommand.
    pub csv: PathBuf,
    /// Expected schema; defaults to the one named in the CSV header.
    #[arg(long)]
    pub kind: Option<String>,
    /// Script path (default: the CSV path with a `.py` extension).
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    FreeEnergy,
    Mmse,
    Profile,
    PhaseDiagram,
    Thresholds,
    Se,
    AmpSim,
    Lemma1Check,
    ComplexMmse,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::FreeEnergy => "free-energy",
            Task::Mmse => "mmse",
            Task::Profile => "profile",
            Task::PhaseDiagram => "phase-diagram",
            Task::Thresholds => "thresholds",
            Task::Se => "se",
            Task::AmpSim => "amp-sim",
            Task::Lemma1Check => "lemma1-check",
            Task::ComplexMmse => "complex-mmse",
        }
    }

    /// Schema named in the CSV header.
    pub fn schema(self) -> &'static str {
        match self {
            Task::AmpSim => "amp-sweep",
            Task::Se => "trace",
            other => other.name(),
        }
    }

    pub fn keys(self) -> &'static [&'static str] {
        const NOISE: [&str; 2] = ["delta", "delta_db"];
        match self {
            Task::FreeEnergy => &["rho", "j", NOISE[0], NOISE[1], "rate", "e_min", "e_max", "n_grid"],
            Task::Mmse => &["rho", "j", NOISE[0], NOISE[1], "rate"],
            Task::Profile => &["rho", "j", NOISE[0], NOISE[1], "rate", "e_min", "e_max", "n_grid"],
            Task::PhaseDiagram => &["rho", "j", NOISE[0], NOISE[1], "rate"],
            Task::Thresholds => &["rho", "j", NOISE[0], NOISE[1], "r_lo", "r_hi", "kind"],
            Task::Se => &["rho", "j", NOISE[0], NOISE[1], "rate", "e0", "tol", "max_iter"],
            Task::AmpSim => &[
                "rho", "j", NOISE[0], NOISE[1], "rate", "n", "trials", "setting", "seed", "t_max", "epsilon", "damping",
                "v_init", "traces", "dump",
            ],
            Task::Lemma1Check => &["rho", "j", NOISE[0], NOISE[1], "rate", "n", "n_mc", "estimator", "seed"],
            Task::ComplexMmse => &["rho", NOISE[0], NOISE[1], "rate", "matrix"],
        }
    }
}

/// Failure of a CLI run, mapped onto the documented exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad or missing configuration; exit code 2.
    Config {
        key: String,
        module: &'static str,
        message: String,
    },
    /// A numerical routine failed; exit code 3.
    Numerical(MmvError),
    /// Filesystem or serialization trouble; exit code 1.
    Io(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 1,
        }
    }

    /// Machine-readable error record written to stderr.
    pub fn record(&self) -> Value {
        match self {
            CliError::Config { key, module, message } => json!({
                "error": "config",
                "key": key,
                "module": module,
                "message": message,
                "exit_code": self.exit_code(),
            }),
            CliError::Numerical(e) => json!({
                "error": "numerical",
                "message": e.to_string(),
                "exit_code": self.exit_code(),
            }),
            CliError::Io(e) => json!({
                "error": "io",
                "message": format!("{e:#}"),
                "exit_code": self.exit_code(),
            }),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Io(e)
    }
}

fn config_error(key: &str, module: &'static str, message: impl Into<String>) -> CliError {
    CliError::Config {
        key: key.to_string(),
        module,
        message: message.into(),
    }
}

/// Config key that carries a library parameter name.
fn key_for(param: &str) -> String {
    match param {
        "R" => "rate".into(),
        "N" => "n".into(),
        "E0" => "e0".into(),
        "J" => "j".into(),
        "n_trials" => "trials".into(),
        other => other.to_string(),
    }
}

/// Attributes a library error to `module`; precondition failures become config errors.
fn in_module<T>(module: &'static str, r: crate::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| match e {
        MmvError::InvalidParameter { name, reason } => CliError::Config {
            key: key_for(name),
            module,
            message: reason,
        },
        other => CliError::Numerical(other),
    })
}

/// Parses a flat `key = value` text. Keys are case-insensitive.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| config_error(line, "cli", format!("line {}: expected `key = value`", i + 1)))?;
        let key = k.trim().to_ascii_lowercase();
        if map.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(config_error(&key, "cli", format!("line {}: key given twice", i + 1)));
        }
    }
    Ok(map)
}

/// Applies `--set key=value` overrides on top of a file map.
pub fn apply_overrides(map: &mut BTreeMap<String, String>, sets: &[String]) -> Result<(), CliError> {
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| config_error(s, "cli", "--set expects KEY=VALUE"))?;
        map.insert(k.trim().to_ascii_lowercase(), v.trim().to_string());
    }
    Ok(())
}

/// Typed access to a validated key map that records every resolved value,
/// defaults included, for the sidecar.
pub struct Resolver {
    task: Task,
    map: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

impl Resolver {
    pub fn new(task: Task, map: BTreeMap<String, String>) -> Result<Self, CliError> {
        for key in map.keys() {
            if !task.keys().contains(&key.as_str()) {
                return Err(config_error(
                    key,
                    "cli",
                    format!("unknown key for {}; accepted keys: {}", task.name(), task.keys().join(", ")),
                ));
            }
        }
        Ok(Self {
            task,
            map,
            resolved: BTreeMap::new(),
        })
    }

    fn raw(&mut self, key: &str, default: Option<&str>) -> Result<String, CliError> {
        let value = match (self.map.get(key), default) {
            (Some(v), _) => v.clone(),
            (None, Some(d)) => d.to_string(),
            (None, None) => return Err(config_error(key, "cli", format!("{} requires `{key}`", self.task.name()))),
        };
        self.resolved.insert(key.to_string(), value.clone());
        Ok(value)
    }

    fn number(key: &str, text: &str) -> Result<f64, CliError> {
        let x: f64 = text
            .trim()
            .parse()
            .map_err(|_| config_error(key, "cli", format!("`{text}` is not a number")))?;
        if !x.is_finite() {
            return Err(config_error(key, "cli", "value must be finite"));
        }
        Ok(x)
    }

    /// A scalar, a comma list, or an evenly spaced `lo:hi:steps` triple.
    pub fn values(&mut self, key: &str, default: Option<&str>) -> Result<Vec<f64>, CliError> {
        let text = self.raw(key, default)?;
        let parts: Vec<&str> = text.split(':').collect();
        match parts.as_slice() {
            [lo, hi, steps] => {
                let steps: usize = steps
                    .trim()
                    .parse()
                    .map_err(|_| config_error(key, "cli", format!("`{steps}` is not a step count")))?;
                let (lo, hi) = (Self::number(key, lo)?, Self::number(key, hi)?);
                let name: &'static str = match key {
                    "rate" => "R",
                    "delta_db" => "delta_db",
                    _ => "range",
                };
                in_module("phase", linspace(name, lo, hi, steps)).map_err(|e| match e {
                    CliError::Config { module, message, .. } => CliError::Config {
                        key: key.to_string(),
                        module,
                        message,
                    },
                    other => other,
                })
            }
            [_] => text.split(',').map(|p| Self::number(key, p)).collect(),
            _ => Err(config_error(key, "cli", "expected a value, a comma list, or lo:hi:steps")),
        }
    }

    pub fn scalar(&mut self, key: &str, default: Option<&str>) -> Result<f64, CliError> {
        let v = self.values(key, default)?;
        if v.len() != 1 {
            return Err(config_error(key, "cli", format!("{} takes a single value for `{key}`", self.task.name())));
        }
        Ok(v[0])
    }

    pub fn count(&mut self, key: &str, default: Option<&str>) -> Result<usize, CliError> {
        let text = self.raw(key, default)?;
        text.trim()
            .parse()
            .map_err(|_| config_error(key, "cli", format!("`{text}` is not a non-negative integer")))
    }

    pub fn counts(&mut self, key: &str, default: Option<&str>) -> Result<Vec<usize>, CliError> {
        let text = self.raw(key, default)?;
        text.split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| config_error(key, "cli", format!("`{p}` is not a non-negative integer")))
            })
            .collect()
    }

    pub fn text(&mut self, key: &str, default: Option<&str>) -> Result<String, CliError> {
        self.raw(key, default)
    }

    /// A key with no default that is simply absent when unset.
    pub fn optional_text(&mut self, key: &str) -> Option<String> {
        let value = self.map.get(key)?.clone();
        self.resolved.insert(key.to_string(), value.clone());
        Some(value)
    }

    pub fn parsed<T: FromStr<Err = MmvError>>(&mut self, key: &str, default: Option<&str>, module: &'static str) -> Result<T, CliError> {
        let text = self.raw(key, default)?;
        in_module(module, text.parse()).map_err(|e| match e {
            CliError::Config { module, message, .. } => CliError::Config {
                key: key.to_string(),
                module,
                message,
            },
            other => other,
        })
    }

    pub fn flag(&mut self, key: &str, default: bool) -> Result<bool, CliError> {
        let text = self.raw(key, Some(if default { "true" } else { "false" }))?;
        match text.as_str() {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err(config_error(key, "cli", "expected true or false")),
        }
    }

    /// Noise levels from exactly one of `delta` (linear) or `delta_db`,
    /// returned as `(linear, dB)` pairs.
    pub fn noise(&mut self) -> Result<Vec<(f64, f64)>, CliError> {
        match (self.map.contains_key("delta"), self.map.contains_key("delta_db")) {
            (true, true) => Err(config_error("delta_db", "cli", "set exactly one of `delta` and `delta_db`")),
            (false, false) => Err(config_error("delta_db", "cli", "set one of `delta` (linear) or `delta_db`")),
            (true, false) => {
                let v = self.values("delta", None)?;
                for &d in &v {
                    if !(d > 0.0) {
                        return Err(config_error("delta", "model", format!("noise variance must be positive, got {d}")));
                    }
                }
                Ok(v.into_iter().map(|d| (d, to_db(d))).collect())
            }
            (false, true) => Ok(self.values("delta_db", None)?.into_iter().map(|d| (from_db(d), d)).collect()),
        }
    }

    pub fn single_noise(&mut self) -> Result<(f64, f64), CliError> {
        let v = self.noise()?;
        if v.len() != 1 {
            return Err(config_error("delta_db", "cli", format!("{} takes a single noise level", self.task.name())));
        }
        Ok(v[0])
    }

    pub fn prior(&mut self) -> Result<PriorParams, CliError> {
        let rho = self.scalar("rho", Some("0.1"))?;
        let j = self.count("j", Some("3"))?;
        in_module("model", PriorParams::new(rho, j))
    }

    pub fn resolved(&self) -> &BTreeMap<String, String> {
        &self.resolved
    }
}

/// Tabular result of one subcommand.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub schema: &'static str,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(schema: &'static str, header: &[&'static str]) -> Self {
        Self {
            schema,
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> anyhow::Result<()> {
        writeln!(w, "{SCHEMA_PREFIX}{} version={CSV_SCHEMA_VERSION}", self.schema)?;
        let mut writer = csv::Writer::from_writer(w);
        writer.write_record(&self.header)?;
        for row in &self.rows {
            writer.write_record(row)?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Everything a subcommand produces besides timing.
pub struct Outcome {
    pub table: Table,
    pub seed: Option<u64>,
    pub summary: Value,
    /// Extra JSON-lines file (e.g. AMP traces), written next to the CSV.
    pub jsonl: Option<Vec<Value>>,
    /// Ensembles to regenerate from their seeds and archive after the run.
    pub dump: Option<EnsembleDump>,
}

/// Directory and trial list for `amp-sim dump=DIR`.
pub struct EnsembleDump {
    pub dir: PathBuf,
    pub setting: Setting,
    pub prior: PriorParams,
    /// `(file name, delta, rate, n, seed)` per trial.
    pub trials: Vec<(String, f64, f64, usize, u64)>,
}

fn num(x: f64) -> String {
    format!("{x}")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn flag01(b: bool) -> String {
    if b { "1".into() } else { "0".into() }
}

fn problem(prior: PriorParams, delta: f64, rate: f64) -> Result<ProblemParams, CliError> {
    in_module("model", ProblemParams::new(prior, delta, rate))
}

fn check_rates(rates: &[f64]) -> Result<(), CliError> {
    for &r in rates {
        if !(r > 0.0) {
            return Err(config_error("rate", "model", format!("measurement rate must be positive, got {r}")));
        }
    }
    Ok(())
}

fn window(r: &mut Resolver, p: &ProblemParams) -> Result<(f64, f64, usize), CliError> {
    let (lo, hi) = mmse_window(p);
    let e_min = r.scalar("e_min", Some(&num(lo)))?;
    let e_max = r.scalar("e_max", Some(&num(hi)))?;
    let n_grid = r.count("n_grid", Some(&DEFAULT_GRID.to_string()))?;
    if !(e_min > 0.0 && e_min < e_max) {
        return Err(config_error("e_min", "replica", format!("need 0 < e_min < e_max, got [{e_min}, {e_max}]")));
    }
    if n_grid < 64 {
        return Err(config_error("n_grid", "replica", "the profile grid needs at least 64 points"));
    }
    Ok((e_min, e_max, n_grid))
}

fn run_free_energy(r: &mut Resolver) -> Result<Outcome, CliError> {
    let prior = r.prior()?;
    let (delta, _) = r.single_noise()?;
    let rates = r.values("rate", None)?;
    check_rates(&rates)?;
    let first = problem(prior, delta, rates[0])?;
    let (e_min, e_max, n_grid) = window(r, &first)?;
    let grid = crate::replica::log_grid(e_min, e_max, n_grid);
    let mut table = Table::new(Task::FreeEnergy.schema(), &["rate", "e", "e_db", "f"]);
    for &rate in &rates {
        let p = problem(prior, delta, rate)?;
        let f: Vec<f64> = in_module("replica", grid.par_iter().map(|&e| free_energy(&p, e)).collect())?;
        for (e, fv) in grid.iter().zip(f) {
            table.rows.push(vec![num(rate), num(*e), num(to_db(*e)), num(fv)]);
        }
    }
    Ok(Outcome {
        table,
        seed: None,
        summary: json!({ "curves": rates.len(), "points_per_curve": n_grid }),
        jsonl: None,
        dump: None,
    })
}

fn run_mmse(r: &mut Resolver) -> Result<Outcome, CliError> {
    let rho = r.scalar("rho", Some("0.1"))?;
    let js = r.counts("j", Some("3"))?;
    let noise = r.noise()?;
    let rates = r.values("rate", None)?;
    check_rates(&rates)?;
    let mut jobs = Vec::new();
    for &j in &js {
        let prior = in_module("model", PriorParams::new(rho, j))?;
        for &(delta, delta_db) in &noise {
            for &rate in &rates {
                jobs.push((j, delta_db, problem(prior, delta, rate)?));
            }
        }
    }
    let cells: Vec<_> = jobs
        .par_iter()
        .map(|(j, d, p)| (*j, evaluate_cell(&p.prior(), *d, p.rate())))
        .collect();
    let mut table = Table::new(
        Task::Mmse.schema(),
        &["j", "delta_db", "rate", "mmse", "mmse_db", "region", "bp_mse", "note"],
    );
    let mut failures = 0;
    for (j, c) in cells {
        failures += usize::from(c.note.is_some() && c.label.is_none());
        table.rows.push(vec![
            j.to_string(),
            num(c.delta_db),
            num(c.rate),
            num(c.mmse),
            num(c.mmse_db),
            c.label.map(|l| l.region.number().to_string()).unwrap_or_default(),
            num(c.bp_mse),
            c.note.unwrap_or_default(),
        ]);
    }
    Ok(Outcome {
        table,
        seed: None,
        summary: json!({ "cells": jobs.len(), "failed_cells": failures }),
        jsonl: None,
        dump: None,
    })
}

fn run_profile(r: &mut Resolver) -> Result<Outcome, CliError> {
    let prior = r.prior()?;
    let (delta, _) = r.single_noise()?;
    let rate = r.scalar("rate", None)?;
    let p = problem(prior, delta, rate)?;
    let (e_min, e_max, n_grid) = window(r, &p)?;
    let prof = in_module("replica", profile(&p, e_min, e_max, n_grid))?;
    let label = in_module("phase", classify_params(&p)).ok().map(|(_, l)| l);
    let mut table = Table::new(Task::Profile.schema(), &["kind", "e", "e_db", "f"]);
    for (e, f) in prof.e_grid.iter().zip(&prof.f_values) {
        table.rows.push(vec!["grid".into(), num(*e), num(to_db(*e)), num(*f)]);
    }
    for (i, m) in prof.local_maxima.iter().enumerate() {
        let kind = if i == prof.global_max_index { "global_max" } else { "local_max" };
        table.rows.push(vec![kind.into(), num(m.e), num(to_db(m.e)), num(m.f)]);
    }
    Ok(Outcome {
        table,
        seed: None,
        summary: json!({
            "maxima": prof.local_maxima,
            "global_max_index": prof.global_max_index,
            "degenerate": prof.degenerate,
            "region": label.map(|l| l.region.number()),
        }),
        jsonl: None,
        dump: None,
    })
}

fn run_phase_diagram(r: &mut Resolver) -> Result<Outcome, CliError> {
    let prior = r.prior()?;
    let noise = r.noise()?;
    let rates = r.values("rate", None)?;
    check_rates(&rates)?;
    let jobs: Vec<(f64, f64)> = noise
        .iter()
        .flat_map(|&(_, d)| rates.iter().map(move |&rate| (d, rate)))
        .collect();
    let cells: Vec<_> = jobs.par_iter().map(|&(d, rate)| evaluate_cell(&prior, d, rate)).collect();
    let mut table = Table::new(
        Task::PhaseDiagram.schema(),
        &[
            "delta_db", "rate", "region", "mmse", "mmse_db", "ln_mmse", "bp_mse", "bp_mse_db", "degenerate", "anomalous", "note",
        ],
    );
    let mut notes = 0;
    for c in cells {
        notes += usize::from(c.note.is_some());
        table.rows.push(vec![
            num(c.delta_db),
            num(c.rate),
            c.label.map(|l| l.region.number().to_string()).unwrap_or_default(),
            num(c.mmse),
            num(c.mmse_db),
            num(c.ln_mmse),
            num(c.bp_mse),
            num(to_db(c.bp_mse)),
            c.label.map(|l| flag01(l.degenerate)).unwrap_or_default(),
            c.label.map(|l| flag01(l.anomalous)).unwrap_or_default(),
            c.note.unwrap_or_default(),
        ]);
    }
    Ok(Outcome {
        table,
        seed: None,
        summary: json!({ "cells": jobs.len(), "cells_with_notes": notes }),
        jsonl: None,
        dump: None,
    })
}

fn run_thresholds(r: &mut Resolver) -> Result<Outcome, CliError> {
    let prior = r.prior()?;
    let noise = r.noise()?;
    let r_lo = r.scalar("r_lo", Some("0.05"))?;
    let r_hi = r.scalar("r_hi", Some("0.6"))?;
    if !(r_lo > 0.0 && r_lo < r_hi) {
        return Err(config_error("r_lo", "phase", format!("need 0 < r_lo < r_hi, got [{r_lo}, {r_hi}]")));
    }
    let kinds_text = r.text("kind", Some("bp,low_noise,critical"))?;
    let kinds: Vec<ThresholdKind> = kinds_text
        .split(',')
        .map(|k| k.trim().parse().map_err(|e: MmvError| config_error("kind", "phase", e.to_string())))
        .collect::<Result<_, _>>()?;
    let jobs: Vec<(ThresholdKind, f64, f64)> = noise
        .iter()
        .flat_map(|&(d, ddb)| kinds.iter().map(move |&k| (k, d, ddb)))
        .collect();
    let results: Vec<_> = jobs
        .par_iter()
        .map(|&(k, d, _)| threshold(k, &prior, d, r_lo, r_hi))
        .collect();
    let mut table = Table::new(Task::Thresholds.schema(), &["delta_db", "kind", "rate", "found", "note"]);
    for (&(k, _, ddb), res) in jobs.iter().zip(results) {
        let (rate, found, note) = match res {
            Ok(Some(x)) => (Some(x), true, String::new()),
            Ok(None) => (None, false, "no transition in the searched rate range".into()),
            Err(e) => (None, false, e.to_string()),
        };
        table.rows.push(vec![num(ddb), k.name().into(), opt(rate), flag01(found), note]);
    }
    Ok(Outcome {
        table,
        seed: None,
        summary: json!({ "r_lo": r_lo, "r_hi": r_hi }),
        jsonl: None,
        dump: None,
    })
}

fn run_se(r: &mut Resolver) -> Result<Outcome, CliError> {
    let prior = r.prior()?;
    let (delta, _) = r.single_noise()?;
    let rate = r.scalar("rate", None)?;
    let p = problem(prior, delta, rate)?;
    let e0 = r.scalar("e0", Some(&num(prior.rho())))?;
    let tol = r.scalar("tol", Some(&num(DEFAULT_TOL)))?;
    let max_iter = r.count("max_iter", Some(&DEFAULT_MAX_ITER.to_string()))?;
    let trace = in_module("se", se_fixed_point(&p, e0, tol, max_iter))?;
    let mut table = Table::new(Task::Se.schema(), &["iteration", "mse", "mse_db"]);
    for (t, e) in trace.e_sequence.iter().enumerate() {
        table.rows.push(vec![t.to_string(), num(*e), num(to_db(*e))]);
    }
    Ok(Outcome {
        table,
        seed: None,
        summary: json!({
            "converged": trace.converged,
            "fixed_point": trace.fixed_point,
            "fixed_point_db": to_db(trace.fixed_point),
            "last_two": trace.last_two(),
        }),
        jsonl: None,
        dump: None,
    })
}

fn run_amp(r: &mut Resolver) -> Result<Outcome, CliError> {
    let prior = r.prior()?;
    let noise = r.noise()?;
    let rates = r.values("rate", None)?;
    check_rates(&rates)?;
    let n = r.count("n", Some("5000"))?;
    let n_trials = r.count("trials", Some("50"))?;
    let setting: Setting = r.parsed("setting", Some("mmv1"), "sim")?;
    let seed = r.count("seed", Some("0"))? as u64;
    let config = AmpConfig {
        t_max: r.count("t_max", Some("200"))?,
        epsilon: r.scalar("epsilon", Some("1e-8"))?,
        damping: r.scalar("damping", Some("0"))?,
        v_init: r.parsed::<VarianceInit>("v_init", Some("rho-delta"), "amp")?,
    };
    let keep_traces = r.flag("traces", false)?;
    let dump_dir = r.optional_text("dump").map(PathBuf::from);
    in_module("amp", config.validate())?;
    if setting == Setting::ComplexComplex {
        return Err(config_error("setting", "amp", "AMP runs on mmv1, mmv2 or complex-real ensembles"));
    }
    if n_trials < 1 {
        return Err(config_error("trials", "amp", "need at least one trial per cell"));
    }
    if n < crate::sim::MIN_LENGTH {
        return Err(config_error("n", "sim", format!("signal length must be at least {}", crate::sim::MIN_LENGTH)));
    }
    if setting.is_complex() && prior.vectors() != 2 {
        return Err(config_error("j", "sim", "complex settings need J = 2"));
    }
    for &(d, _) in &noise {
        for &rate in &rates {
            problem(prior, d, rate)?;
            if crate::sim::measurement_count(rate, n) == 0 {
                return Err(config_error("rate", "sim", format!("rate {rate} gives no measurements at N = {n}")));
            }
        }
    }
    let sweep = AmpSweep {
        setting,
        prior,
        delta_db: noise.iter().map(|&(_, d)| d).collect(),
        rates,
        n,
        n_trials,
        config,
        seed,
        keep_traces,
    };
    let cells = in_module("amp", amp_sweep(&sweep))?;
    let mut table = Table::new(
        Task::AmpSim.schema(),
        &["delta_db", "rate", "setting", "trial", "seed", "iterations", "mse", "mse_db", "se_mse", "ratio_ln"],
    );
    let mut traces = Vec::new();
    let mut dump_trials = Vec::new();
    let mut summary = Vec::new();
    for cell in &cells {
        for t in &cell.trials {
            table.rows.push(vec![
                num(t.delta_db),
                num(t.rate),
                t.setting.name().into(),
                t.trial.to_string(),
                t.seed.to_string(),
                t.iterations.to_string(),
                num(t.mse),
                num(to_db(t.mse)),
                num(t.se_mse),
                num(t.ratio_ln()),
            ]);
            if keep_traces {
                traces.push(serde_json::to_value(t).context("serializing AMP trace")?);
            }
            if dump_dir.is_some() {
                let name = format!("cell{}_trial{}.mmve", summary.len(), t.trial);
                dump_trials.push((name, from_db(t.delta_db), t.rate, n, t.seed));
            }
        }
        summary.push(json!({
            "delta_db": cell.delta_db,
            "rate": cell.rate,
            "median_mse": cell.median_mse,
            "q1_mse": cell.spread.map(|s| s.q1),
            "q3_mse": cell.spread.map(|s| s.q3),
            "se_mse": cell.se_mse,
            "ratio_ln": cell.ratio_ln(),
            "diverged": cell.diverged,
        }));
    }
    Ok(Outcome {
        table,
        seed: Some(seed),
        summary: json!({ "cells": summary }),
        jsonl: keep_traces.then_some(traces),
        dump: dump_dir.map(|dir| EnsembleDump {
            dir,
            setting,
            prior,
            trials: dump_trials,
        }),
    })
}

fn run_lemma1(r: &mut Resolver) -> Result<Outcome, CliError> {
    let prior = r.prior()?;
    let (delta, _) = r.single_noise()?;
    let rate = r.scalar("rate", Some("0.2"))?;
    problem(prior, delta, rate)?;
    let n = r.count("n", Some("2000"))?;
    let n_mc = r.count("n_mc", Some("1000"))?;
    let spec: EstimatorSpec = r.parsed("estimator", Some("independent"), "sim")?;
    let seed = r.count("seed", Some("0"))? as u64;
    if n_mc < crate::sim::MIN_MONTE_CARLO {
        return Err(config_error("n_mc", "sim", format!("need at least {} Monte Carlo ensembles", crate::sim::MIN_MONTE_CARLO)));
    }
    if n < crate::sim::MIN_LENGTH {
        return Err(config_error("n", "sim", format!("signal length must be at least {}", crate::sim::MIN_LENGTH)));
    }
    let one = in_module("sim", empirical_v_covariance(Setting::Mmv1, &prior, delta, rate, n, spec, n_mc, seed))?;
    let two = in_module("sim", empirical_v_covariance(Setting::Mmv2, &prior, delta, rate, n, spec, n_mc, seed))?;
    let mut table = Table::new(
        Task::Lemma1Check.schema(),
        &["role", "mmv1", "mmv1_se", "mmv2", "mmv2_se", "z_score"],
    );
    let mut max_z: f64 = 0.0;
    for ((role, a), (_, b)) in one.roles().into_iter().zip(two.roles()) {
        if let (Some(a), Some(b)) = (a, b) {
            let z = a.z_score(&b);
            max_z = max_z.max(z);
            table.rows.push(vec![role.into(), num(a.mean), num(a.std_error), num(b.mean), num(b.std_error), num(z)]);
        }
    }
    Ok(Outcome {
        table,
        seed: Some(seed),
        summary: json!({ "estimator": spec.name(), "max_z_score": max_z }),
        jsonl: None,
        dump: None,
    })
}

fn run_complex_mmse(r: &mut Resolver) -> Result<Outcome, CliError> {
    let rho = r.scalar("rho", Some("0.1"))?;
    let prior = in_module("model", PriorParams::new(rho, 2))?;
    let noise = r.noise()?;
    let rates = r.values("rate", None)?;
    check_rates(&rates)?;
    let matrix = r.text("matrix", Some("real"))?;
    if matrix != "real" && matrix != "complex" {
        return Err(config_error("matrix", "sim", "expected real or complex"));
    }
    let mut jobs = Vec::new();
    for &(d, ddb) in &noise {
        for &rate in &rates {
            jobs.push((ddb, problem(prior, d, rate)?));
        }
    }
    // Both matrix types reduce to the real two-vector problem.
    let values: Vec<f64> = in_module("replica", jobs.par_iter().map(|(_, p)| mmse(p)).collect())?;
    let mut table = Table::new(Task::ComplexMmse.schema(), &["matrix", "delta_db", "rate", "mmse", "mmse_db"]);
    for ((ddb, p), m) in jobs.iter().zip(values) {
        table.rows.push(vec![matrix.clone(), num(*ddb), num(p.rate()), num(m), num(to_db(m))]);
    }
    Ok(Outcome {
        table,
        seed: None,
        summary: json!({ "equivalent_problem": "real MMV with J = 2" }),
        jsonl: None,
        dump: None,
    })
}

/// Resolves and runs one subcommand without touching the filesystem.
pub fn execute(task: Task, map: BTreeMap<String, String>) -> Result<(Outcome, BTreeMap<String, String>), CliError> {
    let mut r = Resolver::new(task, map)?;
    let outcome = match task {
        Task::FreeEnergy => run_free_energy(&mut r),
        Task::Mmse => run_mmse(&mut r),
        Task::Profile => run_profile(&mut r),
        Task::PhaseDiagram => run_phase_diagram(&mut r),
        Task::Thresholds => run_thresholds(&mut r),
        Task::Se => run_se(&mut r),
        Task::AmpSim => run_amp(&mut r),
        Task::Lemma1Check => run_lemma1(&mut r),
        Task::ComplexMmse => run_complex_mmse(&mut r),
    }?;
    Ok((outcome, r.resolved().clone()))
}

fn tolerances() -> Value {
    let q = QuadratureOptions::default();
    json!({
        "quadrature_rel_tol": q.rel_tol,
        "quadrature_abs_tol": q.abs_tol,
        "maximum_refine_rel_tol": REFINE_REL_TOL,
        "maximum_tie_tol": TIE_TOL,
        "threshold_bisection_tol": THRESHOLD_TOL,
        "se_default_tol": DEFAULT_TOL,
    })
}

pub fn sidecar_path(out: &Path) -> PathBuf {
    out.with_extension("json")
}

pub fn traces_path(out: &Path) -> PathBuf {
    out.with_extension("traces.jsonl")
}

/// Runs a subcommand end to end and writes its files.
pub fn run(task: Task, args: &RunArgs) -> Result<PathBuf, CliError> {
    let started = SystemTime::now();
    let clock = Instant::now();
    let mut map = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            parse_config_text(&text)?
        }
        None => BTreeMap::new(),
    };
    apply_overrides(&mut map, &args.set)?;
    let (outcome, resolved) = execute(task, map)?;
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from(format!("{}.csv", task.name())));
    let file = fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?;
    outcome.table.write_csv(std::io::BufWriter::new(file))?;
    if let Some(records) = &outcome.jsonl {
        let path = traces_path(&out);
        let mut w = std::io::BufWriter::new(fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        for rec in records {
            serde_json::to_writer(&mut w, rec).context("writing traces")?;
            writeln!(w).context("writing traces")?;
        }
        w.flush().context("writing traces")?;
    }
    if let Some(dump) = &outcome.dump {
        write_dumps(dump)?;
    }
    let sidecar = json!({
        "tool": "mmv",
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": task.name(),
        "schema": outcome.table.schema,
        "schema_version": CSV_SCHEMA_VERSION,
        "config": resolved,
        "seed": outcome.seed,
        "started_unix": started.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0),
        "wall_time_s": clock.elapsed().as_secs_f64(),
        "threads": rayon::current_num_threads(),
        "tolerances": tolerances(),
        "db_convention": DB_NOTE,
        "summary": outcome.summary,
    });
    let side = sidecar_path(&out);
    fs::write(&side, serde_json::to_string_pretty(&sidecar).context("encoding sidecar")? + "\n")
        .with_context(|| format!("writing {}", side.display()))?;
    Ok(out)
}

/// Regenerates each trial's ensemble from its seed and writes the binary dump.
fn write_dumps(dump: &EnsembleDump) -> Result<(), CliError> {
    fs::create_dir_all(&dump.dir).with_context(|| format!("creating {}", dump.dir.display()))?;
    for (name, delta, rate, n, seed) in &dump.trials {
        let e = in_module("sim", crate::sim::generate(dump.setting, &dump.prior, *delta, *rate, *n, *seed))?;
        let path = dump.dir.join(name);
        let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = std::io::BufWriter::new(file);
        e.write_to(&mut w).and_then(|_| w.flush()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

/// Reads the schema name from the first line of a CSV written by this tool.
pub fn read_schema(csv: &Path) -> Result<String, CliError> {
    let file = fs::File::open(csv).with_context(|| format!("opening {}", csv.display()))?;
    let mut first = String::new();
    BufReader::new(file)
        .read_line(&mut first)
        .with_context(|| format!("reading {}", csv.display()))?;
    let rest = first
        .trim()
        .strip_prefix(SCHEMA_PREFIX)
        .ok_or_else(|| config_error("csv", "cli", "not a CSV written by mmv (missing schema line)"))?;
    Ok(rest.split_whitespace().next().unwrap_or("").to_string())
}

/// Python/matplotlib script rendering a CSV of the given schema.
pub fn plot_script(schema: &str, csv_name: &str, png_name: &str) -> Result<String, CliError> {
    let body = match schema {
        "phase-diagram" => PHASE_PLOT,
        "profile" => PROFILE_PLOT,
        "free-energy" => FREE_ENERGY_PLOT,
        "amp-sweep" => AMP_PLOT,
        "trace" => TRACE_PLOT,
        "thresholds" => THRESHOLD_PLOT,
        other => {
            return Err(config_error(
                "kind",
                "cli",
                format!("no plot for schema `{other}`; supported: phase-diagram, profile, free-energy, amp-sweep, trace, thresholds"),
            ))
        }
    };
    Ok(format!(
        "{PLOT_HEADER}\nCSV = os.path.join(os.path.dirname(os.path.abspath(__file__)), {csv_name:?})\nPNG = os.path.join(os.path.dirname(os.path.abspath(__file__)), {png_name:?})\n\n{body}"
    ))
}

pub fn emit_plot_script(args: &PlotArgs) -> Result<PathBuf, CliError> {
    let schema = read_schema(&args.csv)?;
    if let Some(kind) = &args.kind {
        if kind != &schema {
            return Err(config_error("kind", "cli", format!("CSV holds schema `{schema}`, not `{kind}`")));
        }
    }
    let out = args.out.clone().unwrap_or_else(|| args.csv.with_extension("py"));
    let name = |p: &Path| p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let script = plot_script(&schema, &name(&args.csv), &name(&args.csv.with_extension("png")))?;
    fs::write(&out, script).with_context(|| format!("writing {}", out.display()))?;
    Ok(out)
}

const PLOT_HEADER: &str = r##"#!/usr/bin/env python3
"""Generated by `mmv plot-script`. Needs numpy and matplotlib."""
import csv
import math
import os
from collections import defaultdict

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def load(path):
    with open(path, newline="") as fh:
        lines = [l for l in fh if not l.startswith("#")]
    return list(csv.DictReader(lines))


def fnum(s):
    return float(s) if s not in ("", "NaN") else math.nan
"##;

const PHASE_PLOT: &str = r##"rows = load(CSV)
deltas = sorted({fnum(r["delta_db"]) for r in rows})
rates = sorted({fnum(r["rate"]) for r in rows})
grid = np.full((len(rates), len(deltas)), np.nan)
region = np.full((len(rates), len(deltas)), np.nan)
for r in rows:
    i, j = rates.index(fnum(r["rate"])), deltas.index(fnum(r["delta_db"]))
    grid[i, j] = fnum(r["mmse_db"])
    region[i, j] = fnum(r["region"]) if r["region"] else np.nan
fig, ax = plt.subplots(figsize=(6, 4.5))
mesh = ax.pcolormesh(deltas, rates, grid, shading="nearest", cmap="viridis")
fig.colorbar(mesh, ax=ax, label="MMSE [dB]")
if np.isfinite(region).any():
    ax.contour(deltas, rates, region, levels=[1.5, 2.5, 3.5], colors="w", linewidths=0.8)
ax.set_xlabel("noise variance $\\Delta$ [dB]")
ax.set_ylabel("measurement rate $R$")
ax.invert_xaxis()
fig.tight_layout()
fig.savefig(PNG, dpi=150)
"##;

const PROFILE_PLOT: &str = r##"rows = load(CSV)
grid = [(fnum(r["e"]), fnum(r["f"])) for r in rows if r["kind"] == "grid"]
fig, ax = plt.subplots(figsize=(6, 4))
ax.plot([e for e, _ in grid], [f for _, f in grid], color="k", lw=1)
for kind, style in (("local_max", "o"), ("global_max", "*")):
    pts = [(fnum(r["e"]), fnum(r["f"])) for r in rows if r["kind"] == kind]
    if pts:
        ax.plot([e for e, _ in pts], [f for _, f in pts], style, ms=9, label=kind.replace("_", " "))
ax.set_xscale("log")
ax.set_xlabel("$E$")
ax.set_ylabel("$F(E)$")
ax.legend()
fig.tight_layout()
fig.savefig(PNG, dpi=150)
"##;

const FREE_ENERGY_PLOT: &str = r##"rows = load(CSV)
curves = defaultdict(list)
for r in rows:
    curves[fnum(r["rate"])].append((fnum(r["e"]), fnum(r["f"])))
fig, ax = plt.subplots(figsize=(6, 4))
for rate, pts in sorted(curves.items()):
    ax.plot([e for e, _ in pts], [f for _, f in pts], label=f"R = {rate:g}")
ax.set_xscale("log")
ax.set_xlabel("$E$")
ax.set_ylabel("$F(E)$")
ax.legend()
fig.tight_layout()
fig.savefig(PNG, dpi=150)
"##;

const AMP_PLOT: &str = r##"rows = load(CSV)
cells = defaultdict(list)
for r in rows:
    cells[(fnum(r["delta_db"]), fnum(r["rate"]))].append(fnum(r["ratio_ln"]))
deltas = sorted({d for d, _ in cells})
rates = sorted({r for _, r in cells})
grid = np.full((len(rates), len(deltas)), np.nan)
for (d, r), vals in cells.items():
    vals = [v for v in vals if math.isfinite(v)]
    if vals:
        # ln of the median MSE ratio equals the median of the ln ratios.
        grid[rates.index(r), deltas.index(d)] = float(np.median(vals))
fig, ax = plt.subplots(figsize=(6, 4.5))
mesh = ax.pcolormesh(deltas, rates, grid, shading="nearest", cmap="gray")
fig.colorbar(mesh, ax=ax, label="ln(MSE_AMP / MSE_BP)")
ax.set_xlabel("noise variance $\\Delta$ [dB]")
ax.set_ylabel("measurement rate $R$")
ax.invert_xaxis()
fig.tight_layout()
fig.savefig(PNG, dpi=150)
"##;

const TRACE_PLOT: &str = r##"rows = load(CSV)
fig, ax = plt.subplots(figsize=(6, 4))
ax.plot([int(r["iteration"]) for r in rows], [fnum(r["mse_db"]) for r in rows], marker=".")
ax.set_xlabel("iteration")
ax.set_ylabel("MSE [dB]")
fig.tight_layout()
fig.savefig(PNG, dpi=150)
"##;

const THRESHOLD_PLOT: &str = r##"rows = load(CSV)
curves = defaultdict(list)
for r in rows:
    if r["found"] == "1":
        curves[r["kind"]].append((fnum(r["delta_db"]), fnum(r["rate"])))
fig, ax = plt.subplots(figsize=(6, 4))
for kind, pts in sorted(curves.items()):
    pts.sort()
    ax.plot([d for d, _ in pts], [r for _, r in pts], marker="o", label=kind)
ax.set_xlabel("noise variance $\\Delta$ [dB]")
ax.set_ylabel("threshold rate $R$")
ax.invert_xaxis()
ax.legend()
fig.tight_layout()
fig.savefig(PNG, dpi=150)
"##;

fn report(err: &CliError) -> ExitCode {
    eprintln!("{}", err.record());
    ExitCode::from(err.exit_code())
}

/// Entry point of the `mmv` binary.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return report(&config_error("jobs", "cli", "--jobs must be at least 1"));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            return report(&CliError::Io(anyhow::anyhow!("thread pool: {e}")));
        }
    }
    let result = match &cli.command {
        Command::FreeEnergy(a) => run(Task::FreeEnergy, a),
        Command::Mmse(a) => run(Task::Mmse, a),
        Command::Profile(a) => run(Task::Profile, a),
        Command::PhaseDiagram(a) => run(Task::PhaseDiagram, a),
        Command::Thresholds(a) => run(Task::Thresholds, a),
        Command::Se(a) => run(Task::Se, a),
        Command::AmpSim(a) => run(Task::AmpSim, a),
        Command::Lemma1Check(a) => run(Task::Lemma1Check, a),
        Command::ComplexMmse(a) => run(Task::ComplexMmse, a),
        Command::PlotScript(a) => emit_plot_script(a),
    };
    match result {
        Ok(path) => {
            println!("{}", path.display());
            ExitCode::SUCCESS
        }
        Err(e) => report(&e),
    }
}
