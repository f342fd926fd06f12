//! Batch front end: single runs and Monte-Carlo sweeps written as CSV.
//!
//! A run config is TOML with two optional tables, `[scenario]`
//! ([`ScenarioConfig`]) and `[engine]` ([`EngineConfig`]); omitted keys take
//! their defaults and unknown keys are rejected.
//!
//! Per-iteration CSV (`run`), one row per logged iterate:
//!
//! | column | meaning |
//! |---|---|
//! | `iter` | 0 is the initial point |
//! | `sum_rate_nats`, `sum_rate_bits` | weighted sum rate |
//! | `sinr_radar_db` | sensing SINR |
//! | `power_residual`, `box_residual`, `distance_residual` | constraint violations, 0 when met |
//! | `ms` | wall time since start; blank unless `--timing`, so files stay byte-stable |
//! | `kept` | `;`-separated reasons of blocks that kept their previous value |
//!
//! A sweep writes, under the output directory:
//! - `cell_<value>_<scheme>.csv`: one row with the mean and standard error of
//!   the final sum rate over the feasible trials of that cell;
//! - `trials.csv`: every trial of every cell, so each mean is traceable;
//! - `manifest.toml`: the sweep spec as parsed, with defaults filled in, and
//!   the seed list.
//!
//! Trial `t` of every cell uses seed `first_seed + t`, so cells share their
//! random geometry and a cell can be replayed with `run`.

use crate::channel::{generate_scenario, ScenarioConfig};
use crate::engine::{run, EngineConfig, IterateLog, Scheme};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input files or arguments; exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Failure while computing or writing; exit code 1.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub engine: EngineConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Usage(e.to_string()))?;
        cfg.engine.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

/// Scenario parameter varied by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    TxPowerDbm,
    NT,
    NR,
    MT,
    MR,
    #[serde(rename = "paths_L")]
    PathsL,
    KD,
    KU,
    GammaRDb,
}

impl Axis {
    pub fn name(&self) -> &'static str {
        match self {
            Axis::TxPowerDbm => "tx_power_dbm",
            Axis::NT => "n_t",
            Axis::NR => "n_r",
            Axis::MT => "m_t",
            Axis::MR => "m_r",
            Axis::PathsL => "paths_L",
            Axis::KD => "k_d",
            Axis::KU => "k_u",
            Axis::GammaRDb => "gamma_r_db",
        }
    }

    /// The base config with this axis set to `value`; counts must be positive integers.
    pub fn apply(&self, base: &ScenarioConfig, value: f64) -> Result<ScenarioConfig, CliError> {
        let mut cfg = base.clone();
        let count = || -> Result<usize, CliError> {
            if value >= 1.0 && value.fract() == 0.0 && value <= u32::MAX as f64 {
                Ok(value as usize)
            } else {
                Err(CliError::Usage(format!("{} needs a positive integer, got {value}", self.name())))
            }
        };
        match self {
            Axis::TxPowerDbm => cfg.tx_power_dbm = value,
            Axis::GammaRDb => cfg.gamma_r_db = value,
            Axis::NT => cfg.n_t = count()?,
            Axis::NR => cfg.n_r = count()?,
            Axis::MT => cfg.m_t = count()?,
            Axis::MR => cfg.m_r = count()?,
            Axis::PathsL => cfg.paths = count()?,
            Axis::KD => cfg.k_d = count()?,
            Axis::KU => cfg.k_u = count()?,
        }
        Ok(cfg)
    }
}

fn default_schemes() -> Vec<Scheme> {
    Scheme::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: Axis,
    pub values: Vec<f64>,
    pub trials: usize,
    #[serde(default = "default_schemes")]
    pub schemes: Vec<Scheme>,
    #[serde(default)]
    pub first_seed: u64,
    /// Everything not varied by the axis; the engine scheme is overridden per cell.
    #[serde(default)]
    pub base: RunConfig,
}

impl SweepSpec {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let spec: SweepSpec = toml::from_str(text).map_err(|e| CliError::Usage(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.values.is_empty() {
            return Err(CliError::Usage("sweep needs at least one value".into()));
        }
        if self.trials == 0 {
            return Err(CliError::Usage("sweep needs at least one trial".into()));
        }
        if self.schemes.is_empty() {
            return Err(CliError::Usage("sweep needs at least one scheme".into()));
        }
        self.base.engine.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        for v in &self.values {
            self.axis.apply(&self.base.scenario, *v)?;
        }
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.trials as u64).map(|t| self.first_seed + t).collect()
    }
}

/// Outcome of one seed: the final iterate, or why no feasible start existed.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub seed: u64,
    pub outcome: Result<TrialSummary, String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialSummary {
    pub iterations: usize,
    pub converged: bool,
    pub sum_rate: f64,
    pub sinr_radar: f64,
}

impl TrialSummary {
    pub fn of(log: &IterateLog) -> Self {
        let last = log.records.last().expect("a log holds the initial record");
        Self { iterations: last.iter, converged: log.converged, sum_rate: last.sum_rate, sinr_radar: last.sinr_radar }
    }
}

/// One seed end to end: scenario draw, initialization, sweeps.
pub fn run_trial(scenario: &ScenarioConfig, engine: &EngineConfig, seed: u64) -> Result<IterateLog, String> {
    let s = generate_scenario(scenario, seed).map_err(|e| e.to_string())?;
    let log = run(&s, engine, seed).map_err(|e| e.to_string())?;
    // A numerical breakdown must surface in trials.csv, not poison a cell mean.
    if !log.final_sum_rate().is_finite() {
        return Err(format!("non-finite sum rate after {} sweeps", log.records.len() - 1));
    }
    Ok(log)
}

/// Mean and standard error of the mean; the error is 0 for a single sample.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// Writes the per-iteration table documented at the module level.
pub fn write_iterate_csv<W: Write>(log: &IterateLog, out: W, timing: bool) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "iter",
        "sum_rate_nats",
        "sum_rate_bits",
        "sinr_radar_db",
        "power_residual",
        "box_residual",
        "distance_residual",
        "ms",
        "kept",
    ])?;
    for r in &log.records {
        let ms = if timing { format!("{:.3}", r.elapsed.as_secs_f64() * 1e3) } else { String::new() };
        w.write_record([
            r.iter.to_string(),
            r.sum_rate.to_string(),
            (r.sum_rate / std::f64::consts::LN_2).to_string(),
            to_db(r.sinr_radar).to_string(),
            r.power_residual.to_string(),
            r.box_residual.to_string(),
            r.distance_residual.to_string(),
            ms,
            r.kept.join(";"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `run`: one seed of one config to a per-iteration CSV.
pub fn run_single(config: &Path, seed: u64, out: &Path, timing: bool) -> Result<IterateLog, CliError> {
    let cfg = RunConfig::load(config)?;
    let log = run_trial(&cfg.scenario, &cfg.engine, seed).map_err(CliError::Runtime)?;
    let file = fs::File::create(out).map_err(|e| io_err(out, e))?;
    write_iterate_csv(&log, file, timing).map_err(|e| io_err(out, e))?;
    Ok(log)
}

/// One (axis value, scheme) cell of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub value: f64,
    pub scheme: Scheme,
    pub trials: Vec<TrialResult>,
}

impl Cell {
    pub fn sum_rates(&self) -> Vec<f64> {
        self.trials.iter().filter_map(|t| t.outcome.as_ref().ok().map(|s| s.sum_rate)).collect()
    }

    pub fn mean_stderr(&self) -> (f64, f64) {
        mean_stderr(&self.sum_rates())
    }
}

/// Evaluates every cell, trials in parallel on the current rayon pool. Results
/// are ordered by (value, scheme, seed) whatever the pool size.
pub fn evaluate_sweep(spec: &SweepSpec) -> Result<Vec<Cell>, CliError> {
    spec.validate()?;
    let seeds = spec.seeds();
    let mut jobs = Vec::new();
    for &value in &spec.values {
        let scenario = spec.axis.apply(&spec.base.scenario, value)?;
        for &scheme in &spec.schemes {
            let engine = EngineConfig { scheme, ..spec.base.engine.clone() };
            for &seed in &seeds {
                jobs.push((value, scenario.clone(), engine.clone(), seed));
            }
        }
    }
    let results: Vec<TrialResult> = jobs
        .par_iter()
        .map(|(_, scenario, engine, seed)| TrialResult {
            seed: *seed,
            outcome: run_trial(scenario, engine, *seed).map(|log| TrialSummary::of(&log)),
        })
        .collect();
    let mut cells = Vec::new();
    let mut it = results.into_iter();
    for &value in &spec.values {
        for &scheme in &spec.schemes {
            cells.push(Cell { value, scheme, trials: it.by_ref().take(seeds.len()).collect() });
        }
    }
    Ok(cells)
}

fn cell_path(dir: &Path, cell: &Cell) -> PathBuf {
    dir.join(format!("cell_{}_{}.csv", cell.value, cell.scheme))
}

#[derive(Serialize)]
struct Manifest<'a> {
    seeds: Vec<u64>,
    spec: &'a SweepSpec,
}

/// `sweep`: evaluates the spec with `jobs` worker threads and writes the files
/// documented at the module level.
pub fn run_sweep(spec_path: &Path, out_dir: &Path, jobs: usize) -> Result<Vec<Cell>, CliError> {
    let spec = SweepSpec::load(spec_path)?;
    if jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let cells = pool.install(|| evaluate_sweep(&spec))?;
    write_sweep(&spec, &cells, out_dir)?;
    Ok(cells)
}

pub fn write_sweep(spec: &SweepSpec, cells: &[Cell], out_dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let axis = spec.axis.name();
    for cell in cells {
        let path = cell_path(out_dir, cell);
        let (mean, se) = cell.mean_stderr();
        let feasible = cell.sum_rates().len();
        let mut w = csv::Writer::from_path(&path).map_err(|e| io_err(&path, e))?;
        w.write_record(["axis", "value", "scheme", "trials", "feasible", "mean_sum_rate_nats", "stderr_sum_rate_nats", "mean_sum_rate_bits"])
            .and_then(|_| {
                w.write_record([
                    axis.to_string(),
                    cell.value.to_string(),
                    cell.scheme.to_string(),
                    cell.trials.len().to_string(),
                    feasible.to_string(),
                    mean.to_string(),
                    se.to_string(),
                    (mean / std::f64::consts::LN_2).to_string(),
                ])
            })
            .and_then(|_| Ok(w.flush()?))
            .map_err(|e| io_err(&path, e))?;
    }
    let path = out_dir.join("trials.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| io_err(&path, e))?;
    let write_trials = |w: &mut csv::Writer<fs::File>| -> Result<(), csv::Error> {
        w.write_record(["axis", "value", "scheme", "seed", "status", "iterations", "converged", "sum_rate_nats", "sinr_radar_db"])?;
        for cell in cells {
            for t in &cell.trials {
                let head = [axis.to_string(), cell.value.to_string(), cell.scheme.to_string(), t.seed.to_string()];
                let tail = match &t.outcome {
                    Ok(s) => [
                        "ok".to_string(),
                        s.iterations.to_string(),
                        s.converged.to_string(),
                        s.sum_rate.to_string(),
                        to_db(s.sinr_radar).to_string(),
                    ],
                    Err(e) => [e.clone(), String::new(), String::new(), String::new(), String::new()],
                };
                w.write_record(head.iter().chain(tail.iter()))?;
            }
        }
        w.flush()?;
        Ok(())
    };
    write_trials(&mut w).map_err(|e| io_err(&path, e))?;
    let manifest = Manifest { seeds: spec.seeds(), spec };
    let text = toml::to_string(&manifest).map_err(|e| CliError::Runtime(e.to_string()))?;
    let path = out_dir.join("manifest.toml");
    fs::write(&path, text).map_err(|e| io_err(&path, e))
}
