//! Monte Carlo trials, parameter sweeps, metrics and CSV export.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{build_model, simulate_trace, ChannelTrace};
use crate::config::{Algorithm, SystemConfig};
use crate::error::{Error, Result};
use crate::frame::{make_constellation, make_pilots, observe, random_data, Frame, SymbolMatrix};
use crate::numerics::CVector;
use crate::receivers::{run_ep, run_kf_m, run_ks_m, run_pcsi, run_training, Problem, ReceiverSettings, TrainingMode};

/// Floor reported by [`delta_h_db`] for an exact estimate.
pub const DB_FLOOR: f64 = -300.0;

/// Fraction of failed trials at a sweep point above which a run is flagged.
pub const FAILURE_BUDGET: f64 = 0.2;

pub const CSV_HEADER: [&str; 9] = [
    "sweep_name",
    "sweep_value",
    "algorithm",
    "delta_h_db",
    "ser",
    "trials",
    "failures",
    "master_seed",
    "mean_iterations",
];

/// Random streams of one trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Pilots = 1,
    Data = 2,
    Channel = 3,
    Noise = 4,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the stream `(trial, cell, stream)` under `master_seed`:
/// `z <- splitmix64(z ^ splitmix64(v))` folded over the three indices,
/// starting from `z = splitmix64(master_seed)`.
pub fn child_seed(master_seed: u64, trial: u64, cell: u64, stream: Stream) -> u64 {
    [trial, cell, stream as u64]
        .into_iter()
        .fold(splitmix64(master_seed), |z, v| splitmix64(z ^ splitmix64(v)))
}

fn stream_rng(master_seed: u64, trial: usize, cell: usize, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(child_seed(master_seed, trial as u64, cell as u64, stream))
}

/// `(1/T) sum_t |h_t - h_hat_t|^2 / |h_t|^2`, skipping steps with `h_t = 0`.
pub fn delta_h_ratio(truth: &ChannelTrace, estimates: &[CVector]) -> Result<f64> {
    if truth.len() != estimates.len() {
        return Err(Error::Dimension(format!(
            "{} true channel states, {} estimates",
            truth.len(),
            estimates.len()
        )));
    }
    let mut sum = 0.0;
    let mut used = 0usize;
    for (t, (h, est)) in truth.states.iter().zip(estimates).enumerate() {
        let power = h.norm_squared();
        if power == 0.0 {
            log::warn!("true channel is zero at t = {t}; step excluded from delta_h");
            continue;
        }
        sum += (h - est).norm_squared() / power;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Dimension("no step with a non-zero channel".into()));
    }
    Ok(sum / used as f64)
}

/// Ratio to dB with the [`DB_FLOOR`] guard.
pub fn ratio_to_db(ratio: f64) -> f64 {
    if ratio > 0.0 {
        (10.0 * ratio.log10()).max(DB_FLOOR)
    } else {
        DB_FLOOR
    }
}

pub fn delta_h_db(truth: &ChannelTrace, estimates: &[CVector]) -> Result<f64> {
    delta_h_ratio(truth, estimates).map(ratio_to_db)
}

/// Fraction of positions where `decisions` differs from `truth`.
pub fn ser(truth: &SymbolMatrix, decisions: &SymbolMatrix) -> Result<f64> {
    if truth.shape() != decisions.shape() {
        return Err(Error::Dimension(format!(
            "truth is {:?}, decisions are {:?}",
            truth.shape(),
            decisions.shape()
        )));
    }
    if truth.is_empty() {
        return Ok(0.0);
    }
    let errors = truth.iter().zip(decisions.iter()).filter(|(a, b)| a != b).count();
    Ok(errors as f64 / truth.len() as f64)
}

/// Metrics of one algorithm on one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct AlgorithmMetrics {
    pub delta_h_ratio: Option<f64>,
    pub ser: Option<f64>,
    pub iterations_used: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct TrialResult {
    pub trial: usize,
    pub outcomes: Vec<(Algorithm, std::result::Result<AlgorithmMetrics, String>)>,
}

/// Everything simulated for one trial.
#[derive(Debug, Clone)]
pub struct TrialData {
    /// Target-cell frame followed by the `L - 1` interfering frames.
    pub frames: Vec<Frame>,
    /// Channels towards the target base station, neighbours already scaled by `sqrt(a)`.
    pub traces: Vec<ChannelTrace>,
    pub observations: Vec<CVector>,
}

/// Draws the realization of trial `trial`: target pilots and data, one
/// fully random frame per interfering cell, channel traces of every cell and
/// the received signal.
pub fn simulate_trial(cfg: &SystemConfig, trial: usize) -> Result<TrialData> {
    let model = build_model(cfg)?;
    let constellation = make_constellation(4, cfg.energy())?;
    let seed = cfg.master_seed;
    let frame_len = cfg.frame_len();

    let pilots = make_pilots(
        cfg.users,
        cfg.pilot_len,
        &constellation,
        cfg.pilot_design,
        &mut stream_rng(seed, trial, 0, Stream::Pilots),
    )?;
    let data = random_data(cfg.users, cfg.data_len, &constellation, &mut stream_rng(seed, trial, 0, Stream::Data));
    let mut frames = vec![Frame::new(pilots, data, &constellation)?];
    let mut traces = vec![simulate_trace(&model, frame_len, &mut stream_rng(seed, trial, 0, Stream::Channel))];
    let amplitude = cfg.cross_gain.sqrt();
    for cell in 1..cfg.cells {
        let mut rng = stream_rng(seed, trial, cell, Stream::Data);
        frames.push(Frame::random(cfg.users, frame_len, &constellation, &mut rng));
        let trace = simulate_trace(&model, frame_len, &mut stream_rng(seed, trial, cell, Stream::Channel));
        traces.push(trace.scaled(amplitude));
    }
    let observations = observe(
        &traces,
        &frames,
        &model,
        cfg.interference_mode,
        &mut stream_rng(seed, trial, 0, Stream::Noise),
    )?
    .y;
    Ok(TrialData { frames, traces, observations })
}

/// Runs every configured algorithm on the realization of trial `trial`.
pub fn run_trial(cfg: &SystemConfig, trial: usize) -> Result<TrialResult> {
    let model = build_model(cfg)?;
    let constellation = make_constellation(4, cfg.energy())?;
    let data = simulate_trial(cfg, trial)?;
    let target = &data.frames[0];
    let truth = &data.traces[0];
    let settings = ReceiverSettings::from(cfg);
    let problem = Problem {
        model: &model,
        constellation: &constellation,
        pilots: &target.pilots,
        observations: &data.observations,
    };

    let outcomes = cfg
        .algorithms
        .iter()
        .map(|&alg| {
            let output = match alg {
                Algorithm::KfM => run_kf_m(&problem, &settings),
                Algorithm::KsM => run_ks_m(&problem, &settings),
                Algorithm::Ep => run_ep(&problem, &settings),
                Algorithm::KfTm => {
                    run_training(&model, &constellation, &target.symbols, &data.observations, TrainingMode::Filter)
                }
                Algorithm::KsTm => {
                    run_training(&model, &constellation, &target.symbols, &data.observations, TrainingMode::Smoother)
                }
                Algorithm::Pcsi => run_pcsi(&model, &constellation, truth, &data.observations, cfg.pilot_len),
            };
            let metrics = output.and_then(|out| {
                let delta = if alg.estimates_channel() { Some(delta_h_ratio(truth, &out.channel_means)?) } else { None };
                let symbol_error =
                    if alg.detects() && cfg.data_len > 0 { Some(ser(&target.data, &out.decisions)?) } else { None };
                Ok(AlgorithmMetrics {
                    delta_h_ratio: delta,
                    ser: symbol_error,
                    iterations_used: out.iterations_used,
                    converged: out.converged,
                })
            });
            (alg, metrics.map_err(|e| e.to_string()))
        })
        .collect();
    Ok(TrialResult { trial, outcomes })
}

/// One aggregated CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub sweep_name: String,
    pub sweep_value: f64,
    pub algorithm: String,
    /// dB of the mean per-trial ratio; `None` when the algorithm does not
    /// estimate the channel or every trial failed.
    pub delta_h_db: Option<f64>,
    pub ser: Option<f64>,
    pub trials: usize,
    pub failures: usize,
    pub master_seed: u64,
    pub mean_iterations: f64,
}

impl MetricRow {
    pub fn failure_fraction(&self) -> f64 {
        if self.trials == 0 {
            0.0
        } else {
            self.failures as f64 / self.trials as f64
        }
    }
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Folds trial results (in trial order) into one row per algorithm.
pub fn aggregate(cfg: &SystemConfig, sweep_name: &str, sweep_value: f64, results: &[TrialResult]) -> Vec<MetricRow> {
    cfg.algorithms
        .iter()
        .map(|&alg| {
            let mut deltas = Vec::new();
            let mut sers = Vec::new();
            let mut iterations = Vec::new();
            let mut failures = 0;
            for result in results {
                for (a, outcome) in &result.outcomes {
                    if *a != alg {
                        continue;
                    }
                    match outcome {
                        Ok(m) => {
                            deltas.extend(m.delta_h_ratio);
                            sers.extend(m.ser);
                            iterations.push(m.iterations_used as f64);
                        }
                        Err(e) => {
                            log::warn!("trial {} failed for {alg}: {e}", result.trial);
                            failures += 1;
                        }
                    }
                }
            }
            MetricRow {
                sweep_name: sweep_name.to_string(),
                sweep_value,
                algorithm: alg.label().to_string(),
                delta_h_db: mean(&deltas).map(ratio_to_db),
                ser: mean(&sers),
                trials: results.len(),
                failures,
                master_seed: cfg.master_seed,
                mean_iterations: mean(&iterations).unwrap_or(0.0),
            }
        })
        .collect()
}

/// Runs `cfg.trials` trials on a pool of `workers` threads; results come
/// back in trial order whatever the scheduling.
pub fn run_batch(cfg: &SystemConfig, workers: usize) -> Result<Vec<TrialResult>> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| (0..cfg.trials).into_par_iter().map(|trial| run_trial(cfg, trial)).collect())
}

/// Parameter sweep description.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub name: String,
    pub values: Vec<f64>,
}

impl Sweep {
    /// Parses `name=v1,v2,...`.
    pub fn parse(text: &str) -> Result<Self> {
        let (name, list) = text
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("sweep '{text}' is not of the form name=v1,v2,...")))?;
        let values = list
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|e| Error::Config(format!("bad sweep value '{v}': {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() {
            return Err(Error::Config("empty sweep".into()));
        }
        let name = name.trim().to_string();
        SystemConfig::desk().set_field(&name, values[0])?;
        Ok(Self { name, values })
    }
}

/// Runs a sweep (or the base configuration alone when `sweep` is `None`,
/// reported with sweep name `none` and value 0).
pub fn run_sweep(cfg: &SystemConfig, sweep: Option<&Sweep>, workers: usize) -> Result<Vec<MetricRow>> {
    let points: Vec<(String, f64, SystemConfig)> = match sweep {
        None => vec![("none".into(), 0.0, cfg.clone())],
        Some(s) => s
            .values
            .iter()
            .map(|&v| {
                let mut c = cfg.clone();
                c.set_field(&s.name, v)?;
                c.validate()?;
                Ok((s.name.clone(), v, c))
            })
            .collect::<Result<Vec<_>>>()?,
    };
    let mut rows = Vec::new();
    for (name, value, point) in points {
        let results = run_batch(&point, workers)?;
        rows.extend(aggregate(&point, &name, value, &results));
    }
    Ok(rows)
}

/// `x` rounded to 6 significant digits in positional notation, without
/// trailing zeros.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x.is_finite() { "0".into() } else { x.to_string() };
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (5 - magnitude).max(0) as usize;
    let mut s = format!("{x:.decimals$}");
    if s.contains('.') {
        s = s.trim_end_matches('0').trim_end_matches('.').to_string();
    }
    if s == "-0" {
        s = "0".into();
    }
    s
}

fn optional(x: Option<f64>) -> String {
    x.map(format_sig6).unwrap_or_default()
}

/// Writes rows with the fixed header; empty cells mark metrics that do not
/// apply to an algorithm.
pub fn write_csv_to<W: Write>(rows: &[MetricRow], out: W) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Config("no rows to write".into()));
    }
    let mut writer = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    writer.write_record(CSV_HEADER)?;
    for r in rows {
        writer.write_record([
            r.sweep_name.clone(),
            format_sig6(r.sweep_value),
            r.algorithm.clone(),
            optional(r.delta_h_db),
            optional(r.ser),
            r.trials.to_string(),
            r.failures.to_string(),
            r.master_seed.to_string(),
            format_sig6(r.mean_iterations),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

pub fn write_csv(rows: &[MetricRow], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv_to(rows, std::io::BufWriter::new(file))
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(String::from).collect();
    if header != CSV_HEADER {
        return Err(Error::Config(format!("unexpected CSV header {header:?}")));
    }
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}
