//! Single runs and parameter sweeps over seeds.

use std::panic::{self, AssertUnwindSafe};

use rayon::prelude::*;
use thiserror::Error;

use crate::metrics::{summarize, AggregateRow, MetricsError, Protocol};
use crate::scenario::{Scenario, ScenarioError};
use crate::sim::{simulate, RunOutput};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("scenario `{scenario}` seed {seed} ({protocol}) failed: {message}")]
    Run {
        scenario: String,
        seed: u64,
        protocol: Protocol,
        message: String,
    },
    #[error("bad range `{0}`")]
    Range(String),
    #[error("thread pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone)]
pub struct ProtocolRun {
    pub protocol: Protocol,
    pub output: RunOutput,
}

fn run_one(
    scenario: &Scenario,
    protocol: Protocol,
    seed: u64,
    trace: bool,
) -> Result<RunOutput, ExperimentError> {
    let cfg = scenario.run_config(protocol, seed, trace)?;
    panic::catch_unwind(AssertUnwindSafe(|| simulate(cfg))).map_err(|e| {
        let message = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        ExperimentError::Run {
            scenario: scenario.name.clone(),
            seed,
            protocol,
            message,
        }
    })
}

/// Runs every protocol the scenario selects with the same seed.
pub fn run(scenario: &Scenario, seed: u64, trace: bool) -> Result<Vec<ProtocolRun>, ExperimentError> {
    scenario
        .protocol
        .protocols()
        .iter()
        .map(|&protocol| {
            Ok(ProtocolRun {
                protocol,
                output: run_one(scenario, protocol, seed, trace)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum SweepVar {
    NodeCount(Vec<usize>),
    RelayProbability(Vec<f64>),
}

impl SweepVar {
    fn len(&self) -> usize {
        match self {
            SweepVar::NodeCount(v) => v.len(),
            SweepVar::RelayProbability(v) => v.len(),
        }
    }

    fn scenario_at(&self, base: &Scenario, k: usize) -> Result<Scenario, ScenarioError> {
        match self {
            SweepVar::NodeCount(v) => base.with_node_count(v[k]),
            SweepVar::RelayProbability(v) => base.with_relay_probability(v[k]),
        }
    }

    fn label(&self, k: usize) -> String {
        match self {
            SweepVar::NodeCount(v) => format!("n{}", v[k]),
            SweepVar::RelayProbability(v) => format!("p{:.2}", v[k]),
        }
    }
}

/// Aggregates of one swept value.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub label: String,
    pub rows: Vec<AggregateRow>,
}

#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    pub seeds: u64,
    /// Worker threads; `None` uses rayon's default.
    pub threads: Option<usize>,
    /// Keep every run's metrics in the result.
    pub keep_runs: bool,
    /// Record event traces of kept runs.
    pub trace: bool,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    /// Per value, every (protocol, seed) run in seed order; empty unless
    /// `keep_runs` was set.
    pub runs: Vec<Vec<ProtocolRun>>,
}

/// Runs every (value, seed, protocol) combination. Run `k` uses seed `k`,
/// so adding seeds never changes earlier runs.
pub fn sweep(base: &Scenario, var: &SweepVar, opts: &SweepOptions) -> Result<SweepResult, ExperimentError> {
    let scenarios = (0..var.len())
        .map(|k| var.scenario_at(base, k))
        .collect::<Result<Vec<_>, _>>()?;
    let jobs: Vec<(usize, u64, Protocol)> = scenarios
        .iter()
        .enumerate()
        .flat_map(|(k, s)| {
            (0..opts.seeds).flat_map(move |seed| s.protocol.protocols().iter().map(move |&p| (k, seed, p)))
        })
        .collect();
    let exec = || -> Vec<Result<ProtocolRun, ExperimentError>> {
        jobs.par_iter()
            .map(|&(k, seed, protocol)| {
                run_one(&scenarios[k], protocol, seed, opts.trace && opts.keep_runs)
                    .map(|output| ProtocolRun { protocol, output })
            })
            .collect()
    };
    let outputs = match opts.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| ExperimentError::Pool(e.to_string()))?
            .install(exec),
        None => exec(),
    };
    let mut per_value: Vec<Vec<ProtocolRun>> = vec![Vec::new(); var.len()];
    for (&(k, _, _), out) in jobs.iter().zip(outputs) {
        per_value[k].push(out?);
    }
    let points = per_value
        .iter()
        .enumerate()
        .map(|(k, runs)| {
            let metrics: Vec<_> = runs.iter().map(|r| r.output.metrics.clone()).collect();
            Ok(SweepPoint {
                label: var.label(k),
                rows: summarize(&metrics)?,
            })
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    Ok(SweepResult {
        points,
        runs: if opts.keep_runs { per_value } else { Vec::new() },
    })
}

/// `A..B`, inclusive.
pub fn parse_node_range(s: &str) -> Result<Vec<usize>, ExperimentError> {
    let bad = || ExperimentError::Range(s.to_string());
    let (a, b) = s.split_once("..").ok_or_else(bad)?;
    let a: usize = a.trim().parse().map_err(|_| bad())?;
    let b: usize = b.trim().parse().map_err(|_| bad())?;
    if a > b {
        return Err(bad());
    }
    Ok((a..=b).collect())
}

/// `A..B:STEP`, inclusive of `B` up to rounding.
pub fn parse_p_range(s: &str) -> Result<Vec<f64>, ExperimentError> {
    let bad = || ExperimentError::Range(s.to_string());
    let (range, step) = s.split_once(':').ok_or_else(bad)?;
    let (a, b) = range.split_once("..").ok_or_else(bad)?;
    let a: f64 = a.trim().parse().map_err(|_| bad())?;
    let b: f64 = b.trim().parse().map_err(|_| bad())?;
    let step: f64 = step.trim().parse().map_err(|_| bad())?;
    if !(step > 0.0 && a <= b && a >= 0.0 && b <= 1.0) {
        return Err(bad());
    }
    let count = ((b - a) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|k| ((a + k as f64 * step) * 1e9).round() / 1e9).collect())
}
