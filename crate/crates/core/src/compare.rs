//! Agent-based ensembles against the mean-field solution on a shared clock,
//! `t = events / (λN)`.

use serde::Serialize;

use crate::abm::{run_ensemble, InitialWealth, RunConfig, SnapshotSchedule, TimeMode, GENERATOR_NAME};
use crate::error::{invalid, Error, Result};
use crate::meanfield::{integrate_two_phase, point_mass_at_mean, IntegratorConfig};
use crate::params::ModelParams;
use crate::pmf::total_variation;

/// Below this many agents the report is flagged as dominated by
/// finite-size effects.
pub const FINITE_SIZE_AGENTS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct CompareConfig {
    pub params: ModelParams,
    pub replicas: usize,
    pub seed: u64,
    /// Ascending comparison times.
    pub times: Vec<f64>,
    pub integrator: IntegratorConfig,
}

impl CompareConfig {
    /// Snapshots every 5 time units up to `t_end`.
    pub fn new(params: ModelParams, replicas: usize, seed: u64, t_end: f64) -> Self {
        let count = (t_end / 5.0).floor() as usize;
        let mut times: Vec<f64> = (1..=count).map(|k| 5.0 * k as f64).collect();
        if times.last() != Some(&t_end) && t_end > 0.0 {
            times.push(t_end);
        }
        Self {
            params,
            replicas,
            seed,
            times,
            integrator: IntegratorConfig::new(&params, t_end),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SnapshotComparison {
    pub t: f64,
    pub event: u64,
    pub total_variation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub n_agents: usize,
    pub mu: f64,
    pub nu: f64,
    pub lambda: f64,
    pub replicas: usize,
    pub seed: u64,
    pub generator: &'static str,
    pub snapshots: Vec<SnapshotComparison>,
    pub max_total_variation: f64,
    pub finite_size_warning: bool,
}

/// Event index closest to time `t`.
pub fn events_for_time(t: f64, params: &ModelParams) -> u64 {
    (t * params.lambda * params.n_agents as f64).round() as u64
}

/// Runs a replica ensemble from `S_i = μ` and the mean-field equation from a
/// point mass at μ, and reports the total-variation distance between the
/// replica-averaged empirical PMF and the mean-field PMF at each time.
pub fn compare_abm_meanfield(cfg: &CompareConfig) -> Result<ComparisonReport> {
    let params = cfg.params;
    if cfg.times.is_empty() {
        return Err(invalid("t-end", "no comparison times"));
    }
    if cfg.times.windows(2).any(|w| w[0] >= w[1]) || cfg.times[0] <= 0.0 {
        return Err(invalid("times", "comparison times must be positive and ascending"));
    }
    let events: Vec<u64> = cfg.times.iter().map(|&t| events_for_time(t, &params)).collect();
    let t_end = *cfg.times.last().expect("non-empty");

    let run = RunConfig {
        params,
        init: InitialWealth::UniformAtMu,
        max_events: *events.last().expect("non-empty"),
        seed: cfg.seed,
        record_stride: params.n_agents as u64,
        snapshots: SnapshotSchedule::Events(events.clone()),
        time_mode: TimeMode::EventCount,
    };
    let ensemble = run_ensemble(&run, cfg.replicas)?;

    let mf_cfg = IntegratorConfig {
        t_end,
        snapshot_times: cfg.times.clone(),
        ..cfg.integrator.clone()
    };
    let (traj, _) = integrate_two_phase(&point_mass_at_mean(params.mu), &params, &mf_cfg)?;

    if ensemble.snapshots.len() != events.len() || traj.snapshots.len() != cfg.times.len() {
        return Err(Error::InsufficientData(format!(
            "expected {} snapshots, got {} (agent-based) and {} (mean-field)",
            cfg.times.len(),
            ensemble.snapshots.len(),
            traj.snapshots.len()
        )));
    }

    let mut snapshots = Vec::with_capacity(events.len());
    for ((&t, abm), mf) in cfg.times.iter().zip(&ensemble.snapshots).zip(&traj.snapshots) {
        snapshots.push(SnapshotComparison {
            t,
            event: abm.event,
            total_variation: total_variation(&abm.pmf, &mf.pmf),
        });
    }
    let max_total_variation = snapshots
        .iter()
        .map(|s| s.total_variation)
        .fold(0.0, f64::max);
    Ok(ComparisonReport {
        n_agents: params.n_agents,
        mu: params.mu,
        nu: params.nu,
        lambda: params.lambda,
        replicas: cfg.replicas,
        seed: cfg.seed,
        generator: GENERATOR_NAME,
        snapshots,
        max_total_variation,
        finite_size_warning: params.n_agents < FINITE_SIZE_AGENTS,
    })
}
