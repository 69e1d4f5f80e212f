//! Stochastic N-agent simulation of the unbiased exchange model with a
//! collective debt limit.
//!
//! At each event an ordered pair `(giver, receiver)` of distinct agents is
//! drawn uniformly. The giver hands one dollar to the receiver when it owns
//! at least one dollar, or when the bank still has cash to lend; otherwise
//! nothing happens. The bank never gains or loses money: its cash plus the
//! outstanding debt of the agents always equals the initial reserve
//! `B_* = Nμν`, and the cash is tracked through
//! `B_c = B_* - Σ_i max(-S_i, 0)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Result};
use crate::params::ModelParams;
use crate::pmf::{gini, Lattice, WealthPmf};

/// Random generator used for every run; recorded in run metadata.
pub type SimRng = ChaCha8Rng;

pub const GENERATOR_NAME: &str = "ChaCha8Rng (rand_chacha 0.9, seed_from_u64)";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum InitialWealth {
    /// Every agent starts with exactly μ dollars (μ must be an integer).
    UniformAtMu,
    Explicit(Vec<i64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeMode {
    /// Deterministic `Δt = 1/(λN)` per event.
    EventCount,
    /// `Δt ~ Exponential(λN)`, the superposition of all Poisson clocks.
    ExponentialClock,
}

/// Which branch of the exchange rule an event took.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exchange {
    /// The giver paid from its own dollars.
    Direct,
    /// The giver had no dollar and borrowed it from the bank.
    Borrowed,
    /// Neither the giver nor the bank could pay.
    Blocked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BankState {
    pub cash: i64,
    pub debt: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentEnsemble {
    wealth: Vec<i64>,
    reserve: i64,
    total_money: i64,
    /// Σ_i max(-S_i, 0), the debt lent out by the bank.
    outstanding_debt: i64,
    lambda: f64,
    elapsed_time: f64,
    event_count: u64,
}

impl AgentEnsemble {
    pub fn new(params: &ModelParams, init: &InitialWealth) -> Result<Self> {
        params.validate()?;
        if params.n_agents < 2 {
            return Err(invalid("n-agents", "the exchange needs at least two agents"));
        }
        let total_money = params.total_money()?;
        let reserve = params.bank_reserve()?;
        let n = params.n_agents;
        let wealth = match init {
            InitialWealth::UniformAtMu => {
                if params.mu.fract() != 0.0 {
                    return Err(invalid(
                        "mu",
                        "uniform initial wealth needs an integer mu; pass an explicit vector",
                    ));
                }
                vec![params.mu as i64; n]
            }
            InitialWealth::Explicit(w) => {
                if w.len() != n {
                    return Err(invalid(
                        "wealth",
                        format!("expected {n} entries, got {}", w.len()),
                    ));
                }
                if w.iter().any(|&s| s < 0) {
                    return Err(invalid("wealth", "initial debt is not supported"));
                }
                let sum: i64 = w.iter().sum();
                if sum != total_money {
                    return Err(invalid(
                        "wealth",
                        format!("entries sum to {sum}, expected N*mu = {total_money}"),
                    ));
                }
                w.clone()
            }
        };
        Ok(Self {
            wealth,
            reserve,
            total_money,
            outstanding_debt: 0,
            lambda: params.lambda,
            elapsed_time: 0.0,
            event_count: 0,
        })
    }

    pub fn wealth(&self) -> &[i64] {
        &self.wealth
    }

    pub fn n_agents(&self) -> usize {
        self.wealth.len()
    }

    pub fn bank(&self) -> BankState {
        BankState {
            cash: self.reserve - self.outstanding_debt,
            debt: self.outstanding_debt,
        }
    }

    pub fn bank_cash(&self) -> i64 {
        self.reserve - self.outstanding_debt
    }

    pub fn reserve(&self) -> i64 {
        self.reserve
    }

    pub fn elapsed_time(&self) -> f64 {
        self.elapsed_time
    }

    pub fn event_count(&self) -> u64 {
        self.event_count
    }

    /// Σ_i max(-S_i, 0) recomputed from the wealth vector.
    pub fn total_agent_debt(&self) -> i64 {
        self.wealth.iter().map(|&s| (-s).max(0)).sum()
    }

    /// Applies one exchange from `giver` to `receiver` without touching the
    /// clock. Receiving while in debt lowers the outstanding debt, which
    /// returns that dollar to the bank's cash.
    pub fn transfer(&mut self, giver: usize, receiver: usize) -> Exchange {
        assert_ne!(giver, receiver, "an agent cannot pay itself");
        let from = self.wealth[giver];
        let outcome = if from >= 1 {
            Exchange::Direct
        } else if self.bank_cash() >= 1 {
            Exchange::Borrowed
        } else {
            return Exchange::Blocked;
        };
        if from <= 0 {
            self.outstanding_debt += 1;
        }
        if self.wealth[receiver] < 0 {
            self.outstanding_debt -= 1;
        }
        self.wealth[giver] -= 1;
        self.wealth[receiver] += 1;
        outcome
    }

    /// Draws an ordered pair of distinct agents, applies the exchange rule
    /// and advances the clock.
    pub fn step_event<R: Rng + ?Sized>(&mut self, rng: &mut R, mode: TimeMode) -> Exchange {
        let n = self.wealth.len();
        let giver = rng.random_range(0..n);
        let mut receiver = rng.random_range(0..n - 1);
        if receiver >= giver {
            receiver += 1;
        }
        let outcome = self.transfer(giver, receiver);
        let rate = self.lambda * n as f64;
        self.event_count += 1;
        match mode {
            // Exact `k / (λN)` rather than a running sum of increments.
            TimeMode::EventCount => self.elapsed_time = self.event_count as f64 / rate,
            TimeMode::ExponentialClock => {
                self.elapsed_time += Exp::new(rate).expect("positive rate").sample(rng)
            }
        }
        outcome
    }

    /// Empirical law of the wealth, `p_n = #{i : S_i = n} / N`.
    pub fn empirical_pmf(&self) -> WealthPmf {
        let lo = *self.wealth.iter().min().expect("at least one agent");
        let hi = *self.wealth.iter().max().expect("at least one agent");
        let mut counts = vec![0u64; (hi - lo + 1) as usize];
        for &s in &self.wealth {
            counts[(s - lo) as usize] += 1;
        }
        let n = self.wealth.len() as f64;
        WealthPmf::from_parts_unchecked(lo, counts.into_iter().map(|c| c as f64 / n).collect())
    }

    pub fn gini(&self) -> f64 {
        gini(&self.empirical_pmf()).expect("agent money is positive")
    }

    /// Recomputes every conservation identity from scratch.
    pub fn audit(&self) -> std::result::Result<(), String> {
        let sum: i64 = self.wealth.iter().sum();
        if sum != self.total_money {
            return Err(format!("agent money {sum} != {}", self.total_money));
        }
        let debt = self.total_agent_debt();
        if debt != self.outstanding_debt {
            return Err(format!(
                "tracked debt {} != recomputed {debt}",
                self.outstanding_debt
            ));
        }
        let bank = self.bank();
        if bank.cash < 0 || bank.debt < 0 || bank.cash + bank.debt != self.reserve {
            return Err(format!("bank state {bank:?} inconsistent with reserve {}", self.reserve));
        }
        Ok(())
    }
}

/// When PMF snapshots are taken during a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SnapshotSchedule {
    Events(Vec<u64>),
    /// Snapshot at the first event whose elapsed time reaches each target.
    Times(Vec<f64>),
}

impl Default for SnapshotSchedule {
    fn default() -> Self {
        Self::Events(Vec::new())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub params: ModelParams,
    pub init: InitialWealth,
    pub max_events: u64,
    pub seed: u64,
    /// Events between trajectory rows.
    pub record_stride: u64,
    pub snapshots: SnapshotSchedule,
    pub time_mode: TimeMode,
}

impl RunConfig {
    /// Uniform start, one trajectory row per unit of time, no snapshots.
    pub fn new(params: ModelParams, max_events: u64, seed: u64) -> Self {
        Self {
            params,
            init: InitialWealth::UniformAtMu,
            max_events,
            seed,
            record_stride: params.n_agents as u64,
            snapshots: SnapshotSchedule::default(),
            time_mode: TimeMode::EventCount,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.record_stride == 0 {
            return Err(invalid("record_stride", "must be positive"));
        }
        let sorted = match &self.snapshots {
            SnapshotSchedule::Events(e) => e.windows(2).all(|w| w[0] <= w[1]),
            SnapshotSchedule::Times(t) => t.windows(2).all(|w| w[0] <= w[1]),
        };
        if !sorted {
            return Err(invalid("snapshots", "schedule must be sorted ascending"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AbmRecord {
    pub event: u64,
    pub time: f64,
    pub bank_cash: i64,
    pub bank_debt: i64,
    pub total_agent_debt: i64,
    pub gini: f64,
}

impl AbmRecord {
    fn capture(e: &AgentEnsemble) -> Self {
        let bank = e.bank();
        Self {
            event: e.event_count,
            time: e.elapsed_time,
            bank_cash: bank.cash,
            bank_debt: bank.debt,
            total_agent_debt: e.total_agent_debt(),
            gini: e.gini(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PmfSnapshot {
    pub event: u64,
    pub time: f64,
    pub pmf: WealthPmf,
}

#[derive(Debug, Clone)]
pub struct AbmRun {
    pub final_state: AgentEnsemble,
    pub trajectory: Vec<AbmRecord>,
    pub snapshots: Vec<PmfSnapshot>,
    /// First event after which the bank held no cash.
    pub depletion_event: Option<u64>,
}

struct SnapshotCursor<'a> {
    schedule: &'a SnapshotSchedule,
    next: usize,
}

impl SnapshotCursor<'_> {
    /// Number of schedule entries that are due for the current state.
    fn due(&mut self, e: &AgentEnsemble) -> usize {
        let start = self.next;
        match self.schedule {
            SnapshotSchedule::Events(events) => {
                while self.next < events.len() && events[self.next] <= e.event_count {
                    self.next += 1;
                }
            }
            SnapshotSchedule::Times(times) => {
                while self.next < times.len() && times[self.next] <= e.elapsed_time {
                    self.next += 1;
                }
            }
        }
        self.next - start
    }

    fn next_event(&self) -> u64 {
        match self.schedule {
            SnapshotSchedule::Events(events) => events.get(self.next).copied().unwrap_or(u64::MAX),
            SnapshotSchedule::Times(_) => 0,
        }
    }
}

/// Runs exactly `cfg.max_events` events from the configured initial state.
pub fn run(cfg: &RunConfig) -> Result<AbmRun> {
    cfg.validate()?;
    let mut state = AgentEnsemble::new(&cfg.params, &cfg.init)?;
    let mut rng = SimRng::seed_from_u64(cfg.seed);
    let mut trajectory = vec![AbmRecord::capture(&state)];
    let mut snapshots = Vec::new();
    let mut cursor = SnapshotCursor {
        schedule: &cfg.snapshots,
        next: 0,
    };
    let take_snapshots = |cursor: &mut SnapshotCursor, state: &AgentEnsemble, out: &mut Vec<PmfSnapshot>| {
        for _ in 0..cursor.due(state) {
            out.push(PmfSnapshot {
                event: state.event_count,
                time: state.elapsed_time,
                pmf: state.empirical_pmf(),
            });
        }
    };
    take_snapshots(&mut cursor, &state, &mut snapshots);
    let mut depletion_event = (state.bank_cash() == 0).then_some(0);
    let by_time = matches!(cfg.snapshots, SnapshotSchedule::Times(_));

    while state.event_count < cfg.max_events {
        state.step_event(&mut rng, cfg.time_mode);
        if depletion_event.is_none() && state.bank_cash() == 0 {
            depletion_event = Some(state.event_count);
        }
        if by_time || state.event_count >= cursor.next_event() {
            take_snapshots(&mut cursor, &state, &mut snapshots);
        }
        if state.event_count % cfg.record_stride == 0 {
            trajectory.push(AbmRecord::capture(&state));
        }
    }
    if trajectory.last().map(|r| r.event) != Some(state.event_count) {
        trajectory.push(AbmRecord::capture(&state));
    }
    Ok(AbmRun {
        final_state: state,
        trajectory,
        snapshots,
        depletion_event,
    })
}

/// Trajectory row averaged over replicas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanAbmRecord {
    pub event: u64,
    pub time: f64,
    pub bank_cash: f64,
    pub bank_debt: f64,
    pub total_agent_debt: f64,
    pub gini: f64,
}

#[derive(Debug, Clone)]
pub struct EnsembleRun {
    pub seeds: Vec<u64>,
    pub trajectory: Vec<MeanAbmRecord>,
    pub final_pmf: WealthPmf,
    pub snapshots: Vec<PmfSnapshot>,
    pub depletion_events: Vec<Option<u64>>,
}

/// Replica `r` uses seed `cfg.seed + r`.
pub fn run_ensemble(cfg: &RunConfig, replicas: usize) -> Result<EnsembleRun> {
    if replicas == 0 {
        return Err(invalid("replicas", "must be at least 1"));
    }
    let seeds: Vec<u64> = (0..replicas as u64).map(|r| cfg.seed.wrapping_add(r)).collect();
    run_ensemble_with_seeds(cfg, &seeds)
}

/// Runs one replica per seed in parallel and averages pointwise, in seed order.
pub fn run_ensemble_with_seeds(cfg: &RunConfig, seeds: &[u64]) -> Result<EnsembleRun> {
    if seeds.is_empty() {
        return Err(invalid("replicas", "must be at least 1"));
    }
    let runs: Vec<AbmRun> = crate::thread_pool().install(|| {
        seeds
            .par_iter()
            .map(|&seed| run(&RunConfig { seed, ..cfg.clone() }))
            .collect::<Result<Vec<_>>>()
    })?;

    let k = runs.len() as f64;
    let rows = runs[0].trajectory.len();
    let trajectory = (0..rows)
        .map(|i| {
            let mut acc = MeanAbmRecord {
                event: runs[0].trajectory[i].event,
                time: 0.0,
                bank_cash: 0.0,
                bank_debt: 0.0,
                total_agent_debt: 0.0,
                gini: 0.0,
            };
            for r in &runs {
                let rec = &r.trajectory[i];
                acc.time += rec.time;
                acc.bank_cash += rec.bank_cash as f64;
                acc.bank_debt += rec.bank_debt as f64;
                acc.total_agent_debt += rec.total_agent_debt as f64;
                acc.gini += rec.gini;
            }
            acc.time /= k;
            acc.bank_cash /= k;
            acc.bank_debt /= k;
            acc.total_agent_debt /= k;
            acc.gini /= k;
            acc
        })
        .collect();

    let finals: Vec<WealthPmf> = runs.iter().map(|r| r.final_state.empirical_pmf()).collect();
    let final_pmf = average_pmfs(&finals);
    let snapshot_count = runs.iter().map(|r| r.snapshots.len()).min().unwrap_or(0);
    let snapshots = (0..snapshot_count)
        .map(|i| {
            let pmfs: Vec<WealthPmf> = runs.iter().map(|r| r.snapshots[i].pmf.clone()).collect();
            PmfSnapshot {
                event: runs[0].snapshots[i].event,
                time: runs.iter().map(|r| r.snapshots[i].time).sum::<f64>() / k,
                pmf: average_pmfs(&pmfs),
            }
        })
        .collect();
    Ok(EnsembleRun {
        seeds: seeds.to_vec(),
        trajectory,
        final_pmf,
        snapshots,
        depletion_events: runs.iter().map(|r| r.depletion_event).collect(),
    })
}

/// Pointwise mean of PMFs over the union of their windows.
pub fn average_pmfs(pmfs: &[WealthPmf]) -> WealthPmf {
    let lo = pmfs.iter().map(|p| p.n_min()).min().expect("non-empty");
    let hi = pmfs.iter().map(|p| p.n_max()).max().expect("non-empty");
    let mut acc = vec![0.0; (hi - lo + 1) as usize];
    for p in pmfs {
        for (n, v) in p.iter() {
            acc[(n - lo) as usize] += v;
        }
    }
    let k = pmfs.len() as f64;
    acc.iter_mut().for_each(|v| *v /= k);
    WealthPmf::from_parts_unchecked(lo, acc)
}
