//! Deterministic two-phase mean-field dynamics.
//!
//! While the bank still has cash (Phase I) the law of a typical agent
//! performs a free symmetric random walk, `∂_t p = λ Q1[p]`. Once the average
//! debt reaches `μν` at time `t*`, the dynamics switches to the
//! bank-constrained operator Q2 (Phase II). The bank-free model (`ν = 0`) has
//! its own one-sided operator and is integrated separately.
//!
//! Every operator is a nearest-neighbour birth-death generator, so it is
//! evaluated in flux form: for each edge `(n, n+1)` the net flux
//! `up(n) p_n - down(n+1) p_{n+1}` leaves `n` and enters `n+1`. Edges that
//! leave the window carry no flux, which keeps the mass exact; the window is
//! widened before any boundary slot exceeds the tail threshold.

use log::{debug, warn};
use serde::Serialize;

use crate::equilibrium::{equilibrium_spec, kl_to_equilibrium, EquilibriumSpec};
use crate::error::{invalid, Error, Result};
use crate::params::ModelParams;
use crate::pmf::{debt, gini, mass, mean, Lattice, RateVector, WealthPmf, DEFAULT_TAIL_THRESHOLD};

/// Denominators `r + p_0` and `d + p_0` below this abort Phase II.
const DEGENERACY_FLOOR: f64 = 1e-300;

/// Entries more negative than this after a step are reported.
const NEGATIVITY_WARNING: f64 = -1e-12;

const BISECTION_ITERATIONS: usize = 48;

/// An initial law whose debt is this close to `μν` starts in Phase II.
const PHASE_TWO_START_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Phase {
    #[serde(rename = "I")]
    PhaseI,
    #[serde(rename = "II")]
    PhaseII,
    #[serde(rename = "vanilla")]
    Vanilla,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::PhaseI => "I",
            Phase::PhaseII => "II",
            Phase::Vanilla => "vanilla",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Rk4,
    Euler,
}

impl std::str::FromStr for Scheme {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "rk4" => Ok(Scheme::Rk4),
            "euler" => Ok(Scheme::Euler),
            other => Err(format!("unknown scheme `{other}` (expected rk4 or euler)")),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Rk4 => "rk4",
            Scheme::Euler => "euler",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntegratorConfig {
    pub dt: f64,
    pub scheme: Scheme,
    pub tail_threshold: f64,
    pub t_end: f64,
    /// Time between trajectory rows.
    pub record_stride: f64,
    /// Rate multiplying the operator.
    pub lambda: f64,
    /// Hard cap on the window width, in slots.
    pub max_window: usize,
    /// Times at which full PMF snapshots are kept, ascending.
    pub snapshot_times: Vec<f64>,
}

impl IntegratorConfig {
    /// RK4 with `dt = 0.01 min(1, 1/λ)`, one row per unit of time.
    pub fn new(params: &ModelParams, t_end: f64) -> Self {
        Self {
            dt: 0.01 * (1.0f64).min(1.0 / params.lambda),
            scheme: Scheme::Rk4,
            tail_threshold: DEFAULT_TAIL_THRESHOLD,
            t_end,
            record_stride: 1.0,
            lambda: params.lambda,
            max_window: 1 << 20,
            snapshot_times: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(invalid("dt", format!("must be > 0, got {}", self.dt)));
        }
        if !(self.tail_threshold > 0.0 && self.tail_threshold <= 1e-8) {
            return Err(invalid(
                "tail-threshold",
                format!("must lie in (0, 1e-8], got {}", self.tail_threshold),
            ));
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return Err(invalid("t-end", format!("must be >= 0, got {}", self.t_end)));
        }
        if !(self.record_stride > 0.0) {
            return Err(invalid("record_stride", "must be > 0"));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(invalid("lambda", format!("must be > 0, got {}", self.lambda)));
        }
        if self.max_window < 3 {
            return Err(invalid("max_window", "must be at least 3 slots"));
        }
        if self.snapshot_times.windows(2).any(|w| w[0] > w[1]) {
            return Err(invalid("snapshot_times", "must be sorted ascending"));
        }
        Ok(())
    }
}

/// Jump rates of one operator, frozen for a single evaluation.
#[derive(Debug, Clone, Copy)]
enum Rates {
    /// Unit rate in both directions.
    Free,
    /// Up-rate `r/(r+p_0)` everywhere; down-rate 1 from `n ≥ 1` and
    /// `rd/((r+p_0)(d+p_0))` from `n ≤ 0`.
    Banked { up: f64, down_nonpositive: f64 },
    /// Up-rate `r̄` and down-rate 1 on `n ≥ 0`.
    BankFree { up: f64 },
}

fn sums(offset: i64, values: &[f64]) -> (f64, f64, f64) {
    let (mut rich, mut indebted, mut zero) = (0.0, 0.0, 0.0);
    for (i, &v) in values.iter().enumerate() {
        let n = offset + i as i64;
        match n.cmp(&0) {
            std::cmp::Ordering::Less => indebted += v,
            std::cmp::Ordering::Equal => zero = v,
            std::cmp::Ordering::Greater => rich += v,
        }
    }
    (rich, indebted, zero)
}

fn rates_for(phase: Phase, offset: i64, values: &[f64]) -> Result<Rates> {
    match phase {
        Phase::PhaseI => Ok(Rates::Free),
        Phase::PhaseII => {
            let (r, d, p0) = sums(offset, values);
            if r + p0 < DEGENERACY_FLOOR {
                return Err(Error::DegenerateDistribution {
                    what: "r + p_0",
                    value: r + p0,
                });
            }
            if d + p0 < DEGENERACY_FLOOR {
                return Err(Error::DegenerateDistribution {
                    what: "d + p_0",
                    value: d + p0,
                });
            }
            let up = r / (r + p0);
            Ok(Rates::Banked {
                up,
                down_nonpositive: up * d / (d + p0),
            })
        }
        Phase::Vanilla => {
            let (r, _, _) = sums(offset, values);
            Ok(Rates::BankFree { up: r })
        }
    }
}

/// Writes `scale * Q[p]` into `out`, with zero flux across the window edges.
fn apply_into(rates: Rates, offset: i64, values: &[f64], scale: f64, out: &mut [f64]) {
    debug_assert_eq!(values.len(), out.len());
    out.fill(0.0);
    let len = values.len();
    if len < 2 {
        return;
    }
    let mut edge = |k: usize, up: f64, down: f64| {
        let flux = scale * (up * values[k] - down * values[k + 1]);
        out[k] -= flux;
        out[k + 1] += flux;
    };
    match rates {
        Rates::Free => (0..len - 1).for_each(|k| edge(k, 1.0, 1.0)),
        Rates::Banked {
            up,
            down_nonpositive,
        } => {
            // Edge (n, n+1) uses the down-rate of n+1.
            for k in 0..len - 1 {
                let upper = offset + k as i64 + 1;
                let down = if upper >= 1 { 1.0 } else { down_nonpositive };
                edge(k, up, down);
            }
        }
        Rates::BankFree { up } => {
            for k in 0..len - 1 {
                if offset + (k as i64) >= 0 {
                    edge(k, up, 1.0);
                }
            }
        }
    }
}

fn apply_padded(phase: Phase, p: &WealthPmf) -> Result<RateVector> {
    let padded = if phase == Phase::Vanilla {
        p.padded(if p.n_min() > 0 { 1 } else { 0 }, 1)
    } else {
        p.padded(1, 1)
    };
    let rates = rates_for(phase, padded.offset(), padded.probs())?;
    let mut out = vec![0.0; padded.len()];
    apply_into(rates, padded.offset(), padded.probs(), 1.0, &mut out);
    Ok(RateVector::new(padded.offset(), out))
}

/// Operator on the window of `p` itself, with zero flux across its edges.
pub(crate) fn apply_in_window(phase: Phase, p: &WealthPmf) -> Result<RateVector> {
    let rates = rates_for(phase, p.offset(), p.probs())?;
    let mut out = vec![0.0; p.len()];
    apply_into(rates, p.offset(), p.probs(), 1.0, &mut out);
    Ok(RateVector::new(p.offset(), out))
}

/// Phase I operator `Q1[p]_n = p_{n+1} + p_{n-1} - 2 p_n`, on the window
/// widened by one slot on each side.
pub fn q1_apply(p: &WealthPmf) -> RateVector {
    apply_padded(Phase::PhaseI, p).expect("Q1 has no failure modes")
}

/// Phase II operator, with `r`, `d` and `p_0` read from `p`.
pub fn q2_apply(p: &WealthPmf) -> Result<RateVector> {
    apply_padded(Phase::PhaseII, p)
}

/// Operator of the bank-free model on `n ≥ 0`.
pub fn q_vanilla_apply(q: &WealthPmf) -> Result<RateVector> {
    if let Some((n, v)) = q.iter().find(|&(n, v)| n < 0 && v > 0.0) {
        return Err(Error::NegativeSupport { n, p: v });
    }
    let q = if q.n_min() < 0 {
        let start = (-q.n_min()) as usize;
        WealthPmf::from_parts_unchecked(0, q.probs()[start..].to_vec())
    } else {
        q.clone()
    };
    apply_padded(Phase::Vanilla, &q)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldState {
    pmf: WealthPmf,
    time: f64,
    phase: Phase,
    accumulated_debt: f64,
    t_star: Option<f64>,
}

impl MeanFieldState {
    pub fn new(pmf: WealthPmf, time: f64, phase: Phase) -> Self {
        let accumulated_debt = debt(&pmf);
        Self {
            pmf,
            time,
            phase,
            accumulated_debt,
            t_star: None,
        }
    }

    pub fn with_t_star(mut self, t_star: f64) -> Self {
        self.t_star = Some(t_star);
        self
    }

    pub fn pmf(&self) -> &WealthPmf {
        &self.pmf
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn accumulated_debt(&self) -> f64 {
        self.accumulated_debt
    }

    pub fn t_star(&self) -> Option<f64> {
        self.t_star
    }
}

/// Scratch buffers reused across steps.
#[derive(Default)]
struct Workspace {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    stage: Vec<f64>,
}

impl Workspace {
    fn resize(&mut self, len: usize) {
        for v in [
            &mut self.k1,
            &mut self.k2,
            &mut self.k3,
            &mut self.k4,
            &mut self.stage,
        ] {
            v.resize(len, 0.0);
        }
    }
}

/// Buffer being integrated, on a window `[offset, offset + len)`.
struct Grid {
    offset: i64,
    values: Vec<f64>,
    phase: Phase,
    clamped: u64,
}

impl Grid {
    fn from_pmf(p: &WealthPmf, phase: Phase) -> Self {
        Self {
            offset: p.offset(),
            values: p.probs().to_vec(),
            phase,
            clamped: 0,
        }
    }

    fn to_pmf(&self) -> WealthPmf {
        WealthPmf::from_parts_unchecked(self.offset, self.values.clone())
    }

    fn slice(&self) -> GridRef<'_> {
        GridRef {
            offset: self.offset,
            values: &self.values,
        }
    }

    /// Resizes the window to `[lo, hi]`, which must contain the current one.
    fn widen_to(&mut self, lo: i64, hi: i64) {
        let left = (self.offset - lo) as usize;
        let mut values = vec![0.0; (hi - lo + 1) as usize];
        values[left..left + self.values.len()].copy_from_slice(&self.values);
        self.values = values;
        self.offset = lo;
    }

    /// Widens by 25% on every side whose boundary slot exceeds the threshold.
    fn ensure_window(&mut self, cfg: &IntegratorConfig) -> Result<bool> {
        let len = self.values.len();
        let grow = (len / 4).max(8) as i64;
        let left_full = self.values[0] > cfg.tail_threshold
            && !(self.phase == Phase::Vanilla && self.offset <= 0);
        let right_full = self.values[len - 1] > cfg.tail_threshold;
        if !left_full && !right_full {
            return Ok(false);
        }
        let mut lo = self.offset;
        let mut hi = self.offset + len as i64 - 1;
        if left_full {
            lo -= grow;
            if self.phase == Phase::Vanilla {
                lo = lo.max(0);
            }
        }
        if right_full {
            hi += grow;
        }
        let width = (hi - lo + 1) as usize;
        if width > cfg.max_window {
            return Err(Error::TailOverflow {
                width,
                cap: cfg.max_window,
            });
        }
        debug!("window extended to [{lo}, {hi}]");
        self.widen_to(lo, hi);
        Ok(true)
    }

    /// One explicit step of size `h`, in place.
    fn advance(&mut self, h: f64, cfg: &IntegratorConfig, ws: &mut Workspace) -> Result<()> {
        let len = self.values.len();
        ws.resize(len);
        let offset = self.offset;
        let phase = self.phase;
        let scale = cfg.lambda;
        let rates = rates_for(phase, offset, &self.values)?;
        apply_into(rates, offset, &self.values, scale, &mut ws.k1);
        match cfg.scheme {
            Scheme::Euler => {
                for (v, k) in self.values.iter_mut().zip(&ws.k1) {
                    *v += h * k;
                }
            }
            Scheme::Rk4 => {
                let stage = |base: &[f64], k: &[f64], c: f64, out: &mut Vec<f64>| {
                    for ((o, b), kk) in out.iter_mut().zip(base).zip(k) {
                        *o = b + c * kk;
                    }
                };
                stage(&self.values, &ws.k1, 0.5 * h, &mut ws.stage);
                let r = rates_for(phase, offset, &ws.stage)?;
                apply_into(r, offset, &ws.stage, scale, &mut ws.k2);
                stage(&self.values, &ws.k2, 0.5 * h, &mut ws.stage);
                let r = rates_for(phase, offset, &ws.stage)?;
                apply_into(r, offset, &ws.stage, scale, &mut ws.k3);
                stage(&self.values, &ws.k3, h, &mut ws.stage);
                let r = rates_for(phase, offset, &ws.stage)?;
                apply_into(r, offset, &ws.stage, scale, &mut ws.k4);
                let sixth = h / 6.0;
                for i in 0..len {
                    self.values[i] +=
                        sixth * (ws.k1[i] + 2.0 * ws.k2[i] + 2.0 * ws.k3[i] + ws.k4[i]);
                }
            }
        }
        self.clean_up();
        Ok(())
    }

    /// Clamps round-off negatives and removes the accumulated mass drift.
    fn clean_up(&mut self) {
        for v in self.values.iter_mut() {
            if *v < 0.0 {
                if *v < NEGATIVITY_WARNING {
                    warn!("clamping negative probability {v:e}");
                }
                *v = 0.0;
                self.clamped += 1;
            }
        }
        let total: f64 = self.values.iter().sum();
        if total > 0.0 && total != 1.0 {
            let inv = 1.0 / total;
            self.values.iter_mut().for_each(|v| *v *= inv);
        }
    }
}

struct GridRef<'a> {
    offset: i64,
    values: &'a [f64],
}

impl Lattice for GridRef<'_> {
    fn offset(&self) -> i64 {
        self.offset
    }
    fn values(&self) -> &[f64] {
        self.values
    }
}

/// One explicit step of `∂_t p = λ Q_phase[p]`.
///
/// The window is widened first when a boundary slot exceeds the tail
/// threshold. The phase is not switched here; see [`integrate_two_phase`].
pub fn step(state: &MeanFieldState, cfg: &IntegratorConfig) -> Result<MeanFieldState> {
    cfg.validate()?;
    let mut grid = Grid::from_pmf(state.pmf(), state.phase);
    grid.ensure_window(cfg)?;
    let mut ws = Workspace::default();
    grid.advance(cfg.dt, cfg, &mut ws)?;
    let mut next = MeanFieldState::new(grid.to_pmf(), state.time + cfg.dt, state.phase);
    next.t_star = state.t_star;
    Ok(next)
}

/// First time a non-decreasing debt series reaches `threshold`.
///
/// The bracketing pair of samples is found by bisection over the series and
/// the crossing is placed by linear interpolation inside it.
pub fn detect_t_star(samples: &[(f64, f64)], threshold: f64) -> Result<f64> {
    let Some(&(t_last, _)) = samples.last() else {
        return Err(Error::InsufficientData("empty debt series".into()));
    };
    let k = samples.partition_point(|&(_, d)| d < threshold);
    if k == samples.len() {
        return Err(Error::HorizonExceeded {
            threshold,
            t_end: t_last,
        });
    }
    if k == 0 {
        return Ok(samples[0].0);
    }
    let (t0, d0) = samples[k - 1];
    let (t1, d1) = samples[k];
    if d1 == d0 {
        return Ok(t1);
    }
    Ok(t0 + (threshold - d0) / (d1 - d0) * (t1 - t0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanFieldRecord {
    pub t: f64,
    pub phase: Phase,
    pub mass: f64,
    pub mean: f64,
    pub debt: f64,
    pub dkl_to_eq: f64,
    pub gini: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowChange {
    pub t: f64,
    pub n_min: i64,
    pub n_max: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanFieldSnapshot {
    pub t: f64,
    pub pmf: WealthPmf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanFieldTrajectory {
    pub records: Vec<MeanFieldRecord>,
    #[serde(skip)]
    pub snapshots: Vec<MeanFieldSnapshot>,
    pub t_star: Option<f64>,
    pub window_history: Vec<WindowChange>,
    /// Number of negative round-off entries that were clamped to zero.
    pub clamped_entries: u64,
}

impl MeanFieldTrajectory {
    /// `(t, D_KL)` rows recorded at or after `t_from`.
    pub fn dkl_series(&self, t_from: f64) -> Vec<(f64, f64)> {
        self.records
            .iter()
            .filter(|r| r.t >= t_from)
            .map(|r| (r.t, r.dkl_to_eq))
            .collect()
    }
}

/// Point mass at μ, or the two-point law on `⌊μ⌋, ⌈μ⌉` with mean μ when μ
/// is not an integer.
pub fn point_mass_at_mean(mu: f64) -> WealthPmf {
    let lo = mu.floor();
    let frac = mu - lo;
    if frac == 0.0 {
        WealthPmf::delta(lo as i64)
    } else {
        WealthPmf::from_parts_unchecked(lo as i64, vec![1.0 - frac, frac])
    }
}

fn initial_window(p0: &WealthPmf, params: &ModelParams, cfg: &IntegratorConfig, phase: Phase) -> (i64, i64) {
    let spread = 6.0 * cfg.t_end.max(1.0).sqrt();
    let mut lo = ((params.mu - spread).floor() as i64).min(p0.n_min());
    let mut hi = ((params.mu + spread).ceil() as i64).max(p0.n_max());
    if phase == Phase::Vanilla {
        lo = lo.max(0);
    }
    let width = (hi - lo + 1) as usize;
    if width > cfg.max_window {
        let excess = (width - cfg.max_window) as i64;
        lo = (lo + excess / 2).min(p0.n_min());
        hi = (lo + cfg.max_window as i64 - 1).max(p0.n_max());
    }
    (lo, hi)
}

struct Recorder<'a> {
    eq: &'a EquilibriumSpec,
    traj: MeanFieldTrajectory,
    next_record: f64,
    next_snapshot: usize,
    stride: f64,
    snapshot_times: &'a [f64],
}

impl Recorder<'_> {
    fn observe(&mut self, grid: &Grid, t: f64, tol: f64, force: bool) -> Result<()> {
        let view = grid.slice();
        if force || t >= self.next_record - tol {
            let pmf = grid.to_pmf();
            self.traj.records.push(MeanFieldRecord {
                t,
                phase: grid.phase,
                mass: mass(&view),
                mean: mean(&view),
                debt: debt(&view),
                dkl_to_eq: kl_to_equilibrium(&view, self.eq)?,
                gini: gini(&pmf)?,
            });
            while self.next_record <= t + tol {
                self.next_record += self.stride;
            }
        }
        while self.next_snapshot < self.snapshot_times.len()
            && self.snapshot_times[self.next_snapshot] <= t + tol
        {
            self.traj.snapshots.push(MeanFieldSnapshot {
                t,
                pmf: grid.to_pmf(),
            });
            self.next_snapshot += 1;
        }
        Ok(())
    }
}

/// Integrates Phase I until the average debt reaches `μν`, then Phase II
/// until `t_end`; `ν = 0` runs the bank-free model from the start.
///
/// The crossing time is located inside the bracketing step by bisection on
/// the step size followed by linear interpolation. The state is advanced to
/// `t*` with Q1, the operator is switched, and the rest of that step uses Q2
/// so the time grid stays on multiples of `dt`.
pub fn integrate_two_phase(
    p0: &WealthPmf,
    params: &ModelParams,
    cfg: &IntegratorConfig,
) -> Result<(MeanFieldTrajectory, MeanFieldState)> {
    params.validate()?;
    cfg.validate()?;
    let threshold = params.debt_limit();
    let eq = equilibrium_spec(params.mu, params.nu)?;

    let (phase, t_star) = if params.nu == 0.0 {
        if let Some((n, v)) = p0.iter().find(|&(n, v)| n < 0 && v > 0.0) {
            return Err(Error::NegativeSupport { n, p: v });
        }
        (Phase::Vanilla, Some(0.0))
    } else if debt(p0) >= threshold - PHASE_TWO_START_SLACK {
        (Phase::PhaseII, Some(0.0))
    } else {
        (Phase::PhaseI, None)
    };

    let mut grid = Grid::from_pmf(&p0.trimmed(), phase);
    let (lo, hi) = initial_window(p0, params, cfg, phase);
    grid.widen_to(lo.min(grid.offset), hi.max(grid.offset + grid.values.len() as i64 - 1));

    let tol = 1e-9 * cfg.dt;
    let mut rec = Recorder {
        eq: &eq,
        traj: MeanFieldTrajectory {
            records: Vec::new(),
            snapshots: Vec::new(),
            t_star,
            window_history: vec![WindowChange {
                t: 0.0,
                n_min: grid.offset,
                n_max: grid.offset + grid.values.len() as i64 - 1,
            }],
            clamped_entries: 0,
        },
        next_record: 0.0,
        next_snapshot: 0,
        stride: cfg.record_stride,
        snapshot_times: &cfg.snapshot_times,
    };
    rec.observe(&grid, 0.0, tol, true)?;

    let mut ws = Workspace::default();
    let full_steps = (cfg.t_end / cfg.dt - 1e-9).ceil().max(0.0) as u64;
    let mut t = 0.0;
    for k in 0..full_steps {
        if grid.ensure_window(cfg)? {
            rec.traj.window_history.push(WindowChange {
                t,
                n_min: grid.offset,
                n_max: grid.offset + grid.values.len() as i64 - 1,
            });
        }
        let t_next = ((k + 1) as f64 * cfg.dt).min(cfg.t_end);
        let h = t_next - t;
        if grid.phase == Phase::PhaseI {
            let before = debt(&grid.slice());
            let saved = grid.values.clone();
            grid.advance(h, cfg, &mut ws)?;
            let after = debt(&grid.slice());
            if after >= threshold {
                grid.values = saved;
                let h_star = locate_crossing(&mut grid, h, before, threshold, cfg, &mut ws)?;
                let crossing = t + h_star;
                debug!("debt limit reached at t* = {crossing}");
                rec.traj.t_star = Some(crossing);
                grid.phase = Phase::PhaseII;
                if h - h_star > 0.0 {
                    grid.advance(h - h_star, cfg, &mut ws)?;
                }
            }
        } else {
            grid.advance(h, cfg, &mut ws)?;
        }
        t = t_next;
        rec.observe(&grid, t, tol, k + 1 == full_steps)?;
    }

    rec.traj.clamped_entries = grid.clamped;
    let t_star = rec.traj.t_star;
    let mut state = MeanFieldState::new(grid.to_pmf(), t, grid.phase);
    state.t_star = t_star;
    Ok((rec.traj, state))
}

/// Finds the sub-step `h*` at which Phase I debt reaches `threshold` and
/// leaves `grid` advanced by `h*`.
fn locate_crossing(
    grid: &mut Grid,
    h: f64,
    debt_before: f64,
    threshold: f64,
    cfg: &IntegratorConfig,
    ws: &mut Workspace,
) -> Result<f64> {
    let start = grid.values.clone();
    let debt_after = |grid: &mut Grid, sub: f64, ws: &mut Workspace| -> Result<f64> {
        grid.values.copy_from_slice(&start);
        grid.advance(sub, cfg, ws)?;
        Ok(debt(&grid.slice()))
    };
    let (mut lo, mut hi) = (0.0, h);
    let (mut d_lo, mut d_hi) = (debt_before, debt_after(grid, h, ws)?);
    for _ in 0..BISECTION_ITERATIONS {
        let mid = 0.5 * (lo + hi);
        let d_mid = debt_after(grid, mid, ws)?;
        if d_mid >= threshold {
            hi = mid;
            d_hi = d_mid;
        } else {
            lo = mid;
            d_lo = d_mid;
        }
    }
    let h_star = if d_hi > d_lo {
        lo + (threshold - d_lo) / (d_hi - d_lo) * (hi - lo)
    } else {
        hi
    };
    debt_after(grid, h_star, ws)?;
    Ok(h_star)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::{equilibrium_pmf, EquilibriumWindow};
    use proptest::prelude::*;

    fn pmf(pairs: &[(i64, f64)]) -> WealthPmf {
        WealthPmf::from_pairs(pairs).unwrap()
    }

    fn assert_rates(v: &RateVector, expected: &[(i64, f64)]) {
        for &(n, e) in expected {
            assert!((v.get(n) - e).abs() < 1e-15, "n = {n}: {} vs {e}", v.get(n));
        }
        let covered: f64 = expected.iter().map(|&(n, _)| v.get(n).abs()).sum();
        assert!((v.l1_norm() - covered).abs() < 1e-15, "unexpected extra entries: {v:?}");
    }

    #[test]
    fn q1_examples() {
        let v = q1_apply(&WealthPmf::delta(0));
        assert_rates(&v, &[(-1, 1.0), (0, -2.0), (1, 1.0)]);
        let v = q1_apply(&pmf(&[(0, 0.5), (1, 0.5)]));
        assert_rates(&v, &[(-1, 0.5), (0, -0.5), (1, -0.5), (2, 0.5)]);
        let flat = WealthPmf::normalized(-20, vec![1.0; 41]).unwrap();
        let v = q1_apply(&flat);
        for n in -19..=19 {
            assert!(v.get(n).abs() < 1e-17);
        }
    }

    #[test]
    fn q2_three_point_example() {
        let (d, p0, r) = (0.2, 0.3, 0.5);
        let v = q2_apply(&pmf(&[(-1, d), (0, p0), (1, r)])).unwrap();
        let a = r / (r + p0);
        let b = r * d / ((r + p0) * (d + p0));
        // Direct substitution into the three branches.
        let expected = [
            (-2, a * 0.0 + b * d),
            (-1, b * p0 + a * 0.0 - (b + a) * d),
            (0, r + a * d - (b + a) * p0),
            (1, 0.0 + a * p0 - (1.0 + a) * r),
            (2, a * r),
        ];
        assert_rates(&v, &expected);
        assert!((v.get(1) - (0.0 + (0.5 / 0.8) * 0.3 - (1.0 + 0.5 / 0.8) * 0.5)).abs() < 1e-16);
    }

    #[test]
    fn q2_annihilates_equilibrium() {
        let (_, p) = equilibrium_pmf(10.0, 0.4, &EquilibriumWindow::default()).unwrap();
        assert!(q2_apply(&p).unwrap().l1_norm() < 1e-12);
    }

    #[test]
    fn q2_degenerate() {
        let err = q2_apply(&WealthPmf::delta(-3)).unwrap_err();
        assert!(matches!(err, Error::DegenerateDistribution { .. }));
        let err = q2_apply(&WealthPmf::delta(4)).unwrap_err();
        assert!(matches!(err, Error::DegenerateDistribution { what: "d + p_0", .. }));
    }

    #[test]
    fn q_vanilla_examples() {
        let v = q_vanilla_apply(&WealthPmf::delta(0)).unwrap();
        assert_eq!(v.l1_norm(), 0.0);
        let a: f64 = 10.0 / 11.0;
        let geo: Vec<f64> = (0..700).map(|n| (1.0 - a) * a.powi(n)).collect();
        let q = WealthPmf::normalized(0, geo).unwrap();
        let v = q_vanilla_apply(&q).unwrap();
        // The truncated tail beyond n = 700 is below 1e-29.
        assert!(v.l1_norm() < 1e-12, "{}", v.l1_norm());
        let v = q_vanilla_apply(&pmf(&[(0, 0.5), (1, 0.5)])).unwrap();
        assert_rates(&v, &[(0, 0.25), (1, -0.5), (2, 0.25)]);
        assert!(matches!(
            q_vanilla_apply(&pmf(&[(-1, 0.5), (1, 0.5)])),
            Err(Error::NegativeSupport { n: -1, .. })
        ));
    }

    #[test]
    fn euler_step_from_point_mass() {
        let params = ModelParams::new(1, 10.0, 0.4, 1.5).unwrap();
        let mut cfg = IntegratorConfig::new(&params, 1.0);
        cfg.scheme = Scheme::Euler;
        cfg.dt = 1e-3;
        let s = MeanFieldState::new(WealthPmf::delta(10), 0.0, Phase::PhaseI);
        let next = step(&s, &cfg).unwrap();
        let p = next.pmf();
        let ldt = 1.5e-3;
        assert!((p.get(10) - (1.0 - 2.0 * ldt)).abs() < 1e-15);
        assert!((p.get(9) - ldt).abs() < 1e-15);
        assert!((p.get(11) - ldt).abs() < 1e-15);
        assert!((next.time() - 1e-3).abs() < 1e-18);
    }

    #[test]
    fn step_conserves_mass_and_mean() {
        let params = ModelParams::new(1, 3.0, 0.5, 1.0).unwrap();
        let cfg = IntegratorConfig::new(&params, 1.0);
        let p = pmf(&[(-2, 0.1), (-1, 0.1), (0, 0.2), (2, 0.2), (5, 0.2), (9, 0.2)]).padded(12, 12);
        for phase in [Phase::PhaseI, Phase::PhaseII] {
            let mut s = MeanFieldState::new(p.clone(), 0.0, phase);
            let m0 = mean(s.pmf());
            for _ in 0..100 {
                let next = step(&s, &cfg).unwrap();
                assert!((mass(next.pmf()) - 1.0).abs() < 1e-12);
                assert!((mean(next.pmf()) - mean(s.pmf())).abs() < 1e-12);
                s = next;
            }
            assert!((mean(s.pmf()) - m0).abs() < 1e-11);
        }
    }

    #[test]
    fn window_extends_when_boundary_is_heavy() {
        let params = ModelParams::new(1, 5.0, 0.4, 1.0).unwrap();
        let cfg = IntegratorConfig::new(&params, 1.0);
        let s = MeanFieldState::new(WealthPmf::delta(5), 0.0, Phase::PhaseI);
        let next = step(&s, &cfg).unwrap();
        assert!(next.pmf().len() > 1);
        assert!(next.pmf().n_min() < 5 && next.pmf().n_max() > 5);
        let mut tight = cfg.clone();
        tight.max_window = 4;
        assert!(matches!(step(&s, &tight), Err(Error::TailOverflow { .. })));
    }

    #[test]
    fn detect_t_star_examples() {
        let linear: Vec<(f64, f64)> = (0..=10).map(|k| (k as f64 * 0.7, k as f64 * 0.35)).collect();
        let t = detect_t_star(&linear, 1.0).unwrap();
        assert!((t - 2.0).abs() < 1e-14);
        assert_eq!(detect_t_star(&linear, 0.0).unwrap(), 0.0);
        assert!(matches!(
            detect_t_star(&linear, 100.0),
            Err(Error::HorizonExceeded { .. })
        ));
        assert!(detect_t_star(&[], 1.0).is_err());
    }

    #[test]
    fn zero_nu_runs_bank_free_model() {
        let params = ModelParams::new(1, 2.0, 0.0, 1.0).unwrap();
        let cfg = IntegratorConfig::new(&params, 20.0);
        let (traj, state) = integrate_two_phase(&WealthPmf::delta(2), &params, &cfg).unwrap();
        assert_eq!(state.phase(), Phase::Vanilla);
        assert!(traj.records.iter().all(|r| r.phase == Phase::Vanilla));
        assert!(state.pmf().n_min() >= 0);
        assert_eq!(traj.t_star, Some(0.0));
    }

    #[test]
    fn short_horizon_stays_in_phase_one() {
        let params = ModelParams::new(1, 10.0, 0.4, 1.0).unwrap();
        let cfg = IntegratorConfig::new(&params, 5.0);
        let (traj, state) = integrate_two_phase(&WealthPmf::delta(10), &params, &cfg).unwrap();
        assert_eq!(state.phase(), Phase::PhaseI);
        assert!(state.t_star().is_none());
        assert!(traj.t_star.is_none());
        assert_eq!(traj.records.len(), 6);
        assert!((state.time() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn phase_switch_happens_at_debt_limit() {
        let params = ModelParams::new(1, 2.0, 0.25, 1.0).unwrap();
        let mut cfg = IntegratorConfig::new(&params, 30.0);
        cfg.snapshot_times = vec![5.0, 30.0];
        let (traj, state) = integrate_two_phase(&WealthPmf::delta(2), &params, &cfg).unwrap();
        let t_star = traj.t_star.expect("crosses");
        assert_eq!(state.phase(), Phase::PhaseII);
        // Phase II preserves the debt at the limit.
        for r in traj.records.iter().filter(|r| r.phase == Phase::PhaseII) {
            assert!((r.debt - 0.5).abs() < 1e-9, "debt {} at t = {}", r.debt, r.t);
        }
        let samples: Vec<(f64, f64)> = traj.records.iter().map(|r| (r.t, r.debt)).collect();
        let coarse = detect_t_star(&samples, 0.5 - 1e-9).unwrap();
        assert!((coarse - t_star).abs() < 1.0);
        assert_eq!(traj.snapshots.len(), 2);
        assert!((state.accumulated_debt() - debt(state.pmf())).abs() < 1e-9);
    }

    #[test]
    fn phase_two_start_when_already_at_limit() {
        let params = ModelParams::new(1, 10.0, 0.4, 1.0).unwrap();
        let (_, p) = equilibrium_pmf(10.0, 0.4, &EquilibriumWindow::default()).unwrap();
        let cfg = IntegratorConfig::new(&params, 2.0);
        let (traj, state) = integrate_two_phase(&p, &params, &cfg).unwrap();
        assert_eq!(traj.t_star, Some(0.0));
        assert_eq!(state.phase(), Phase::PhaseII);
        assert!(lp_inf(state.pmf(), &p) < 1e-12);
    }

    fn lp_inf(a: &WealthPmf, b: &WealthPmf) -> f64 {
        let lo = a.n_min().min(b.n_min());
        let hi = a.n_max().max(b.n_max());
        (lo..=hi).map(|n| (a.get(n) - b.get(n)).abs()).fold(0.0, f64::max)
    }

    fn arb_pmf() -> impl Strategy<Value = WealthPmf> {
        (-8i64..4, prop::collection::vec(0.0f64..1.0, 3..16)).prop_filter_map(
            "needs positive weight",
            |(offset, w)| WealthPmf::normalized(offset, w).ok(),
        )
    }

    proptest! {
        #[test]
        fn operators_annihilate_mass_and_mean(p in arb_pmf()) {
            let q1 = q1_apply(&p);
            prop_assert!(mass(&q1).abs() < 1e-13);
            prop_assert!(mean(&q1).abs() < 1e-13);
            // dD/dt = p_0 in Phase I.
            prop_assert!((debt(&q1) - p.get(0)).abs() < 1e-13);
            if let Ok(q2) = q2_apply(&p) {
                prop_assert!(mass(&q2).abs() < 1e-13);
                prop_assert!(mean(&q2).abs() < 1e-13);
                let nonpositive_moment: f64 = q2.iter().filter(|&(n, _)| n <= 0).map(|(n, v)| n as f64 * v).sum();
                prop_assert!(nonpositive_moment.abs() < 1e-13);
            }
            let shifted = WealthPmf::from_parts_unchecked(p.n_min() - p.n_min().min(0), p.probs().to_vec());
            let qv = q_vanilla_apply(&shifted).unwrap();
            prop_assert!(mass(&qv).abs() < 1e-13);
            prop_assert!(mean(&qv).abs() < 1e-13);
        }
    }
}
