//! Dispatches a resolved configuration to the owning module and writes its
//! CSV/JSON outputs plus `manifest.json` into the output directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::abm::{self, GENERATOR_NAME};
use crate::compare::{compare_abm_meanfield, CompareConfig};
use crate::config::{ExperimentConfig, Mode};
use crate::equilibrium::{
    compare_gini_vs_vanilla, equilibrium_pmf, fit_sqrt_exponential_decay, laplace_params,
    linearization_report, DecayFit, EquilibriumWindow,
};
use crate::error::Result;
use crate::io::{self, EquilibriumReport};
use crate::meanfield::{integrate_two_phase, point_mass_at_mean, Phase, Scheme, WindowChange};
use crate::params::ModelParams;

#[derive(Debug, Clone, Serialize)]
struct Manifest<'a> {
    version: &'static str,
    mode: &'static str,
    config: &'a ExperimentConfig,
    seed: u64,
    generator: &'static str,
    timings: Timings,
    files: Vec<String>,
}

#[derive(Debug, Clone, Copy, Serialize)]
struct Timings {
    run_seconds: f64,
    total_seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
struct FinalObservables {
    event: u64,
    time: f64,
    bank_cash: f64,
    bank_debt: f64,
    total_agent_debt: f64,
    gini: f64,
}

#[derive(Debug, Clone, Serialize)]
struct AbmSummary {
    params: ModelParams,
    seeds: Vec<u64>,
    generator: &'static str,
    wall_clock_seconds: f64,
    depletion_events: Vec<Option<u64>>,
    r#final: FinalObservables,
}

#[derive(Debug, Clone, Serialize)]
struct MeanFieldReport<'a> {
    params: ModelParams,
    t_star: Option<f64>,
    scheme: Scheme,
    dt: f64,
    t_end: f64,
    window_history: &'a [WindowChange],
    clamped_entries: u64,
    /// Fit of the Phase II relative entropy, when enough samples exist.
    decay_fit: Option<DecayFit>,
}

#[derive(Debug, Clone, Serialize)]
struct GiniSweepReport {
    mu: f64,
    nu: f64,
    t_end: f64,
    t_star: Option<f64>,
    max_banked: f64,
    max_vanilla: f64,
    min_difference: f64,
    exceeds_one: bool,
}

/// Files written by a run, relative to the output directory.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub files: Vec<String>,
}

struct Output<'a> {
    dir: &'a Path,
    files: Vec<String>,
}

impl Output<'_> {
    fn path(&mut self, name: String) -> PathBuf {
        let p = self.dir.join(&name);
        self.files.push(name);
        p
    }
}

/// Runs one experiment. Every file is written only after its computation
/// succeeded; `manifest.json` is written last.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let started = Instant::now();
    std::fs::create_dir_all(&cfg.out)?;
    let mut out = Output {
        dir: &cfg.out,
        files: Vec::new(),
    };
    let params = cfg.model_params();
    let run_started = Instant::now();
    match cfg.mode {
        Mode::Abm => run_abm(cfg, &mut out)?,
        Mode::Meanfield => run_meanfield(cfg, &params, &mut out)?,
        Mode::Equilibrium => {
            let (spec, pmf) = equilibrium_pmf(cfg.mu, cfg.nu, &EquilibriumWindow::default())?;
            let laplace = (cfg.nu > 0.0).then(|| laplace_params(cfg.mu, cfg.nu)).transpose()?;
            io::save_json(&out.path("equilibrium.json".into()), &EquilibriumReport::new(&spec, laplace))?;
            io::save_pmf_csv(&out.path("equilibrium_pmf.csv".into()), &pmf)?;
        }
        Mode::Linearize => {
            let report = linearization_report(cfg.mu, cfg.nu)?;
            io::save_json(&out.path("linearization.json".into()), &report)?;
        }
        Mode::GiniSweep => {
            let cmp = compare_gini_vs_vanilla(cfg.mu, cfg.nu, cfg.t_end, &cfg.integrator_config())?;
            io::save_csv_with(&out.path("gini.csv".into()), |w| {
                let mut w = csv::Writer::from_writer(w);
                w.write_record(["t", "gini_banked", "gini_vanilla", "difference"])?;
                for i in 0..cmp.times.len() {
                    w.write_record([
                        io::format_f64(cmp.times[i]),
                        io::format_f64(cmp.banked[i]),
                        io::format_f64(cmp.vanilla[i]),
                        io::format_f64(cmp.difference[i]),
                    ])?;
                }
                w.flush()?;
                Ok(())
            })?;
            let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let report = GiniSweepReport {
                mu: cfg.mu,
                nu: cfg.nu,
                t_end: cfg.t_end,
                t_star: cmp.banked_t_star,
                max_banked: max(&cmp.banked),
                max_vanilla: max(&cmp.vanilla),
                min_difference: cmp.min_difference(),
                exceeds_one: max(&cmp.banked) > 1.0,
            };
            io::save_json(&out.path("gini_report.json".into()), &report)?;
        }
        Mode::Compare => {
            let mut ccfg = CompareConfig::new(params, cfg.replicas, cfg.seed, cfg.t_end);
            ccfg.integrator = cfg.integrator_config();
            let report = compare_abm_meanfield(&ccfg)?;
            io::save_json(&out.path("compare.json".into()), &report)?;
        }
    }
    let run_seconds = run_started.elapsed().as_secs_f64();

    let files = out.files.clone();
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        mode: cfg.mode.as_str(),
        config: cfg,
        seed: cfg.seed,
        generator: GENERATOR_NAME,
        timings: Timings {
            run_seconds,
            total_seconds: started.elapsed().as_secs_f64(),
        },
        files: files.clone(),
    };
    io::save_json(&cfg.out.join("manifest.json"), &manifest)?;
    Ok(RunOutcome {
        out_dir: cfg.out.clone(),
        files,
    })
}

fn run_abm(cfg: &ExperimentConfig, out: &mut Output<'_>) -> Result<()> {
    let run = cfg.run_config();
    let started = Instant::now();
    if cfg.replicas == 1 {
        let result = abm::run(&run)?;
        io::save_csv_with(&out.path("trajectory.csv".into()), |w| {
            io::write_abm_trajectory_csv(w, &result.trajectory)
        })?;
        for s in &result.snapshots {
            io::save_pmf_csv(&out.path(format!("pmf_{}.csv", s.event)), &s.pmf)?;
        }
        let last = result.trajectory.last().expect("row 0 is always recorded");
        let summary = AbmSummary {
            params: run.params,
            seeds: vec![run.seed],
            generator: GENERATOR_NAME,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
            depletion_events: vec![result.depletion_event],
            r#final: FinalObservables {
                event: last.event,
                time: last.time,
                bank_cash: last.bank_cash as f64,
                bank_debt: last.bank_debt as f64,
                total_agent_debt: last.total_agent_debt as f64,
                gini: last.gini,
            },
        };
        io::save_json(&out.path("summary.json".into()), &summary)?;
    } else {
        let result = abm::run_ensemble(&run, cfg.replicas)?;
        io::save_csv_with(&out.path("trajectory.csv".into()), |w| {
            io::write_mean_abm_trajectory_csv(w, &result.trajectory)
        })?;
        for s in &result.snapshots {
            io::save_pmf_csv(&out.path(format!("pmf_{}.csv", s.event)), &s.pmf)?;
        }
        let last = result.trajectory.last().expect("row 0 is always recorded");
        let summary = AbmSummary {
            params: run.params,
            seeds: result.seeds.clone(),
            generator: GENERATOR_NAME,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
            depletion_events: result.depletion_events.clone(),
            r#final: FinalObservables {
                event: last.event,
                time: last.time,
                bank_cash: last.bank_cash,
                bank_debt: last.bank_debt,
                total_agent_debt: last.total_agent_debt,
                gini: last.gini,
            },
        };
        io::save_json(&out.path("summary.json".into()), &summary)?;
    }
    Ok(())
}

fn run_meanfield(cfg: &ExperimentConfig, params: &ModelParams, out: &mut Output<'_>) -> Result<()> {
    let mut icfg = cfg.integrator_config();
    if cfg.t_end > 0.0 {
        icfg.snapshot_times = (1..=10).map(|k| cfg.t_end * k as f64 / 10.0).collect();
    }
    let (traj, state) = integrate_two_phase(&point_mass_at_mean(cfg.mu), params, &icfg)?;
    io::save_csv_with(&out.path("trajectory.csv".into()), |w| {
        io::write_meanfield_csv(w, &traj.records)
    })?;
    for s in &traj.snapshots {
        io::save_pmf_csv(&out.path(format!("pmf_t{}.csv", s.t)), &s.pmf)?;
    }
    io::save_pmf_csv(&out.path("pmf_final.csv".into()), state.pmf())?;

    let decay_fit = traj.t_star.and_then(|t_star| {
        let samples: Vec<(f64, f64)> = traj
            .records
            .iter()
            .filter(|r| r.phase != Phase::PhaseI && r.t >= t_star && r.dkl_to_eq > 0.0)
            .map(|r| (r.t, r.dkl_to_eq))
            .collect();
        fit_sqrt_exponential_decay(&samples).ok()
    });
    let report = MeanFieldReport {
        params: *params,
        t_star: traj.t_star,
        scheme: icfg.scheme,
        dt: icfg.dt,
        t_end: icfg.t_end,
        window_history: &traj.window_history,
        clamped_entries: traj.clamped_entries,
        decay_fit,
    };
    io::save_json(&out.path("meanfield_report.json".into()), &report)?;
    if let Some(fit) = &decay_fit {
        io::save_json(&out.path("decay_fit.json".into()), fit)?;
    }
    Ok(())
}
