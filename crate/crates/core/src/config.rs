//! Experiment configuration: defaults, named presets, a flat `key = value`
//! file and command-line flags, merged in that order.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::Serialize;

use crate::abm::{RunConfig, SnapshotSchedule};
use crate::error::Error;
use crate::meanfield::{IntegratorConfig, Scheme};
use crate::params::ModelParams;
use crate::pmf::DEFAULT_TAIL_THRESHOLD;

/// Every key accepted in a config file, identical to the long flags.
pub const KEYS: [&str; 15] = [
    "mode",
    "mu",
    "nu",
    "n-agents",
    "lambda",
    "events",
    "seed",
    "replicas",
    "dt",
    "scheme",
    "t-end",
    "tail-threshold",
    "out",
    "preset",
    "config",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Abm,
    Meanfield,
    Equilibrium,
    Linearize,
    GiniSweep,
    Compare,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Abm => "abm",
            Mode::Meanfield => "meanfield",
            Mode::Equilibrium => "equilibrium",
            Mode::Linearize => "linearize",
            Mode::GiniSweep => "gini-sweep",
            Mode::Compare => "compare",
        }
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "abm" => Mode::Abm,
            "meanfield" => Mode::Meanfield,
            "equilibrium" => Mode::Equilibrium,
            "linearize" => Mode::Linearize,
            "gini-sweep" => Mode::GiniSweep,
            "compare" => Mode::Compare,
            _ => {
                return Err(format!(
                    "unknown mode `{s}` (expected abm, meanfield, equilibrium, linearize, gini-sweep or compare)"
                ))
            }
        })
    }
}

/// Named reproductions of the three figure experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// ABM with N = 10000, μ = 10, ν = 0.4 for 10^7 events.
    Fig2,
    /// Mean-field run with μ = 10, ν = 0.4 up to t = 5000.
    Fig5,
    /// Gini comparison against the bank-free model, μ = 10, ν = 1, t = 5000.
    Fig6,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Fig2 => "fig2",
            Preset::Fig5 => "fig5",
            Preset::Fig6 => "fig6",
        }
    }

    fn entries(self) -> &'static [(&'static str, &'static str)] {
        match self {
            Preset::Fig2 => &[
                ("mode", "abm"),
                ("n-agents", "10000"),
                ("mu", "10"),
                ("nu", "0.4"),
                ("events", "10000000"),
            ],
            Preset::Fig5 => &[
                ("mode", "meanfield"),
                ("mu", "10"),
                ("nu", "0.4"),
                ("t-end", "5000"),
            ],
            Preset::Fig6 => &[
                ("mode", "gini-sweep"),
                ("mu", "10"),
                ("nu", "1"),
                ("t-end", "5000"),
            ],
        }
    }
}

impl FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fig2" => Ok(Preset::Fig2),
            "fig5" => Ok(Preset::Fig5),
            "fig6" => Ok(Preset::Fig6),
            _ => Err(format!("unknown preset `{s}` (expected fig2, fig5 or fig6)")),
        }
    }
}

/// A configuration problem tied to one key; the CLI exits with code 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config key `{}`: {}", self.key, self.message)
    }
}

impl std::error::Error for ConfigError {}

impl From<Error> for ConfigError {
    fn from(e: Error) -> Self {
        match &e {
            Error::InvalidParameter { name, reason } => ConfigError::new(*name, reason.clone()),
            other => ConfigError::new("config", other.to_string()),
        }
    }
}

/// Fully resolved experiment settings.
///
/// | key | default |
/// |---|---|
/// | `mode` | required |
/// | `mu` | 10 |
/// | `nu` | 0.4 |
/// | `n-agents` | 1000 |
/// | `lambda` | 1 |
/// | `events` | 1000000 |
/// | `seed` | 0 |
/// | `replicas` | 1 |
/// | `dt` | `0.01 min(1, 1/λ)` |
/// | `scheme` | rk4 |
/// | `t-end` | 100 |
/// | `tail-threshold` | 1e-14 |
/// | `out` | `out` |
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub mu: f64,
    pub nu: f64,
    pub n_agents: usize,
    pub lambda: f64,
    pub events: u64,
    pub seed: u64,
    pub replicas: usize,
    /// `None` selects `0.01 min(1, 1/λ)`.
    pub dt: Option<f64>,
    pub scheme: Scheme,
    pub t_end: f64,
    pub tail_threshold: f64,
    pub out: PathBuf,
    pub preset: Option<Preset>,
}

impl ExperimentConfig {
    fn defaults(mode: Mode) -> Self {
        Self {
            mode,
            mu: 10.0,
            nu: 0.4,
            n_agents: 1000,
            lambda: 1.0,
            events: 1_000_000,
            seed: 0,
            replicas: 1,
            dt: None,
            scheme: Scheme::Rk4,
            t_end: 100.0,
            tail_threshold: DEFAULT_TAIL_THRESHOLD,
            out: PathBuf::from("out"),
            preset: None,
        }
    }

    pub fn model_params(&self) -> ModelParams {
        ModelParams {
            n_agents: self.n_agents,
            mu: self.mu,
            nu: self.nu,
            lambda: self.lambda,
        }
    }

    /// ABM settings: uniform start at μ, a trajectory row per unit of time
    /// and ten evenly spaced PMF snapshots.
    pub fn run_config(&self) -> RunConfig {
        let mut run = RunConfig::new(self.model_params(), self.events, self.seed);
        if self.events >= 10 {
            let step = self.events / 10;
            run.snapshots = SnapshotSchedule::Events((1..=10).map(|k| k * step).collect());
        }
        run
    }

    pub fn integrator_config(&self) -> IntegratorConfig {
        let mut cfg = IntegratorConfig::new(&self.model_params(), self.t_end);
        if let Some(dt) = self.dt {
            cfg.dt = dt;
        }
        cfg.scheme = self.scheme;
        cfg.tail_threshold = self.tail_threshold;
        cfg
    }

    /// Range checks plus the mode-specific integrality requirements.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let params = self.model_params();
        params.validate()?;
        if self.replicas == 0 {
            return Err(ConfigError::new("replicas", "must be at least 1"));
        }
        match self.mode {
            Mode::Abm | Mode::Compare => {
                if params.n_agents < 2 {
                    return Err(ConfigError::new("n-agents", "the simulator needs at least 2 agents"));
                }
                params.total_money()?;
                params.bank_reserve()?;
                if self.mu.fract() != 0.0 {
                    return Err(ConfigError::new("mu", "agents start with μ dollars, so μ must be an integer"));
                }
            }
            Mode::Meanfield | Mode::GiniSweep => self.integrator_config().validate()?,
            Mode::Linearize if self.nu <= 0.0 => {
                return Err(ConfigError::new("nu", "linearization needs nu > 0"));
            }
            _ => {}
        }
        if self.mode == Mode::Compare {
            self.integrator_config().validate()?;
        }
        Ok(())
    }

    /// Flat `key = value` text that parses back to the same configuration.
    pub fn to_config_text(&self) -> String {
        let mut lines = vec![
            format!("mode = {}", self.mode.as_str()),
            format!("mu = {}", self.mu),
            format!("nu = {}", self.nu),
            format!("n-agents = {}", self.n_agents),
            format!("lambda = {}", self.lambda),
            format!("events = {}", self.events),
            format!("seed = {}", self.seed),
            format!("replicas = {}", self.replicas),
        ];
        if let Some(dt) = self.dt {
            lines.push(format!("dt = {dt}"));
        }
        lines.push(format!("scheme = {}", self.scheme));
        lines.push(format!("t-end = {}", self.t_end));
        lines.push(format!("tail-threshold = {}", self.tail_threshold));
        lines.push(format!("out = {}", self.out.display()));
        if let Some(p) = self.preset {
            lines.push(format!("preset = {}", p.as_str()));
        }
        lines.join("\n") + "\n"
    }
}

/// Parses flat `key = value` lines; blank lines and `#` comments are
/// ignored. Keys must be known and may appear once.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::new(
                line.to_string(),
                format!("line {}: expected `key = value`", lineno + 1),
            ));
        };
        let (key, value) = (key.trim(), value.trim());
        if !KEYS.contains(&key) || key == "config" {
            return Err(ConfigError::new(key, "unknown key"));
        }
        if out.insert(key.to_string(), value.to_string()).is_some() {
            return Err(ConfigError::new(key, "given more than once"));
        }
    }
    Ok(out)
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| ConfigError::new(key, format!("cannot parse `{value}`: {e}")))
}

/// Applies one layer of `key = value` settings on top of `cfg`.
fn apply(cfg: &mut ExperimentConfig, layer: &BTreeMap<String, String>) -> Result<(), ConfigError> {
    for (key, value) in layer {
        match key.as_str() {
            "mode" => cfg.mode = parse_value(key, value)?,
            "mu" => cfg.mu = parse_value(key, value)?,
            "nu" => cfg.nu = parse_value(key, value)?,
            "n-agents" => cfg.n_agents = parse_value(key, value)?,
            "lambda" => cfg.lambda = parse_value(key, value)?,
            "events" => cfg.events = parse_value(key, value)?,
            "seed" => cfg.seed = parse_value(key, value)?,
            "replicas" => cfg.replicas = parse_value(key, value)?,
            "dt" => cfg.dt = Some(parse_value(key, value)?),
            "scheme" => cfg.scheme = parse_value(key, value)?,
            "t-end" => cfg.t_end = parse_value(key, value)?,
            "tail-threshold" => cfg.tail_threshold = parse_value(key, value)?,
            "out" => cfg.out = PathBuf::from(value),
            "preset" => cfg.preset = Some(parse_value(key, value)?),
            "config" => {}
            other => return Err(ConfigError::new(other, "unknown key")),
        }
    }
    Ok(())
}

/// Merges defaults, the preset, the config file contents and the flags;
/// later layers win. `flags` holds the explicitly given flags keyed by their
/// long name. The preset may come from the flags or from the file.
pub fn resolve(
    file: Option<&BTreeMap<String, String>>,
    flags: &BTreeMap<String, String>,
) -> Result<ExperimentConfig, ConfigError> {
    let preset_text = flags
        .get("preset")
        .or_else(|| file.and_then(|f| f.get("preset")));
    let preset: Option<Preset> = preset_text.map(|p| parse_value("preset", p)).transpose()?;

    let mode_text = flags
        .get("mode")
        .or_else(|| file.and_then(|f| f.get("mode")))
        .map(String::as_str)
        .or_else(|| {
            preset.and_then(|p| p.entries().iter().find(|(k, _)| *k == "mode").map(|(_, v)| *v))
        });
    let Some(mode_text) = mode_text else {
        return Err(ConfigError::new("mode", "required (or give a preset)"));
    };
    let mut cfg = ExperimentConfig::defaults(parse_value("mode", mode_text)?);

    if let Some(p) = preset {
        let layer: BTreeMap<String, String> = p
            .entries()
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        apply(&mut cfg, &layer)?;
        cfg.preset = Some(p);
    }
    if let Some(file) = file {
        apply(&mut cfg, file)?;
    }
    apply(&mut cfg, flags)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parses a config file's text on its own, with no flags.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let file = parse_config_text(text)?;
    resolve(Some(&file), &BTreeMap::new())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn flags(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn equilibrium_from_flags_alone() {
        let cfg = resolve(None, &flags(&[("mode", "equilibrium"), ("mu", "10"), ("nu", "0.4")])).unwrap();
        assert_eq!(cfg.mode, Mode::Equilibrium);
        assert_eq!((cfg.mu, cfg.nu), (10.0, 0.4));
    }

    #[test]
    fn negative_nu_in_file_names_key() {
        let err = parse_config("mode = equilibrium\nnu = -1\n").unwrap_err();
        assert_eq!(err.key, "nu");
        assert!(err.to_string().contains(">= 0"));
    }

    #[test]
    fn preset_fig2_expands() {
        let cfg = resolve(None, &flags(&[("preset", "fig2")])).unwrap();
        assert_eq!(cfg.mode, Mode::Abm);
        assert_eq!(cfg.n_agents, 10_000);
        assert_eq!((cfg.mu, cfg.nu), (10.0, 0.4));
        assert_eq!(cfg.events, 10_000_000);
        assert_eq!(cfg.preset, Some(Preset::Fig2));
    }

    #[test]
    fn layers_override_in_order() {
        let file = parse_config_text("events = 500\nseed = 3\n").unwrap();
        let cfg = resolve(Some(&file), &flags(&[("preset", "fig2"), ("seed", "9")])).unwrap();
        assert_eq!(cfg.events, 500);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.n_agents, 10_000);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert_eq!(parse_config_text("speed = 3\n").unwrap_err().key, "speed");
        assert_eq!(parse_config_text("config = x\n").unwrap_err().key, "config");
        assert!(parse_config_text("mu 3\n").is_err());
        assert_eq!(parse_config_text("mu = 1\nmu = 2\n").unwrap_err().key, "mu");
        assert_eq!(parse_config("mu = 1\n").unwrap_err().key, "mode");
        assert_eq!(parse_config("mode = fly\n").unwrap_err().key, "mode");
        assert_eq!(parse_config("mode = meanfield\nscheme = leapfrog\n").unwrap_err().key, "scheme");
        assert_eq!(parse_config("mode = abm\nmu = 2.5\nn-agents = 3\n").unwrap_err().key, "mu");
        assert_eq!(parse_config("mode = meanfield\ntail-threshold = 0.1\n").unwrap_err().key, "tail-threshold");
    }

    fn arb_config() -> impl Strategy<Value = ExperimentConfig> {
        let mode = prop_oneof![
            Just(Mode::Abm),
            Just(Mode::Meanfield),
            Just(Mode::Equilibrium),
            Just(Mode::Linearize),
            Just(Mode::GiniSweep),
            Just(Mode::Compare),
        ];
        let preset = prop_oneof![Just(None), Just(Some(Preset::Fig5)), Just(Some(Preset::Fig6))];
        (
            mode,
            1u32..50,
            0.01f64..5.0,
            2usize..2000,
            0.1f64..10.0,
            any::<u64>(),
            1usize..64,
            prop::option::of(1e-4f64..0.1),
            prop::bool::ANY,
            (0.0f64..1e4, 1e-16f64..1e-8, "[a-z][a-z0-9_/]{0,12}", preset),
        )
            .prop_map(
                |(mode, mu, nu, n_agents, lambda, seed, replicas, dt, euler, (t_end, tail, out, preset))| {
                    let mut cfg = ExperimentConfig::defaults(mode);
                    cfg.mu = mu as f64;
                    // Keep Nμν an integer for the simulator modes.
                    cfg.nu = (nu * 4.0).round() / 4.0;
                    cfg.n_agents = n_agents * 4;
                    cfg.lambda = lambda;
                    cfg.seed = seed;
                    cfg.events = seed % 1_000_000;
                    cfg.replicas = replicas;
                    cfg.dt = dt;
                    cfg.scheme = if euler { Scheme::Euler } else { Scheme::Rk4 };
                    cfg.t_end = t_end;
                    cfg.tail_threshold = tail;
                    cfg.out = PathBuf::from(out);
                    cfg.preset = preset;
                    if cfg.mode == Mode::Linearize && cfg.nu == 0.0 {
                        cfg.nu = 0.25;
                    }
                    cfg
                },
            )
    }

    proptest! {
        #[test]
        fn config_text_round_trips(cfg in arb_config()) {
            prop_assume!(cfg.validate().is_ok());
            let text = cfg.to_config_text();
            let back = parse_config(&text).unwrap();
            prop_assert_eq!(back, cfg);
        }
    }
}
