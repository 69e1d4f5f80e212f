use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use exchange_kinetics::config::{parse_config_text, resolve, ConfigError};
use exchange_kinetics::experiment::run_experiment;

/// Money-exchange model with a central bank: agent-based runs, mean-field
/// integration, equilibrium and inequality diagnostics.
#[derive(Debug, Parser)]
#[command(name = "exchange-kinetics", version)]
struct Cli {
    /// abm, meanfield, equilibrium, linearize, gini-sweep or compare
    #[arg(long)]
    mode: Option<String>,
    /// Dollars per agent
    #[arg(long)]
    mu: Option<String>,
    /// Bank reserve relative to total agent wealth
    #[arg(long)]
    nu: Option<String>,
    #[arg(long = "n-agents")]
    n_agents: Option<String>,
    /// Exchange rate per agent
    #[arg(long)]
    lambda: Option<String>,
    /// Number of exchange events for agent-based runs
    #[arg(long)]
    events: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    replicas: Option<String>,
    /// Integrator step; defaults to 0.01 min(1, 1/lambda)
    #[arg(long)]
    dt: Option<String>,
    /// rk4 or euler
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long = "t-end")]
    t_end: Option<String>,
    /// Boundary mass that triggers window growth
    #[arg(long = "tail-threshold")]
    tail_threshold: Option<String>,
    /// Output directory
    #[arg(long)]
    out: Option<String>,
    /// fig2, fig5 or fig6
    #[arg(long)]
    preset: Option<String>,
    /// Flat `key = value` file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
}

impl Cli {
    fn flag_map(&self) -> BTreeMap<String, String> {
        let pairs = [
            ("mode", &self.mode),
            ("mu", &self.mu),
            ("nu", &self.nu),
            ("n-agents", &self.n_agents),
            ("lambda", &self.lambda),
            ("events", &self.events),
            ("seed", &self.seed),
            ("replicas", &self.replicas),
            ("dt", &self.dt),
            ("scheme", &self.scheme),
            ("t-end", &self.t_end),
            ("tail-threshold", &self.tail_threshold),
            ("out", &self.out),
            ("preset", &self.preset),
        ];
        pairs
            .into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect()
    }
}

fn config_failure(err: &mut dyn Write, e: ConfigError) -> u8 {
    let _ = writeln!(err, "error: {e}");
    2
}

/// Parses `args` (program name first), runs the experiment and returns the
/// exit code: 0 on success, 2 for configuration errors, 1 for runtime errors.
fn execute<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code as u8;
        }
    };

    let file = match &cli.config {
        Some(path) => match std::fs::read_to_string(path) {
            Ok(text) => match parse_config_text(&text) {
                Ok(map) => Some(map),
                Err(e) => return config_failure(err, e),
            },
            Err(e) => {
                return config_failure(
                    err,
                    ConfigError {
                        key: "config".into(),
                        message: format!("cannot read {}: {e}", path.display()),
                    },
                )
            }
        },
        None => None,
    };
    let cfg = match resolve(file.as_ref(), &cli.flag_map()) {
        Ok(cfg) => cfg,
        Err(e) => return config_failure(err, e),
    };
    match run_experiment(&cfg) {
        Ok(outcome) => {
            for f in &outcome.files {
                let _ = writeln!(out, "{}", outcome.out_dir.join(f).display());
            }
            0
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let code = execute(std::env::args_os(), &mut std::io::stdout(), &mut std::io::stderr());
    ExitCode::from(code)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;
    use std::path::Path;

    use serde_json::Value;

    struct Run {
        code: u8,
        stderr: String,
    }

    fn cli(args: &[&str]) -> Run {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let argv = std::iter::once("exchange-kinetics").chain(args.iter().copied());
        let code = execute(argv, &mut out, &mut err);
        Run {
            code,
            stderr: String::from_utf8(err).unwrap(),
        }
    }

    fn json(path: &Path) -> Value {
        serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
    }

    #[test]
    fn equilibrium_report() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        let o = cli(&["--mode", "equilibrium", "--mu", "1", "--nu", "0.5", "--out", out]);
        assert!(o.code == 0, "{}", o.stderr);
        let rep = json(&dir.path().join("equilibrium.json"));
        assert!((rep["p0_star"].as_f64().unwrap() - 0.25).abs() < 1e-14);
        for key in ["mu", "nu", "r_star", "d_star", "ratio_right", "ratio_left"] {
            assert!(rep[key].is_number(), "{key}");
        }
        for key in ["rho0", "alpha", "beta"] {
            assert!(rep["laplace"][key].is_number(), "{key}");
        }
        let pmf = fs::read_to_string(dir.path().join("equilibrium_pmf.csv")).unwrap();
        let mut lines = pmf.lines();
        assert_eq!(lines.next(), Some("n,p"));
        let ns: Vec<i64> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
        assert!(ns.windows(2).all(|w| w[1] == w[0] + 1));
        let manifest = json(&dir.path().join("manifest.json"));
        assert_eq!(manifest["mode"], "equilibrium");
        assert!(manifest["timings"]["total_seconds"].is_number());
    }

    #[test]
    fn linearize_report() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        let o = cli(&["--mode", "linearize", "--mu", "0.01", "--nu", "0.001", "--out", out]);
        assert!(o.code == 0);
        let rep = json(&dir.path().join("linearization.json"));
        assert_eq!(rep["in_G"], true);
        let margin = rep["margin"].as_f64().unwrap();
        assert!(((margin - 1.6647e-5) / 1.6647e-5).abs() < 5e-3);
        for key in ["C1", "C2", "C3", "C4", "gamma"] {
            assert!(rep[key].is_number(), "{key}");
        }
    }

    #[test]
    fn abm_with_zero_events_writes_initial_row() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        let o = cli(&["--mode", "abm", "--n-agents", "50", "--mu", "4", "--nu", "0.5", "--events", "0", "--seed", "7", "--out", out]);
        assert!(o.code == 0, "{}", o.stderr);
        let traj = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
        let lines: Vec<&str> = traj.lines().collect();
        assert_eq!(lines[0], "event,time,bank_cash,bank_debt,total_agent_debt,gini");
        assert_eq!(lines.len(), 2);
        assert!(lines[1].starts_with("0,0.0000000000000000e0,100,0,0,"));
        let manifest = json(&dir.path().join("manifest.json"));
        assert_eq!(manifest["seed"], 7);
        assert!(manifest["generator"].as_str().unwrap().contains("ChaCha8"));
    }

    #[test]
    fn abm_output_is_byte_identical_for_equal_seeds() {
        let run = |dir: &Path| {
            let o = cli(&["--mode", "abm", "--n-agents", "200", "--mu", "5", "--nu", "0.2", "--events", "50000", "--seed", "3", "--out", dir.to_str().unwrap()]);
            assert!(o.code == 0);
            fs::read(dir.join("trajectory.csv")).unwrap()
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        assert_eq!(run(a.path()), run(b.path()));
        assert!(a.path().join("pmf_50000.csv").exists());
        assert!(a.path().join("summary.json").exists());
    }

    #[test]
    fn replicas_are_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let o = cli(&["--mode", "abm", "--n-agents", "100", "--mu", "3", "--nu", "1", "--events", "2000", "--replicas", "4", "--out", dir.path().to_str().unwrap()]);
        assert!(o.code == 0);
        let summary = json(&dir.path().join("summary.json"));
        assert_eq!(summary["seeds"].as_array().unwrap().len(), 4);
    }

    #[test]
    fn config_file_and_flag_override() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("run.cfg");
        fs::write(&cfg_path, "# equilibrium at the default point\nmode = equilibrium\nmu = 3\nnu = 0.4\n").unwrap();
        let out = dir.path().join("out");
        let o = cli(&["--config", cfg_path.to_str().unwrap(), "--mu", "1", "--nu", "0.5", "--out", out.to_str().unwrap()]);
        assert!(o.code == 0);
        let rep = json(&out.join("equilibrium.json"));
        assert_eq!(rep["mu"], 1.0);
    }

    #[test]
    fn config_errors_exit_with_two() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("bad.cfg");
        fs::write(&cfg_path, "mode = equilibrium\nnu = -1\n").unwrap();
        let o = cli(&["--config", cfg_path.to_str().unwrap()]);
        assert_eq!(o.code, 2);
        let err = o.stderr;
        assert!(err.contains("`nu`") && err.contains(">= 0"), "{err}");

        fs::write(&cfg_path, "mode = equilibrium\nwarp = 9\n").unwrap();
        let o = cli(&["--config", cfg_path.to_str().unwrap()]);
        assert_eq!(o.code, 2);
        assert!(o.stderr.contains("`warp`"));

        let o = cli(&["--mode", "equilibrium", "--warp", "9"]);
        assert_eq!(o.code, 2);
        let o = cli(&["--mode", "meanfield", "--scheme", "leapfrog"]);
        assert_eq!(o.code, 2);
        assert!(o.stderr.contains("`scheme`"));
    }

    #[test]
    fn runtime_errors_exit_with_one() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("not_a_dir");
        fs::write(&blocker, "x").unwrap();
        let o = cli(&["--mode", "equilibrium", "--out", blocker.to_str().unwrap()]);
        assert_eq!(o.code, 1);
        assert!(!o.stderr.is_empty());
    }

    #[test]
    fn meanfield_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let o = cli(&["--mode", "meanfield", "--mu", "2", "--nu", "0.25", "--t-end", "20", "--out", dir.path().to_str().unwrap()]);
        assert!(o.code == 0, "{}", o.stderr);
        let traj = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
        assert!(traj.starts_with("t,phase,mass,mean,debt,dkl_to_eq,gini\n"));
        assert!(traj.contains(",II,"));
        let rep = json(&dir.path().join("meanfield_report.json"));
        assert!(rep["t_star"].as_f64().unwrap() < 20.0);
        assert_eq!(rep["scheme"], "rk4");
        assert!(!rep["window_history"].as_array().unwrap().is_empty());
        assert!(dir.path().join("pmf_t20.csv").exists());
    }

    #[test]
    fn gini_sweep_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let o = cli(&["--mode", "gini-sweep", "--mu", "2", "--nu", "1", "--t-end", "30", "--out", dir.path().to_str().unwrap()]);
        assert!(o.code == 0, "{}", o.stderr);
        let csv = fs::read_to_string(dir.path().join("gini.csv")).unwrap();
        assert!(csv.starts_with("t,gini_banked,gini_vanilla,difference\n"));
        assert_eq!(csv.lines().count(), 32);
    }

    #[test]
    fn compare_tiny_population_is_flagged_and_repeatable() {
        let run = |dir: &Path| {
            let o = cli(&["--mode", "compare", "--n-agents", "10", "--mu", "2", "--nu", "0.5", "--replicas", "4", "--t-end", "10", "--seed", "1", "--out", dir.to_str().unwrap()]);
            assert!(o.code == 0, "{}", o.stderr);
            fs::read(dir.join("compare.json")).unwrap()
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let bytes = run(a.path());
        assert_eq!(bytes, run(b.path()));
        let rep: Value = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(rep["finite_size_warning"], true);
        assert_eq!(rep["snapshots"].as_array().unwrap().len(), 2);
    }
}
