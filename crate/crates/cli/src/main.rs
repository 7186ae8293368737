//! `pulsesync`: solve and check parameters, simulate scenarios, run sweeps.

use clap::{Parser, Subcommand};
use pulsesync::model::SystemParams;
use pulsesync::report::{self, Axis, CheckInput};
use pulsesync::scenario::{Algorithm, Scenario, ScenarioError};
use pulsesync::sim::simulate;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const PASS: u8 = 0;
const VIOLATION: u8 = 1;
const INFEASIBLE: u8 = 2;
const CONFIG: u8 = 3;

#[derive(Parser)]
#[command(name = "pulsesync", version, about = "Byzantine fault-tolerant pulse synchronization toolkit")]
struct Cli {
    /// Seed for every random stream; overrides the scenario's own seed.
    #[arg(long, global = true, env = "PULSESYNC_SEED")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve for protocol parameters and print them as JSON.
    Solve {
        #[arg(long)]
        theta: f64,
        #[arg(long)]
        d: f64,
        #[arg(long)]
        u: f64,
        #[arg(long, default_value_t = 0.0)]
        nu: f64,
        #[arg(long = "big-f")]
        big_f: f64,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, value_parser = parse_algorithm)]
        algorithm: Algorithm,
    },
    /// Re-check every inequality of a parameter document.
    Check {
        #[arg(long)]
        params: PathBuf,
    },
    /// Run one scenario and write its traces and summary.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a scenario template over a range of one parameter.
    Sweep {
        #[arg(long)]
        template: PathBuf,
        #[arg(long, value_parser = parse_axis)]
        axis: Axis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        trials: u32,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_algorithm(s: &str) -> Result<Algorithm, String> {
    Algorithm::parse(s).ok_or_else(|| format!("unknown algorithm {s:?} (phase, freq, phase-stab, freq-stab)"))
}

fn parse_axis(s: &str) -> Result<Axis, String> {
    Axis::parse(s).ok_or_else(|| format!("unknown axis {s:?} (theta, u, d, nu, T, n)"))
}

/// A failed command and its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Infeasible(inf) => {
                let message = match &inf.threshold {
                    Some((name, value)) => format!("{inf} (threshold {name} = {value})"),
                    None => inf.to_string(),
                };
                Failure { code: INFEASIBLE, message }
            }
            ScenarioError::Config(_) => Failure { code: CONFIG, message: e.to_string() },
        }
    }
}

fn config(message: String) -> Failure {
    Failure { code: CONFIG, message }
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| config(format!("cannot read {}: {e}", path.display())))
}

fn load_scenario(path: &Path, seed: Option<u64>) -> Result<Scenario, Failure> {
    let mut sc = Scenario::from_json(&read(path)?)?;
    if let Some(seed) = seed {
        sc.seed = seed;
    }
    Ok(sc)
}

/// Writes to stdout; a closed pipe is not an error.
fn emit(text: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn print_json<T: serde::Serialize>(value: &T) {
    emit(&serde_json::to_string_pretty(value).expect("output serializes"));
}

fn run(cli: Cli) -> Result<u8, Failure> {
    match cli.command {
        Command::Solve { theta, d, u, nu, big_f, n, algorithm } => {
            let system = SystemParams::new(n, theta, nu, d, u, big_f).map_err(|e| config(e.to_string()))?;
            print_json(&report::solve(system, algorithm)?);
            Ok(PASS)
        }
        Command::Check { params } => {
            let input: CheckInput =
                serde_json::from_str(&read(&params)?).map_err(|e| config(format!("{}: {e}", params.display())))?;
            let result = report::check(&input);
            print_json(&result);
            Ok(if result.holds { PASS } else { INFEASIBLE })
        }
        Command::Simulate { scenario, out } => {
            let sc = load_scenario(&scenario, cli.seed)?;
            let result = simulate(&sc)?;
            report::write_artifacts(&out, &result).map_err(|e| config(format!("cannot write {}: {e}", out.display())))?;
            let failed: usize = result.violation_counts.values().sum();
            emit(&format!(
                "{} steady_state_skew={} e_limit={} violations={failed}",
                if result.passed() { "pass" } else { "fail" },
                result.steady_state_skew,
                result.e_limit
            ));
            Ok(if result.passed() { PASS } else { VIOLATION })
        }
        Command::Sweep { template, axis, values, trials, out } => {
            let sc = load_scenario(&template, cli.seed)?;
            let rows = report::sweep(&sc, axis, &values, trials, sc.seed)?;
            let file = out.file_name().and_then(|f| f.to_str()).ok_or_else(|| config(format!("bad output path {}", out.display())))?;
            let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            report::write_files_atomic(dir, &[(file, report::sweep_csv(&rows))])
                .map_err(|e| config(format!("cannot write {}: {e}", out.display())))?;
            print_json(&report::sweep_trend(&rows));
            Ok(if rows.iter().all(|r| r.verdict == "pass") { PASS } else { VIOLATION })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { CONFIG } else { PASS };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
