//! Run artifacts (CSV traces, JSON summary) and parameter sweeps.

use crate::checks::{final_fifth, RunResult, Violation};
use crate::feasibility::{failures, Inequality, Infeasible};
use crate::freq;
use crate::model::{max_faults, SystemParams};
use crate::phase::{self, PhaseParams};
use crate::scenario::{Algorithm, PhaseOverrides, Resolved, Scenario, ScenarioError};
use crate::sim::simulate;
use crate::stabilizer::{self, Variant};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io;
use std::path::Path;

pub const SUMMARY_SCHEMA: &str = "pulsesync/summary@1";

fn csv_string<T: Serialize>(rows: impl IntoIterator<Item = T>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
}

pub fn pulses_csv(r: &RunResult) -> String {
    if r.pulses.is_empty() {
        return "round,node,pulse_index,real_time,local_time\n".into();
    }
    csv_string(r.pulses.iter())
}

#[derive(Serialize)]
struct SkewRow {
    round: u32,
    skew: f64,
    envelope: f64,
    margin: f64,
}

pub fn skew_csv(r: &RunResult) -> String {
    if r.traces.is_empty() {
        return "round,skew,envelope,margin\n".into();
    }
    csv_string(r.traces.iter().map(|t| SkewRow { round: t.r, skew: t.skew, envelope: t.envelope, margin: t.envelope - t.skew }))
}

#[derive(Serialize)]
struct RateRow {
    round: u32,
    node: usize,
    mu: Option<f64>,
    xi: Option<f64>,
    midpoint_rate: Option<f64>,
    rate_spread: Option<f64>,
    interval_spread: Option<f64>,
}

/// Per-node multipliers and rates; `None` for phase-only runs.
pub fn rates_csv(r: &RunResult) -> Option<String> {
    if !matches!(r.algorithm, Algorithm::Freq | Algorithm::FreqStab) {
        return None;
    }
    let rows: Vec<RateRow> = r
        .traces
        .iter()
        .flat_map(|t| {
            (0..t.p.len()).filter(|&v| t.p[v].is_some()).map(move |v| RateRow {
                round: t.r,
                node: v,
                mu: t.mus[v],
                xi: t.xis[v],
                midpoint_rate: t.rates[v],
                rate_spread: t.rate_spread,
                interval_spread: t.interval_spread,
            })
        })
        .collect();
    if rows.is_empty() {
        return Some("round,node,mu,xi,midpoint_rate,rate_spread,interval_spread\n".into());
    }
    Some(csv_string(rows))
}

#[derive(Serialize)]
struct Summary<'a> {
    schema: &'static str,
    algorithm: Algorithm,
    seed: u64,
    verdict: &'static str,
    rounds: usize,
    violation_counts: &'a BTreeMap<String, usize>,
    marginal_counts: &'a BTreeMap<String, usize>,
    steady_state_skew: f64,
    e_limit: f64,
    final_envelope: f64,
    resets_total: usize,
    resets_after_beat2: usize,
    duplicates: usize,
    insufficient_rounds: usize,
    beats: usize,
    next_signals: usize,
    deliveries: u64,
    events: u64,
    end_time: f64,
    parameters: &'a Resolved,
    violations: &'a [Violation],
    trace_sha256: String,
}

/// Shown in the summary; the counts cover every violation.
const SUMMARY_DETAILS: usize = 50;

pub fn summary_json(r: &RunResult) -> String {
    let mut hash = Sha256::new();
    hash.update(pulses_csv(r));
    hash.update(skew_csv(r));
    if let Some(rates) = rates_csv(r) {
        hash.update(rates);
    }
    let s = Summary {
        schema: SUMMARY_SCHEMA,
        algorithm: r.algorithm,
        seed: r.seed,
        verdict: if r.passed() { "pass" } else { "fail" },
        rounds: r.traces.len(),
        violation_counts: &r.violation_counts,
        marginal_counts: &r.marginal_counts,
        steady_state_skew: r.steady_state_skew,
        e_limit: r.e_limit,
        final_envelope: r.traces.last().map_or(f64::NAN, |t| t.envelope),
        resets_total: r.resets_total,
        resets_after_beat2: r.resets_after_beat2,
        duplicates: r.duplicates,
        insufficient_rounds: r.insufficient_rounds,
        beats: r.beats,
        next_signals: r.next_signals,
        deliveries: r.deliveries,
        events: r.events,
        end_time: r.end_time,
        parameters: &r.resolved,
        violations: &r.violations[..r.violations.len().min(SUMMARY_DETAILS)],
        trace_sha256: format!("{:x}", hash.finalize()),
    };
    let mut text = serde_json::to_string_pretty(&s).expect("summary serializes");
    text.push('\n');
    text
}

fn tmp_name(name: &str) -> String {
    format!(".{name}.tmp")
}

/// Stages `files` under temporary names and renames them only once all are written.
pub fn write_files_atomic(dir: &Path, files: &[(&str, String)]) -> io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let staged = files.iter().try_for_each(|(name, body)| std::fs::write(dir.join(tmp_name(name)), body));
    if let Err(e) = staged {
        for (name, _) in files {
            let _ = std::fs::remove_file(dir.join(tmp_name(name)));
        }
        return Err(e);
    }
    for (name, _) in files {
        std::fs::rename(dir.join(tmp_name(name)), dir.join(name))?;
    }
    Ok(())
}

pub fn write_artifacts(dir: &Path, r: &RunResult) -> io::Result<()> {
    let mut files = vec![("pulses.csv", pulses_csv(r)), ("skew.csv", skew_csv(r))];
    if let Some(rates) = rates_csv(r) {
        files.push(("rates.csv", rates));
    }
    files.push(("summary.json", summary_json(r)));
    write_files_atomic(dir, &files)
}

pub const PARAMS_SCHEMA: &str = "pulsesync/params@1";

/// Rounds over which per-round budgets are listed.
const DOC_HORIZON: u32 = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    /// Convergence factor at the drift the envelope runs with.
    pub alpha: f64,
    pub beta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_bar: Option<f64>,
    /// Limit coefficient of the stabilizing construction; feasible below 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_stab: Option<f64>,
}

/// Solver output: constants, coefficients and the inequality rows they satisfy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDoc {
    pub schema: String,
    pub algorithm: Algorithm,
    pub system: SystemParams,
    pub coefficients: Coefficients,
    pub e1: f64,
    pub e_limit: f64,
    pub parameters: Resolved,
    /// Rows holding with (near) equality, tightest first.
    #[serde(default)]
    pub binding: Vec<Inequality>,
}

pub fn coefficients(algorithm: Algorithm, system: &SystemParams) -> Result<Coefficients, Infeasible> {
    let freq = algorithm.variant() == Variant::Freq;
    let drift = if freq { freq::theta_bar(system.theta) } else { system.theta };
    Ok(Coefficients {
        alpha: phase::alpha_phase(drift)?,
        beta: phase::beta_phase(drift),
        alpha_bar: freq.then(|| freq::alpha_bar(system.theta)),
        alpha_stab: algorithm.stabilizing().then(|| stabilizer::limit_coefficient(algorithm.variant(), system.theta)),
    })
}

/// Every inequality the parameter set must satisfy.
pub fn condition_rows(res: &Resolved) -> Vec<Inequality> {
    match &res.stab {
        Some(st) => stabilizer::check_condition3(&res.sync, st),
        None => res.sync.budget_rows(DOC_HORIZON),
    }
}

fn relative_margin(row: &Inequality) -> f64 {
    row.margin() / row.lhs.abs().max(row.rhs.abs()).max(f64::MIN_POSITIVE)
}

/// Rows within a relative margin of `1e-6`, or the single tightest row.
pub fn binding_rows(rows: &[Inequality]) -> Vec<Inequality> {
    let mut sorted: Vec<&Inequality> = rows.iter().collect();
    sorted.sort_by(|a, b| relative_margin(a).total_cmp(&relative_margin(b)));
    let tight: Vec<Inequality> = sorted.iter().filter(|r| relative_margin(r) <= 1e-6).map(|r| (*r).clone()).collect();
    if tight.is_empty() {
        sorted.first().map(|r| vec![(*r).clone()]).unwrap_or_default()
    } else {
        tight
    }
}

pub fn solve(system: SystemParams, algorithm: Algorithm) -> Result<ParamDoc, ScenarioError> {
    let sc = Scenario::new(system, algorithm);
    sc.validate()?;
    let coefficients = coefficients(algorithm, &system)?;
    let parameters = sc.resolve()?;
    Ok(ParamDoc {
        schema: PARAMS_SCHEMA.to_string(),
        algorithm,
        system,
        coefficients,
        e1: parameters.sync.envelope(1),
        e_limit: parameters.sync.e_limit(),
        binding: binding_rows(&condition_rows(&parameters)),
        parameters,
    })
}

/// Fields `check` needs; anything else in the document is ignored.
#[derive(Debug, Clone, Deserialize)]
pub struct CheckInput {
    pub parameters: Resolved,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub holds: bool,
    pub failures: Vec<Inequality>,
    pub rows: Vec<Inequality>,
}

pub fn check(input: &CheckInput) -> CheckReport {
    let rows = condition_rows(&input.parameters);
    let failures = failures(&rows);
    CheckReport { holds: failures.is_empty(), failures, rows }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Theta,
    U,
    D,
    Nu,
    #[serde(rename = "T")]
    BigT,
    N,
}

impl Axis {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "theta" => Some(Axis::Theta),
            "u" | "U" => Some(Axis::U),
            "d" => Some(Axis::D),
            "nu" => Some(Axis::Nu),
            "T" | "big_t" | "t" => Some(Axis::BigT),
            "n" => Some(Axis::N),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Axis::Theta => "theta",
            Axis::U => "u",
            Axis::D => "d",
            Axis::Nu => "nu",
            Axis::BigT => "T",
            Axis::N => "n",
        }
    }

    /// Copy of `template` with the axis set to `value`.
    pub fn apply(self, template: &Scenario, value: f64) -> Result<Scenario, ScenarioError> {
        let mut sc = template.clone();
        let s = &mut sc.system;
        match self {
            Axis::Theta => s.theta = value,
            Axis::U => s.u = value,
            Axis::D => s.d = value,
            Axis::Nu => s.nu = value,
            Axis::N => {
                if value.fract() != 0.0 || value < 0.0 {
                    return Err(ScenarioError::Config(format!("node count {value} is not an integer")));
                }
                s.n = value as usize;
                s.f = max_faults(s.n);
            }
            Axis::BigT => match sc.algorithm {
                Algorithm::Phase => {
                    let solved: PhaseParams = phase::solve_condition1(&sc.system)?;
                    let t = solved.timing(1);
                    sc.overrides.phase = Some(PhaseOverrides { tau1: t.tau1, tau2: t.tau2, big_t: value });
                }
                Algorithm::Freq => sc.overrides.freq.get_or_insert_with(Default::default).big_t = Some(value),
                Algorithm::PhaseStab | Algorithm::FreqStab => {
                    sc.overrides.stab.get_or_insert_with(Default::default).big_t = Some(value)
                }
            },
        }
        sc.validate()?;
        Ok(sc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: &'static str,
    pub value: f64,
    pub trial: u32,
    pub seed: u64,
    pub steady_skew: f64,
    pub envelope: f64,
    pub violations: usize,
    pub verdict: &'static str,
}

/// One run per `(value, trial)`; trial `k` uses seed `base_seed + k` at every point.
pub fn sweep(template: &Scenario, axis: Axis, values: &[f64], trials: u32, base_seed: u64) -> Result<Vec<SweepRow>, ScenarioError> {
    let mut rows = Vec::with_capacity(values.len() * trials as usize);
    for &value in values {
        let point = axis.apply(template, value)?;
        for trial in 0..trials {
            let mut sc = point.clone();
            sc.seed = base_seed.wrapping_add(trial as u64);
            let r = simulate(&sc)?;
            rows.push(SweepRow {
                axis: axis.label(),
                value,
                trial,
                seed: sc.seed,
                steady_skew: r.steady_state_skew,
                envelope: r.e_limit,
                violations: r.violation_counts.values().sum(),
                verdict: if r.passed() { "pass" } else { "fail" },
            });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    if rows.is_empty() {
        return "axis,value,trial,seed,steady_skew,envelope,violations,verdict\n".into();
    }
    csv_string(rows.iter())
}

/// Least-squares slope of `y = c x` through the origin.
pub fn fit_through_origin(points: &[(f64, f64)]) -> f64 {
    let sxy: f64 = points.iter().map(|(x, y)| x * y).sum();
    let sxx: f64 = points.iter().map(|(x, _)| x * x).sum();
    sxy / sxx
}

/// Largest steady skew per sweep value, in input order.
pub fn worst_per_value(rows: &[SweepRow]) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|(v, _)| *v == r.value) {
            Some(slot) => slot.1 = slot.1.max(r.steady_skew),
            None => out.push((r.value, r.steady_skew)),
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub value: f64,
    pub worst_skew: f64,
    pub mean_skew: f64,
    pub envelope: f64,
    pub failed_trials: usize,
}

/// Per-point aggregates plus the trend of the worst skew along the axis.
#[derive(Debug, Clone, Serialize)]
pub struct SweepTrend {
    pub axis: &'static str,
    pub points: Vec<SweepPoint>,
    /// Worst skew never decreases as the axis value grows.
    pub monotone_nondecreasing: bool,
    /// Fit of worst skew against the axis value, for the delay axes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slope_through_origin: Option<f64>,
}

pub fn sweep_trend(rows: &[SweepRow]) -> SweepTrend {
    let mut points: Vec<SweepPoint> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for r in rows {
        let i = match points.iter().position(|p| p.value == r.value) {
            Some(i) => i,
            None => {
                points.push(SweepPoint { value: r.value, worst_skew: 0.0, mean_skew: 0.0, envelope: r.envelope, failed_trials: 0 });
                counts.push(0);
                points.len() - 1
            }
        };
        let p = &mut points[i];
        p.worst_skew = p.worst_skew.max(r.steady_skew);
        p.mean_skew += r.steady_skew;
        p.failed_trials += (r.verdict != "pass") as usize;
        counts[i] += 1;
    }
    for (p, n) in points.iter_mut().zip(&counts) {
        p.mean_skew /= *n as f64;
    }
    let mut by_value: Vec<&SweepPoint> = points.iter().collect();
    by_value.sort_by(|a, b| a.value.total_cmp(&b.value));
    let monotone = by_value.windows(2).all(|w| w[1].worst_skew >= w[0].worst_skew);
    let axis = rows.first().map_or("", |r| r.axis);
    let slope = matches!(axis, "u" | "d").then(|| fit_through_origin(&worst_per_value(rows)));
    SweepTrend { axis, points, monotone_nondecreasing: monotone, slope_through_origin: slope }
}

/// Maximal skew over the final fifth of a run's rounds.
pub fn steady_skew(r: &RunResult) -> f64 {
    final_fifth(&r.traces).map(|t| t.skew).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DelayPolicy, OffsetPolicy};
    use crate::stabilizer::SyncParams;

    fn symmetric() -> Scenario {
        let mut sc = Scenario::new(SystemParams::new(4, 1.0, 0.0, 1.0, 0.01, 1.0).unwrap(), Algorithm::Phase);
        sc.offset_policy = OffsetPolicy::Zero;
        sc.delay_policy = DelayPolicy::ConstantMax;
        sc.rounds = 10;
        sc
    }

    #[test]
    fn symmetric_run_has_zero_skew_rows() {
        let r = simulate(&symmetric()).unwrap();
        let text = skew_csv(&r);
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("round,skew,envelope,margin"));
        for line in lines {
            assert_eq!(line.split(',').nth(1), Some("0.0"));
        }
        assert!(rates_csv(&r).is_none());
    }

    #[test]
    fn pulses_are_sorted_by_round_then_node() {
        let r = simulate(&symmetric()).unwrap();
        let text = pulses_csv(&r);
        assert!(text.starts_with("round,node,pulse_index,real_time,local_time\n"));
        let keys: Vec<(u32, usize)> = r.pulses.iter().map(|p| (p.round, p.node)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn summary_is_reproducible_and_names_the_verdict() {
        let a = summary_json(&simulate(&symmetric()).unwrap());
        let b = summary_json(&simulate(&symmetric()).unwrap());
        assert_eq!(a, b);
        let v: serde_json::Value = serde_json::from_str(&a).unwrap();
        assert_eq!(v["verdict"], "pass");
        assert_eq!(v["trace_sha256"].as_str().unwrap().len(), 64);
    }

    #[test]
    fn sweep_emits_one_row_per_point_and_trial() {
        let rows = sweep(&symmetric(), Axis::U, &[0.01, 0.02], 3, 5).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[4].seed, 6);
        assert!(sweep_csv(&rows).starts_with("axis,value,trial,seed,steady_skew,envelope,violations,verdict\n"));
    }

    #[test]
    fn n_axis_keeps_the_fault_budget_maximal() {
        let sc = Axis::N.apply(&symmetric(), 10.0).unwrap();
        assert_eq!((sc.system.n, sc.system.f), (10, 3));
        assert!(Axis::N.apply(&symmetric(), 4.5).is_err());
    }

    #[test]
    fn artifacts_land_together() {
        let dir = tempfile::tempdir().unwrap();
        let r = simulate(&symmetric()).unwrap();
        write_artifacts(dir.path(), &r).unwrap();
        let mut names: Vec<String> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
        names.sort();
        assert_eq!(names, ["pulses.csv", "skew.csv", "summary.json"]);
        assert_eq!(std::fs::read_to_string(dir.path().join("summary.json")).unwrap(), summary_json(&r));
    }

    #[test]
    fn solved_document_checks_clean() {
        let sys = SystemParams::new(4, 1.01, 0.0, 1.0, 0.01, 1.0).unwrap();
        for alg in [Algorithm::Phase, Algorithm::Freq, Algorithm::PhaseStab] {
            let doc = solve(sys, alg).unwrap();
            assert!(!doc.binding.is_empty());
            let text = serde_json::to_string(&doc).unwrap();
            let input: CheckInput = serde_json::from_str(&text).unwrap();
            let report = check(&input);
            assert!(report.holds, "{alg:?}: {:?}", report.failures);
        }
    }

    #[test]
    fn tampered_document_fails_its_check() {
        let sys = SystemParams::new(4, 1.01, 0.0, 1.0, 0.01, 1.0).unwrap();
        let mut doc = solve(sys, Algorithm::Freq).unwrap();
        if let SyncParams::Freq(p) = &mut doc.parameters.sync {
            p.big_t *= 0.5;
        }
        let report = check(&CheckInput { parameters: doc.parameters });
        assert!(!report.holds);
    }

    #[test]
    fn stabilizing_coefficient_is_reported() {
        let sys = SystemParams::new(4, 1.01, 0.0, 1.0, 0.01, 1.0).unwrap();
        let c = coefficients(Algorithm::PhaseStab, &sys).unwrap();
        assert_eq!(c.alpha_stab, Some(stabilizer::limit_coefficient(Variant::Phase, 1.01)));
        assert!(c.alpha_bar.is_none());
        let sys = SystemParams { theta: 1.05, ..sys };
        assert!(solve(sys, Algorithm::PhaseStab).is_err());
    }

    #[test]
    fn trend_aggregates_per_point() {
        let rows = sweep(&symmetric(), Axis::U, &[0.01, 0.02], 2, 0).unwrap();
        let trend = sweep_trend(&rows);
        assert_eq!(trend.points.len(), 2);
        assert!(trend.monotone_nondecreasing);
        assert_eq!(trend.slope_through_origin, Some(0.0));
    }

    #[test]
    fn slope_fit() {
        assert_eq!(fit_through_origin(&[(1.0, 3.0), (2.0, 6.0)]), 3.0);
        assert_eq!(worst_per_value(&[
            SweepRow { axis: "u", value: 1.0, trial: 0, seed: 0, steady_skew: 2.0, envelope: 0.0, violations: 0, verdict: "pass" },
            SweepRow { axis: "u", value: 1.0, trial: 1, seed: 1, steady_skew: 3.0, envelope: 0.0, violations: 0, verdict: "pass" },
        ]), vec![(1.0, 3.0)]);
    }
}
