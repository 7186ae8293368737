//! Acceptance criteria. Runs as a plain binary and prints one verdict line per criterion.

use pulsesync::agreement::{diameter, select_midpoint};
use pulsesync::checks::RunResult;
use pulsesync::freq::FreqParams;
use pulsesync::model::{ClockPolicy, DelayPolicy, FaultConfig, FaultStrategy, FaultyNode, ScheduledSend, SystemParams};
use pulsesync::phase::alpha_phase;
use pulsesync::protocol::Measurement;
use pulsesync::report::{self, Axis};
use pulsesync::scenario::{Algorithm, Scenario};
use pulsesync::sim::simulate;
use pulsesync::stabilizer::{solve_condition3, OraclePolicy, StabOptions, SyncParams, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(failures: Vec<String>, ok: String) -> Verdict {
    match failures.first() {
        None => Verdict { pass: true, detail: ok },
        Some(first) => Verdict { pass: false, detail: format!("{} failure(s), first: {first}", failures.len()) },
    }
}

fn scenario_file(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name);
    Scenario::from_json(&std::fs::read_to_string(&path).unwrap()).unwrap()
}

fn system(n: usize, theta: f64, nu: f64, d: f64, u: f64, big_f: f64) -> SystemParams {
    SystemParams::new(n, theta, nu, d, u, big_f).unwrap()
}

// ---------------------------------------------------------------------------

/// Sorted copy; the oracle for the trimmed range.
fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

fn agreement_instances() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0xa9);
    let mut failures = Vec::new();
    let instances = 100_000;
    for i in 0..instances {
        let n = rng.gen_range(4..=13);
        let f = (n - 1) / 3;
        let delta = if i % 2 == 0 { 0.0 } else { 0.01 };
        let scale = 10f64.powi(rng.gen_range(-3..=1));
        let faulty: Vec<bool> = {
            let mut ids: Vec<usize> = (0..n).collect();
            for k in 0..f {
                let j = rng.gen_range(k..n);
                ids.swap(k, j);
            }
            (0..n).map(|v| ids[..f].contains(&v)).collect()
        };
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..=scale)).collect();
        let correct: Vec<f64> = (0..n).filter(|&v| !faulty[v]).map(|v| xs[v]).collect();
        let lo = correct.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = correct.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let strategy = rng.gen_range(0..4);
        let mut outputs = Vec::new();
        for v in (0..n).filter(|&v| !faulty[v]) {
            let view: Vec<f64> = (0..n)
                .map(|w| {
                    if !faulty[w] {
                        return xs[w] + delta * rng.gen_range(-1.0..=1.0);
                    }
                    match strategy {
                        // push receivers in opposite directions
                        0 => if v % 2 == 0 { hi + delta } else { lo - delta },
                        1 => if v % 2 == 0 { 1e9 } else { -1e9 },
                        2 => rng.gen_range(lo - delta..=hi + delta),
                        _ => if rng.gen_bool(0.5) { hi + 10.0 * scale } else { lo - 10.0 * scale },
                    }
                })
                .collect();
            let y = select_midpoint(&view, f).unwrap();
            let s = sorted(&view);
            let expected = (s[f] + s[n - 1 - f]) / 2.0;
            if y != expected {
                failures.push(format!("instance {i}: midpoint {y} != oracle {expected}"));
            }
            outputs.push(y);
        }
        let slack = 1e-12 * scale.max(1.0);
        for &y in &outputs {
            if y < lo - delta - slack || y > hi + delta + slack {
                failures.push(format!("instance {i}: output {y} outside [{}, {}]", lo - delta, hi + delta));
            }
        }
        let bound = (hi - lo) / 2.0 + 2.0 * delta + slack;
        if diameter(outputs.iter().copied()) > bound {
            failures.push(format!("instance {i}: output diameter {} > {bound}", diameter(outputs.iter().copied())));
        }
    }
    verdict(failures, format!("{instances} instances, n in 4..=13, delta in {{0, U}}"))
}

// ---------------------------------------------------------------------------

fn analytic_values() -> Verdict {
    let mut failures = Vec::new();
    let a1 = alpha_phase(1.0).unwrap();
    if a1 != 0.5 {
        failures.push(format!("alpha(1) = {a1}"));
    }
    let a101 = alpha_phase(1.01).unwrap();
    if !(0.54..=0.56).contains(&a101) {
        failures.push(format!("alpha(1.01) = {a101}"));
    }
    if alpha_phase(1.1).unwrap() >= 1.0 {
        failures.push("alpha(1.1) >= 1".into());
    }
    if alpha_phase(1.2).unwrap() <= 1.0 {
        failures.push("alpha(1.2) <= 1".into());
    }
    let stab = |theta: f64, variant| solve_condition3(&system(4, theta, 0.0, 1.0, 0.1, 1.0), variant, &StabOptions::default());
    for (theta, variant, feasible) in
        [(1.03, Variant::Phase, true), (1.05, Variant::Phase, false), (1.004, Variant::Freq, true), (1.02, Variant::Freq, false)]
    {
        if stab(theta, variant).is_ok() != feasible {
            failures.push(format!("{variant:?} stabilizer at theta = {theta}: expected feasible = {feasible}"));
        }
    }
    verdict(failures, format!("alpha(1) = 0.5, alpha(1.01) = {a101:.4}, stabilizer thresholds as expected"))
}

// ---------------------------------------------------------------------------

const STRATEGIES: usize = 5;

fn strategy(k: usize, rng: &mut ChaCha8Rng, n: usize) -> FaultStrategy {
    match k % STRATEGIES {
        0 => FaultStrategy::Silent,
        1 => FaultStrategy::RandomPulses { rate: 3.0 },
        2 => FaultStrategy::SplitEarlyLate,
        3 => FaultStrategy::MirrorExtreme,
        _ => {
            let sends = (0..200)
                .map(|_| ScheduledSend {
                    time: rng.gen_range(0.0..200.0),
                    to: (0..n - 1).filter(|_| rng.gen_bool(0.5)).collect(),
                })
                .collect();
            FaultStrategy::CustomSchedule { sends }
        }
    }
}

const THETAS: [f64; 3] = [1.0001, 1.0005, 1.001];

/// The fifty phase scenarios; the faulty node is always the highest id.
fn phase_scenarios(measurement: Measurement) -> Vec<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3c);
    (0..50u64)
        .map(|s| {
            let i = s as usize;
            let theta = THETAS[i % 3];
            let n = [4, 7][(i / 3) % 2];
            let mut sc = Scenario::new(system(n, theta, 0.0, 0.1, 0.01, 0.1), Algorithm::Phase);
            sc.seed = s;
            sc.rounds = 60;
            sc.measurement = measurement;
            sc.clock_policy = if i % 2 == 0 { ClockPolicy::DriftWorstcaseSplit } else { ClockPolicy::RandomConstant };
            sc.delay_policy = DelayPolicy::AdversarialSplit;
            sc.faults = FaultConfig { nodes: vec![FaultyNode { id: n - 1, strategy: strategy(i, &mut rng, n) }] };
            sc
        })
        .collect()
}

fn phase_envelope(runs: &[(Scenario, RunResult)]) -> Verdict {
    let mut failures = Vec::new();
    let mut worst_near_one: f64 = 0.0;
    for (sc, r) in runs {
        let tag = format!("seed {} theta {} n {}", sc.seed, sc.system.theta, sc.system.n);
        if r.traces.len() < sc.rounds as usize {
            failures.push(format!("{tag}: only {} rounds", r.traces.len()));
        }
        for t in &r.traces {
            if t.skew > t.envelope + 1e-9 * t.envelope {
                failures.push(format!("{tag}: round {} skew {} > e(r) {}", t.r, t.skew, t.envelope));
            }
        }
        let tail = report::steady_skew(r);
        if tail > r.e_limit {
            failures.push(format!("{tag}: steady skew {tail} > e_limit {}", r.e_limit));
        }
        if sc.system.theta == THETAS[0] {
            worst_near_one = worst_near_one.max(tail / sc.system.u);
            if tail > 4.0 * sc.system.u * (1.0 + 1e-3) {
                failures.push(format!("{tag}: steady skew {tail} > 4U"));
            }
        }
        if !r.passed() {
            failures.push(format!("{tag}: invariant violations {:?}", r.violation_counts));
        }
    }
    verdict(failures, format!("{} runs, worst steady skew at theta = {} is {worst_near_one:.3} U", runs.len(), THETAS[0]))
}

fn measurement_bounds(runs: &[(Scenario, RunResult)], self_estimate: &[(Scenario, RunResult)]) -> Verdict {
    let mut failures = Vec::new();
    for (sc, r) in runs.iter().chain(self_estimate) {
        let count = r.count("measurement");
        if count > 0 {
            failures.push(format!("seed {} ({:?}): {count} measurement violations", sc.seed, sc.measurement));
        }
    }
    verdict(failures, format!("{} runs with own-pulse and {} with self-estimated offsets", runs.len(), self_estimate.len()))
}

// ---------------------------------------------------------------------------

/// Rate-spread limit, recomputed from the solved constants.
fn rate_limit(p: &FreqParams) -> f64 {
    let window = p.nu * (p.big_t + p.tau2);
    let contraction = (2.0 * p.theta - 1.0) / 2.0;
    (3.0 * p.theta * p.epsilon + 2.0 * window) / (1.0 - contraction) + window
}

fn frequency_convergence() -> Verdict {
    let template = scenario_file("freq_regime.json");
    let mut failures = Vec::new();
    let mut worst_skew: f64 = 0.0;
    let mut worst_rate: f64 = 0.0;
    let mut limit = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..8 {
        let mut sc = template.clone();
        sc.seed = seed;
        let faulty = FaultyNode { id: 3, strategy: strategy([2, 3, 1, 0][seed as usize % 4], &mut rng, 4) };
        sc.faults = FaultConfig { nodes: vec![faulty] };
        let (s, big_t) = (sc.system, 50.0);
        if s.nu * big_t * big_t > s.u / 10.0 * (1.0 + 1e-9) {
            failures.push(format!("nu T^2 = {} exceeds U/10", s.nu * big_t * big_t));
        }
        let r = simulate(&sc).unwrap();
        let SyncParams::Freq(p) = r.resolved.sync else { unreachable!() };
        limit = rate_limit(&p);
        let tag = format!("seed {seed}");
        for family in ["rate_recurrence", "rate_floor", "freq_estimate", "multiplier_range"] {
            if r.count(family) > 0 {
                failures.push(format!("{tag}: {} {family} violations", r.count(family)));
            }
        }
        let settled = pulsesync::checks::final_fifth(&r.traces).filter_map(|t| t.interval_spread).fold(0.0, f64::max);
        worst_rate = worst_rate.max(settled);
        if settled > limit * (1.0 + 1e-3) {
            failures.push(format!("{tag}: settled rate spread {settled} > {limit}"));
        }
        let steady = report::steady_skew(&r);
        worst_skew = worst_skew.max(steady);
        if steady > p.steady_skew_bound() {
            failures.push(format!("{tag}: steady skew {steady} > {}", p.steady_skew_bound()));
        }
        if steady > 1.5 * 28.0 * s.u {
            failures.push(format!("{tag}: steady skew {steady} > 1.5 * 28U"));
        }
        if !r.passed() {
            failures.push(format!("{tag}: invariant violations {:?}", r.violation_counts));
        }
    }
    let u = template.system.u;
    verdict(
        failures,
        format!("8 runs, rate spread {worst_rate:.2e} <= {limit:.2e}, steady skew {:.1} U <= 42 U", worst_skew / u),
    )
}

// ---------------------------------------------------------------------------

const POLICIES: [OraclePolicy; 4] = [OraclePolicy::Earliest, OraclePolicy::Latest, OraclePolicy::Random, OraclePolicy::SplitP];

fn stabilization() -> Verdict {
    let mut failures = Vec::new();
    let mut total = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (alg, theta) in [(Algorithm::PhaseStab, 1.01), (Algorithm::FreqStab, 1.002)] {
        for seed in 0..100u64 {
            let mut sc = Scenario::new(system(4, theta, 0.0, 1.0, 0.05, 1.0), alg);
            sc.seed = seed;
            sc.clock_policy = ClockPolicy::RandomConstant;
            sc.delay_policy = DelayPolicy::UniformRandom;
            sc.oracle.policy = POLICIES[(seed as usize / 4) % 4];
            let faulty = FaultyNode { id: seed as usize % 4, strategy: strategy([2, 3, 1, 0][seed as usize % 4], &mut rng, 4) };
            sc.faults = FaultConfig { nodes: vec![faulty] };
            let r = simulate(&sc).unwrap();
            total += 1;
            let tag = format!("{alg:?} seed {seed}");
            if r.resets_after_beat2 > 0 {
                failures.push(format!("{tag}: {} resets after beat 2", r.resets_after_beat2));
            }
            for family in ["reinit", "next_window", "beat_alignment", "no_reset", "envelope", "stabilization", "progress"] {
                if r.count(family) > 0 {
                    failures.push(format!("{tag}: {} {family} violations", r.count(family)));
                }
            }
            if r.traces.iter().any(|t| t.skew > t.envelope + 1e-9 * t.envelope) {
                failures.push(format!("{tag}: skew above the envelope"));
            }
            if !r.passed() {
                failures.push(format!("{tag}: invariant violations {:?}", r.violation_counts));
            }
        }
    }
    verdict(failures, format!("{total}/{total} corrupted-start runs stabilized"))
}

// ---------------------------------------------------------------------------

fn determinism() -> Verdict {
    let mut failures = Vec::new();
    for name in ["split_fault.json", "freq_regime.json", "stabilization_from_chaos.json"] {
        let sc = scenario_file(name);
        let outputs: Vec<(Vec<u8>, Vec<u8>)> = (0..3)
            .map(|_| {
                let dir = tempfile::tempdir().unwrap();
                report::write_artifacts(dir.path(), &simulate(&sc).unwrap()).unwrap();
                let read = |f: &str| std::fs::read(dir.path().join(f)).unwrap();
                (read("pulses.csv"), read("summary.json"))
            })
            .collect();
        if outputs.iter().any(|o| *o != outputs[0]) {
            failures.push(format!("{name}: artifacts differ between repeats"));
        }
    }
    verdict(failures, "3 scenarios x 3 repeats byte-identical".into())
}

// ---------------------------------------------------------------------------

fn sweeps() -> Verdict {
    let mut failures = Vec::new();
    let u_rows = report::sweep(&scenario_file("sweep_u.json"), Axis::U, &[0.0025, 0.005, 0.01, 0.02, 0.04], 3, 200).unwrap();
    let points = report::worst_per_value(&u_rows);
    // least squares through the origin, recomputed here
    let c = points.iter().map(|(u, s)| u * s).sum::<f64>() / points.iter().map(|(u, _)| u * u).sum::<f64>();
    if !(2.0..=4.0).contains(&c) {
        failures.push(format!("U-sweep slope {c} outside [2, 4]"));
    }
    let theta_rows =
        report::sweep(&scenario_file("sweep_theta.json"), Axis::Theta, &[1.0, 1.001, 1.002, 1.005, 1.01], 5, 100).unwrap();
    let by_theta = report::worst_per_value(&theta_rows);
    if by_theta.windows(2).any(|w| w[1].1 < w[0].1) {
        failures.push(format!("theta-sweep not monotone: {by_theta:?}"));
    }
    for row in u_rows.iter().chain(&theta_rows).filter(|r| r.verdict != "pass") {
        failures.push(format!("{} = {} seed {}: invariant violations", row.axis, row.value, row.seed));
    }
    let trend: Vec<String> = by_theta.iter().map(|(_, s)| format!("{s:.4}")).collect();
    verdict(failures, format!("skew = {c:.3} U, theta trend {}", trend.join(" <= ")))
}

// ---------------------------------------------------------------------------

fn timed(f: impl FnOnce() -> Verdict) -> (Verdict, Duration) {
    let start = Instant::now();
    let v = f();
    (v, start.elapsed())
}

fn main() -> ExitCode {
    let mut all = true;
    let mut report = |k: u32, name: &str, (v, took): (Verdict, Duration), limit: Duration| {
        let in_time = took <= limit;
        let pass = v.pass && in_time;
        all &= pass;
        let time_note = if in_time { String::new() } else { format!(", exceeded {}s", limit.as_secs()) };
        println!(
            "criterion {k} {name:<28} {} ({}; {:.2}s{time_note})",
            if pass { "PASS" } else { "FAIL" },
            v.detail,
            took.as_secs_f64()
        );
    };
    report(1, "agreement properties", timed(agreement_instances), Duration::from_secs(30));
    report(2, "analytic values", timed(analytic_values), Duration::from_secs(1));
    let start = Instant::now();
    let runs: Vec<(Scenario, RunResult)> =
        phase_scenarios(Measurement::SelfMessage).into_iter().map(|sc| { let r = simulate(&sc).unwrap(); (sc, r) }).collect();
    let shared = start.elapsed();
    let (v3, t3) = timed(|| phase_envelope(&runs));
    report(3, "phase envelope", (v3, t3 + shared), Duration::from_secs(120));
    let (v4, t4) = timed(|| {
        let estimated: Vec<(Scenario, RunResult)> = phase_scenarios(Measurement::SelfEstimate)
            .into_iter()
            .map(|sc| { let r = simulate(&sc).unwrap(); (sc, r) })
            .collect();
        measurement_bounds(&runs, &estimated)
    });
    report(4, "measurement bounds", (v4, t4 + shared), Duration::from_secs(120));
    report(5, "frequency convergence", timed(frequency_convergence), Duration::from_secs(120));
    report(6, "self-stabilization", timed(stabilization), Duration::from_secs(300));
    report(7, "determinism", timed(determinism), Duration::from_secs(60));
    report(8, "sweep sanity", timed(sweeps), Duration::from_secs(180));
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
