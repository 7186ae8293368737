//! Ground-truth analysis of a finished run: round alignment, traces and every
//! invariant family.

use crate::feasibility::slack;
use crate::phase::{measurement_error_bound, self_estimate_error_bound};
use crate::protocol::{Measurement, PulseKind, RoundRecord};
use crate::scenario::{Algorithm, Resolved, Scenario};
use crate::sim::RawRun;
use crate::stabilizer::SyncParams;
use serde::Serialize;
use std::collections::{BTreeMap, HashMap};

/// Violations kept with full detail; the counts are always complete.
const DETAIL_CAP: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub family: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub round: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub node: Option<usize>,
    pub measured: f64,
    pub bound: f64,
    pub marginal: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundTrace {
    pub r: u32,
    pub p: Vec<Option<f64>>,
    pub q: Vec<Option<f64>>,
    pub skew: f64,
    pub envelope: f64,
    /// Spread of the round-midpoint effective rates.
    pub rate_spread: Option<f64>,
    /// Spread of effective rates over the whole round interval.
    pub interval_spread: Option<f64>,
    pub deltas: Vec<Option<f64>>,
    pub xis: Vec<Option<f64>>,
    pub mus: Vec<Option<f64>>,
    pub rates: Vec<Option<f64>>,
    pub resets: usize,
    pub violations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PulseRow {
    pub round: u32,
    pub node: usize,
    pub pulse_index: u8,
    pub real_time: f64,
    pub local_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub resolved: Resolved,
    pub traces: Vec<RoundTrace>,
    pub pulses: Vec<PulseRow>,
    pub violations: Vec<Violation>,
    pub violation_counts: BTreeMap<String, usize>,
    pub marginal_counts: BTreeMap<String, usize>,
    pub steady_state_skew: f64,
    pub e_limit: f64,
    pub resets_total: usize,
    pub resets_after_beat2: usize,
    pub duplicates: usize,
    pub insufficient_rounds: usize,
    pub beats: usize,
    pub next_signals: usize,
    pub deliveries: u64,
    pub events: u64,
    pub end_time: f64,
}

impl RunResult {
    pub fn passed(&self) -> bool {
        self.violation_counts.is_empty()
    }

    /// Failing (non-marginal) count of one family.
    pub fn count(&self, family: &str) -> usize {
        self.violation_counts.get(family).copied().unwrap_or(0)
    }
}

#[derive(Default)]
struct Sink {
    list: Vec<Violation>,
    counts: BTreeMap<String, usize>,
    marginal: BTreeMap<String, usize>,
    per_round: HashMap<u32, usize>,
}

impl Sink {
    fn push(&mut self, family: &str, round: Option<u32>, node: Option<usize>, measured: f64, bound: f64, marginal: bool, detail: String) {
        let map = if marginal { &mut self.marginal } else { &mut self.counts };
        *map.entry(family.to_string()).or_default() += 1;
        if !marginal {
            if let Some(r) = round {
                *self.per_round.entry(r).or_default() += 1;
            }
        }
        if self.list.len() < DETAIL_CAP {
            self.list.push(Violation { family: family.to_string(), round, node, measured, bound, marginal, detail });
        }
    }

    /// Requires `measured <= bound`; NaN always fails.
    fn upper(&mut self, family: &str, round: Option<u32>, node: Option<usize>, measured: f64, bound: f64, what: &str) {
        if measured <= bound {
            return;
        }
        let marginal = measured <= bound + slack(bound);
        self.push(family, round, node, measured, bound, marginal, format!("{what}: {measured} exceeds {bound}"));
    }

    fn lower(&mut self, family: &str, round: Option<u32>, node: Option<usize>, measured: f64, bound: f64, what: &str) {
        if measured >= bound {
            return;
        }
        let marginal = measured >= bound - slack(bound);
        self.push(family, round, node, measured, bound, marginal, format!("{what}: {measured} below {bound}"));
    }

    fn fail(&mut self, family: &str, round: Option<u32>, node: Option<usize>, detail: String) {
        self.push(family, round, node, f64::NAN, f64::NAN, false, detail);
    }
}

/// One aligned round of one node.
#[derive(Debug, Clone)]
struct Slot {
    pulse: f64,
    local: f64,
    second: Option<f64>,
    record: Option<RoundRecord>,
}

fn same_time(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

fn spread(values: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    if lo.is_finite() {
        hi - lo
    } else {
        0.0
    }
}

struct Alignment {
    slots: Vec<Vec<Slot>>,
    /// `(node, epoch, node round)` of every aligned first pulse.
    index: HashMap<(usize, u64, u32), u32>,
    first_beat: Vec<Option<f64>>,
}

fn align(raw: &RawRun, stabilizing: bool) -> Alignment {
    let n = raw.clocks.len();
    let mut first_beat = vec![None; n];
    for b in raw.beats.iter().filter(|b| b.k == 1) {
        first_beat[b.node].get_or_insert(b.real);
    }
    let mut seconds: HashMap<(usize, u64, u32), f64> = HashMap::new();
    for p in raw.pulses.iter().filter(|p| p.kind == PulseKind::Second) {
        seconds.insert((p.node, p.epoch, p.round), p.real);
    }
    let mut records: HashMap<(usize, u64, u32), &RoundRecord> = HashMap::new();
    for (v, logs) in raw.rounds.iter().enumerate() {
        for l in logs {
            records.insert((v, l.epoch, l.record.round), &l.record);
        }
    }
    let mut slots = vec![Vec::new(); n];
    let mut index = HashMap::new();
    for p in raw.pulses.iter().filter(|p| p.kind == PulseKind::First) {
        let keep = if stabilizing { first_beat[p.node].is_some_and(|b| p.real > b) } else { p.epoch == 0 };
        if !keep {
            continue;
        }
        let key = (p.node, p.epoch, p.round);
        let record = records.get(&key).filter(|r| same_time(r.pulse_real, p.real)).map(|r| (*r).clone());
        slots[p.node].push(Slot { pulse: p.real, local: p.local, second: seconds.get(&key).copied(), record });
        index.insert(key, slots[p.node].len() as u32);
    }
    Alignment { slots, index, first_beat }
}

struct Ctx<'a> {
    sc: &'a Scenario,
    sync: SyncParams,
    raw: &'a RawRun,
    al: Alignment,
    rounds: u32,
}

impl Ctx<'_> {
    fn slot(&self, v: usize, r: u32) -> Option<&Slot> {
        self.al.slots[v].get(r as usize - 1)
    }

    fn p(&self, v: usize, r: u32) -> Option<f64> {
        self.slot(v, r).map(|s| s.pulse)
    }

    fn skew(&self, r: u32) -> f64 {
        spread(self.raw.correct.iter().filter_map(|&v| self.p(v, r)))
    }

    fn theta(&self) -> f64 {
        self.sc.system.theta
    }

    /// Bound on one phase estimate's error at skew `skew`.
    fn estimate_bound(&self, skew: f64) -> f64 {
        let s = &self.sc.system;
        match self.sc.measurement {
            Measurement::SelfMessage => measurement_error_bound(s.theta, s.u, skew),
            Measurement::SelfEstimate => self_estimate_error_bound(s.theta, s.d, s.u, skew),
        }
    }

    fn correction_bound(&self, skew: f64) -> f64 {
        let s = &self.sc.system;
        match self.sc.measurement {
            Measurement::SelfMessage => s.theta * (skew + s.u),
            Measurement::SelfEstimate => skew + self.estimate_bound(skew),
        }
    }

    /// Effective rate `mu * h` at the midpoint between two pulses.
    fn midpoint_rate(&self, v: usize, r: u32) -> Option<f64> {
        let mu = self.slot(v, r)?.record.as_ref()?.mu?;
        let a = self.p(v, r)?;
        let b = self.p(v, r + 1)?;
        Some(mu * self.raw.clocks[v].rate_at(0.5 * (a + b)))
    }

    fn rate_extremes(&self, v: usize, r: u32) -> Option<(f64, f64, f64)> {
        let mu = self.slot(v, r)?.record.as_ref()?.mu?;
        let (lo, hi) = self.raw.clocks[v].rate_range(self.p(v, r)?, self.p(v, r + 1)?);
        Some((mu * lo, mu * hi, mu))
    }
}

pub fn analyze(sc: &Scenario, res: &Resolved, raw: RawRun) -> RunResult {
    let stabilizing = res.stab.is_some();
    let al = align(&raw, stabilizing);
    let available = raw.correct.iter().map(|&v| al.slots[v].len() as u32).min().unwrap_or(0);
    let rounds = if stabilizing { available.saturating_sub(1) } else { available.saturating_sub(1).min(sc.rounds) };
    let cx = Ctx { sc, sync: res.sync, raw: &raw, al, rounds };
    let mut sink = Sink::default();
    let checks = sc.checks;

    if raw.stalled || (!stabilizing && rounds < sc.rounds) {
        sink.fail("progress", None, None, format!("only {rounds} complete rounds by t = {}", raw.end_time));
    }
    if stabilizing && rounds == 0 {
        sink.fail("progress", None, None, "no aligned round after the first compliant beat".into());
    }
    if checks.delay_window {
        for d in &raw.bad_deliveries {
            let delay = d.recv - d.send;
            sink.fail("delay_window", None, Some(d.to), format!("delay {delay} from {} outside [d - U, d]", d.from));
        }
    }
    for r in 1..=rounds {
        round_checks(&cx, r, &mut sink);
    }
    if checks.anchor && !stabilizing && rounds >= 1 {
        let (tau1, _, _) = cx.sync.head();
        let bound = sc.system.big_f + (1.0 - 1.0 / cx.theta()) * tau1;
        sink.upper("anchor", Some(1), None, cx.skew(1), bound, "first-round skew");
    }
    if matches!(cx.sync, SyncParams::Freq(_)) && checks.frequency {
        frequency_checks(&cx, &mut sink);
    }
    if stabilizing && checks.stabilization {
        stabilization_checks(&cx, res, &mut sink);
    }
    let resets_after_beat2 = raw.resets.iter().filter(|r| r.beat >= 2).count();

    let traces = build_traces(&cx, &sink);
    let steady_state_skew = final_fifth(&traces).map(|t| t.skew).fold(0.0, f64::max);
    let pulses = pulse_rows(&cx);
    let mut duplicates = 0;
    let mut insufficient = 0;
    for logs in &raw.rounds {
        for l in logs {
            duplicates += l.record.duplicates;
            insufficient += (l.record.insufficient_phase || l.record.insufficient_rate) as usize;
        }
    }
    RunResult {
        algorithm: sc.algorithm,
        seed: sc.seed,
        resolved: *res,
        traces,
        pulses,
        violations: sink.list,
        violation_counts: sink.counts,
        marginal_counts: sink.marginal,
        steady_state_skew,
        e_limit: res.sync.e_limit(),
        resets_total: raw.resets.len(),
        resets_after_beat2,
        duplicates,
        insufficient_rounds: insufficient,
        beats: raw.beats.len(),
        next_signals: raw.nexts.len(),
        deliveries: raw.deliveries,
        events: raw.events,
        end_time: raw.end_time,
    }
}

/// The last 20% of the traces (at least one).
pub fn final_fifth(traces: &[RoundTrace]) -> impl Iterator<Item = &RoundTrace> {
    let take = traces.len().div_ceil(5).max(1).min(traces.len());
    traces[traces.len() - take..].iter()
}

fn round_checks(cx: &Ctx, r: u32, sink: &mut Sink) {
    let checks = cx.sc.checks;
    let skew = cx.skew(r);
    let envelope = cx.sync.envelope(r);
    if checks.envelope {
        sink.upper("envelope", Some(r), None, skew, envelope, "skew");
    }
    let correct = &cx.raw.correct;
    for &v in correct {
        let slot = cx.slot(v, r).expect("aligned rounds exist for every correct node");
        let Some(rec) = slot.record.as_ref() else {
            if checks.execution {
                sink.fail("execution", Some(r), Some(v), "round finished without a record".into());
            }
            continue;
        };
        if checks.measurement {
            for &w in correct {
                let (Some(est), Some(a)) = (rec.phase_entries[w], rec.first_arrivals[w]) else { continue };
                if w == v && cx.sc.measurement == Measurement::SelfEstimate || a.send_real.is_nan() {
                    continue;
                }
                let err = (est - (a.send_real - slot.pulse)).abs();
                sink.upper("measurement", Some(r), Some(v), err, cx.estimate_bound(skew), &format!("estimate of node {w}"));
            }
        }
        if checks.correction {
            sink.upper("correction", Some(r), Some(v), rec.delta.abs(), cx.correction_bound(skew), "phase correction");
        }
        if checks.execution {
            execution(cx, r, v, rec, sink);
        }
        if checks.period {
            if let Some(next) = cx.p(v, r + 1) {
                let (lo, hi) = period_bounds(cx, r, cx.correction_bound(envelope));
                let gap = next - slot.pulse;
                sink.lower("period", Some(r), Some(v), gap, lo, "pulse spacing");
                sink.upper("period", Some(r), Some(v), gap, hi, "pulse spacing");
            }
        }
    }
}

fn period_bounds(cx: &Ctx, r: u32, correction: f64) -> (f64, f64) {
    let theta = cx.theta();
    match &cx.sync {
        SyncParams::Phase(p) => {
            let (a, b) = (p.timing(r), p.timing(r + 1));
            let shift = b.tau1 - a.tau1;
            ((a.big_t - correction + shift) / theta, a.big_t + correction + shift)
        }
        SyncParams::Freq(p) => ((p.big_t - correction) / (theta * theta * theta), p.big_t + correction),
    }
}

fn execution(cx: &Ctx, r: u32, v: usize, rec: &RoundRecord, sink: &mut Sink) {
    let self_estimate = cx.sc.measurement == Measurement::SelfEstimate;
    if rec.insufficient_phase || rec.insufficient_rate {
        sink.fail("execution", Some(r), Some(v), "agreement step lacked data".into());
    }
    for &w in &cx.raw.correct {
        if w == v && self_estimate {
            continue;
        }
        let expected = cx.p(w, r).unwrap_or(f64::NAN);
        match rec.first_arrivals[w] {
            Some(a) if same_time(a.send_real, expected) => {}
            Some(a) => sink.fail(
                "execution",
                Some(r),
                Some(v),
                format!("window held pulse {} of node {w} instead of {expected}", a.send_real),
            ),
            None => sink.fail("execution", Some(r), Some(v), format!("pulse of node {w} missed the window")),
        }
        if let SyncParams::Freq(_) = cx.sync {
            let expected = cx.slot(w, r).and_then(|s| s.second).unwrap_or(f64::NAN);
            match rec.second_arrivals[w] {
                Some(a) if same_time(a.send_real, expected) => {}
                _ => sink.fail("execution", Some(r), Some(v), format!("second pulse of node {w} missed the window")),
            }
        }
    }
    let close = match &cx.sync {
        SyncParams::Phase(_) => rec.window_close_local,
        SyncParams::Freq(p) => rec.pulse_local + (p.tau2 + p.tau3 + p.tau4) / rec.mu.unwrap_or(1.0),
    };
    sink.lower("execution", Some(r), Some(v), rec.planned_end_local, close, "round end before the last window closed");
}

fn frequency_checks(cx: &Ctx, sink: &mut Sink) {
    let SyncParams::Freq(p) = cx.sync else { return };
    let top = cx.theta() * cx.theta();
    let correct = &cx.raw.correct;
    for &v in correct {
        for r in 1..=cx.rounds {
            let Some(rec) = cx.slot(v, r).and_then(|s| s.record.as_ref()) else { continue };
            for mu in [rec.mu, rec.mu_next].into_iter().flatten() {
                sink.lower("multiplier_range", Some(r), Some(v), mu, 1.0, "multiplier");
                sink.upper("multiplier_range", Some(r), Some(v), mu, top, "multiplier");
            }
        }
    }
    let spreads: Vec<Option<f64>> = (1..=cx.rounds)
        .map(|r| {
            let rates: Option<Vec<f64>> = correct.iter().map(|&v| cx.midpoint_rate(v, r)).collect();
            rates.map(|x| spread(x.into_iter()))
        })
        .collect();
    for r in 1..cx.rounds {
        if let (Some(a), Some(b)) = (spreads[r as usize - 1], spreads[r as usize]) {
            sink.upper("rate_recurrence", Some(r + 1), None, b, p.rate_step_bound(a), "midpoint rate spread");
        }
    }
    if cx.rounds >= 10 {
        let start = cx.rounds - cx.rounds.div_ceil(5) + 1;
        for r in start..=cx.rounds {
            let ext: Option<Vec<(f64, f64, f64)>> = correct.iter().map(|&v| cx.rate_extremes(v, r)).collect();
            if let Some(ext) = ext {
                let hi = ext.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
                let lo = ext.iter().map(|e| e.0).fold(f64::INFINITY, f64::min);
                sink.upper("rate_floor", Some(r), None, hi - lo, p.rate_floor(), "interval rate spread");
            }
        }
    }
    let self_estimate = cx.sc.measurement == Measurement::SelfEstimate;
    for r in 1..=cx.rounds {
        for &v in correct {
            let Some(rec) = cx.slot(v, r).and_then(|s| s.record.as_ref()) else { continue };
            let Some(own) = cx.midpoint_rate(v, r) else { continue };
            for &w in correct {
                if w == v && self_estimate {
                    continue;
                }
                let (Some(est), Some(other)) = (rec.rate_entries.get(w).copied().flatten(), cx.midpoint_rate(w, r)) else {
                    continue;
                };
                let err = (est - (other - own)).abs();
                sink.upper("freq_estimate", Some(r), Some(v), err, p.estimate_error_bound(), &format!("rate estimate of node {w}"));
            }
            if let Some((lo, hi, _)) = cx.rate_extremes(v, r) {
                let dev = (hi - own).abs().max((own - lo).abs());
                sink.upper("rate_proxy", Some(r), Some(v), dev, p.rate_proxy_bound(), "rate drift within the round");
            }
        }
    }
}

fn stabilization_checks(cx: &Ctx, res: &Resolved, sink: &mut Sink) {
    let st = res.stab.expect("stabilizing run");
    let dr = cx.sync.drift();
    let (tau1, _, _) = cx.sync.head();
    let e_m = cx.sync.envelope(st.m);
    let correct = &cx.raw.correct;
    let Some(b) = correct.iter().filter_map(|&v| cx.al.first_beat[v]).reduce(f64::min) else {
        sink.fail("stabilization", None, None, "no compliant beat was delivered".into());
        return;
    };
    for reset in cx.raw.resets.iter().filter(|r| r.beat >= 2) {
        sink.fail("no_reset", None, Some(reset.node), format!("reset at t = {} after beat {}", reset.real, reset.beat));
    }
    let m = st.m;
    for &v in correct {
        if let Some(p1) = cx.p(v, 1) {
            sink.lower("reinit", Some(1), Some(v), p1, b + st.r_minus / dr, "first pulse after the beat");
            sink.upper("reinit", Some(1), Some(v), p1, b + st.p_skew + st.r_plus + tau1, "first pulse after the beat");
        }
        let window_lo = b + st.b1 + st.b2;
        let window_hi = window_lo + st.b3;
        match cx.raw.nexts.iter().find(|x| x.node == v && x.real >= b + st.b1) {
            Some(next) => {
                sink.lower("next_window", None, Some(v), next.real, window_lo, "first NEXT");
                sink.upper("next_window", None, Some(v), next.real, window_hi, "first NEXT");
                if let Some(slot) = cx.slot(v, m) {
                    let expected = slot.local + st.next_wait;
                    sink.upper("next_window", Some(m), Some(v), (next.local - expected).abs(), slack(expected), "NEXT local time");
                }
            }
            None => sink.fail("next_window", None, Some(v), "no NEXT after the first compliant beat".into()),
        }
        let beats: Vec<(u32, f64)> = cx.raw.beats.iter().filter(|x| x.node == v && x.k >= 2).map(|x| (x.k, x.real)).collect();
        for (k, t) in beats {
            let Some(pm) = cx.p(v, (k - 1) * m) else { continue };
            sink.lower("beat_alignment", Some((k - 1) * m), Some(v), t, pm, &format!("beat {k}"));
            sink.upper("beat_alignment", Some((k - 1) * m), Some(v), t, pm + (dr + 1.0) * e_m + st.p_skew, &format!("beat {k}"));
        }
    }
}

fn build_traces(cx: &Ctx, sink: &Sink) -> Vec<RoundTrace> {
    let n = cx.sc.system.n;
    let freq = matches!(cx.sync, SyncParams::Freq(_));
    (1..=cx.rounds)
        .map(|r| {
            let mut t = RoundTrace {
                r,
                p: vec![None; n],
                q: vec![None; n],
                skew: cx.skew(r),
                envelope: cx.sync.envelope(r),
                rate_spread: None,
                interval_spread: None,
                deltas: vec![None; n],
                xis: vec![None; n],
                mus: vec![None; n],
                rates: vec![None; n],
                resets: 0,
                violations: sink.per_round.get(&r).copied().unwrap_or(0),
            };
            for &v in &cx.raw.correct {
                let slot = cx.slot(v, r).expect("aligned");
                t.p[v] = Some(slot.pulse);
                t.q[v] = slot.second;
                if let Some(rec) = &slot.record {
                    t.deltas[v] = Some(rec.delta);
                    t.xis[v] = rec.xi;
                    t.mus[v] = rec.mu;
                }
                t.rates[v] = cx.midpoint_rate(v, r);
            }
            if freq {
                let rates: Option<Vec<f64>> = cx.raw.correct.iter().map(|&v| t.rates[v]).collect();
                t.rate_spread = rates.map(|x| spread(x.into_iter()));
                let ext: Option<Vec<(f64, f64, f64)>> = cx.raw.correct.iter().map(|&v| cx.rate_extremes(v, r)).collect();
                t.interval_spread = ext.map(|e| {
                    e.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max) - e.iter().map(|x| x.0).fold(f64::INFINITY, f64::min)
                });
            }
            if let (Some(a), Some(b)) = (
                cx.raw.correct.iter().filter_map(|&v| cx.p(v, r)).reduce(f64::min),
                cx.raw.correct.iter().filter_map(|&v| cx.p(v, r + 1)).reduce(f64::max),
            ) {
                t.resets = cx.raw.resets.iter().filter(|x| x.real >= a && x.real < b).count();
            }
            t
        })
        .collect()
}

fn pulse_rows(cx: &Ctx) -> Vec<PulseRow> {
    let mut rows: Vec<PulseRow> = cx
        .raw
        .pulses
        .iter()
        .map(|p| PulseRow {
            round: cx.al.index.get(&(p.node, p.epoch, p.round)).copied().unwrap_or(0),
            node: p.node,
            pulse_index: p.kind.index(),
            real_time: p.real,
            local_time: p.local,
        })
        .collect();
    rows.sort_by(|a, b| {
        (a.round, a.node).cmp(&(b.round, b.node)).then(a.real_time.total_cmp(&b.real_time))
    });
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClockPolicy, SystemParams};
    use crate::scenario::Algorithm;
    use crate::sim::{DeliveryLog, Engine};

    fn raw_run(alg: Algorithm) -> (Scenario, Resolved, RawRun) {
        let mut sc = Scenario::new(SystemParams::new(4, 1.001, 0.0, 1.0, 0.05, 1.0).unwrap(), alg);
        sc.rounds = 20;
        sc.seed = 3;
        sc.clock_policy = ClockPolicy::RandomConstant;
        let res = sc.resolve().unwrap();
        let raw = Engine::new(&sc, &res).unwrap().run();
        (sc, res, raw)
    }

    #[test]
    fn unmodified_run_is_clean() {
        let (sc, res, raw) = raw_run(Algorithm::Phase);
        let r = analyze(&sc, &res, raw);
        assert!(r.passed(), "{:?}", r.violations);
        assert_eq!(r.traces.len(), 20);
        assert!(r.traces.iter().all(|t| t.skew <= t.envelope));
    }

    #[test]
    fn corrupted_correction_is_flagged() {
        let (sc, res, mut raw) = raw_run(Algorithm::Phase);
        raw.rounds[1][5].record.delta += 0.5;
        let r = analyze(&sc, &res, raw);
        assert!(r.count("correction") >= 1, "{:?}", r.violation_counts);
    }

    #[test]
    fn out_of_window_delivery_is_flagged() {
        let (sc, res, mut raw) = raw_run(Algorithm::Phase);
        raw.bad_deliveries.push(DeliveryLog { from: 0, to: 1, send: 1.0, recv: 1.5 });
        let r = analyze(&sc, &res, raw);
        assert_eq!(r.count("delay_window"), 1);
        assert!(!r.passed());
    }

    #[test]
    fn missing_rounds_fail_progress() {
        let (mut sc, res, raw) = raw_run(Algorithm::Phase);
        sc.rounds = 500;
        assert_eq!(analyze(&sc, &res, raw).count("progress"), 1);
    }

    #[test]
    fn freq_runs_report_rates() {
        let (sc, res, raw) = raw_run(Algorithm::Freq);
        let r = analyze(&sc, &res, raw);
        assert!(r.passed(), "{:?}", r.violations);
        assert!(r.traces.iter().skip(1).all(|t| t.rate_spread.is_some()));
    }

    #[test]
    fn final_fifth_takes_the_tail() {
        let (sc, res, raw) = raw_run(Algorithm::Phase);
        let r = analyze(&sc, &res, raw);
        let rounds: Vec<u32> = final_fifth(&r.traces).map(|t| t.r).collect();
        assert_eq!(rounds, vec![17, 18, 19, 20]);
        assert_eq!(final_fifth(&r.traces[..1]).count(), 1);
    }

    #[test]
    fn spread_of_values() {
        assert_eq!(spread([1.0, 4.0, 2.5].into_iter()), 3.0);
        assert_eq!(spread(std::iter::empty()), 0.0);
    }
}
