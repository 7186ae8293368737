//! Self-stabilizing wrapper: pulse counting modulo `M`, beat-driven consistency
//! checks with resets, NEXT feedback, and a beat oracle bound by its contract.

use crate::feasibility::{Inequality, Infeasible};
use crate::freq::{self, FreqOverrides, FreqParams};
use crate::model::SystemParams;
use crate::phase::{self, beta_phase, PhaseParams};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Phase,
    Freq,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyncParams {
    Phase(PhaseParams),
    Freq(FreqParams),
}

impl SyncParams {
    /// Drift factor the envelope analysis runs with.
    pub fn drift(&self) -> f64 {
        match self {
            SyncParams::Phase(p) => p.theta,
            SyncParams::Freq(p) => p.theta_bar,
        }
    }

    pub fn envelope(&self, r: u32) -> f64 {
        match self {
            SyncParams::Phase(p) => p.envelope(r),
            SyncParams::Freq(p) => p.envelope(r),
        }
    }

    pub fn e_limit(&self) -> f64 {
        match self {
            SyncParams::Phase(p) => p.e_limit,
            SyncParams::Freq(p) => p.e_limit,
        }
    }

    /// `(tau1, tau2, T)` of round 1.
    pub fn head(&self) -> (f64, f64, f64) {
        match self {
            SyncParams::Phase(p) => {
                let t = p.timing(1);
                (t.tau1, t.tau2, t.big_t)
            }
            SyncParams::Freq(p) => (p.tau1, p.tau2, p.big_t),
        }
    }

    fn units(&self) -> (f64, f64) {
        match self {
            SyncParams::Phase(p) => (p.d, p.u),
            SyncParams::Freq(p) => (p.d, p.u),
        }
    }

    /// Budget inequalities of the wrapped algorithm.
    pub fn budget_rows(&self, horizon: u32) -> Vec<Inequality> {
        match self {
            SyncParams::Phase(p) => phase::check_condition1(p, horizon).rows,
            SyncParams::Freq(p) => freq::check_condition2(p),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabParams {
    pub m: u32,
    pub r_minus: f64,
    pub r_plus: f64,
    pub p_skew: f64,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub d_f: f64,
    /// Envelope after `M` rounds.
    pub e_m: f64,
    /// Local wait between pulse `0 mod M` and NEXT.
    pub next_wait: f64,
}

/// Sufficient threshold in closed form; reported as a diagnostic only.
pub fn closed_form_threshold(variant: Variant, theta: f64) -> f64 {
    match variant {
        Variant::Phase => {
            let b = beta_phase(theta);
            (2.0 * theta * theta + theta) / (2.0 - theta) * (1.0 - 1.0 / (theta * theta) + 4.0 * (theta - 1.0) / (1.0 - b))
        }
        Variant::Freq => {
            let tb = freq::theta_bar(theta);
            let b = beta_phase(tb);
            (4.0 * tb * tb + 5.0 * tb) / (2.0 - tb) * (1.0 - 1.0 / (tb * tb) + 4.0 * (tb - 1.0) / (1.0 - b))
        }
    }
}

/// Growth of the required round length per unit round length as `M` grows;
/// the construction is feasible for large `M` iff this is below 1.
pub fn limit_coefficient(variant: Variant, theta: f64) -> f64 {
    let dr = match variant {
        Variant::Phase => theta,
        Variant::Freq => freq::theta_bar(theta),
    };
    let b = beta_phase(dr);
    let per_e1 = (1.0 - 1.0 / (dr * dr)) + (dr + 1.0 + 2.0 / dr) * (1.0 - 1.0 / dr) / (1.0 - b);
    let sync = match variant {
        Variant::Phase => 3.0 * dr,
        Variant::Freq => dr * (4.0 * dr + 1.0),
    };
    sync * per_e1
}

/// Optional inputs of the joint solver.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabOptions {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beat_skew: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_f: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub big_t: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<u32>,
}

/// `c0 + c1 * T`.
#[derive(Debug, Clone, Copy)]
struct Aff(f64, f64);

impl Aff {
    fn at(self, t: f64) -> f64 {
        self.0 + self.1 * t
    }
    fn add(self, o: Aff) -> Aff {
        Aff(self.0 + o.0, self.1 + o.1)
    }
    fn sub(self, o: Aff) -> Aff {
        Aff(self.0 - o.0, self.1 - o.1)
    }
    fn scale(self, k: f64) -> Aff {
        Aff(self.0 * k, self.1 * k)
    }
    fn plus(self, c: f64) -> Aff {
        Aff(self.0 + c, self.1)
    }
}

const T: Aff = Aff(0.0, 1.0);

struct Shape {
    e1: Aff,
    e_m: Aff,
    tau1: Aff,
    r_minus: Aff,
    r_plus: Aff,
}

fn shape(variant: Variant, dr: f64, d: f64, u: f64, p: f64, m: u32) -> Option<(Shape, Vec<(&'static str, Aff)>)> {
    let beta = beta_phase(dr);
    let lim = T.scale(1.0 - 1.0 / dr).plus((3.0 * dr - 1.0) * u).scale(1.0 / (1.0 - beta));
    let g = beta.powi(m as i32 - 1);
    let c = dr + 1.0 + 2.0 / dr;
    if c * g >= 1.0 {
        return None;
    }
    // e1 = a0 + a1 T + c e(M), e(M) = g e1 + (1 - g) L
    let e1 = T
        .scale(1.0 - 1.0 / (dr * dr))
        .plus((1.0 + 1.0 / dr) * p + (dr + 1.0 / dr) * u)
        .add(lim.scale(c * (1.0 - g)))
        .scale(1.0 / (1.0 - c * g));
    let e_m = e1.scale(g).add(lim.scale(1.0 - g));
    let tau1 = e1.scale(dr);
    let r_minus = T.scale(1.0 / dr).sub(e_m.scale(dr + 2.0).plus(u + p));
    let r_plus = T.add(e_m.plus(u).scale(dr)).sub(tau1);
    let sync_need = match variant {
        Variant::Phase => e1.scale(3.0 * dr).plus(dr * (d + u)),
        Variant::Freq => e1.scale(dr * (4.0 * dr + 1.0)).plus(dr * (2.0 * dr * d + u)),
    };
    let no_early = tau1.add(e_m.scale(dr + 2.0)).plus(u + (dr + 1.0) * p + dr * d).scale(dr);
    let beat_lhs = r_plus.add(T).add(e1.plus(u).scale(dr)).plus(p);
    let b2_rhs = e_m.add(T.scale(1.0 / dr).sub(tau1).scale(m as f64 - 1.0)).add(r_minus.scale(1.0 / dr));
    // each entry must be >= 0
    let constraints = vec![
        ("round_length", T.sub(sync_need)),
        ("no_early", T.sub(no_early)),
        ("cycle_length", b2_rhs.sub(beat_lhs)),
    ];
    Some((Shape { e1, e_m, tau1, r_minus, r_plus }, constraints))
}

/// Interval of `T` on which every affine constraint is non-negative.
fn feasible_interval(constraints: &[(&'static str, Aff)]) -> Option<(f64, f64)> {
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    for (_, a) in constraints {
        if a.1 > 0.0 {
            lo = lo.max(-a.0 / a.1);
        } else if a.1 < 0.0 {
            hi = hi.min(-a.0 / a.1);
        } else if a.0 < 0.0 {
            return None;
        }
    }
    (lo <= hi).then_some((lo, hi))
}

/// Joint solution of the wrapped algorithm's budgets and the ten beat constraints.
pub fn solve_condition3(s: &SystemParams, variant: Variant, opts: &StabOptions) -> Result<(SyncParams, StabParams), Infeasible> {
    let coefficient = limit_coefficient(variant, s.theta);
    let dr = match variant {
        Variant::Phase => s.theta,
        Variant::Freq => freq::theta_bar(s.theta),
    };
    if !(dr < 2.0) || !(coefficient < 1.0) {
        return Err(Infeasible::threshold(
            "alpha_stab",
            coefficient,
            format!("round-length growth coefficient {coefficient:.4} must be below 1"),
        ));
    }
    if variant == Variant::Freq && freq::alpha_bar(s.theta) >= 1.0 {
        let ab = freq::alpha_bar(s.theta);
        return Err(Infeasible::threshold("alpha_bar", ab, format!("alpha_bar = {ab} must be below 1")));
    }
    let p = opts.beat_skew.unwrap_or(s.d);
    let d_f = opts.d_f.unwrap_or(s.d);
    let ms: Vec<u32> = match opts.m {
        Some(m) => vec![m],
        None => (2..=256).collect(),
    };
    for m in ms {
        let Some((sh, constraints)) = shape(variant, dr, s.d, s.u, p, m) else { continue };
        let Some((lo, hi)) = feasible_interval(&constraints) else { continue };
        let big_t = match opts.big_t {
            Some(t) if t >= lo && t <= hi => t,
            Some(_) => continue,
            None => lo * (1.0 + 1e-9),
        };
        if big_t > hi {
            continue;
        }
        let e1 = sh.e1.at(big_t);
        let e_m = sh.e_m.at(big_t);
        let inner = SystemParams { big_f: (2.0 - dr) * e1, ..*s };
        let sync = match variant {
            Variant::Phase => SyncParams::Phase(PhaseParams::constant(&inner, sh.tau1.at(big_t), dr * (e1 + s.d), big_t)),
            Variant::Freq => {
                let tau1 = dr * e1;
                let tau2 = dr * (e1 + s.d);
                let grow = (1.0 - 1.0 / dr) * (tau1 + tau2);
                let ov = FreqOverrides {
                    big_t: Some(big_t),
                    tau1: Some(tau1),
                    tau2: Some(tau2),
                    tau4: Some(dr * (e1 + s.d + grow)),
                    ..Default::default()
                };
                SyncParams::Freq(freq::solve_condition2(&inner, &ov)?)
            }
        };
        let r_minus = sh.r_minus.at(big_t);
        let r_plus = sh.r_plus.at(big_t);
        let (tau1, _, _) = sync.head();
        let b1 = p + dr * e_m;
        let beat_lhs = p + r_plus + big_t + dr * (e1 + s.u);
        let b3_lhs = dr * e_m + (m as f64 - 1.0) * (big_t + dr * tau1) + p + r_plus + tau1;
        let stab = StabParams {
            m,
            r_minus,
            r_plus,
            p_skew: p,
            b1,
            b2: beat_lhs - b1,
            b3: (b3_lhs - beat_lhs).max(0.0),
            d_f,
            e_m,
            next_wait: dr * e_m,
        };
        let rows = check_condition3(&sync, &stab);
        if rows.iter().all(|r| r.holds) {
            return Ok((sync, stab));
        }
    }
    Err(Infeasible::threshold(
        "alpha_stab",
        coefficient,
        "no cycle length M admits a consistent round length".to_string(),
    ))
}

/// The ten beat constraints followed by the wrapped algorithm's budgets.
pub fn check_condition3(sync: &SyncParams, st: &StabParams) -> Vec<Inequality> {
    let dr = sync.drift();
    let (tau1, tau2, big_t) = sync.head();
    let (d, u) = sync.units();
    let e1 = sync.envelope(1);
    let e_m = sync.envelope(st.m);
    let (p, rm, rp) = (st.p_skew, st.r_minus, st.r_plus);
    let m1 = st.m as f64 - 1.0;
    let mut rows = vec![
        Inequality::le("initial_skew", None, p + rp + tau1 - rm / dr, e1),
        Inequality::le("listen_on_time", None, p + rp, rm / dr),
        Inequality::le("receive_on_time", None, p + rp + tau1 + d, (rm + tau2) / dr),
        Inequality::le("no_early", None, p + d, (rm - tau1) / dr),
        Inequality::le("beat_trivial", None, p + rp + big_t + dr * (e1 + u), st.b1 + st.b2),
        Inequality::le("b1", None, p + dr * e_m, st.b1),
        Inequality::le("b2", None, st.b1 + st.b2, e_m + m1 * (big_t / dr - tau1) + rm / dr),
        Inequality::le("b3", None, dr * e_m + m1 * (big_t + dr * tau1) + p + rp + tau1, st.b1 + st.b2 + st.b3),
        Inequality::le("no_early_round", None, rm, big_t / dr - ((dr + 2.0) * e_m + u + p)),
        Inequality::le("no_late_round", None, big_t + dr * (e_m + u) - tau1, rp),
    ];
    rows.extend(sync.budget_rows(st.m.max(8)));
    rows
}

// ---------------------------------------------------------------------------
// Interface layer

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IfaceAction {
    ScheduleNext { at_local: f64 },
    Reset { wait: f64 },
    LateCheck { at_local: f64, generation: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NextPulse {
    Known(f64),
    /// Not determined yet; the check waits until it is.
    Unknown,
}

#[derive(Debug, Clone, Copy)]
struct Deferred {
    beat_local: f64,
}

#[derive(Debug, Clone, Copy)]
struct Late {
    generation: u64,
    pulses_at_beat: u64,
}

/// Pulse counter and beat checks of one node.
#[derive(Debug, Clone)]
pub struct Interface {
    m: u32,
    i: u32,
    r_minus: f64,
    r_plus: f64,
    next_wait: f64,
    pulses: u64,
    generation: u64,
    deferred: Option<Deferred>,
    late: Option<Late>,
}

impl Interface {
    pub fn new(st: &StabParams) -> Self {
        Interface {
            m: st.m,
            i: 0,
            r_minus: st.r_minus,
            r_plus: st.r_plus,
            next_wait: st.next_wait,
            pulses: 0,
            generation: 0,
            deferred: None,
            late: None,
        }
    }

    pub fn counter(&self) -> u32 {
        self.i
    }

    pub fn set_counter(&mut self, i: u32) {
        self.i = i % self.m;
    }

    /// Counts one first pulse; returns the NEXT wait when the counter wraps.
    pub fn on_pulse(&mut self, local: f64) -> Option<IfaceAction> {
        self.pulses += 1;
        self.i = (self.i + 1) % self.m;
        (self.i == 0).then_some(IfaceAction::ScheduleNext { at_local: local + self.next_wait })
    }

    pub fn on_beat(&mut self, beat_local: f64, next: NextPulse) -> Option<IfaceAction> {
        self.generation += 1;
        self.deferred = None;
        self.late = None;
        if self.i != 0 {
            return Some(IfaceAction::Reset { wait: self.r_plus });
        }
        match next {
            NextPulse::Known(at) => Some(self.judge(beat_local, beat_local, at)),
            NextPulse::Unknown => {
                self.deferred = Some(Deferred { beat_local });
                None
            }
        }
    }

    /// Resumes a deferred beat check once the next pulse time is known.
    pub fn on_next_pulse_known(&mut self, now_local: f64, at: f64) -> Option<IfaceAction> {
        let d = self.deferred.take()?;
        Some(self.judge(d.beat_local, now_local, at))
    }

    fn judge(&mut self, beat_local: f64, now_local: f64, next_pulse: f64) -> IfaceAction {
        if next_pulse < beat_local + self.r_minus {
            IfaceAction::Reset { wait: (self.r_plus - (now_local - beat_local)).max(0.0) }
        } else {
            self.late = Some(Late { generation: self.generation, pulses_at_beat: self.pulses });
            IfaceAction::LateCheck { at_local: beat_local + self.r_plus, generation: self.generation }
        }
    }

    /// `pre_pulse` tells whether a started round still waits for its pulse.
    pub fn on_late_check(&mut self, generation: u64, pre_pulse: bool) -> Option<IfaceAction> {
        let late = self.late.filter(|l| l.generation == generation)?;
        self.late = None;
        let started = self.pulses > late.pulses_at_beat || pre_pulse;
        (!started).then_some(IfaceAction::Reset { wait: 0.0 })
    }

    /// Invalidates pending checks; the caller halts the sync layer.
    pub fn begin_reset(&mut self) {
        self.generation += 1;
        self.deferred = None;
        self.late = None;
    }

    pub fn finish_reset(&mut self) {
        self.i = 0;
    }
}

// ---------------------------------------------------------------------------
// Beat oracle

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OraclePolicy {
    Earliest,
    Latest,
    #[default]
    Random,
    #[serde(rename = "split_P")]
    SplitP,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleConfig {
    pub p_skew: f64,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub policy: OraclePolicy,
    pub chaos_beats: u32,
    pub chaos_duration: f64,
    /// Number of contract-compliant beats to emit.
    pub cycles: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OracleOutput {
    /// Per-node beat times for beat index `k` (`k = 0` marks pre-stabilization beats).
    Beats { k: u32, times: Vec<(usize, f64)> },
    Deadline { k: u32, at: f64 },
}

pub struct BeatOracle {
    cfg: OracleConfig,
    correct: Vec<usize>,
    n: usize,
    k: u32,
    min_b: f64,
    seen: Vec<bool>,
    first_next: Option<f64>,
    decided: bool,
    rng: ChaCha8Rng,
}

impl BeatOracle {
    pub fn new(cfg: OracleConfig, n: usize, correct: Vec<usize>, rng: ChaCha8Rng) -> Self {
        BeatOracle { cfg, correct, n, k: 0, min_b: 0.0, seen: vec![false; n], first_next: None, decided: true, rng }
    }

    /// Pre-stabilization beats and the first compliant beat.
    pub fn start(&mut self) -> Vec<OracleOutput> {
        let mut chaos = Vec::new();
        for _ in 0..self.cfg.chaos_beats {
            let node = self.correct[self.rng.gen_range(0..self.correct.len())];
            chaos.push((node, self.rng.gen_range(0.0..=1.0) * self.cfg.chaos_duration));
        }
        chaos.sort_by(|a, b| a.1.total_cmp(&b.1));
        let mut out = vec![OracleOutput::Beats { k: 0, times: chaos }];
        out.extend(self.decide(self.cfg.chaos_duration));
        out
    }

    pub fn beats_emitted(&self) -> u32 {
        self.k
    }

    fn offsets(&mut self) -> Vec<f64> {
        let p = self.cfg.p_skew;
        let count = self.correct.len();
        match self.cfg.policy {
            OraclePolicy::Earliest => vec![0.0; count],
            OraclePolicy::Latest => vec![p; count],
            OraclePolicy::Random => (0..count).map(|_| self.rng.gen_range(0.0..=p)).collect(),
            OraclePolicy::SplitP => (0..count).map(|i| if i < count / 2 { 0.0 } else { p }).collect(),
        }
    }

    fn decide(&mut self, at: f64) -> Vec<OracleOutput> {
        self.decided = true;
        if self.k >= self.cfg.cycles {
            return Vec::new();
        }
        self.k += 1;
        let offsets = self.offsets();
        let times: Vec<(usize, f64)> = self.correct.iter().zip(offsets).map(|(&v, o)| (v, at + o)).collect();
        let lo = times.iter().map(|t| t.1).fold(f64::INFINITY, f64::min);
        let hi = times.iter().map(|t| t.1).fold(f64::NEG_INFINITY, f64::max);
        debug_assert!(hi - lo <= self.cfg.p_skew * (1.0 + 1e-12), "beat spread exceeds the skew bound");
        self.min_b = lo;
        self.seen = vec![false; self.n];
        self.first_next = None;
        self.decided = false;
        let deadline = lo + self.cfg.b1 + self.cfg.b2 + self.cfg.b3;
        vec![OracleOutput::Beats { k: self.k, times }, OracleOutput::Deadline { k: self.k, at: deadline }]
    }

    /// A correct node's NEXT signal at real time `t`.
    pub fn on_next(&mut self, node: usize, t: f64) -> Vec<OracleOutput> {
        if self.decided || t < self.min_b + self.cfg.b1 || !self.correct.contains(&node) {
            return Vec::new();
        }
        self.seen[node] = true;
        let first = *self.first_next.get_or_insert(t);
        if self.cfg.policy == OraclePolicy::Earliest && first == t {
            return self.decide(t);
        }
        if self.correct.iter().all(|&v| self.seen[v]) {
            return self.decide(t);
        }
        Vec::new()
    }

    pub fn on_deadline(&mut self, k: u32, t: f64) -> Vec<OracleOutput> {
        if k != self.k || self.decided {
            return Vec::new();
        }
        self.decide(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sys(theta: f64) -> SystemParams {
        SystemParams::new(4, theta, 0.0, 1.0, 0.1, 1.0).unwrap()
    }

    #[test]
    fn feasibility_thresholds() {
        assert!(solve_condition3(&sys(1.03), Variant::Phase, &StabOptions::default()).is_ok());
        let err = solve_condition3(&sys(1.05), Variant::Phase, &StabOptions::default()).unwrap_err();
        assert_eq!(err.threshold.unwrap().0, "alpha_stab");
        assert!(solve_condition3(&sys(1.004), Variant::Freq, &StabOptions::default()).is_ok());
        assert!(solve_condition3(&sys(1.02), Variant::Freq, &StabOptions::default()).is_err());
    }

    #[test]
    fn solver_output_passes_all_rows() {
        for theta in [1.0, 1.001, 1.01, 1.03] {
            let (sync, st) = solve_condition3(&sys(theta), Variant::Phase, &StabOptions::default()).unwrap();
            assert!(check_condition3(&sync, &st).iter().all(|r| r.holds));
        }
        for theta in [1.0, 1.001, 1.004] {
            let (sync, st) = solve_condition3(&sys(theta), Variant::Freq, &StabOptions::default()).unwrap();
            assert!(check_condition3(&sync, &st).iter().all(|r| r.holds));
        }
    }

    #[test]
    fn late_round_bound_violation_is_reported() {
        let (sync, st) = solve_condition3(&sys(1.01), Variant::Phase, &StabOptions::default()).unwrap();
        let bad = StabParams { r_plus: st.r_plus * 0.9, ..st };
        let rows = check_condition3(&sync, &bad);
        assert!(!rows.iter().find(|r| r.name == "no_late_round").unwrap().holds);
        let bad = StabParams { b1: st.b1 * 0.9, ..st };
        let rows = check_condition3(&sync, &bad);
        assert!(!rows.iter().find(|r| r.name == "b1").unwrap().holds);
    }

    fn iface(m: u32) -> Interface {
        Interface::new(&StabParams {
            m,
            r_minus: 10.0,
            r_plus: 20.0,
            p_skew: 1.0,
            b1: 0.0,
            b2: 0.0,
            b3: 0.0,
            d_f: 1.0,
            e_m: 0.5,
            next_wait: 0.5,
        })
    }

    #[test]
    fn counter_wraps_and_schedules_next() {
        let mut it = iface(8);
        it.set_counter(7);
        assert_eq!(it.on_pulse(3.0), Some(IfaceAction::ScheduleNext { at_local: 3.5 }));
        assert_eq!(it.counter(), 0);
        assert_eq!(it.on_pulse(4.0), None);
        assert_eq!(it.counter(), 1);
        let mut it = iface(8);
        let nexts = (0..20).filter(|&k| it.on_pulse(k as f64).is_some()).count();
        assert_eq!(nexts, 2);
    }

    #[test]
    fn beat_branches() {
        let mut it = iface(4);
        it.set_counter(2);
        assert_eq!(it.on_beat(0.0, NextPulse::Known(15.0)), Some(IfaceAction::Reset { wait: 20.0 }));
        let mut it = iface(4);
        assert_eq!(it.on_beat(0.0, NextPulse::Known(5.0)), Some(IfaceAction::Reset { wait: 20.0 }));
        let mut it = iface(4);
        assert_eq!(it.on_beat(0.0, NextPulse::Unknown), None);
        assert_eq!(it.on_next_pulse_known(3.0, 5.0), Some(IfaceAction::Reset { wait: 17.0 }));
        let mut it = iface(4);
        let Some(IfaceAction::LateCheck { at_local, generation }) = it.on_beat(0.0, NextPulse::Known(15.0)) else {
            panic!("expected a late check")
        };
        assert_eq!(at_local, 20.0);
        assert_eq!(it.on_late_check(generation, false), Some(IfaceAction::Reset { wait: 0.0 }));
        let mut it = iface(4);
        let Some(IfaceAction::LateCheck { generation, .. }) = it.on_beat(0.0, NextPulse::Known(15.0)) else { panic!() };
        it.on_pulse(15.0);
        assert_eq!(it.on_late_check(generation, false), None);
    }

    #[test]
    fn reset_cancels_pending_check() {
        let mut it = iface(4);
        let Some(IfaceAction::LateCheck { generation, .. }) = it.on_beat(0.0, NextPulse::Known(15.0)) else { panic!() };
        it.begin_reset();
        assert_eq!(it.on_late_check(generation, false), None);
    }

    fn oracle(policy: OraclePolicy) -> BeatOracle {
        let cfg = OracleConfig { p_skew: 1.0, b1: 10.0, b2: 5.0, b3: 5.0, policy, chaos_beats: 3, chaos_duration: 50.0, cycles: 5 };
        BeatOracle::new(cfg, 4, vec![0, 1, 2], ChaCha8Rng::seed_from_u64(7))
    }

    fn beats(out: &[OracleOutput]) -> Vec<(usize, f64)> {
        out.iter()
            .find_map(|o| match o {
                OracleOutput::Beats { k, times } if *k > 0 => Some(times.clone()),
                _ => None,
            })
            .unwrap_or_default()
    }

    #[test]
    fn all_next_in_window_bounds_the_latest_beat() {
        let mut o = oracle(OraclePolicy::Latest);
        let first = beats(&o.start());
        let b = first.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
        let t = b + 17.0;
        assert!(o.on_next(0, t - 1.0).is_empty());
        assert!(o.on_next(1, t - 0.5).is_empty());
        let next = beats(&o.on_next(2, t));
        assert!(next.iter().all(|x| x.1 <= t + 1.0 && x.1 >= t));
    }

    #[test]
    fn no_next_means_no_earlier_beat() {
        let mut o = oracle(OraclePolicy::Earliest);
        let first = beats(&o.start());
        let b = first.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
        // a NEXT before b + B1 is ignored
        assert!(o.on_next(0, b + 5.0).is_empty());
        let next = beats(&o.on_deadline(1, b + 20.0));
        assert!(next.iter().all(|x| x.1 >= b + 20.0));
    }

    #[test]
    fn split_policy_spans_exactly_the_skew() {
        let mut o = oracle(OraclePolicy::SplitP);
        let first = beats(&o.start());
        let lo = first.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
        let hi = first.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(hi - lo, 1.0);
    }

    #[test]
    fn oracle_stops_after_the_configured_cycles() {
        let mut o = oracle(OraclePolicy::Random);
        o.start();
        for k in 1..=4 {
            let out = o.on_deadline(k, 1000.0 * k as f64);
            assert!(!beats(&out).is_empty());
        }
        assert!(o.on_deadline(5, 9000.0).is_empty());
        assert_eq!(o.beats_emitted(), 5);
    }
}
