//! Deterministic discrete-event engine binding clocks, channels, the adversary,
//! node reducers and the beat oracle.

use crate::adversary::{Adversary, ByzSend, WindowView};
use crate::checks::{self, RunResult};
use crate::freq::FreqNode;
use crate::model::{sample_clock, HardwareClock};
use crate::phase::PhaseNode;
use crate::protocol::{Action, Arrival, PulseKind, RoundRecord, SyncNode, TimerTag};
use crate::scenario::{Resolved, Scenario, ScenarioError};
use crate::stabilizer::{BeatOracle, IfaceAction, Interface, NextPulse, OracleConfig, OracleOutput, StabParams, SyncParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::cmp::Ordering;
use std::collections::BinaryHeap;

const STREAM_CLOCKS: u64 = 1;
const STREAM_DELAYS: u64 = 2;
const STREAM_ADVERSARY: u64 = 3;
const STREAM_ORACLE: u64 = 4;
const STREAM_CORRUPT: u64 = 5;

pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum NodeTimer {
    Sync(TimerTag),
    Start,
    Resume,
    LateCheck(u64),
    Next,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Ev {
    Timer { node: usize, epoch: u64, timer: NodeTimer },
    Deliver { from: usize, to: usize, send: f64, kind: PulseKind },
    Beat { node: usize, k: u32 },
    OracleDeadline { k: u32 },
    FaultTick { node: usize },
}

struct Entry {
    time: f64,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    // reversed: the heap pops the smallest (time, seq)
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulseLog {
    pub node: usize,
    pub epoch: u64,
    pub round: u32,
    pub kind: PulseKind,
    pub real: f64,
    pub local: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    pub epoch: u64,
    pub record: RoundRecord,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResetLog {
    pub node: usize,
    pub real: f64,
    pub wait: f64,
    /// Index of the beat whose check caused the reset; 0 for arbitrary beats.
    pub beat: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeatLog {
    pub node: usize,
    pub k: u32,
    pub real: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NextLog {
    pub node: usize,
    pub real: f64,
    pub local: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeliveryLog {
    pub from: usize,
    pub to: usize,
    pub send: f64,
    pub recv: f64,
}

/// Everything the engine observed, before any checking.
#[derive(Debug, Clone, Default)]
pub struct RawRun {
    pub correct: Vec<usize>,
    pub clocks: Vec<HardwareClock>,
    pub pulses: Vec<PulseLog>,
    pub rounds: Vec<Vec<RoundLog>>,
    pub resets: Vec<ResetLog>,
    pub beats: Vec<BeatLog>,
    pub nexts: Vec<NextLog>,
    pub deliveries: u64,
    pub bad_deliveries: Vec<DeliveryLog>,
    pub events: u64,
    pub end_time: f64,
    /// The run hit its time limit before reaching the horizon.
    pub stalled: bool,
}

struct NodeRt {
    sync: Box<dyn SyncNode>,
    epoch: u64,
    iface: Option<Interface>,
    resume_local: Option<f64>,
    round: u32,
    pulse_real: Option<f64>,
    second_real: Option<f64>,
    first_pulses: u32,
    last_beat: u32,
}

pub struct Engine {
    sys: crate::model::SystemParams,
    sync: SyncParams,
    stab: Option<StabParams>,
    rounds: u32,
    cycles: u32,
    now: f64,
    seq: u64,
    heap: BinaryHeap<Entry>,
    nodes: Vec<Option<NodeRt>>,
    delays: crate::model::DelayPolicy,
    delay_rng: ChaCha8Rng,
    adversary: Adversary,
    oracle: Option<BeatOracle>,
    raw: RawRun,
    stop_at: Option<f64>,
    time_limit: f64,
    done: bool,
    seed: u64,
}

fn horizon(sc: &Scenario, res: &Resolved) -> (f64, f64) {
    let dr = res.sync.drift();
    let (_, _, big_t) = res.sync.head();
    let round = big_t + dr * (res.sync.envelope(1) + sc.system.u);
    match res.stab {
        None => (sc.system.big_f + (sc.rounds as f64 + 3.0) * round + sc.system.d, 0.0),
        Some(st) => {
            let chaos = sc.oracle.chaos_duration.unwrap_or(st.m as f64 * big_t);
            let cycle = st.b1 + st.b2 + st.b3 + st.p_skew + st.r_plus + round;
            (chaos + (sc.beat_cycles as f64 + 2.0) * cycle, chaos)
        }
    }
}

impl Engine {
    pub fn new(sc: &Scenario, res: &Resolved) -> Result<Self, ScenarioError> {
        let s = sc.system;
        let (span, chaos) = horizon(sc, res);
        let mut clock_rng = stream(sc.seed, STREAM_CLOCKS);
        let clocks = (0..s.n)
            .map(|v| sample_clock(&s, &sc.clock_policy, sc.offset_policy, v, span, &mut clock_rng))
            .collect::<Result<Vec<_>, _>>()?;
        let correct = sc.faults.correct_ids(s.n);
        let nodes = (0..s.n)
            .map(|v| {
                if sc.faults.is_faulty(v) {
                    return None;
                }
                let sync: Box<dyn SyncNode> = match res.sync {
                    SyncParams::Phase(p) => Box::new(PhaseNode::new(v, s, p, sc.measurement)),
                    SyncParams::Freq(p) => Box::new(FreqNode::new(v, s, p, sc.measurement)),
                };
                Some(NodeRt {
                    sync,
                    epoch: 0,
                    iface: res.stab.as_ref().map(Interface::new),
                    resume_local: None,
                    round: 0,
                    pulse_real: None,
                    second_real: None,
                    first_pulses: 0,
                    last_beat: 0,
                })
            })
            .collect();
        let oracle = res.stab.map(|st| {
            let cfg = OracleConfig {
                p_skew: st.p_skew,
                b1: st.b1,
                b2: st.b2,
                b3: st.b3,
                policy: sc.oracle.policy,
                chaos_beats: sc.oracle.chaos_beats,
                chaos_duration: chaos,
                cycles: sc.beat_cycles,
            };
            BeatOracle::new(cfg, s.n, correct.clone(), stream(sc.seed, STREAM_ORACLE))
        });
        let raw = RawRun { correct, clocks, rounds: vec![Vec::new(); s.n], ..Default::default() };
        Ok(Engine {
            sys: s,
            sync: res.sync,
            stab: res.stab,
            rounds: sc.rounds,
            cycles: sc.beat_cycles,
            now: 0.0,
            seq: 0,
            heap: BinaryHeap::new(),
            nodes,
            delays: sc.delay_policy.clone(),
            delay_rng: stream(sc.seed, STREAM_DELAYS),
            adversary: Adversary::new(s, &sc.faults, stream(sc.seed, STREAM_ADVERSARY)),
            oracle,
            raw,
            stop_at: None,
            time_limit: 2.0 * span + 10.0 * res.sync.head().2,
            done: false,
            seed: sc.seed,
        })
    }

    fn push(&mut self, time: f64, ev: Ev) {
        self.seq += 1;
        self.heap.push(Entry { time: time.max(self.now), seq: self.seq, ev });
    }

    fn local_now(&self, v: usize) -> f64 {
        self.raw.clocks[v].local_time(self.now)
    }

    /// Real time at which node `v`'s clock reads `local`, or now if already past.
    fn real_at(&self, v: usize, local: f64) -> f64 {
        if local <= self.local_now(v) {
            return self.now;
        }
        self.raw.clocks[v].invert_local_time(local).unwrap_or(self.now)
    }

    fn timer(&mut self, v: usize, epoch: u64, at_local: f64, timer: NodeTimer) {
        let at = self.real_at(v, at_local);
        self.push(at, Ev::Timer { node: v, epoch, timer });
    }

    fn rt(&mut self, v: usize) -> &mut NodeRt {
        self.nodes[v].as_mut().expect("events only target correct nodes")
    }

    pub fn run(mut self) -> RawRun {
        self.bootstrap();
        while let Some(e) = self.heap.pop() {
            if self.stop_at.is_some_and(|s| e.time > s) {
                break;
            }
            if e.time > self.time_limit {
                self.raw.stalled = true;
                break;
            }
            self.now = e.time;
            self.raw.events += 1;
            self.handle(e.ev);
            if self.done {
                break;
            }
        }
        self.raw.end_time = self.now;
        self.raw
    }

    fn bootstrap(&mut self) {
        let (sends, ticks) = self.adversary.initial();
        for s in sends {
            self.byzantine(s);
        }
        for (node, at) in ticks {
            self.push(at, Ev::FaultTick { node });
        }
        let correct = self.raw.correct.clone();
        match self.stab {
            None => {
                for &v in &correct {
                    self.timer(v, 0, self.sys.big_f, NodeTimer::Start);
                }
            }
            Some(st) => {
                let mut rng = stream(self.seed, STREAM_CORRUPT);
                for &v in &correct {
                    let local = self.local_now(v);
                    let mut out = Vec::new();
                    self.rt(v).sync.corrupt(&mut rng, local, &mut out);
                    let counter = rng.gen_range(0..st.m);
                    self.rt(v).iface.as_mut().expect("stabilizing run").set_counter(counter);
                    if rng.gen_bool(0.5) {
                        let at = local + rng.gen_range(0.0..=1.0) * st.next_wait;
                        self.timer(v, 0, at, NodeTimer::Next);
                    }
                    self.apply(v, 0, out);
                }
                let outs = self.oracle.as_mut().expect("stabilizing run").start();
                self.oracle_outputs(outs);
            }
        }
    }

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::Timer { node, epoch, timer } => self.on_timer(node, epoch, timer),
            Ev::Deliver { from, to, send, kind: _ } => {
                self.raw.deliveries += 1;
                let delay = self.now - send;
                let tol = 1e-9 * self.sys.d.max(1.0);
                if delay < self.sys.min_delay() - tol || delay > self.sys.d + tol {
                    self.raw.bad_deliveries.push(DeliveryLog { from, to, send, recv: self.now });
                }
                let arrival = Arrival { from, local: self.local_now(to), send_real: send, recv_real: self.now };
                let mut out = Vec::new();
                let rt = self.rt(to);
                let epoch = rt.epoch;
                rt.sync.on_pulse(arrival, &mut out);
                self.apply(to, epoch, out);
            }
            Ev::Beat { node, k } => self.on_beat(node, k),
            Ev::OracleDeadline { k } => {
                let now = self.now;
                let outs = self.oracle.as_mut().map(|o| o.on_deadline(k, now)).unwrap_or_default();
                self.oracle_outputs(outs);
            }
            Ev::FaultTick { node } => {
                let (sends, next) = self.adversary.on_tick(node, self.now);
                for s in sends {
                    self.byzantine(s);
                }
                if let Some(at) = next.filter(|&t| t <= self.time_limit) {
                    self.push(at, Ev::FaultTick { node });
                }
            }
        }
    }

    fn on_timer(&mut self, v: usize, epoch: u64, timer: NodeTimer) {
        let local = self.local_now(v);
        let current = self.rt(v).epoch;
        let mut out = Vec::new();
        match timer {
            NodeTimer::Sync(tag) => {
                let rt = self.rt(v);
                if epoch != current || rt.resume_local.is_some() {
                    return;
                }
                rt.sync.on_timer(tag, local, &mut out);
            }
            NodeTimer::Start => self.rt(v).sync.start(local, &mut out),
            NodeTimer::Resume => {
                if epoch != current {
                    return;
                }
                let rt = self.rt(v);
                rt.resume_local = None;
                if let Some(i) = rt.iface.as_mut() {
                    i.finish_reset();
                }
                rt.sync.start(local, &mut out);
            }
            NodeTimer::LateCheck(generation) => {
                if epoch != current {
                    return;
                }
                let rt = self.rt(v);
                let pre = rt.sync.pre_pulse();
                let action = rt.iface.as_mut().and_then(|i| i.on_late_check(generation, pre));
                self.iface_action(v, action);
                return;
            }
            NodeTimer::Next => {
                self.raw.nexts.push(NextLog { node: v, real: self.now, local });
                let now = self.now;
                let outs = self.oracle.as_mut().map(|o| o.on_next(v, now)).unwrap_or_default();
                self.oracle_outputs(outs);
                return;
            }
        }
        self.apply(v, current, out);
    }

    fn on_beat(&mut self, v: usize, k: u32) {
        self.raw.beats.push(BeatLog { node: v, k, real: self.now });
        let local = self.local_now(v);
        let rt = self.rt(v);
        rt.last_beat = k;
        let next = match rt.resume_local {
            Some(resume) => NextPulse::Known(resume + rt.sync.first_pulse_delay()),
            None => rt.sync.next_pulse_local().map_or(NextPulse::Unknown, NextPulse::Known),
        };
        let action = rt.iface.as_mut().and_then(|i| i.on_beat(local, next));
        self.iface_action(v, action);
    }

    fn iface_action(&mut self, v: usize, action: Option<IfaceAction>) {
        match action {
            None => {}
            Some(IfaceAction::ScheduleNext { at_local }) => self.timer(v, 0, at_local, NodeTimer::Next),
            Some(IfaceAction::LateCheck { at_local, generation }) => {
                let epoch = self.rt(v).epoch;
                self.timer(v, epoch, at_local, NodeTimer::LateCheck(generation));
            }
            Some(IfaceAction::Reset { wait }) => {
                let local = self.local_now(v);
                let now = self.now;
                let rt = self.rt(v);
                rt.epoch += 1;
                rt.sync.halt();
                if let Some(i) = rt.iface.as_mut() {
                    i.begin_reset();
                }
                rt.resume_local = Some(local + wait);
                let (epoch, beat) = (rt.epoch, rt.last_beat);
                self.raw.resets.push(ResetLog { node: v, real: now, wait, beat });
                self.timer(v, epoch, local + wait, NodeTimer::Resume);
            }
        }
    }

    fn oracle_outputs(&mut self, outs: Vec<OracleOutput>) {
        for o in outs {
            match o {
                OracleOutput::Beats { k, times } => {
                    if k == self.cycles {
                        let last = times.iter().map(|t| t.1).fold(self.now, f64::max);
                        let st = self.stab.expect("beats only in stabilizing runs");
                        let (_, _, big_t) = self.sync.head();
                        self.stop_at = Some(last + st.r_plus + 2.0 * self.sync.drift() * big_t);
                    }
                    for (node, at) in times {
                        self.push(at, Ev::Beat { node, k });
                    }
                }
                OracleOutput::Deadline { k, at } => self.push(at, Ev::OracleDeadline { k }),
            }
        }
    }

    fn byzantine(&mut self, s: ByzSend) {
        if self.nodes[s.to].is_none() {
            return;
        }
        let recv = s.arrive.max(self.now + self.sys.min_delay());
        let send = self.now.max(recv - self.sys.d);
        self.push(recv, Ev::Deliver { from: s.from, to: s.to, send, kind: PulseKind::First });
    }

    fn apply(&mut self, v: usize, epoch: u64, actions: Vec<Action>) {
        for a in actions {
            let stale = self.rt(v).epoch != epoch;
            match a {
                Action::SetTimer { at_local, tag } => self.timer(v, epoch, at_local, NodeTimer::Sync(tag)),
                Action::Broadcast(_) | Action::WindowOpened { .. } | Action::NextPulseKnown { .. } if stale => {}
                Action::Broadcast(kind) => self.broadcast(v, epoch, kind),
                Action::RoundStarted { round, .. } => {
                    let rt = self.rt(v);
                    rt.round = round;
                    rt.pulse_real = None;
                    rt.second_real = None;
                }
                Action::WindowOpened { kind, close_local, pulse_local } => {
                    let round = self.rt(v).round;
                    let view = WindowView {
                        receiver: v,
                        round,
                        kind,
                        close_real: self.real_at(v, close_local),
                        pulse_real: self.real_at(v, pulse_local),
                        skew: self.sync.envelope(round.max(1)),
                    };
                    let now = self.now;
                    for s in self.adversary.on_window(now, view) {
                        self.byzantine(s);
                    }
                }
                Action::NextPulseKnown { local } => {
                    let now_local = self.local_now(v);
                    let action = self.rt(v).iface.as_mut().and_then(|i| i.on_next_pulse_known(now_local, local));
                    self.iface_action(v, action);
                }
                Action::RoundFinished(mut rec) => {
                    let rt = self.rt(v);
                    rec.pulse_real = rt.pulse_real.unwrap_or(f64::NAN);
                    rec.second_real = rt.second_real;
                    self.raw.rounds[v].push(RoundLog { epoch, record: *rec });
                }
            }
        }
    }

    fn broadcast(&mut self, v: usize, epoch: u64, kind: PulseKind) {
        let local = self.local_now(v);
        let now = self.now;
        let rt = self.rt(v);
        let round = rt.round;
        match kind {
            PulseKind::First => {
                rt.pulse_real = Some(now);
                rt.first_pulses += 1;
            }
            PulseKind::Second => rt.second_real = Some(now),
        }
        self.raw.pulses.push(PulseLog { node: v, epoch, round, kind, real: now, local });
        self.adversary.on_correct_pulse(v, kind, now);
        for w in 0..self.sys.n {
            if self.nodes[w].is_none() {
                continue;
            }
            let delay = self.delays.delay(&self.sys, v, w, &mut self.delay_rng);
            self.push(now + delay, Ev::Deliver { from: v, to: w, send: now, kind });
        }
        if kind == PulseKind::First {
            let action = self.rt(v).iface.as_mut().and_then(|i| i.on_pulse(local));
            self.iface_action(v, action);
            if self.stab.is_none() {
                let target = self.rounds + 1;
                self.done = self.nodes.iter().flatten().all(|n| n.first_pulses >= target);
            }
        }
    }
}

/// Validates, solves and runs a scenario, then checks every invariant family.
pub fn simulate(sc: &Scenario) -> Result<RunResult, ScenarioError> {
    sc.validate()?;
    let res = sc.resolve()?;
    let raw = Engine::new(sc, &res)?.run();
    Ok(checks::analyze(sc, &res, raw))
}
