//! Phase-only synchronization: one pulse per round, midpoint phase correction.

use crate::agreement::select_midpoint;
use crate::feasibility::{Inequality, Infeasible};
use crate::model::SystemParams;
use crate::protocol::{Action, Arrival, Measurement, PulseKind, RoundRecord, SyncNode, TimerTag, Window};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

/// Convergence factor of the per-round equality schedule.
pub fn alpha_phase(theta: f64) -> Result<f64, Infeasible> {
    if !(theta < 2.0) {
        return Err(Infeasible::threshold("theta", theta, "drift bound must stay below 2"));
    }
    Ok((6.0 * theta * theta + 5.0 * theta - 9.0) / (2.0 * (theta + 1.0) * (2.0 - theta)))
}

/// Contraction coefficient of the skew recurrence.
pub fn beta_phase(theta: f64) -> f64 {
    (2.0 * theta * theta + 5.0 * theta - 5.0) / (2.0 * (theta + 1.0))
}

/// Largest admissible error between an estimated and the true phase offset.
pub fn measurement_error_bound(theta: f64, u: f64, skew: f64) -> f64 {
    theta * u + (theta - 1.0) / (theta + 1.0) * skew
}

/// The same bound when nodes do not receive their own pulse.
pub fn self_estimate_error_bound(theta: f64, d: f64, u: f64, skew: f64) -> f64 {
    theta * u / 2.0 + (theta - 1.0) / (theta + 1.0) * (skew + d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Every round's budgets are tight against that round's envelope.
    Equality,
    /// Fixed budgets for all rounds.
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundTiming {
    pub tau1: f64,
    pub tau2: f64,
    pub big_t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseParams {
    pub theta: f64,
    pub d: f64,
    pub u: f64,
    pub big_f: f64,
    pub schedule: Schedule,
    /// Round-1 values for the equality schedule, the constants otherwise.
    pub tau1: f64,
    pub tau2: f64,
    pub big_t: f64,
    pub e1: f64,
    pub alpha: f64,
    pub beta: f64,
    pub e_limit: f64,
}

impl PhaseParams {
    /// Fixed budgets; the envelope follows the recurrence from `F + (1 - 1/theta) tau1`.
    pub fn constant(s: &SystemParams, tau1: f64, tau2: f64, big_t: f64) -> Self {
        let theta = s.theta;
        let beta = beta_phase(theta);
        let e1 = s.big_f + (1.0 - 1.0 / theta) * tau1;
        let e_limit = ((1.0 - 1.0 / theta) * big_t + (3.0 * theta - 1.0) * s.u) / (1.0 - beta);
        PhaseParams {
            theta,
            d: s.d,
            u: s.u,
            big_f: s.big_f,
            schedule: Schedule::Constant,
            tau1,
            tau2,
            big_t,
            e1,
            alpha: alpha_phase(theta).unwrap_or(f64::INFINITY),
            beta,
            e_limit,
        }
    }

    fn equality_offset(&self) -> f64 {
        let th = self.theta;
        ((th - 1.0) * self.d + (4.0 * th - 2.0) * self.u) / (2.0 - th)
    }

    /// Skew envelope `e(r)`, `r >= 1`.
    pub fn envelope(&self, r: u32) -> f64 {
        let k = r.saturating_sub(1) as i32;
        match self.schedule {
            Schedule::Equality => self.alpha.powi(k) * (self.e1 - self.e_limit) + self.e_limit,
            Schedule::Constant => self.beta.powi(k) * (self.e1 - self.e_limit) + self.e_limit,
        }
    }

    pub fn timing(&self, r: u32) -> RoundTiming {
        match self.schedule {
            Schedule::Constant => RoundTiming { tau1: self.tau1, tau2: self.tau2, big_t: self.big_t },
            Schedule::Equality => {
                let e = self.envelope(r);
                let th = self.theta;
                RoundTiming { tau1: th * e, tau2: th * (e + self.d), big_t: th * (3.0 * e + self.d + self.u) }
            }
        }
    }
}

/// Tightest per-round schedule; requires `alpha < 1`.
pub fn solve_condition1(s: &SystemParams) -> Result<PhaseParams, Infeasible> {
    let theta = s.theta;
    let alpha = alpha_phase(theta)?;
    if alpha >= 1.0 {
        return Err(Infeasible::threshold("alpha", alpha, format!("alpha = {alpha} must be below 1")));
    }
    let e1 = s.big_f / (2.0 - theta);
    let mut p = PhaseParams {
        theta,
        d: s.d,
        u: s.u,
        big_f: s.big_f,
        schedule: Schedule::Equality,
        tau1: 0.0,
        tau2: 0.0,
        big_t: 0.0,
        e1,
        alpha,
        beta: beta_phase(theta),
        e_limit: 0.0,
    };
    p.e_limit = p.equality_offset() / (1.0 - alpha);
    let t1 = p.timing(1);
    p.tau1 = t1.tau1;
    p.tau2 = t1.tau2;
    p.big_t = t1.big_t;
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition1Report {
    pub rows: Vec<Inequality>,
    /// Envelope recomputed from the recurrence and the actual budgets.
    pub envelope: Vec<f64>,
}

impl Condition1Report {
    pub fn violations(&self) -> Vec<&Inequality> {
        self.rows.iter().filter(|r| !r.holds).collect()
    }
}

/// Checks the per-round budget inequalities over `horizon` rounds.
pub fn check_condition1(p: &PhaseParams, horizon: u32) -> Condition1Report {
    let th = p.theta;
    let mut e = p.big_f + (1.0 - 1.0 / th) * p.timing(1).tau1;
    let mut rows = Vec::new();
    let mut envelope = Vec::new();
    for r in 1..=horizon.max(1) {
        let t = p.timing(r);
        envelope.push(e);
        rows.push(Inequality::le("listen_before_pulse", Some(r), th * e, t.tau1));
        rows.push(Inequality::le("listen_after_pulse", Some(r), th * (e + p.d), t.tau2));
        rows.push(Inequality::le("round_length", Some(r), t.tau1 + t.tau2 + th * (e + p.u), t.big_t));
        let next = p.timing(r + 1);
        e = p.beta * e + (3.0 * th - 1.0) * p.u + (1.0 - 1.0 / th) * (t.big_t + next.tau1 - t.tau1);
    }
    Condition1Report { rows, envelope }
}

/// Phase offsets `w -> estimate of p_w - p_v` from first-pulse arrivals.
pub(crate) fn phase_entries(
    arrivals: &[Option<Arrival>],
    own: usize,
    own_pulse_local: f64,
    s: &SystemParams,
    measurement: Measurement,
) -> Vec<Option<f64>> {
    let scale = 2.0 / (s.theta + 1.0);
    match measurement {
        Measurement::SelfMessage => match arrivals[own] {
            Some(mine) => arrivals.iter().map(|a| a.map(|a| scale * (a.local - mine.local))).collect(),
            None => vec![None; arrivals.len()],
        },
        Measurement::SelfEstimate => arrivals
            .iter()
            .enumerate()
            .map(|(w, a)| {
                if w == own {
                    Some(0.0)
                } else {
                    a.map(|a| scale * (a.local - own_pulse_local) - (s.d - s.u / 2.0))
                }
            })
            .collect(),
    }
}

/// Midpoint over entries with missing senders at `+inf`; `None` if too few.
pub(crate) fn midpoint_of(entries: &[Option<f64>], f: usize) -> Option<f64> {
    let values: Vec<f64> = entries.iter().map(|x| x.unwrap_or(f64::INFINITY)).collect();
    select_midpoint(&values, f).ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Idle,
    PrePulse,
    Listening,
    Waiting,
}

pub struct PhaseNode {
    id: usize,
    sys: SystemParams,
    params: PhaseParams,
    measurement: Measurement,
    round: u32,
    stage: Stage,
    start_local: f64,
    pulse_local: f64,
    close_local: f64,
    next_pulse: Option<f64>,
    window: Window,
}

impl PhaseNode {
    pub fn new(id: usize, sys: SystemParams, params: PhaseParams, measurement: Measurement) -> Self {
        PhaseNode {
            id,
            sys,
            params,
            measurement,
            round: 0,
            stage: Stage::Idle,
            start_local: 0.0,
            pulse_local: 0.0,
            close_local: 0.0,
            next_pulse: None,
            window: Window::new(sys.n),
        }
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    fn begin_round(&mut self, round: u32, start: f64, out: &mut Vec<Action>) {
        let t = self.params.timing(round);
        self.round = round;
        self.start_local = start;
        self.pulse_local = start + t.tau1;
        self.close_local = self.pulse_local + t.tau2;
        self.next_pulse = Some(self.pulse_local);
        self.stage = Stage::PrePulse;
        self.window.reset(true);
        out.push(Action::RoundStarted { round, local: start });
        out.push(Action::WindowOpened {
            kind: PulseKind::First,
            close_local: self.close_local,
            pulse_local: self.pulse_local,
        });
        out.push(Action::SetTimer { at_local: self.pulse_local, tag: TimerTag::Pulse(PulseKind::First) });
    }

    fn close(&mut self, out: &mut Vec<Action>) {
        let entries = phase_entries(&self.window.arrivals, self.id, self.pulse_local, &self.sys, self.measurement);
        let found = midpoint_of(&entries, self.sys.f);
        let delta = found.unwrap_or(0.0);
        let t = self.params.timing(self.round);
        let end = self.start_local + t.big_t + delta;
        let next_pulse = end + self.params.timing(self.round + 1).tau1;
        self.window.open = false;
        self.stage = Stage::Waiting;
        self.next_pulse = Some(next_pulse);
        out.push(Action::NextPulseKnown { local: next_pulse });
        out.push(Action::RoundFinished(Box::new(RoundRecord {
            node: self.id,
            round: self.round,
            pulse_local: self.pulse_local,
            phase_entries: entries,
            first_arrivals: self.window.arrivals.clone(),
            delta,
            insufficient_phase: found.is_none(),
            duplicates: self.window.duplicates,
            window_close_local: self.close_local,
            planned_end_local: end,
            ..Default::default()
        })));
        out.push(Action::SetTimer { at_local: end, tag: TimerTag::RoundStart });
    }
}

impl SyncNode for PhaseNode {
    fn start(&mut self, now_local: f64, out: &mut Vec<Action>) {
        self.begin_round(1, now_local, out);
    }

    fn on_timer(&mut self, tag: TimerTag, now_local: f64, out: &mut Vec<Action>) {
        match (tag, self.stage) {
            (TimerTag::Pulse(PulseKind::First), Stage::PrePulse) => {
                self.stage = Stage::Listening;
                out.push(Action::Broadcast(PulseKind::First));
                out.push(Action::SetTimer { at_local: self.close_local, tag: TimerTag::CloseWindow(PulseKind::First) });
            }
            (TimerTag::CloseWindow(PulseKind::First), Stage::Listening) => self.close(out),
            (TimerTag::RoundStart, Stage::Waiting) => self.begin_round(self.round + 1, now_local, out),
            _ => {}
        }
    }

    fn on_pulse(&mut self, arrival: Arrival, _out: &mut Vec<Action>) {
        if self.measurement == Measurement::SelfEstimate && arrival.from == self.id {
            return;
        }
        self.window.offer(arrival);
    }

    fn halt(&mut self) {
        self.stage = Stage::Idle;
        self.next_pulse = None;
        self.window.reset(false);
    }

    fn next_pulse_local(&self) -> Option<f64> {
        match self.stage {
            Stage::Idle | Stage::Listening => None,
            Stage::PrePulse | Stage::Waiting => self.next_pulse,
        }
    }

    fn pre_pulse(&self) -> bool {
        self.stage == Stage::PrePulse
    }

    fn first_pulse_delay(&self) -> f64 {
        self.params.timing(1).tau1
    }

    fn corrupt(&mut self, rng: &mut dyn RngCore, now_local: f64, out: &mut Vec<Action>) {
        let round = rng.gen_range(1..=8);
        let t = self.params.timing(round);
        let start = now_local - rng.gen_range(0.0..1.0) * t.big_t;
        self.begin_round(round, start, out);
        for w in 0..self.sys.n {
            if rng.gen_bool(0.3) {
                let local = start + rng.gen_range(0.0..=1.0) * (now_local - start);
                self.window.arrivals[w] = Some(Arrival { from: w, local, send_real: f64::NAN, recv_real: f64::NAN });
            }
        }
    }
}
