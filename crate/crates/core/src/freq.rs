//! Phase and frequency synchronization: two pulses per round, one agreement step
//! on phase offsets and one on relative rates.

use crate::feasibility::{Inequality, Infeasible};
use crate::model::SystemParams;
use crate::phase::{beta_phase, midpoint_of, phase_entries};
use crate::protocol::{Action, Arrival, Measurement, PulseKind, RoundRecord, SyncNode, TimerTag, Window};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

pub fn theta_bar(theta: f64) -> f64 {
    theta * theta * theta
}

pub fn alpha_bar(theta: f64) -> f64 {
    let tb = theta_bar(theta);
    beta_phase(tb) + (4.0 * tb + 3.0) * (tb - 1.0)
}

/// Smallest admissible pull-back for the given frequency baseline `tau2 + tau3`.
pub fn epsilon_min(theta: f64, nu: f64, u: f64, tau23: f64, big_t: f64) -> f64 {
    let t3 = theta_bar(theta);
    let shrink = 1.0 - 1.0 / t3;
    2.0 * ((theta - 1.0) * (t3 - 1.0) + 2.0 * t3 * shrink * shrink + 2.0 * t3 * u / tau23 + 2.0 * (t3 + 1.0) * nu * big_t)
}

/// Relative-rate estimate of a sender from the local gap between its two pulses.
pub fn rate_estimate(mu: f64, delta_wv: f64, tau23: f64) -> f64 {
    1.0 - mu * delta_wv / tau23
}

/// Returns `(mu_hat, mu_next)`. The result is kept inside `[1, theta^2]`.
pub fn update_multiplier(mu: f64, xi: f64, epsilon: f64, theta: f64) -> (f64, f64) {
    let hat = mu + 2.0 * xi / (theta + 1.0);
    let next = if hat <= theta { (hat + epsilon).max(1.0) } else { (hat - epsilon).min(theta * theta) };
    (hat, next.clamp(1.0, theta * theta))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreqParams {
    pub theta: f64,
    pub theta_bar: f64,
    pub nu: f64,
    pub d: f64,
    pub u: f64,
    pub big_f: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub tau3: f64,
    pub tau4: f64,
    pub big_t: f64,
    pub epsilon: f64,
    pub alpha_bar: f64,
    pub beta_bar: f64,
    pub e1: f64,
    pub e_limit: f64,
}

/// Optional hand-picked values for the solver.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreqOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub big_t: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau3: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau4: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
}

fn steady_limit(tb: f64, beta_bar: f64, u: f64, big_t: f64) -> f64 {
    ((1.0 - 1.0 / tb) * big_t + (3.0 * tb - 1.0) * u) / (1.0 - beta_bar)
}

/// Round length needed by the minimal budgets for a given `e(1)`.
fn round_length_for(tb: f64, d: f64, u: f64, e1: f64) -> f64 {
    tb * ((4.0 * tb + 1.0) * e1 + 2.0 * tb * d + u)
}

/// Smallest round length for which the minimal budgets are consistent.
pub fn min_round_length(s: &SystemParams) -> Result<f64, Infeasible> {
    let tb = theta_bar(s.theta);
    let ab = alpha_bar(s.theta);
    if !(ab < 1.0) || !(tb < 2.0) {
        return Err(Infeasible::threshold("alpha_bar", ab, format!("alpha_bar = {ab} must be below 1")));
    }
    let bb = beta_phase(tb);
    let from_window = round_length_for(tb, s.d, s.u, s.big_f / (2.0 - tb));
    let k = tb * (4.0 * tb + 1.0) * (1.0 - 1.0 / tb) / (1.0 - bb);
    let from_limit = tb * ((4.0 * tb + 1.0) * (3.0 * tb - 1.0) * s.u / (1.0 - bb) + 2.0 * tb * s.d + s.u) / (1.0 - k);
    Ok(from_window.max(from_limit))
}

/// Minimal budgets; any slack in `T` goes to the frequency baseline `tau3`.
pub fn solve_condition2(s: &SystemParams, ov: &FreqOverrides) -> Result<FreqParams, Infeasible> {
    let tb = theta_bar(s.theta);
    let t0 = min_round_length(s)?;
    let big_t = ov.big_t.unwrap_or(t0);
    if big_t < t0 * (1.0 - 1e-12) {
        return Err(Infeasible::threshold("big_t", big_t, format!("round length {big_t} is below the minimum {t0}")));
    }
    let bb = beta_phase(tb);
    let e_limit = steady_limit(tb, bb, s.u, big_t);
    let e1 = (s.big_f / (2.0 - tb)).max(e_limit);
    let tau1 = ov.tau1.unwrap_or(tb * e1);
    let tau2 = ov.tau2.unwrap_or(tb * (e1 + s.d));
    let grow = (1.0 - 1.0 / tb) * (tau1 + tau2);
    let tau4 = ov.tau4.unwrap_or(tb * (e1 + s.d + grow));
    let tau3 = ov.tau3.unwrap_or((big_t - tau1 - tau2 - tau4 - tb * (e1 + s.u)).max(tb * (e1 + grow)));
    let epsilon = ov.epsilon.unwrap_or_else(|| epsilon_min(s.theta, s.nu, s.u, tau2 + tau3, big_t));
    let p = FreqParams {
        theta: s.theta,
        theta_bar: tb,
        nu: s.nu,
        d: s.d,
        u: s.u,
        big_f: s.big_f,
        tau1,
        tau2,
        tau3,
        tau4,
        big_t,
        epsilon,
        alpha_bar: alpha_bar(s.theta),
        beta_bar: bb,
        e1: (s.big_f + (1.0 - 1.0 / tb) * tau1).max(e_limit),
        e_limit,
    };
    Ok(p)
}

/// Budget inequalities with `e(1)` recomputed from its definition.
pub fn check_condition2(p: &FreqParams) -> Vec<Inequality> {
    let tb = p.theta_bar;
    let e1 = (p.big_f + (1.0 - 1.0 / tb) * p.tau1).max(steady_limit(tb, p.beta_bar, p.u, p.big_t));
    let grow = (1.0 - 1.0 / tb) * (p.tau1 + p.tau2);
    vec![
        Inequality::le("alpha_bar_below_one", None, alpha_bar(p.theta), 1.0),
        Inequality::le("tau1", None, tb * e1, p.tau1),
        Inequality::le("tau2", None, tb * (e1 + p.d), p.tau2),
        Inequality::le("tau3", None, tb * (e1 + grow), p.tau3),
        Inequality::le("tau4", None, tb * (e1 + p.d + grow), p.tau4),
        Inequality::le("round_length", None, p.tau1 + p.tau2 + p.tau3 + p.tau4 + tb * (e1 + p.u), p.big_t),
        Inequality::le("epsilon", None, epsilon_min(p.theta, p.nu, p.u, p.tau2 + p.tau3, p.big_t), p.epsilon),
    ]
}

impl FreqParams {
    pub fn envelope(&self, r: u32) -> f64 {
        self.beta_bar.powi(r.saturating_sub(1) as i32) * (self.e1 - self.e_limit) + self.e_limit
    }

    fn beta_rate(&self) -> f64 {
        (2.0 * self.theta - 1.0) / 2.0
    }

    fn alpha_skew(&self) -> f64 {
        let tb = self.theta_bar;
        (4.0 * tb * tb + 5.0 * tb - 7.0) / (2.0 * (tb + 1.0))
    }

    fn drift_window(&self) -> f64 {
        self.nu * (self.big_t + self.tau2)
    }

    /// Bound on one rate-estimate error.
    pub fn estimate_error_bound(&self) -> f64 {
        let t3 = self.theta_bar;
        let shrink = 1.0 - 1.0 / t3;
        t3 * shrink * shrink + t3 * self.u / (self.tau2 + self.tau3) + (t3 + 1.0) * self.nu * self.big_t
    }

    /// Bound on the next round's rate spread given the current one.
    pub fn rate_step_bound(&self, spread: f64) -> f64 {
        let contract = self.beta_rate() * spread + 3.0 * self.theta * self.epsilon;
        contract.max(spread - self.epsilon / 2.0) + 2.0 * self.drift_window()
    }

    /// Limit of the rate spread.
    pub fn rate_floor(&self) -> f64 {
        (3.0 * self.theta * self.epsilon + 2.0 * self.drift_window()) / (1.0 - self.beta_rate()) + self.drift_window()
    }

    /// Steady-state skew bound once the rate spread has settled.
    pub fn steady_skew_bound(&self) -> f64 {
        let a = self.alpha_skew();
        let b = self.beta_rate();
        let t = self.big_t;
        ((4.0 * self.theta_bar - 2.0) * self.u + self.drift_window() * t) / (1.0 - a)
            + (3.0 * self.theta * self.epsilon + 2.0 * self.drift_window()) * t / ((1.0 - a) * (1.0 - b))
    }

    /// Bound on how far `mu h(t)` strays from the round's midpoint rate.
    pub fn rate_proxy_bound(&self) -> f64 {
        self.drift_window() / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Idle,
    PrePulse,
    Listen1,
    PreSecond,
    Listen2,
    Waiting,
}

pub struct FreqNode {
    id: usize,
    sys: SystemParams,
    params: FreqParams,
    measurement: Measurement,
    round: u32,
    stage: Stage,
    start_local: f64,
    mu_prev: f64,
    mu: f64,
    pulse_local: f64,
    close1: f64,
    second_local: f64,
    close2: f64,
    end_local: f64,
    pending: Option<Box<RoundRecord>>,
    w1: Window,
    w2: Window,
}

impl FreqNode {
    pub fn new(id: usize, sys: SystemParams, params: FreqParams, measurement: Measurement) -> Self {
        FreqNode {
            id,
            sys,
            params,
            measurement,
            round: 0,
            stage: Stage::Idle,
            start_local: 0.0,
            mu_prev: sys.theta,
            mu: sys.theta,
            pulse_local: 0.0,
            close1: 0.0,
            second_local: 0.0,
            close2: 0.0,
            end_local: 0.0,
            pending: None,
            w1: Window::new(sys.n),
            w2: Window::new(sys.n),
        }
    }

    fn begin_round(&mut self, round: u32, start: f64, out: &mut Vec<Action>) {
        let p = &self.params;
        self.round = round;
        self.start_local = start;
        self.pulse_local = start + p.tau1 / self.mu_prev;
        self.close1 = self.pulse_local + p.tau2 / self.mu;
        self.second_local = self.pulse_local + (p.tau2 + p.tau3) / self.mu;
        self.close2 = self.pulse_local + (p.tau2 + p.tau3 + p.tau4) / self.mu;
        self.stage = Stage::PrePulse;
        self.w1.reset(true);
        self.w2.reset(false);
        out.push(Action::RoundStarted { round, local: start });
        out.push(Action::WindowOpened { kind: PulseKind::First, close_local: self.close1, pulse_local: self.pulse_local });
        out.push(Action::SetTimer { at_local: self.pulse_local, tag: TimerTag::Pulse(PulseKind::First) });
    }

    fn close_first(&mut self, out: &mut Vec<Action>) {
        let entries = phase_entries(&self.w1.arrivals, self.id, self.pulse_local, &self.sys, self.measurement);
        let found = midpoint_of(&entries, self.sys.f);
        let delta = found.unwrap_or(0.0);
        let p = &self.params;
        self.end_local = self.pulse_local + (p.big_t + delta - p.tau1) / self.mu;
        self.w1.open = false;
        self.w2.reset(true);
        self.stage = Stage::PreSecond;
        out.push(Action::WindowOpened { kind: PulseKind::Second, close_local: self.close2, pulse_local: self.second_local });
        out.push(Action::NextPulseKnown { local: self.end_local + p.tau1 / self.mu });
        out.push(Action::SetTimer { at_local: self.second_local, tag: TimerTag::Pulse(PulseKind::Second) });
        self.pending = Some(Box::new(RoundRecord {
            node: self.id,
            round: self.round,
            pulse_local: self.pulse_local,
            second_local: Some(self.second_local),
            phase_entries: entries,
            first_arrivals: self.w1.arrivals.clone(),
            delta,
            insufficient_phase: found.is_none(),
            mu_prev: Some(self.mu_prev),
            mu: Some(self.mu),
            window_close_local: self.close1,
            planned_end_local: self.end_local,
            ..Default::default()
        }));
    }

    fn close_second(&mut self, out: &mut Vec<Action>) {
        let p = &self.params;
        let tau23 = p.tau2 + p.tau3;
        let entries: Vec<Option<f64>> = (0..self.sys.n)
            .map(|w| {
                if w == self.id && self.measurement == Measurement::SelfEstimate {
                    return Some(0.0);
                }
                match (self.w1.arrivals[w], self.w2.arrivals[w]) {
                    (Some(a), Some(b)) => Some(rate_estimate(self.mu, b.local - a.local, tau23)),
                    _ => None,
                }
            })
            .collect();
        let found = midpoint_of(&entries, self.sys.f);
        let xi = found.unwrap_or(0.0);
        let (_, mu_next) = update_multiplier(self.mu, xi, p.epsilon, p.theta);
        self.w2.open = false;
        self.stage = Stage::Waiting;
        let mut rec = self.pending.take().expect("first window closed before the second");
        rec.rate_entries = entries;
        rec.second_arrivals = self.w2.arrivals.clone();
        rec.xi = Some(xi);
        rec.insufficient_rate = found.is_none();
        rec.mu_next = Some(mu_next);
        rec.duplicates = self.w1.duplicates + self.w2.duplicates;
        out.push(Action::RoundFinished(rec));
        out.push(Action::SetTimer { at_local: self.end_local, tag: TimerTag::RoundStart });
        self.mu_prev = self.mu;
        self.mu = mu_next;
    }
}

impl SyncNode for FreqNode {
    fn start(&mut self, now_local: f64, out: &mut Vec<Action>) {
        self.mu_prev = self.mu;
        self.begin_round(1, now_local, out);
    }

    fn on_timer(&mut self, tag: TimerTag, now_local: f64, out: &mut Vec<Action>) {
        match (tag, self.stage) {
            (TimerTag::Pulse(PulseKind::First), Stage::PrePulse) => {
                self.stage = Stage::Listen1;
                out.push(Action::Broadcast(PulseKind::First));
                out.push(Action::SetTimer { at_local: self.close1, tag: TimerTag::CloseWindow(PulseKind::First) });
            }
            (TimerTag::CloseWindow(PulseKind::First), Stage::Listen1) => self.close_first(out),
            (TimerTag::Pulse(PulseKind::Second), Stage::PreSecond) => {
                self.stage = Stage::Listen2;
                out.push(Action::Broadcast(PulseKind::Second));
                out.push(Action::SetTimer { at_local: self.close2, tag: TimerTag::CloseWindow(PulseKind::Second) });
            }
            (TimerTag::CloseWindow(PulseKind::Second), Stage::Listen2) => self.close_second(out),
            // `mu_prev` and `mu` already advanced when the second window closed
            (TimerTag::RoundStart, Stage::Waiting) => self.begin_round(self.round + 1, now_local, out),
            _ => {}
        }
    }

    fn on_pulse(&mut self, arrival: Arrival, _out: &mut Vec<Action>) {
        if self.measurement == Measurement::SelfEstimate && arrival.from == self.id {
            return;
        }
        if !self.w1.offer(arrival) {
            self.w2.offer(arrival);
        }
    }

    fn halt(&mut self) {
        self.stage = Stage::Idle;
        self.pending = None;
        self.w1.reset(false);
        self.w2.reset(false);
    }

    fn next_pulse_local(&self) -> Option<f64> {
        match self.stage {
            Stage::Idle | Stage::Listen1 => None,
            Stage::PrePulse => Some(self.pulse_local),
            Stage::PreSecond | Stage::Listen2 => Some(self.end_local + self.params.tau1 / self.mu),
            // multipliers advanced already: the next round waits `tau1 / mu_prev`
            Stage::Waiting => Some(self.end_local + self.params.tau1 / self.mu_prev),
        }
    }

    fn pre_pulse(&self) -> bool {
        self.stage == Stage::PrePulse
    }

    fn first_pulse_delay(&self) -> f64 {
        self.params.tau1 / self.mu
    }

    fn corrupt(&mut self, rng: &mut dyn RngCore, now_local: f64, out: &mut Vec<Action>) {
        let top = self.params.theta * self.params.theta;
        self.mu_prev = rng.gen_range(1.0..=top);
        self.mu = rng.gen_range(1.0..=top);
        let round = rng.gen_range(1..=8);
        let start = now_local - rng.gen_range(0.0..1.0) * self.params.big_t / self.mu;
        self.begin_round(round, start, out);
        for w in 0..self.sys.n {
            if rng.gen_bool(0.3) {
                let local = start + rng.gen_range(0.0..=1.0) * (now_local - start);
                self.w1.arrivals[w] = Some(Arrival { from: w, local, send_real: f64::NAN, recv_real: f64::NAN });
            }
        }
    }

    fn multiplier(&self) -> Option<f64> {
        Some(self.mu)
    }
}
