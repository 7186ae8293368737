//! Types shared by the round protocols and the engine that drives them.

use rand::RngCore;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PulseKind {
    First,
    Second,
}

impl PulseKind {
    pub fn index(self) -> u8 {
        match self {
            PulseKind::First => 1,
            PulseKind::Second => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimerTag {
    Pulse(PulseKind),
    CloseWindow(PulseKind),
    RoundStart,
}

/// How a node turns arrival times into phase offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measurement {
    /// Difference against the arrival of the node's own pulse.
    #[default]
    SelfMessage,
    /// Difference against the node's own send time, corrected by the mean delay.
    SelfEstimate,
}

/// A received pulse. The real times are ground truth for the checks only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arrival {
    pub from: usize,
    pub local: f64,
    pub send_real: f64,
    pub recv_real: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    SetTimer { at_local: f64, tag: TimerTag },
    Broadcast(PulseKind),
    RoundStarted { round: u32, local: f64 },
    /// The node listens for `kind` pulses until `close_local`; its own pulse is due at `pulse_local`.
    WindowOpened { kind: PulseKind, close_local: f64, pulse_local: f64 },
    NextPulseKnown { local: f64 },
    RoundFinished(Box<RoundRecord>),
}

/// Everything a node computed in one round, plus the arrivals it used.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RoundRecord {
    pub node: usize,
    pub round: u32,
    pub pulse_local: f64,
    pub second_local: Option<f64>,
    pub phase_entries: Vec<Option<f64>>,
    pub first_arrivals: Vec<Option<Arrival>>,
    pub delta: f64,
    pub insufficient_phase: bool,
    pub rate_entries: Vec<Option<f64>>,
    pub second_arrivals: Vec<Option<Arrival>>,
    pub xi: Option<f64>,
    pub insufficient_rate: bool,
    pub mu_prev: Option<f64>,
    pub mu: Option<f64>,
    pub mu_next: Option<f64>,
    pub duplicates: usize,
    pub window_close_local: f64,
    pub planned_end_local: f64,
    /// Filled in by the engine.
    pub pulse_real: f64,
    pub second_real: Option<f64>,
}

/// A round-based synchronization algorithm as a deterministic reducer.
pub trait SyncNode {
    /// Starts round 1 with round-0 end at `now_local`.
    fn start(&mut self, now_local: f64, out: &mut Vec<Action>);
    fn on_timer(&mut self, tag: TimerTag, now_local: f64, out: &mut Vec<Action>);
    fn on_pulse(&mut self, arrival: Arrival, out: &mut Vec<Action>);
    /// Drops all round state; timers are invalidated by the caller.
    fn halt(&mut self);
    /// Local time of the next first pulse, if already determined.
    fn next_pulse_local(&self) -> Option<f64>;
    /// True while waiting for the first pulse of a started round.
    fn pre_pulse(&self) -> bool;
    /// Local wait between `start` and the first pulse.
    fn first_pulse_delay(&self) -> f64;
    /// Puts the node into an arbitrary mid-round state at `now_local`.
    fn corrupt(&mut self, rng: &mut dyn RngCore, now_local: f64, out: &mut Vec<Action>);
    fn multiplier(&self) -> Option<f64> {
        None
    }
}

/// Per-window reception buffer keeping the first pulse of every sender.
#[derive(Debug, Clone, Default)]
pub(crate) struct Window {
    pub open: bool,
    pub arrivals: Vec<Option<Arrival>>,
    pub duplicates: usize,
}

impl Window {
    pub fn new(n: usize) -> Self {
        Window { open: false, arrivals: vec![None; n], duplicates: 0 }
    }

    pub fn reset(&mut self, open: bool) {
        self.open = open;
        self.arrivals.iter_mut().for_each(|a| *a = None);
        self.duplicates = 0;
    }

    pub fn offer(&mut self, a: Arrival) -> bool {
        if !self.open {
            return false;
        }
        match &mut self.arrivals[a.from] {
            Some(_) => {
                self.duplicates += 1;
                false
            }
            slot => {
                *slot = Some(a);
                true
            }
        }
    }
}
