//! Byzantine sender strategies. The adversary is omniscient: it sees every
//! window a correct node opens and every pulse a correct node sends.

use crate::model::{FaultConfig, FaultStrategy, SystemParams};
use crate::protocol::PulseKind;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A point-to-point pulse the adversary wants to arrive at `arrive`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ByzSend {
    pub from: usize,
    pub to: usize,
    pub arrive: f64,
}

/// What the adversary learns when a correct node opens a listening window.
#[derive(Debug, Clone, Copy)]
pub struct WindowView {
    pub receiver: usize,
    pub round: u32,
    pub kind: PulseKind,
    pub close_real: f64,
    /// Real time at which the receiver itself will pulse.
    pub pulse_real: f64,
    /// Current skew scale used to place pulses just outside the correct cluster.
    pub skew: f64,
}

pub struct Adversary {
    sys: SystemParams,
    faulty: Vec<(usize, FaultStrategy)>,
    correct: Vec<usize>,
    last_pulse: Vec<Option<f64>>,
    rng: ChaCha8Rng,
}

impl Adversary {
    pub fn new(sys: SystemParams, faults: &FaultConfig, rng: ChaCha8Rng) -> Self {
        Adversary {
            sys,
            faulty: faults.nodes.iter().map(|f| (f.id, f.strategy.clone())).collect(),
            correct: faults.correct_ids(sys.n),
            last_pulse: vec![None; sys.n],
            rng,
        }
    }

    /// Pre-planned sends and the first tick of every Poisson sender.
    pub fn initial(&mut self) -> (Vec<ByzSend>, Vec<(usize, f64)>) {
        let mut sends = Vec::new();
        let mut ticks = Vec::new();
        for (id, strategy) in self.faulty.clone() {
            match strategy {
                FaultStrategy::CustomSchedule { sends: plan } => {
                    for s in plan {
                        sends.extend(s.to.iter().map(|&to| ByzSend { from: id, to, arrive: s.time + self.sys.d }));
                    }
                }
                FaultStrategy::RandomPulses { rate } => ticks.push((id, self.exp(rate))),
                _ => {}
            }
        }
        (sends, ticks)
    }

    fn exp(&mut self, rate: f64) -> f64 {
        let x: f64 = self.rng.gen_range(f64::MIN_POSITIVE..1.0);
        -x.ln() / rate
    }

    /// One Poisson send to a random receiver subset; returns the next tick.
    pub fn on_tick(&mut self, from: usize, now: f64) -> (Vec<ByzSend>, Option<f64>) {
        let Some(rate) = self.faulty.iter().find_map(|(id, s)| match s {
            FaultStrategy::RandomPulses { rate } if *id == from => Some(*rate),
            _ => None,
        }) else {
            return (Vec::new(), None);
        };
        let mut sends = Vec::new();
        for &to in &self.correct {
            if self.rng.gen_bool(0.5) {
                let arrive = now + self.sys.min_delay() + self.rng.gen_range(0.0..=1.0) * self.sys.u;
                sends.push(ByzSend { from, to, arrive });
            }
        }
        (sends, Some(now + self.exp(rate)))
    }

    pub fn on_correct_pulse(&mut self, node: usize, kind: PulseKind, real: f64) {
        if kind == PulseKind::First {
            self.last_pulse[node] = Some(real);
        }
    }

    /// Whether `v` sat in the early half of the correct nodes' latest pulses.
    fn was_early(&self, v: usize) -> bool {
        let mut times: Vec<f64> = self.correct.iter().filter_map(|&w| self.last_pulse[w]).collect();
        let Some(own) = self.last_pulse[v] else { return v % 2 == 0 };
        times.sort_by(f64::total_cmp);
        own <= times[times.len() / 2]
    }

    pub fn on_window(&mut self, now: f64, view: WindowView) -> Vec<ByzSend> {
        let earliest = now + self.sys.min_delay();
        let latest = view.close_real - 1e-6 * self.sys.u;
        if latest < earliest {
            return Vec::new();
        }
        let mut sends = Vec::new();
        for (id, strategy) in &self.faulty {
            let early = match strategy {
                FaultStrategy::SplitEarlyLate => {
                    let group = (view.receiver + view.round as usize) % 2 == 0;
                    group == (view.kind == PulseKind::First)
                }
                FaultStrategy::MirrorExtreme => self.was_early(view.receiver) == (view.kind == PulseKind::First),
                _ => continue,
            };
            let arrive = match strategy {
                FaultStrategy::SplitEarlyLate => {
                    if early {
                        earliest
                    } else {
                        latest
                    }
                }
                _ => {
                    let beyond = view.skew + 2.0 * self.sys.u;
                    let target = if early {
                        view.pulse_real + self.sys.min_delay() - beyond
                    } else {
                        view.pulse_real + self.sys.d + beyond
                    };
                    target.clamp(earliest, latest)
                }
            };
            sends.push(ByzSend { from: *id, to: view.receiver, arrive });
        }
        sends
    }
}
