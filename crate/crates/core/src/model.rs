//! System model: node population, hardware clocks, channel delays and fault roles.
//!
//! All times are `f64` seconds. Local (hardware clock) readings use the same unit.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid system parameters: {0}")]
    InvalidParams(String),
    #[error("local time {h} precedes the clock offset {offset}")]
    BeforeOffset { h: f64, offset: f64 },
    #[error("invalid clock: {0}")]
    InvalidClock(String),
    #[error("invalid delay policy: {0}")]
    InvalidDelay(String),
    #[error("invalid fault configuration: {0}")]
    InvalidFaults(String),
}

/// Global constants shared by the adversary and the algorithms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemParams {
    pub n: usize,
    pub f: usize,
    pub theta: f64,
    #[serde(default)]
    pub nu: f64,
    pub d: f64,
    pub u: f64,
    pub big_f: f64,
}

impl SystemParams {
    /// Builds parameters with the maximal fault budget for `n`.
    pub fn new(n: usize, theta: f64, nu: f64, d: f64, u: f64, big_f: f64) -> Result<Self, ModelError> {
        let s = SystemParams { n, f: max_faults(n), theta, nu, d, u, big_f };
        s.validate()?;
        Ok(s)
    }

    /// `theta == 1` is accepted as the drift-free limit.
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidParams(m));
        if self.n < 4 {
            return bad(format!("n = {} but at least 4 nodes are required", self.n));
        }
        if self.f > max_faults(self.n) {
            return bad(format!("f = {} exceeds floor((n-1)/3) = {}", self.f, max_faults(self.n)));
        }
        if !(self.theta.is_finite() && self.theta >= 1.0) {
            return bad(format!("theta = {} must be a finite value >= 1", self.theta));
        }
        if !(self.u.is_finite() && self.d.is_finite() && self.u > 0.0 && self.u <= self.d) {
            return bad(format!("need 0 < u <= d, got u = {}, d = {}", self.u, self.d));
        }
        if !(self.big_f.is_finite() && self.big_f > 0.0) {
            return bad(format!("big_f = {} must be positive", self.big_f));
        }
        if !(self.nu.is_finite() && self.nu >= 0.0) {
            return bad(format!("nu = {} must be non-negative", self.nu));
        }
        Ok(())
    }

    pub fn min_delay(&self) -> f64 {
        self.d - self.u
    }
}

pub fn max_faults(n: usize) -> usize {
    n.saturating_sub(1) / 3
}

/// One piece of a piecewise-linear rate function: `rate + slope * (t - start)` on `[start, next start)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateSegment {
    pub start: f64,
    pub rate: f64,
    pub slope: f64,
}

/// Strictly increasing local-time function with piecewise-linear rate.
#[derive(Debug, Clone, PartialEq)]
pub struct HardwareClock {
    offset: f64,
    segments: Vec<RateSegment>,
    base: Vec<f64>,
}

impl HardwareClock {
    pub fn constant(offset: f64, rate: f64) -> Self {
        Self::new(offset, vec![RateSegment { start: 0.0, rate, slope: 0.0 }]).expect("valid constant clock")
    }

    /// The first segment must start at 0 and the last one must have zero slope.
    pub fn new(offset: f64, segments: Vec<RateSegment>) -> Result<Self, ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidClock(m.to_string()));
        if segments.is_empty() || segments[0].start != 0.0 {
            return bad("first segment must start at time 0");
        }
        if !offset.is_finite() {
            return bad("offset must be finite");
        }
        if segments.windows(2).any(|w| !(w[1].start > w[0].start)) {
            return bad("segment starts must be strictly increasing");
        }
        if segments.last().map(|s| s.slope) != Some(0.0) {
            return bad("last segment must have zero slope");
        }
        let mut base = Vec::with_capacity(segments.len());
        let mut h = offset;
        for (i, s) in segments.iter().enumerate() {
            base.push(h);
            if let Some(next) = segments.get(i + 1) {
                let dt = next.start - s.start;
                let end_rate = s.rate + s.slope * dt;
                if s.rate <= 0.0 || end_rate <= 0.0 {
                    return bad("rates must stay positive");
                }
                h += s.rate * dt + 0.5 * s.slope * dt * dt;
            } else if s.rate <= 0.0 {
                return bad("rates must stay positive");
            }
        }
        Ok(HardwareClock { offset, segments, base })
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn segments(&self) -> &[RateSegment] {
        &self.segments
    }

    fn index(&self, t: f64) -> usize {
        self.segments.partition_point(|s| s.start <= t).saturating_sub(1)
    }

    /// `H(t)` for `t >= 0`.
    pub fn local_time(&self, t: f64) -> f64 {
        let i = self.index(t);
        let s = &self.segments[i];
        let dt = t - s.start;
        self.base[i] + s.rate * dt + 0.5 * s.slope * dt * dt
    }

    /// Instantaneous rate `h(t)` (right-continuous at breakpoints).
    pub fn rate_at(&self, t: f64) -> f64 {
        let i = self.index(t);
        let s = &self.segments[i];
        s.rate + s.slope * (t - s.start)
    }

    /// The unique `t` with `H(t) = h`.
    pub fn invert_local_time(&self, h: f64) -> Result<f64, ModelError> {
        if h < self.offset {
            return Err(ModelError::BeforeOffset { h, offset: self.offset });
        }
        let i = self.base.partition_point(|&b| b <= h).saturating_sub(1);
        let s = &self.segments[i];
        let dh = h - self.base[i];
        let dt = if s.slope == 0.0 {
            dh / s.rate
        } else {
            let disc = (s.rate * s.rate + 2.0 * s.slope * dh).max(0.0);
            2.0 * dh / (s.rate + disc.sqrt())
        };
        let dt = match self.segments.get(i + 1) {
            Some(next) => dt.min(next.start - s.start),
            None => dt,
        };
        Ok(s.start + dt.max(0.0))
    }

    /// Minimum and maximum rate over `[t0, t1]`.
    pub fn rate_range(&self, t0: f64, t1: f64) -> (f64, f64) {
        let (t0, t1) = if t0 <= t1 { (t0, t1) } else { (t1, t0) };
        let mut lo = self.rate_at(t0).min(self.rate_at(t1));
        let mut hi = self.rate_at(t0).max(self.rate_at(t1));
        let first = self.index(t0);
        let last = self.index(t1);
        for i in first..=last {
            let s = &self.segments[i];
            let a = s.start.max(t0);
            let b = self.segments.get(i + 1).map_or(t1, |n| n.start.min(t1));
            for r in [s.rate + s.slope * (a - s.start), s.rate + s.slope * (b - s.start)] {
                lo = lo.min(r);
                hi = hi.max(r);
            }
        }
        (lo, hi)
    }

    /// Checks rate bounds and, when `nu` is given, slope and continuity bounds.
    pub fn validate(&self, theta: f64, nu: Option<f64>) -> Result<(), ModelError> {
        const TOL: f64 = 1e-12;
        for (i, s) in self.segments.iter().enumerate() {
            let end_rate = match self.segments.get(i + 1) {
                Some(n) => s.rate + s.slope * (n.start - s.start),
                None => s.rate,
            };
            for r in [s.rate, end_rate] {
                if r < 1.0 - TOL || r > theta + TOL {
                    return Err(ModelError::InvalidClock(format!("rate {r} outside [1, {theta}]")));
                }
            }
            if let Some(nu) = nu {
                if s.slope.abs() > nu * (1.0 + TOL) + TOL {
                    return Err(ModelError::InvalidClock(format!("rate slope {} exceeds nu = {nu}", s.slope)));
                }
                if let Some(n) = self.segments.get(i + 1) {
                    if (n.rate - end_rate).abs() > TOL {
                        return Err(ModelError::InvalidClock(format!("rate jumps at t = {}", n.start)));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Clock generation policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClockPolicy {
    AllNominal,
    AllMaxDrift,
    RandomConstant,
    /// Lower half of the node ids at rate 1, upper half at rate theta.
    DriftWorstcaseSplit,
    /// Rate follows a sinusoid in `[1, theta]` sampled and linearly interpolated;
    /// `slope` is its maximal rate of change and defaults to the system `nu`.
    SinusoidBounded {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        slope: Option<f64>,
    },
}

/// How initial offsets `H(0)` are drawn from `[0, F)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetPolicy {
    #[default]
    Random,
    Zero,
    /// Lower half of the ids at 0, upper half just below F.
    Split,
}

const SINE_SAMPLES_PER_PERIOD: usize = 16;

/// Samples a clock for `node` valid on `[0, horizon]` (constant afterwards).
pub fn sample_clock<R: Rng>(
    params: &SystemParams,
    policy: &ClockPolicy,
    offsets: OffsetPolicy,
    node: usize,
    horizon: f64,
    rng: &mut R,
) -> Result<HardwareClock, ModelError> {
    let theta = params.theta;
    let offset = match offsets {
        OffsetPolicy::Random => rng.gen_range(0.0..1.0) * params.big_f,
        OffsetPolicy::Zero => 0.0,
        OffsetPolicy::Split if node < params.n / 2 => 0.0,
        OffsetPolicy::Split => params.big_f * (1.0 - 1e-9),
    };
    match policy {
        ClockPolicy::AllNominal => Ok(HardwareClock::constant(offset, 1.0)),
        ClockPolicy::AllMaxDrift => Ok(HardwareClock::constant(offset, theta)),
        ClockPolicy::RandomConstant => Ok(HardwareClock::constant(offset, 1.0 + rng.gen_range(0.0..=1.0) * (theta - 1.0))),
        ClockPolicy::DriftWorstcaseSplit => {
            Ok(HardwareClock::constant(offset, if node < params.n / 2 { 1.0 } else { theta }))
        }
        ClockPolicy::SinusoidBounded { slope } => {
            let slope = slope.unwrap_or(params.nu);
            if slope > params.nu * (1.0 + 1e-12) {
                return Err(ModelError::InvalidClock(format!(
                    "sinusoid slope {slope} exceeds the rate-change bound nu = {}",
                    params.nu
                )));
            }
            let amplitude = 0.5 * (theta - 1.0);
            let center = 1.0 + amplitude;
            if slope <= 0.0 || amplitude <= 0.0 {
                return Ok(HardwareClock::constant(offset, center));
            }
            let omega = slope / amplitude;
            let period = std::f64::consts::TAU / omega;
            let step = period / SINE_SAMPLES_PER_PERIOD as f64;
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let rate = |t: f64| center + amplitude * (omega * t + phase).sin();
            let count = ((horizon.max(step) / step).ceil() as usize).min(1_000_000);
            let mut segments = Vec::with_capacity(count + 1);
            for k in 0..count {
                let (a, b) = (k as f64 * step, (k + 1) as f64 * step);
                let (ra, rb) = (rate(a), rate(b));
                segments.push(RateSegment { start: a, rate: ra, slope: (rb - ra) / step });
            }
            segments.push(RateSegment { start: count as f64 * step, rate: rate(count as f64 * step), slope: 0.0 });
            HardwareClock::new(offset, segments)
        }
    }
}

/// Message delay policies; every produced delay lies in `[d - U, d]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DelayPolicy {
    ConstantMax,
    ConstantMin,
    UniformRandom,
    /// Receivers in the lower half of the ids get their own pulse fast and all
    /// others slow; the upper half sees the opposite.
    AdversarialSplit,
    PerLinkTable { table: Vec<Vec<f64>> },
}

impl DelayPolicy {
    pub fn validate(&self, s: &SystemParams) -> Result<(), ModelError> {
        if let DelayPolicy::PerLinkTable { table } = self {
            if table.len() != s.n || table.iter().any(|row| row.len() != s.n) {
                return Err(ModelError::InvalidDelay(format!("table must be {0} x {0}", s.n)));
            }
            for row in table {
                for &x in row {
                    if !(x >= s.min_delay() && x <= s.d) {
                        return Err(ModelError::InvalidDelay(format!("delay {x} outside [d - U, d]")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn delay<R: Rng>(&self, s: &SystemParams, from: usize, to: usize, rng: &mut R) -> f64 {
        match self {
            DelayPolicy::ConstantMax => s.d,
            DelayPolicy::ConstantMin => s.min_delay(),
            DelayPolicy::UniformRandom => s.min_delay() + rng.gen_range(0.0..=1.0) * s.u,
            DelayPolicy::AdversarialSplit => {
                let fast_self = to < s.n / 2;
                if (from == to) == fast_self {
                    s.min_delay()
                } else {
                    s.d
                }
            }
            DelayPolicy::PerLinkTable { table } => table[from][to],
        }
    }
}

/// A pre-planned Byzantine send.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduledSend {
    pub time: f64,
    pub to: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FaultStrategy {
    Silent,
    /// Poisson sends at `rate` per second to random receiver subsets.
    RandomPulses { rate: f64 },
    /// Per receiver and window, a pulse at the earliest or the latest instant
    /// the receiver still accepts; the halves swap every round.
    SplitEarlyLate,
    /// Per receiver, a pulse just beyond the correct cluster on the side where
    /// that receiver sat in the previous round.
    MirrorExtreme,
    CustomSchedule { sends: Vec<ScheduledSend> },
}

impl FaultStrategy {
    pub fn label(&self) -> &'static str {
        match self {
            FaultStrategy::Silent => "silent",
            FaultStrategy::RandomPulses { .. } => "random_pulses",
            FaultStrategy::SplitEarlyLate => "split_early_late",
            FaultStrategy::MirrorExtreme => "mirror_extreme",
            FaultStrategy::CustomSchedule { .. } => "custom_schedule",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultyNode {
    pub id: usize,
    pub strategy: FaultStrategy,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultConfig {
    #[serde(default)]
    pub nodes: Vec<FaultyNode>,
}

impl FaultConfig {
    pub fn validate(&self, s: &SystemParams) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidFaults(m));
        if self.nodes.len() > s.f {
            return bad(format!("{} faulty nodes exceed f = {}", self.nodes.len(), s.f));
        }
        let mut seen = vec![false; s.n];
        for node in &self.nodes {
            if node.id >= s.n {
                return bad(format!("faulty id {} out of range", node.id));
            }
            if std::mem::replace(&mut seen[node.id], true) {
                return bad(format!("faulty id {} listed twice", node.id));
            }
            match &node.strategy {
                FaultStrategy::RandomPulses { rate } if !(rate.is_finite() && *rate > 0.0) => {
                    return bad(format!("random_pulses rate {rate} must be positive"));
                }
                FaultStrategy::CustomSchedule { sends } => {
                    for send in sends {
                        if !(send.time >= 0.0) || send.to.iter().any(|&w| w >= s.n) {
                            return bad("custom send with negative time or unknown receiver".into());
                        }
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn is_faulty(&self, id: usize) -> bool {
        self.nodes.iter().any(|f| f.id == id)
    }

    pub fn correct_ids(&self, n: usize) -> Vec<usize> {
        (0..n).filter(|&v| !self.is_faulty(v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sys(theta: f64, nu: f64) -> SystemParams {
        SystemParams::new(4, theta, nu, 1.0, 0.1, 2.0).unwrap()
    }

    #[test]
    fn unit_rate_identity() {
        let c = HardwareClock::constant(0.0, 1.0);
        assert_eq!(c.local_time(5.0), 5.0);
        assert_eq!(c.invert_local_time(7.0).unwrap(), 7.0);
    }

    #[test]
    fn constant_drift_integral() {
        let c = HardwareClock::constant(0.0, 1.01);
        assert_relative_eq!(c.local_time(10.0), 10.1, max_relative = 1e-15);
        assert_relative_eq!(c.invert_local_time(10.1).unwrap(), 10.0, max_relative = 1e-15);
    }

    #[test]
    fn two_segment_integration() {
        let c = HardwareClock::new(
            0.5,
            vec![RateSegment { start: 0.0, rate: 1.0, slope: 0.0 }, RateSegment { start: 1.0, rate: 1.01, slope: 0.0 }],
        )
        .unwrap();
        // 0.5 + 1 * 1 + 1.01 * 1
        assert_relative_eq!(c.local_time(2.0), 2.51, max_relative = 1e-15);
    }

    #[test]
    fn affine_segment_inverse() {
        let c = HardwareClock::new(
            0.0,
            vec![RateSegment { start: 0.0, rate: 1.0, slope: 0.01 }, RateSegment { start: 2.0, rate: 1.02, slope: 0.0 }],
        )
        .unwrap();
        // integral of 1 + 0.01 t over [0, 1]
        assert_relative_eq!(c.local_time(1.0), 1.005, max_relative = 1e-15);
        assert_relative_eq!(c.invert_local_time(1.005).unwrap(), 1.0, max_relative = 1e-14);
    }

    #[test]
    fn inverse_before_offset_is_an_error() {
        let c = HardwareClock::constant(3.0, 1.0);
        assert!(matches!(c.invert_local_time(2.0), Err(ModelError::BeforeOffset { .. })));
    }

    #[test]
    fn policies_match_their_definitions() {
        let s = sys(1.01, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let nominal = sample_clock(&s, &ClockPolicy::AllNominal, OffsetPolicy::Random, 0, 10.0, &mut rng).unwrap();
        assert_eq!(nominal.rate_at(3.0), 1.0);
        assert!(nominal.offset() >= 0.0 && nominal.offset() < s.big_f);
        let fast = sample_clock(&s, &ClockPolicy::AllMaxDrift, OffsetPolicy::Zero, 0, 10.0, &mut rng).unwrap();
        assert_eq!(fast.rate_at(3.0), 1.01);
        let rates: Vec<f64> = (0..4)
            .map(|v| {
                sample_clock(&s, &ClockPolicy::DriftWorstcaseSplit, OffsetPolicy::Zero, v, 10.0, &mut rng)
                    .unwrap()
                    .rate_at(0.0)
            })
            .collect();
        assert_eq!(rates, vec![1.0, 1.0, 1.01, 1.01]);
    }

    #[test]
    fn sinusoid_slope_above_nu_is_rejected() {
        let s = sys(1.01, 1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ClockPolicy::SinusoidBounded { slope: Some(1e-2) };
        assert!(sample_clock(&s, &p, OffsetPolicy::Zero, 0, 10.0, &mut rng).is_err());
    }

    #[test]
    fn adversarial_split_delays() {
        let s = sys(1.01, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = DelayPolicy::AdversarialSplit;
        assert_eq!(p.delay(&s, 0, 0, &mut rng), s.min_delay());
        assert_eq!(p.delay(&s, 1, 0, &mut rng), s.d);
        assert_eq!(p.delay(&s, 3, 3, &mut rng), s.d);
        assert_eq!(p.delay(&s, 0, 3, &mut rng), s.min_delay());
    }

    #[test]
    fn fault_budget_is_enforced() {
        let s = sys(1.01, 0.0);
        let two = FaultConfig {
            nodes: vec![
                FaultyNode { id: 0, strategy: FaultStrategy::Silent },
                FaultyNode { id: 1, strategy: FaultStrategy::Silent },
            ],
        };
        assert!(two.validate(&s).is_err());
        assert!(SystemParams { f: 2, ..s }.validate().is_err());
    }

    fn clock_strategy() -> impl Strategy<Value = (HardwareClock, f64, f64)> {
        (1.0f64..1.1, 0.0f64..1e-3, any::<u64>(), 0.0f64..5.0).prop_map(|(theta, nu, seed, offset)| {
            let s = SystemParams::new(4, theta, nu, 1.0, 0.1, 5.0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let policy = if seed % 2 == 0 { ClockPolicy::RandomConstant } else { ClockPolicy::SinusoidBounded { slope: None } };
            let mut c = sample_clock(&s, &policy, OffsetPolicy::Zero, 0, 200.0, &mut rng).unwrap();
            c = HardwareClock::new(offset, c.segments().to_vec()).unwrap();
            (c, theta, nu)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn rate_bounds_hold_on_random_pairs((c, theta, nu) in clock_strategy(), pairs in prop::collection::vec((0.0f64..250.0, 0.0f64..250.0), 50)) {
            prop_assert!(c.validate(theta, Some(nu)).is_ok());
            for (a, b) in pairs {
                let (t, t2) = if a <= b { (a, b) } else { (b, a) };
                let dh = c.local_time(t2) - c.local_time(t);
                let scale = 1e-12 * c.local_time(t2).abs().max(1.0);
                prop_assert!(dh >= (t2 - t) - scale);
                prop_assert!(dh <= theta * (t2 - t) + scale);
                prop_assert!((c.rate_at(t2) - c.rate_at(t)).abs() <= nu * (t2 - t) * (1.0 + 1e-9) + 1e-12);
            }
        }

        #[test]
        fn inverse_round_trips((c, _theta, _nu) in clock_strategy(), ts in prop::collection::vec(0.0f64..250.0, 50)) {
            for t in ts {
                let back = c.invert_local_time(c.local_time(t)).unwrap();
                prop_assert!((back - t).abs() <= 1e-12 * t.max(1.0), "t = {} back = {}", t, back);
            }
        }

        #[test]
        fn delays_stay_in_window(seed in any::<u64>(), from in 0usize..7, to in 0usize..7) {
            let s = SystemParams::new(7, 1.01, 0.0, 1.0, 0.25, 1.0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for p in [DelayPolicy::ConstantMax, DelayPolicy::ConstantMin, DelayPolicy::UniformRandom, DelayPolicy::AdversarialSplit] {
                let x = p.delay(&s, from, to, &mut rng);
                prop_assert!(x >= s.min_delay() && x <= s.d);
            }
        }
    }
}
