//! Scenario documents: everything a run needs, validated before use.

use crate::feasibility::{failures, Infeasible};
use crate::freq::{self, FreqOverrides};
use crate::model::{ClockPolicy, DelayPolicy, FaultConfig, ModelError, OffsetPolicy, SystemParams};
use crate::phase::{self, PhaseParams};
use crate::protocol::Measurement;
use crate::stabilizer::{self, OraclePolicy, StabOptions, StabParams, SyncParams, Variant};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA: &str = "pulsesync/scenario@1";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Infeasible(#[from] Infeasible),
}

impl From<ModelError> for ScenarioError {
    fn from(e: ModelError) -> Self {
        ScenarioError::Config(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Phase,
    Freq,
    PhaseStab,
    FreqStab,
}

impl Algorithm {
    pub fn variant(self) -> Variant {
        match self {
            Algorithm::Phase | Algorithm::PhaseStab => Variant::Phase,
            Algorithm::Freq | Algorithm::FreqStab => Variant::Freq,
        }
    }

    pub fn stabilizing(self) -> bool {
        matches!(self, Algorithm::PhaseStab | Algorithm::FreqStab)
    }

    /// Accepts both `phase_stab` and `phase-stab`.
    pub fn parse(s: &str) -> Option<Self> {
        match s.replace('-', "_").as_str() {
            "phase" => Some(Algorithm::Phase),
            "freq" => Some(Algorithm::Freq),
            "phase_stab" => Some(Algorithm::PhaseStab),
            "freq_stab" => Some(Algorithm::FreqStab),
            _ => None,
        }
    }
}

/// Hand-picked constant budgets for the phase algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseOverrides {
    pub tau1: f64,
    pub tau2: f64,
    pub big_t: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<PhaseOverrides>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freq: Option<FreqOverrides>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stab: Option<StabOptions>,
}

fn yes() -> bool {
    true
}

fn three() -> u32 {
    3
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSettings {
    #[serde(default)]
    pub policy: OraclePolicy,
    /// Arbitrary beats before the first compliant one.
    #[serde(default = "three")]
    pub chaos_beats: u32,
    /// Length of the arbitrary phase; one beat cycle when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chaos_duration: Option<f64>,
}

impl Default for OracleSettings {
    fn default() -> Self {
        OracleSettings { policy: OraclePolicy::default(), chaos_beats: 3, chaos_duration: None }
    }
}

/// Switches per invariant family; `feasibility` gates running with unsound parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checks {
    #[serde(default = "yes")]
    pub feasibility: bool,
    #[serde(default = "yes")]
    pub envelope: bool,
    #[serde(default = "yes")]
    pub measurement: bool,
    #[serde(default = "yes")]
    pub correction: bool,
    #[serde(default = "yes")]
    pub execution: bool,
    #[serde(default = "yes")]
    pub anchor: bool,
    #[serde(default = "yes")]
    pub period: bool,
    #[serde(default = "yes")]
    pub delay_window: bool,
    #[serde(default = "yes")]
    pub frequency: bool,
    #[serde(default = "yes")]
    pub stabilization: bool,
}

impl Default for Checks {
    fn default() -> Self {
        Checks {
            feasibility: true,
            envelope: true,
            measurement: true,
            correction: true,
            execution: true,
            anchor: true,
            period: true,
            delay_window: true,
            frequency: true,
            stabilization: true,
        }
    }
}

fn default_rounds() -> u32 {
    60
}

fn default_cycles() -> u32 {
    4
}

fn default_clock() -> ClockPolicy {
    ClockPolicy::AllNominal
}

fn default_delay() -> DelayPolicy {
    DelayPolicy::UniformRandom
}

fn default_schema() -> String {
    SCHEMA.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_schema")]
    pub schema: String,
    pub system: SystemParams,
    pub algorithm: Algorithm,
    /// Horizon of the non-stabilizing algorithms.
    #[serde(default = "default_rounds")]
    pub rounds: u32,
    /// Compliant beats emitted in stabilizing runs.
    #[serde(default = "default_cycles")]
    pub beat_cycles: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_clock")]
    pub clock_policy: ClockPolicy,
    #[serde(default)]
    pub offset_policy: OffsetPolicy,
    #[serde(default = "default_delay")]
    pub delay_policy: DelayPolicy,
    #[serde(default)]
    pub faults: FaultConfig,
    #[serde(default)]
    pub measurement: Measurement,
    #[serde(default)]
    pub overrides: Overrides,
    #[serde(default)]
    pub oracle: OracleSettings,
    #[serde(default)]
    pub checks: Checks,
}

/// Solved parameters for a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub sync: SyncParams,
    pub stab: Option<StabParams>,
}

impl Scenario {
    pub fn new(system: SystemParams, algorithm: Algorithm) -> Self {
        Scenario {
            schema: SCHEMA.to_string(),
            system,
            algorithm,
            rounds: default_rounds(),
            beat_cycles: default_cycles(),
            seed: 0,
            clock_policy: default_clock(),
            offset_policy: OffsetPolicy::default(),
            delay_policy: default_delay(),
            faults: FaultConfig::default(),
            measurement: Measurement::default(),
            overrides: Overrides::default(),
            oracle: OracleSettings::default(),
            checks: Checks::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let sc: Scenario = serde_json::from_str(text).map_err(|e| ScenarioError::Config(e.to_string()))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.schema != SCHEMA {
            return Err(ScenarioError::Config(format!("schema must be {SCHEMA:?}, got {:?}", self.schema)));
        }
        self.system.validate()?;
        self.delay_policy.validate(&self.system)?;
        self.faults.validate(&self.system)?;
        if self.rounds == 0 {
            return Err(ScenarioError::Config("rounds must be at least 1".into()));
        }
        if self.algorithm.stabilizing() && self.beat_cycles < 2 {
            return Err(ScenarioError::Config("beat_cycles must be at least 2".into()));
        }
        if let ClockPolicy::SinusoidBounded { slope: Some(s) } = self.clock_policy {
            if !(s >= 0.0 && s <= self.system.nu * (1.0 + 1e-12)) {
                return Err(ScenarioError::Config(format!("sinusoid slope {s} exceeds nu = {}", self.system.nu)));
            }
        }
        Ok(())
    }

    pub fn resolve(&self) -> Result<Resolved, ScenarioError> {
        let s = &self.system;
        let enforce = self.checks.feasibility;
        match self.algorithm {
            Algorithm::Phase => {
                let p = match self.overrides.phase {
                    Some(o) => PhaseParams::constant(s, o.tau1, o.tau2, o.big_t),
                    None => phase::solve_condition1(s)?,
                };
                let bad = phase::check_condition1(&p, self.rounds + 1).violations().into_iter().next().cloned();
                if let (Some(row), true) = (bad, enforce) {
                    return Err(Infeasible::new(format!("budget {} fails: {} > {}", row.name, row.lhs, row.rhs)).into());
                }
                Ok(Resolved { sync: SyncParams::Phase(p), stab: None })
            }
            Algorithm::Freq => {
                let ov = self.overrides.freq.unwrap_or_default();
                let p = freq::solve_condition2(s, &ov)?;
                let bad = failures(&freq::check_condition2(&p)).into_iter().next();
                if let (Some(row), true) = (bad, enforce) {
                    return Err(Infeasible::new(format!("budget {} fails: {} > {}", row.name, row.lhs, row.rhs)).into());
                }
                Ok(Resolved { sync: SyncParams::Freq(p), stab: None })
            }
            Algorithm::PhaseStab | Algorithm::FreqStab => {
                let opts = self.overrides.stab.unwrap_or_default();
                let (sync, stab) = stabilizer::solve_condition3(s, self.algorithm.variant(), &opts)?;
                Ok(Resolved { sync, stab: Some(stab) })
            }
        }
    }
}
