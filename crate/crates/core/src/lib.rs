//! Byzantine fault-tolerant pulse synchronization by repeated approximate agreement.

pub mod adversary;
pub mod agreement;
pub mod checks;
pub mod feasibility;
pub mod freq;
pub mod model;
pub mod phase;
pub mod protocol;
pub mod report;
pub mod scenario;
pub mod sim;
pub mod stabilizer;
