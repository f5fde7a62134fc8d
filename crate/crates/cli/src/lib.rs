//! Scenario-driven simulation runs for the four-user entanglement network.

pub mod golden;
pub mod pipeline;
pub mod run;
pub mod scenario;
pub mod stages;
