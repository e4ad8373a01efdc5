//! Core of loopstage: environments, the wire protocol, experiment
//! definitions, session orchestration, the event log with replay, built-in
//! agents and the out-of-process environment bridge.

pub mod agents;
pub mod bridge;
pub mod config;
pub mod env;
pub mod hash;
pub mod orchestrator;
pub mod protocol;
pub mod rng;
pub mod store;
pub mod sweep;
