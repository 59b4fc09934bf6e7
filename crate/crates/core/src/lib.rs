//! Deployment-time evolution of an agent's persistent artifact state.
//!
//! A solve phase runs episodes against a frozen snapshot of the registry and
//! records trajectories as evidence. At batch boundaries an evolution step
//! diagnoses failures, plans edits, synthesizes a candidate update and hands
//! it to the governance gate, which verifies it in a sandbox and either
//! commits it atomically or leaves the state untouched. Every decision lands
//! in a hash-chained audit log.

pub mod canonical;
pub mod clock;
pub mod evidence;
pub mod evolver;
pub mod governance;
pub mod harness;
pub mod registry;
pub mod remote;
pub mod runner;
pub mod sandbox;
pub mod solve;
