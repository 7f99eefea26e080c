//! Capacity expansion planning for AC power systems.
//!
//! The crate builds convex approximations of the AC capacity expansion
//! problem (network model, formulation, successive convex solves), then
//! restores AC feasibility of the resulting plan snapshot by snapshot and
//! certifies the outcome with independent power-flow checks.

pub mod acfeas;
pub mod caseio;
pub mod formulation;
pub mod graph;
pub mod netmodel;
pub mod reinforce;
pub mod report;
pub mod scp;
