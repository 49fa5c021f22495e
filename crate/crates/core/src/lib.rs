//! Contract-driven improvement of a data product: a database, the business
//! questions asked of it, their SQL, views and topics.
//!
//! The loop plans the single highest-impact tool for the current contract
//! gap, calibrates its parameters, executes it, applies the resulting state
//! events, recalculates only the affected metrics and commits the artifacts.

pub mod baseline;
pub mod clock;
pub mod db;
pub mod fixture;
pub mod metrics;
pub mod orchestrator;
pub mod planner;
pub mod registry;
pub mod sql;
pub mod state;
pub mod version;
