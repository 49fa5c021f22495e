//! HTTP control service for the data product loop: connection, contract
//! and run control, approvals, read-only views and a resumable event
//! stream.

pub mod api;
pub mod app;
pub mod config;
pub mod error;
pub mod events;
pub mod report;

pub use api::router;
pub use app::App;
pub use config::Config;
