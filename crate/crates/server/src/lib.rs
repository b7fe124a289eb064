//! HTTP service and operator CLI on top of `escalate-core`.

pub mod api;
pub mod cli;
pub mod runner;

pub use api::{router, AppState};
