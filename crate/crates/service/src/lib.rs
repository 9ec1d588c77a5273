//! The elab service: an HTTP facade over the learning runtime, the device
//! scheduler and the data-access protocol, persisted as an event log plus
//! per-learner device snapshots.

pub mod app;
pub mod client;
pub mod config;
pub mod events;
pub mod http;
pub mod snapshots;
pub mod tools;

pub use app::{ApiError, App, StartError, StateView};
pub use config::{Caller, ServiceConfig, UserKind};
