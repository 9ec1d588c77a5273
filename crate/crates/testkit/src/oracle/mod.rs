//! Reference models. Each one is written from the behavioural rules alone
//! and shares no code with the implementation it checks.

pub mod compat;
pub mod runtime;
pub mod scheduler;
pub mod tank;
