pub mod clock;
pub mod compat;
pub mod device;
pub mod learning_design;
pub mod packaging;
pub mod protocol;
pub mod runtime;
pub mod scheduler;
pub mod sim;
pub mod types;
mod xmlw;
