//! Deterministic fixed-step process simulators.
//!
//! The reference device is a gravity-drained tank: inflow `q_in` is set by
//! the learner, outflow follows `Cv·√h`, and the level obeys
//! `dh/dt = (q_in − Cv·√h) / A`, integrated with explicit Euler and clamped
//! to `[0, h_max]`. A trivial signal source (setpoint mirrored to a
//! readable item) is provided for tests that need a stateless device.

mod signal;
mod stepper;
mod tank;

use serde::{Deserialize, Serialize};

use crate::clock::SharedClock;
use crate::device::{Device, DeviceDescriptor, Realism, Snapshot};

pub use signal::{SIGNAL_CLASS, SignalSource, signal_descriptor};
pub use stepper::Stepper;
pub use tank::{
    LEVEL, OUTFLOW, Q_IN, TANK_CLASS, TankBackend, TankParams, TankState, simulate_tank, step_tank, tank_descriptor,
};

/// A simulated device class that can be instantiated on demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum SimModel {
    Tank(TankParams),
    SignalSource { dt: f64 },
}

impl SimModel {
    pub fn class_name(&self) -> &'static str {
        match self {
            SimModel::Tank(_) => TANK_CLASS,
            SimModel::SignalSource { .. } => SIGNAL_CLASS,
        }
    }

    pub fn from_class(class: &str, dt: f64) -> Option<SimModel> {
        match class {
            TANK_CLASS => Some(SimModel::Tank(TankParams {
                dt,
                ..TankParams::default()
            })),
            SIGNAL_CLASS => Some(SimModel::SignalSource { dt }),
            _ => None,
        }
    }

    pub fn descriptor(&self, device_id: &str, realism: Realism) -> DeviceDescriptor {
        match self {
            SimModel::Tank(p) => tank_descriptor(device_id, realism, p),
            SimModel::SignalSource { .. } => signal_descriptor(device_id, realism),
        }
    }

    pub fn build(&self, device_id: &str, realism: Realism, clock: SharedClock) -> Device {
        let descriptor = self.descriptor(device_id, realism);
        let backend: Box<dyn crate::device::Backend> = match self {
            SimModel::Tank(p) => Box::new(TankBackend::new(*p)),
            SimModel::SignalSource { dt } => Box::new(SignalSource::new(*dt)),
        };
        Device::new(descriptor, backend, clock)
    }

    /// State of a freshly initialized instance.
    pub fn initial_snapshot(&self, device_id: &str) -> Snapshot {
        let clock: SharedClock = std::sync::Arc::new(crate::clock::ManualClock::default());
        let mut dev = self.build(device_id, Realism::Virtual, clock);
        dev.snapshot().expect("fresh virtual device is not restoring")
    }
}
