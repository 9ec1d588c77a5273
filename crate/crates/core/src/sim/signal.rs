use std::collections::BTreeMap;

use crate::device::{Backend, DeviceDescriptor, Item, Realism};
use crate::types::{Access, DataType, Range, Value};

pub const SIGNAL_CLASS: &str = "signal-source";
const SETPOINT: &str = "setpoint";
const MIRROR: &str = "mirror";

pub fn signal_descriptor(device_id: &str, realism: Realism) -> DeviceDescriptor {
    DeviceDescriptor {
        device_id: device_id.to_string(),
        device_class: SIGNAL_CLASS.to_string(),
        realism,
        items: vec![
            Item {
                path: MIRROR.into(),
                data_type: DataType::Float,
                access: Access::Read,
                engineering_unit: "".into(),
                range: Some(Range::new(-10.0, 10.0)),
                state: false,
            },
            Item {
                path: SETPOINT.into(),
                data_type: DataType::Float,
                access: Access::ReadWrite,
                engineering_unit: "".into(),
                range: Some(Range::new(-10.0, 10.0)),
                state: true,
            },
        ],
        constraints: None,
    }
}

/// Writable setpoint echoed to a read-only mirror; no dynamics.
#[derive(Debug, Clone)]
pub struct SignalSource {
    dt: f64,
    setpoint: f64,
}

impl SignalSource {
    pub fn new(dt: f64) -> Self {
        SignalSource { dt, setpoint: 0.0 }
    }
}

impl Backend for SignalSource {
    fn dt(&self) -> f64 {
        self.dt
    }

    fn init(&mut self) {
        self.setpoint = 0.0;
    }

    fn step(&mut self) {}

    fn read_state(&self) -> BTreeMap<String, Value> {
        [
            (SETPOINT.to_string(), Value::Float(self.setpoint)),
            (MIRROR.to_string(), Value::Float(self.setpoint)),
        ]
        .into()
    }

    fn apply_writes(&mut self, writes: &[(String, Value)]) {
        for (path, value) in writes {
            if let (SETPOINT, Some(x)) = (path.as_str(), value.as_f64()) {
                self.setpoint = x;
            }
        }
    }

    fn set_state_target(&mut self, state: &BTreeMap<String, Value>) {
        if let Some(x) = state.get(SETPOINT).and_then(Value::as_f64) {
            self.setpoint = x;
        }
    }
}
