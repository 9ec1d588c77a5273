use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::device::{Backend, Constraints, DeviceDescriptor, Item, Realism};
use crate::types::{Access, DataType, Range, Value};

pub const TANK_CLASS: &str = "tank";
pub const Q_IN: &str = "actuators/q_in";
pub const LEVEL: &str = "sensors/level";
pub const OUTFLOW: &str = "sensors/outflow";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TankParams {
    /// Cross-section, m².
    pub area: f64,
    /// Outflow coefficient, m^2.5/s.
    pub outflow_coeff: f64,
    /// Maximum inflow, m³/s.
    pub q_max: f64,
    /// Maximum level, m.
    pub h_max: f64,
    /// Integration step, s.
    pub dt: f64,
}

impl Default for TankParams {
    fn default() -> Self {
        TankParams {
            area: 1.0,
            outflow_coeff: 0.05,
            q_max: 0.2,
            h_max: 2.0,
            dt: 0.1,
        }
    }
}

impl TankParams {
    pub fn check(&self) -> Result<(), String> {
        if !(self.area > 0.0) {
            return Err("area must be positive".into());
        }
        if !(self.outflow_coeff >= 0.0) {
            return Err("outflow coefficient must be nonnegative".into());
        }
        if !(self.q_max >= 0.0 && self.h_max >= 0.0) {
            return Err("ranges must be nonnegative".into());
        }
        if !(self.dt > 0.0) {
            return Err("dt must be positive".into());
        }
        Ok(())
    }

    /// Level where inflow balances outflow, clamped to the tank.
    pub fn steady_level(&self, q_in: f64) -> f64 {
        if self.outflow_coeff == 0.0 {
            return if q_in > 0.0 { self.h_max } else { 0.0 };
        }
        (q_in / self.outflow_coeff).powi(2).min(self.h_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TankState {
    pub level: f64,
    pub q_in: f64,
    pub sim_time: f64,
}

/// One explicit-Euler step. `√h` is taken of `max(h, 0)`.
pub fn step_tank(state: TankState, params: &TankParams) -> TankState {
    let outflow = params.outflow_coeff * state.level.max(0.0).sqrt();
    let dh = params.dt * (state.q_in - outflow) / params.area;
    TankState {
        level: (state.level + dh).clamp(0.0, params.h_max),
        q_in: state.q_in,
        sim_time: state.sim_time + params.dt,
    }
}

/// Trajectory including the initial state, one entry per step.
pub fn simulate_tank(initial: TankState, params: &TankParams, seconds: f64) -> Vec<TankState> {
    let mut stepper = super::Stepper::new(params.dt);
    let n = stepper.advance(seconds);
    let mut out = Vec::with_capacity(n as usize + 1);
    let mut s = initial;
    out.push(s);
    for _ in 0..n {
        s = step_tank(s, params);
        out.push(s);
    }
    out
}

pub fn tank_descriptor(device_id: &str, realism: Realism, params: &TankParams) -> DeviceDescriptor {
    let items = vec![
        Item {
            path: Q_IN.into(),
            data_type: DataType::Float,
            access: Access::ReadWrite,
            engineering_unit: "m3/s".into(),
            range: Some(Range::new(0.0, params.q_max)),
            state: true,
        },
        Item {
            path: LEVEL.into(),
            data_type: DataType::Float,
            access: Access::Read,
            engineering_unit: "m".into(),
            range: Some(Range::new(0.0, params.h_max)),
            state: true,
        },
        Item {
            path: OUTFLOW.into(),
            data_type: DataType::Float,
            access: Access::Read,
            engineering_unit: "m3/s".into(),
            range: None,
            state: false,
        },
    ];
    let constraints = match realism {
        Realism::Virtual => None,
        Realism::RealConstrained => Some(Constraints {
            slew_rates: [(LEVEL.to_string(), 0.05), (Q_IN.to_string(), 0.1)].into(),
            settle_epsilon: BTreeMap::new(),
            default_epsilon: 1e-3,
        }),
    };
    DeviceDescriptor {
        device_id: device_id.to_string(),
        device_class: TANK_CLASS.to_string(),
        realism,
        items,
        constraints,
    }
}

#[derive(Debug, Clone)]
pub struct TankBackend {
    params: TankParams,
    state: TankState,
}

impl TankBackend {
    pub fn new(params: TankParams) -> Self {
        TankBackend {
            params,
            state: TankState::default(),
        }
    }

    pub fn state(&self) -> TankState {
        self.state
    }
}

impl Backend for TankBackend {
    fn dt(&self) -> f64 {
        self.params.dt
    }

    fn init(&mut self) {
        self.state = TankState::default();
    }

    fn step(&mut self) {
        self.state = step_tank(self.state, &self.params);
    }

    fn read_state(&self) -> BTreeMap<String, Value> {
        let outflow = self.params.outflow_coeff * self.state.level.max(0.0).sqrt();
        [
            (Q_IN.to_string(), Value::Float(self.state.q_in)),
            (LEVEL.to_string(), Value::Float(self.state.level)),
            (OUTFLOW.to_string(), Value::Float(outflow)),
        ]
        .into()
    }

    fn apply_writes(&mut self, writes: &[(String, Value)]) {
        for (path, value) in writes {
            if let (Q_IN, Some(q)) = (path.as_str(), value.as_f64()) {
                self.state.q_in = q.clamp(0.0, self.params.q_max);
            }
        }
    }

    fn set_state_target(&mut self, state: &BTreeMap<String, Value>) {
        if let Some(q) = state.get(Q_IN).and_then(Value::as_f64) {
            self.state.q_in = q.clamp(0.0, self.params.q_max);
        }
        if let Some(h) = state.get(LEVEL).and_then(Value::as_f64) {
            self.state.level = h.clamp(0.0, self.params.h_max);
        }
    }
}
