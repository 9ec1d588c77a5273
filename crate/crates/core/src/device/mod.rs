//! Generic device API: browse, read, write, snapshot, restore.
//!
//! A [`Device`] wraps a simulation [`Backend`] and owns its state. Time comes
//! from the injected service clock: every operation first catches the
//! simulation up to `clock.now()` in fixed steps, so reads always observe the
//! state at the moment of the call.
//!
//! `REAL_CONSTRAINED` devices cannot jump between states. A restore on such a
//! device enters `RESTORING` and moves every slew-limited item toward its
//! target by at most `slew_rate * dt` per step. While restoring, writes are
//! rejected, reads report `UNCERTAIN`, and the process dynamics are held.

mod descriptor;
mod registry;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{SharedClock, Timestamp};
use crate::sim::Stepper;
use crate::types::Value;

pub use descriptor::{BrowseEntry, Constraints, DeviceDescriptor, Item, Realism};
pub use registry::DeviceRegistry;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeviceError {
    #[error("unknown device `{0}`")]
    UnknownDevice(String),
    #[error("unknown path `{0}`")]
    UnknownPath(String),
    #[error("device is restoring")]
    Restoring,
    #[error("snapshot does not match descriptor: {0}")]
    SnapshotMismatch(String),
}

/// Contract between the device layer and a process implementation, so that
/// hardware adapters can replace simulators.
pub trait Backend: Send + std::fmt::Debug {
    /// Fixed integration step in seconds.
    fn dt(&self) -> f64;
    /// Resets to the initial state.
    fn init(&mut self);
    /// Advances the process by one `dt`.
    fn step(&mut self);
    /// Current value of every readable and state-bearing item.
    fn read_state(&self) -> BTreeMap<String, Value>;
    /// Applies already-validated writes.
    fn apply_writes(&mut self, writes: &[(String, Value)]);
    /// Forces state-bearing items to the given values.
    fn set_state_target(&mut self, state: &BTreeMap<String, Value>);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Quality {
    Good,
    Uncertain,
    Bad,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemValue {
    pub path: String,
    pub value: Option<Value>,
    pub quality: Quality,
    pub timestamp: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub device_id: String,
    pub taken_at: Timestamp,
    pub state: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WriteRequest {
    pub path: String,
    pub value: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum WriteRejection {
    UnknownPath,
    Access,
    Type,
    OutOfRange,
    Restoring,
    Detached,
}

impl WriteRejection {
    pub fn as_str(self) -> &'static str {
        match self {
            WriteRejection::UnknownPath => "UNKNOWN_PATH",
            WriteRejection::Access => "ACCESS",
            WriteRejection::Type => "TYPE",
            WriteRejection::OutOfRange => "OUT_OF_RANGE",
            WriteRejection::Restoring => "RESTORING",
            WriteRejection::Detached => "DETACHED",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "UNKNOWN_PATH" => WriteRejection::UnknownPath,
            "ACCESS" => WriteRejection::Access,
            "TYPE" => WriteRejection::Type,
            "OUT_OF_RANGE" => WriteRejection::OutOfRange,
            "RESTORING" => WriteRejection::Restoring,
            "DETACHED" => WriteRejection::Detached,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WriteResult {
    pub path: String,
    pub accepted: bool,
    pub reason: Option<WriteRejection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RestoreMode {
    Instant,
    Ramp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RestoreOutcome {
    pub mode: RestoreMode,
    pub expected_duration: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DeviceStatus {
    Running,
    Restoring,
    Detached,
}

#[derive(Debug, Clone)]
struct Ramp {
    /// Slew-limited items still moving: path → target.
    targets: BTreeMap<String, f64>,
    final_state: BTreeMap<String, Value>,
}

/// True when every target is within `min(epsilon, slew * dt)` of the
/// current value, so snapping to it breaks neither tolerance nor slew.
fn targets_settled(
    targets: &BTreeMap<String, f64>,
    current: &BTreeMap<String, Value>,
    c: &Constraints,
    slew: &BTreeMap<String, f64>,
    dt: f64,
) -> bool {
    targets.iter().all(|(p, t)| {
        let cur = current.get(p).and_then(Value::as_f64).unwrap_or(*t);
        let max_step = slew.get(p).copied().unwrap_or(f64::INFINITY) * dt;
        (t - cur).abs() <= c.epsilon_for(p).min(max_step)
    })
}

#[derive(Debug)]
pub struct Device {
    descriptor: DeviceDescriptor,
    backend: Box<dyn Backend>,
    clock: SharedClock,
    stepper: Stepper,
    last_sync: Timestamp,
    status: DeviceStatus,
    ramp: Option<Ramp>,
}

impl Device {
    pub fn new(descriptor: DeviceDescriptor, mut backend: Box<dyn Backend>, clock: SharedClock) -> Self {
        backend.init();
        let stepper = Stepper::new(backend.dt());
        let last_sync = clock.now();
        Device {
            descriptor,
            backend,
            clock,
            stepper,
            last_sync,
            status: DeviceStatus::Running,
            ramp: None,
        }
    }

    pub fn id(&self) -> &str {
        &self.descriptor.device_id
    }

    pub fn descriptor(&self) -> &DeviceDescriptor {
        &self.descriptor
    }

    pub fn dt(&self) -> f64 {
        self.backend.dt()
    }

    pub fn status(&mut self) -> DeviceStatus {
        self.sync();
        self.status
    }

    pub fn is_restoring(&mut self) -> bool {
        self.status() == DeviceStatus::Restoring
    }

    /// Marks the backend as unreachable; reads turn BAD and writes fail.
    pub fn detach(&mut self) {
        self.sync();
        self.status = DeviceStatus::Detached;
        self.ramp = None;
    }

    pub fn attach(&mut self) {
        self.sync();
        if self.status == DeviceStatus::Detached {
            self.status = DeviceStatus::Running;
        }
    }

    /// Runs the simulation for `wall_seconds`, carrying the fractional step
    /// remainder. Returns the number of steps executed.
    pub fn advance(&mut self, wall_seconds: f64) -> u64 {
        let steps = self.stepper.advance(wall_seconds);
        for _ in 0..steps {
            self.step_once();
        }
        steps
    }

    /// Total fixed steps executed so far.
    pub fn steps_taken(&self) -> u64 {
        self.stepper.steps()
    }

    fn sync(&mut self) {
        let now = self.clock.now();
        let elapsed = now - self.last_sync;
        if elapsed > 0.0 {
            self.last_sync = now;
            self.advance(elapsed);
        }
    }

    fn step_once(&mut self) {
        match self.status {
            DeviceStatus::Detached => {}
            DeviceStatus::Running => self.backend.step(),
            DeviceStatus::Restoring => self.ramp_step(),
        }
    }

    fn ramp_step(&mut self) {
        let Some(ramp) = self.ramp.as_mut() else {
            self.status = DeviceStatus::Running;
            return;
        };
        let dt = self.backend.dt();
        let current = self.backend.read_state();
        let constraints = self.descriptor.constraints.clone().unwrap_or_default();
        let mut next = BTreeMap::new();
        let mut settled = true;
        for (path, target) in &ramp.targets {
            let item = self.descriptor.item(path).expect("ramped item exists");
            let cur = current.get(path).and_then(Value::as_f64).unwrap_or(*target);
            let max_step = constraints.slew_rates.get(path).copied().unwrap_or(f64::INFINITY) * dt;
            let delta = target - cur;
            let new = if delta.abs() <= max_step {
                *target
            } else {
                cur + max_step.copysign(delta)
            };
            if new != *target {
                settled = false;
            }
            next.insert(
                path.clone(),
                Value::numeric(item.data_type, new).expect("slew items are numeric"),
            );
        }
        self.backend.set_state_target(&next);
        if settled {
            let final_state = ramp.final_state.clone();
            self.backend.set_state_target(&final_state);
            self.ramp = None;
            self.status = DeviceStatus::Running;
        }
    }

    pub fn browse(&self, path: &str) -> Result<Vec<BrowseEntry>, DeviceError> {
        self.descriptor.browse(path)
    }

    pub fn read(&mut self, paths: &[String]) -> Vec<ItemValue> {
        self.sync();
        let now = self.clock.now();
        let state = self.backend.read_state();
        paths
            .iter()
            .map(|p| {
                let known = self.descriptor.item(p).is_some();
                match (known, self.status) {
                    (false, _) | (_, DeviceStatus::Detached) => ItemValue {
                        path: p.clone(),
                        value: None,
                        quality: Quality::Bad,
                        timestamp: now,
                    },
                    (true, status) => ItemValue {
                        path: p.clone(),
                        value: state.get(p).cloned(),
                        quality: if status == DeviceStatus::Restoring {
                            Quality::Uncertain
                        } else {
                            Quality::Good
                        },
                        timestamp: now,
                    },
                }
            })
            .collect()
    }

    pub fn write(&mut self, writes: &[WriteRequest]) -> Vec<WriteResult> {
        self.sync();
        let mut accepted = Vec::new();
        let results = writes
            .iter()
            .map(|w| {
                let reason = self.check_write(w);
                if reason.is_none() {
                    accepted.push((w.path.clone(), w.value.clone()));
                }
                WriteResult {
                    path: w.path.clone(),
                    accepted: reason.is_none(),
                    reason,
                }
            })
            .collect();
        if !accepted.is_empty() {
            self.backend.apply_writes(&accepted);
        }
        results
    }

    fn check_write(&self, w: &WriteRequest) -> Option<WriteRejection> {
        let Some(item) = self.descriptor.item(&w.path) else {
            return Some(WriteRejection::UnknownPath);
        };
        match self.status {
            DeviceStatus::Detached => return Some(WriteRejection::Detached),
            DeviceStatus::Restoring => return Some(WriteRejection::Restoring),
            DeviceStatus::Running => {}
        }
        if !item.access.can_write() {
            return Some(WriteRejection::Access);
        }
        if w.value.data_type() != item.data_type {
            return Some(WriteRejection::Type);
        }
        if let (Some(x), Some(range)) = (w.value.as_f64(), item.range) {
            if !range.contains(x) {
                return Some(WriteRejection::OutOfRange);
            }
        }
        None
    }

    /// Captures every state-bearing item.
    pub fn snapshot(&mut self) -> Result<Snapshot, DeviceError> {
        self.sync();
        if self.status == DeviceStatus::Restoring {
            return Err(DeviceError::Restoring);
        }
        let state = self.backend.read_state();
        Ok(Snapshot {
            device_id: self.descriptor.device_id.clone(),
            taken_at: self.clock.now(),
            state: self
                .descriptor
                .state_items()
                .filter_map(|i| state.get(&i.path).map(|v| (i.path.clone(), v.clone())))
                .collect(),
        })
    }

    /// Checks that `s` carries exactly this descriptor's state items, typed
    /// and in range. The snapshot's `device_id` may name another instance of
    /// the same class.
    pub fn check_snapshot(&self, s: &Snapshot) -> Result<(), DeviceError> {
        for (path, value) in &s.state {
            let item = self
                .descriptor
                .item(path)
                .ok_or_else(|| DeviceError::SnapshotMismatch(format!("unknown path `{path}`")))?;
            if !item.state {
                return Err(DeviceError::SnapshotMismatch(format!(
                    "`{path}` is not state-bearing"
                )));
            }
            if value.data_type() != item.data_type {
                return Err(DeviceError::SnapshotMismatch(format!(
                    "`{path}` has type {} but item is {}",
                    value.data_type(),
                    item.data_type
                )));
            }
            if let (Some(x), Some(r)) = (value.as_f64(), item.range) {
                if !r.contains(x) {
                    return Err(DeviceError::SnapshotMismatch(format!(
                        "`{path}` = {x} outside [{}, {}]",
                        r.lo, r.hi
                    )));
                }
            }
        }
        if let Some(missing) = self.descriptor.state_items().find(|i| !s.state.contains_key(&i.path)) {
            return Err(DeviceError::SnapshotMismatch(format!(
                "missing state item `{}`",
                missing.path
            )));
        }
        Ok(())
    }

    /// Drives the device toward `s`. A ramp already in progress is
    /// abandoned and the new one starts from the current intermediate state.
    pub fn restore(&mut self, s: &Snapshot) -> Result<RestoreOutcome, DeviceError> {
        self.sync();
        self.check_snapshot(s)?;
        if self.status == DeviceStatus::Restoring {
            self.ramp = None;
            self.status = DeviceStatus::Running;
        }

        let slew = match (&self.descriptor.realism, &self.descriptor.constraints) {
            (Realism::RealConstrained, Some(c)) => c.slew_rates.clone(),
            _ => BTreeMap::new(),
        };
        if slew.is_empty() {
            self.backend.set_state_target(&s.state);
            return Ok(RestoreOutcome {
                mode: RestoreMode::Instant,
                expected_duration: 0.0,
            });
        }

        let current = self.backend.read_state();
        let mut instant = BTreeMap::new();
        let mut targets = BTreeMap::new();
        let mut duration: f64 = 0.0;
        for (path, value) in &s.state {
            match (slew.get(path), value.as_f64()) {
                (Some(rate), Some(target)) => {
                    let cur = current.get(path).and_then(Value::as_f64).unwrap_or(target);
                    duration = duration.max((target - cur).abs() / rate);
                    targets.insert(path.clone(), target);
                }
                _ => {
                    instant.insert(path.clone(), value.clone());
                }
            }
        }
        if !instant.is_empty() {
            self.backend.set_state_target(&instant);
        }
        self.ramp = Some(Ramp {
            targets,
            final_state: s.state.clone(),
        });
        self.status = DeviceStatus::Restoring;
        // Already within tolerance: settle without waiting for a step.
        let c = self.descriptor.constraints.clone().unwrap_or_default();
        let dt = self.backend.dt();
        let settled = targets_settled(&self.ramp.as_ref().unwrap().targets, &current, &c, &slew, dt);
        if settled {
            self.backend.set_state_target(&s.state);
            self.ramp = None;
            self.status = DeviceStatus::Running;
        }
        Ok(RestoreOutcome {
            mode: RestoreMode::Ramp,
            expected_duration: duration,
        })
    }
}
