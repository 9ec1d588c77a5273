//! Time-sharing of scarce device instances across learner sessions.
//!
//! Commands (`request_session`, `release_session`, `tick`) touch devices and
//! return [`Transition`]s; [`Scheduler::apply`] folds transitions into state
//! without touching any device, so a scheduler can be rebuilt from its log.

mod commands;

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::clock::{SharedClock, Timestamp};
use crate::device::{DeviceError, Realism, Snapshot};
use crate::sim::SimModel;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SchedulerError {
    #[error("unknown device class `{0}`")]
    UnknownDeviceClass(String),
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("user `{user}` already has session `{session_id}` for class `{device_class}` in run `{run_id}`")]
    DuplicateSession {
        session_id: String,
        run_id: String,
        user: String,
        device_class: String,
    },
    #[error("invalid scheduler config: {0}")]
    InvalidConfig(String),
    #[error("session `{session_id}` cannot take transition {transition} from {from:?}")]
    IllegalTransition {
        session_id: String,
        from: SessionMode,
        transition: &'static str,
    },
    #[error(transparent)]
    Device(#[from] DeviceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SessionMode {
    Real,
    Shadow,
    Queued,
    Restoring,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    /// Seconds a session may hold a contended instance before preemption.
    pub quantum: f64,
    /// Give waiters a virtual twin instead of nothing.
    pub shadow_on_wait: bool,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            quantum: 300.0,
            shadow_on_wait: true,
        }
    }
}

impl SchedulerConfig {
    pub fn check(&self) -> Result<(), SchedulerError> {
        if !(self.quantum > 0.0 && self.quantum.is_finite()) {
            return Err(SchedulerError::InvalidConfig(format!(
                "quantum must be positive, got {}",
                self.quantum
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Booking {
    pub id: String,
    pub run_id: String,
    pub user: String,
    pub device_class: String,
    pub submitted_at: Timestamp,
}

impl Booking {
    pub fn key(&self) -> SnapshotKey {
        SnapshotKey {
            run_id: self.run_id.clone(),
            user: self.user.clone(),
            device_class: self.device_class.clone(),
        }
    }
}

/// Where a learner's saved device state is filed.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SnapshotKey {
    pub run_id: String,
    pub user: String,
    pub device_class: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub booking: Booking,
    pub mode: SessionMode,
    /// Real instance (REAL, RESTORING) or twin (SHADOW).
    pub device_instance: Option<String>,
    pub slice_started_at: Option<Timestamp>,
    pub saved_snapshot: Option<Snapshot>,
    /// State the real instance is being driven to while RESTORING.
    pub restore_target: Option<Snapshot>,
}

impl Session {
    pub fn holds_real(&self) -> bool {
        matches!(self.mode, SessionMode::Real | SessionMode::Restoring)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceClass {
    pub name: String,
    pub model: SimModel,
    /// Instance ids, in allocation order.
    pub instances: Vec<String>,
    pub realism: Realism,
}

impl DeviceClass {
    pub fn new(model: SimModel, count: usize, realism: Realism) -> Self {
        let name = model.class_name().to_string();
        let instances = (1..=count).map(|i| format!("{name}-{i}")).collect();
        DeviceClass {
            name,
            model,
            instances,
            realism,
        }
    }

    pub fn twin_id(&self, session_id: &str) -> String {
        format!("{}-twin-{session_id}", self.name)
    }

    pub fn initial_snapshot(&self) -> Snapshot {
        self.model.initial_snapshot(&self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "placement", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Placement {
    Restoring {
        device_id: String,
        target: Snapshot,
        expected_duration: f64,
    },
    Shadow { twin_id: String },
    Queued,
}

/// State change emitted by scheduler commands; the unit of persistence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Transition {
    SessionCreated {
        session_id: String,
        booking: Booking,
        placement: Placement,
    },
    /// A waiting session was given a real instance and is being restored.
    Granted {
        session_id: String,
        device_id: String,
        target: Snapshot,
        expected_duration: f64,
    },
    /// Restore finished; the session now drives the real instance.
    Settled { session_id: String, at: Timestamp },
    /// Slice expired with waiters present; state saved, session re-queued.
    Preempted {
        session_id: String,
        device_id: String,
        snapshot: Snapshot,
        twin_id: Option<String>,
    },
    Closed {
        session_id: String,
        final_snapshot: Option<Snapshot>,
    },
    /// After a restart the real instance is restored again from persisted state.
    Resumed {
        session_id: String,
        device_id: String,
        target: Snapshot,
        expected_duration: f64,
    },
}

impl Transition {
    pub fn session_id(&self) -> &str {
        match self {
            Transition::SessionCreated { session_id, .. }
            | Transition::Granted { session_id, .. }
            | Transition::Settled { session_id, .. }
            | Transition::Preempted { session_id, .. }
            | Transition::Closed { session_id, .. }
            | Transition::Resumed { session_id, .. } => session_id,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Transition::SessionCreated { .. } => "SESSION_CREATED",
            Transition::Granted { .. } => "GRANTED",
            Transition::Settled { .. } => "SETTLED",
            Transition::Preempted { .. } => "PREEMPTED",
            Transition::Closed { .. } => "CLOSED",
            Transition::Resumed { .. } => "RESUMED",
        }
    }
}

#[derive(Debug)]
pub struct Scheduler {
    config: SchedulerConfig,
    classes: BTreeMap<String, DeviceClass>,
    clock: SharedClock,
    sessions: BTreeMap<String, Session>,
    /// FIFO of waiting sessions per class.
    queues: BTreeMap<String, VecDeque<String>>,
    /// Real instance id → holding session.
    holders: BTreeMap<String, String>,
    /// Last known state per learner and class, fed by releases.
    store: BTreeMap<SnapshotKey, Snapshot>,
    next_session: u64,
    last_tick: Option<Timestamp>,
}

impl Scheduler {
    pub fn new(
        config: SchedulerConfig,
        classes: Vec<DeviceClass>,
        clock: SharedClock,
    ) -> Result<Self, SchedulerError> {
        config.check()?;
        Ok(Scheduler {
            config,
            classes: classes.into_iter().map(|c| (c.name.clone(), c)).collect(),
            clock,
            sessions: BTreeMap::new(),
            queues: BTreeMap::new(),
            holders: BTreeMap::new(),
            store: BTreeMap::new(),
            next_session: 1,
            last_tick: None,
        })
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn classes(&self) -> impl Iterator<Item = &DeviceClass> {
        self.classes.values()
    }

    pub fn class(&self, name: &str) -> Result<&DeviceClass, SchedulerError> {
        self.classes
            .get(name)
            .ok_or_else(|| SchedulerError::UnknownDeviceClass(name.to_string()))
    }

    pub fn session(&self, id: &str) -> Result<&Session, SchedulerError> {
        self.sessions
            .get(id)
            .ok_or_else(|| SchedulerError::UnknownSession(id.to_string()))
    }

    pub fn sessions(&self) -> impl Iterator<Item = &Session> {
        self.sessions.values()
    }

    pub fn queue(&self, class: &str) -> Vec<String> {
        self.queues
            .get(class)
            .map(|q| q.iter().cloned().collect())
            .unwrap_or_default()
    }

    /// 1-based position among waiters, if waiting.
    pub fn queue_position(&self, session_id: &str) -> Option<usize> {
        let s = self.sessions.get(session_id)?;
        self.queues
            .get(&s.booking.device_class)?
            .iter()
            .position(|x| x == session_id)
            .map(|i| i + 1)
    }

    pub fn holder_of(&self, device_id: &str) -> Option<&str> {
        self.holders.get(device_id).map(String::as_str)
    }

    pub fn stored_snapshot(&self, key: &SnapshotKey) -> Option<&Snapshot> {
        self.store.get(key)
    }

    pub fn stored_snapshots(&self) -> &BTreeMap<SnapshotKey, Snapshot> {
        &self.store
    }

    /// Open session for the given learner and class, if any.
    pub fn active_session_for(&self, key: &SnapshotKey) -> Option<&Session> {
        self.sessions
            .values()
            .find(|s| s.mode != SessionMode::Closed && &s.booking.key() == key)
    }

    /// Checked structural invariants; used by tests and after replay.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut held: BTreeMap<&str, &str> = BTreeMap::new();
        let mut twins: BTreeMap<&str, &str> = BTreeMap::new();
        for s in self.sessions.values() {
            match s.mode {
                SessionMode::Real | SessionMode::Restoring => {
                    let d = s.device_instance.as_deref().ok_or(format!("{} holds nothing", s.id))?;
                    if let Some(other) = held.insert(d, &s.id) {
                        return Err(format!("{d} held by both {other} and {}", s.id));
                    }
                    if self.holders.get(d) != Some(&s.id) {
                        return Err(format!("holder table disagrees for {d}"));
                    }
                    if (s.mode == SessionMode::Real) != s.slice_started_at.is_some() {
                        return Err(format!("{} slice start inconsistent", s.id));
                    }
                }
                SessionMode::Shadow => {
                    let d = s.device_instance.as_deref().ok_or(format!("{} has no twin", s.id))?;
                    if let Some(other) = twins.insert(d, &s.id) {
                        return Err(format!("twin {d} shared by {other} and {}", s.id));
                    }
                }
                SessionMode::Queued | SessionMode::Closed => {
                    if s.device_instance.is_some() {
                        return Err(format!("{} in {:?} holds a device", s.id, s.mode));
                    }
                }
            }
            let waiting = matches!(s.mode, SessionMode::Shadow | SessionMode::Queued);
            if waiting != self.queue_position(&s.id).is_some() {
                return Err(format!("{} queue membership inconsistent with {:?}", s.id, s.mode));
            }
        }
        if held.len() != self.holders.len() {
            return Err("stale holder entries".into());
        }
        Ok(())
    }

    fn illegal(s: &Session, t: &Transition) -> SchedulerError {
        SchedulerError::IllegalTransition {
            session_id: s.id.clone(),
            from: s.mode,
            transition: t.name(),
        }
    }

    fn unqueue(&mut self, class: &str, id: &str) {
        if let Some(q) = self.queues.get_mut(class) {
            q.retain(|x| x != id);
        }
    }

    /// Folds one transition into the state. Touches no device.
    pub fn apply(&mut self, t: &Transition) -> Result<(), SchedulerError> {
        if let Transition::SessionCreated {
            session_id,
            booking,
            placement,
        } = t
        {
            if self.sessions.contains_key(session_id) {
                return Err(SchedulerError::DuplicateSession {
                    session_id: session_id.clone(),
                    run_id: booking.run_id.clone(),
                    user: booking.user.clone(),
                    device_class: booking.device_class.clone(),
                });
            }
            let mut s = Session {
                id: session_id.clone(),
                booking: booking.clone(),
                mode: SessionMode::Queued,
                device_instance: None,
                slice_started_at: None,
                saved_snapshot: None,
                restore_target: None,
            };
            match placement {
                Placement::Restoring { device_id, target, .. } => {
                    if self.holders.contains_key(device_id) {
                        return Err(Self::illegal(&s, t));
                    }
                    s.mode = SessionMode::Restoring;
                    s.device_instance = Some(device_id.clone());
                    s.restore_target = Some(target.clone());
                    self.holders.insert(device_id.clone(), session_id.clone());
                }
                Placement::Shadow { twin_id } => {
                    s.mode = SessionMode::Shadow;
                    s.device_instance = Some(twin_id.clone());
                }
                Placement::Queued => {}
            }
            if matches!(s.mode, SessionMode::Shadow | SessionMode::Queued) {
                self.queues
                    .entry(booking.device_class.clone())
                    .or_default()
                    .push_back(session_id.clone());
            }
            if let Some(n) = session_id.strip_prefix("s-").and_then(|n| n.parse::<u64>().ok()) {
                self.next_session = self.next_session.max(n + 1);
            }
            self.sessions.insert(session_id.clone(), s);
            return Ok(());
        }

        let id = t.session_id().to_string();
        let s = self
            .sessions
            .get(&id)
            .ok_or_else(|| SchedulerError::UnknownSession(id.clone()))?
            .clone();
        let class = s.booking.device_class.clone();
        let mut next = s.clone();
        match t {
            Transition::SessionCreated { .. } => unreachable!(),
            Transition::Granted { device_id, target, .. } => {
                if !matches!(s.mode, SessionMode::Shadow | SessionMode::Queued)
                    || self.holders.contains_key(device_id)
                {
                    return Err(Self::illegal(&s, t));
                }
                self.unqueue(&class, &id);
                self.holders.insert(device_id.clone(), id.clone());
                next.mode = SessionMode::Restoring;
                next.device_instance = Some(device_id.clone());
                next.restore_target = Some(target.clone());
            }
            Transition::Settled { at, .. } => {
                if s.mode != SessionMode::Restoring {
                    return Err(Self::illegal(&s, t));
                }
                next.mode = SessionMode::Real;
                next.slice_started_at = Some(*at);
                next.restore_target = None;
            }
            Transition::Preempted {
                device_id,
                snapshot,
                twin_id,
                ..
            } => {
                if s.mode != SessionMode::Real || s.device_instance.as_ref() != Some(device_id) {
                    return Err(Self::illegal(&s, t));
                }
                self.holders.remove(device_id);
                next.saved_snapshot = Some(snapshot.clone());
                next.slice_started_at = None;
                next.device_instance = twin_id.clone();
                next.mode = if twin_id.is_some() {
                    SessionMode::Shadow
                } else {
                    SessionMode::Queued
                };
                self.queues.entry(class.clone()).or_default().push_back(id.clone());
            }
            Transition::Closed { final_snapshot, .. } => {
                if s.mode == SessionMode::Closed {
                    return Err(Self::illegal(&s, t));
                }
                if s.holds_real() {
                    if let Some(d) = &s.device_instance {
                        self.holders.remove(d);
                    }
                }
                self.unqueue(&class, &id);
                if let Some(snap) = final_snapshot {
                    self.store.insert(s.booking.key(), snap.clone());
                }
                next.mode = SessionMode::Closed;
                next.device_instance = None;
                next.slice_started_at = None;
                next.restore_target = None;
            }
            Transition::Resumed { device_id, target, .. } => {
                if !s.holds_real() || s.device_instance.as_ref() != Some(device_id) {
                    return Err(Self::illegal(&s, t));
                }
                next.mode = SessionMode::Restoring;
                next.slice_started_at = None;
                next.restore_target = Some(target.clone());
            }
        }
        self.sessions.insert(id, next);
        Ok(())
    }

    /// Rebuilds scheduler state from a transition log.
    pub fn replay<'a>(
        config: SchedulerConfig,
        classes: Vec<DeviceClass>,
        clock: SharedClock,
        log: impl IntoIterator<Item = &'a Transition>,
    ) -> Result<Self, SchedulerError> {
        let mut s = Scheduler::new(config, classes, clock)?;
        for t in log {
            s.apply(t)?;
        }
        Ok(s)
    }

    /// Comparable view of the state, for live-versus-replay checks.
    pub fn state_view(&self) -> SchedulerView {
        SchedulerView {
            sessions: self.sessions.values().cloned().collect(),
            queues: self
                .queues
                .iter()
                .filter(|(_, q)| !q.is_empty())
                .map(|(c, q)| (c.clone(), q.iter().cloned().collect()))
                .collect(),
            holders: self.holders.clone(),
            store: self.store.clone().into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerView {
    pub sessions: Vec<Session>,
    pub queues: BTreeMap<String, Vec<String>>,
    pub holders: BTreeMap<String, String>,
    pub store: Vec<(SnapshotKey, Snapshot)>,
}
