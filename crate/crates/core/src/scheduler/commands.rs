use std::collections::BTreeMap;

use super::{
    Booking, DeviceClass, Placement, Scheduler, SchedulerError, SessionMode, SnapshotKey, Transition,
};
use crate::clock::Timestamp;
use crate::device::{DeviceRegistry, Realism, RestoreOutcome, Snapshot};

impl Scheduler {
    /// Builds every real instance of every class into `devices`.
    pub fn install_devices(&self, devices: &mut DeviceRegistry) {
        for class in self.classes.values() {
            for id in &class.instances {
                if !devices.contains(id) {
                    devices.insert(class.model.build(id, class.realism, self.clock.clone()));
                }
            }
        }
    }

    fn emit(&mut self, out: &mut Vec<Transition>, t: Transition) {
        self.apply(&t).expect("commands only emit legal transitions");
        out.push(t);
    }

    fn free_instance(&self, class: &DeviceClass) -> Option<String> {
        class
            .instances
            .iter()
            .find(|id| !self.holders.contains_key(*id))
            .cloned()
    }

    /// Best known state for this learner and class.
    fn resume_point(&self, class: &DeviceClass, key: &SnapshotKey) -> Snapshot {
        self.store
            .get(key)
            .cloned()
            .unwrap_or_else(|| class.initial_snapshot())
    }

    /// Restores `device_id` toward `target`, falling back to the class
    /// initial state if the target does not fit the device.
    fn restore_real(
        &self,
        devices: &mut DeviceRegistry,
        class: &DeviceClass,
        device_id: &str,
        target: Snapshot,
    ) -> Result<(Snapshot, RestoreOutcome), SchedulerError> {
        let dev = devices.get_mut(device_id)?;
        match dev.restore(&target) {
            Ok(o) => Ok((target, o)),
            Err(_) => {
                let init = class.initial_snapshot();
                let o = dev.restore(&init)?;
                Ok((init, o))
            }
        }
    }

    fn spawn_twin(
        &self,
        devices: &mut DeviceRegistry,
        class: &DeviceClass,
        session_id: &str,
        state: &Snapshot,
    ) -> String {
        let twin_id = class.twin_id(session_id);
        let mut twin = class.model.build(&twin_id, Realism::Virtual, self.clock.clone());
        if twin.restore(state).is_err() {
            twin.restore(&class.initial_snapshot())
                .expect("initial state fits its own class");
        }
        devices.insert(twin);
        twin_id
    }

    fn settle_if_done(
        &mut self,
        devices: &mut DeviceRegistry,
        session_id: &str,
        now: Timestamp,
        out: &mut Vec<Transition>,
    ) {
        let Some(s) = self.sessions.get(session_id) else { return };
        if s.mode != SessionMode::Restoring {
            return;
        }
        let Some(d) = s.device_instance.clone() else { return };
        let done = devices.get_mut(&d).map(|dev| !dev.is_restoring()).unwrap_or(true);
        if done {
            self.emit(
                out,
                Transition::Settled {
                    session_id: session_id.to_string(),
                    at: now,
                },
            );
        }
    }

    /// Admits a booking: a free real instance if there is one, else a twin
    /// or a plain queue slot.
    pub fn request_session(
        &mut self,
        devices: &mut DeviceRegistry,
        booking: Booking,
    ) -> Result<(String, Vec<Transition>), SchedulerError> {
        let class = self.class(&booking.device_class)?.clone();
        let key = booking.key();
        if let Some(existing) = self.active_session_for(&key) {
            return Err(SchedulerError::DuplicateSession {
                session_id: existing.id.clone(),
                run_id: key.run_id,
                user: key.user,
                device_class: key.device_class,
            });
        }
        let session_id = format!("s-{}", self.next_session);
        let now = booking.submitted_at;
        let resume = self.resume_point(&class, &key);
        let placement = if let Some(device_id) = self.free_instance(&class) {
            let (target, o) = self.restore_real(devices, &class, &device_id, resume)?;
            Placement::Restoring {
                device_id,
                target,
                expected_duration: o.expected_duration,
            }
        } else if self.config.shadow_on_wait {
            Placement::Shadow {
                twin_id: self.spawn_twin(devices, &class, &session_id, &resume),
            }
        } else {
            Placement::Queued
        };
        let mut out = Vec::new();
        self.emit(
            &mut out,
            Transition::SessionCreated {
                session_id: session_id.clone(),
                booking,
                placement,
            },
        );
        self.settle_if_done(devices, &session_id, now, &mut out);
        Ok((session_id, out))
    }

    /// Hands free instances of `class` to the head of its queue.
    fn promote_waiters(
        &mut self,
        devices: &mut DeviceRegistry,
        class: &DeviceClass,
        now: Timestamp,
        out: &mut Vec<Transition>,
    ) {
        loop {
            let Some(device_id) = self.free_instance(class) else { break };
            let Some(head) = self.queues.get(&class.name).and_then(|q| q.front()).cloned() else {
                break;
            };
            let s = self.sessions[&head].clone();
            let mut source = None;
            if s.mode == SessionMode::Shadow {
                if let Some(twin) = s.device_instance.as_deref() {
                    source = devices.get_mut(twin).ok().and_then(|d| d.snapshot().ok());
                    devices.remove(twin);
                }
            }
            let source = source
                .or_else(|| s.saved_snapshot.clone())
                .unwrap_or_else(|| self.resume_point(class, &s.booking.key()));
            let (target, o) = match self.restore_real(devices, class, &device_id, source) {
                Ok(x) => x,
                // The instance is gone from the registry; nothing to hand out.
                Err(_) => break,
            };
            self.emit(
                out,
                Transition::Granted {
                    session_id: head.clone(),
                    device_id,
                    target,
                    expected_duration: o.expected_duration,
                },
            );
            self.settle_if_done(devices, &head, now, out);
        }
    }

    /// Advances the time-sharing policy to `now`: preempt expired slices
    /// that have waiters, promote waiters, settle finished restores.
    pub fn tick(&mut self, devices: &mut DeviceRegistry, now: Timestamp) -> Vec<Transition> {
        let now = match self.last_tick {
            Some(prev) if now.0 < prev.0 => prev,
            _ => now,
        };
        self.last_tick = Some(now);
        let mut out = Vec::new();
        let classes: Vec<DeviceClass> = self.classes.values().cloned().collect();
        for class in &classes {
            let waiting = self.queues.get(&class.name).map_or(0, |q| q.len());
            let free = class
                .instances
                .iter()
                .filter(|id| !self.holders.contains_key(*id))
                .count();
            let mut expired: Vec<(Timestamp, String, String)> = self
                .sessions
                .values()
                .filter(|s| s.booking.device_class == class.name && s.mode == SessionMode::Real)
                .filter_map(|s| {
                    let started = s.slice_started_at?;
                    (now - started >= self.config.quantum)
                        .then(|| (started, s.id.clone(), s.device_instance.clone().unwrap_or_default()))
                })
                .collect();
            expired.sort_by(|a, b| a.0.0.total_cmp(&b.0.0).then_with(|| a.1.cmp(&b.1)));
            for (_, sid, device_id) in expired.into_iter().take(waiting.saturating_sub(free)) {
                let Ok(snapshot) = devices.get_mut(&device_id).and_then(|d| d.snapshot()) else {
                    continue;
                };
                let twin_id = self
                    .config
                    .shadow_on_wait
                    .then(|| self.spawn_twin(devices, class, &sid, &snapshot));
                self.emit(
                    &mut out,
                    Transition::Preempted {
                        session_id: sid,
                        device_id,
                        snapshot,
                        twin_id,
                    },
                );
            }
            self.promote_waiters(devices, class, now, &mut out);
        }
        let restoring: Vec<String> = self
            .sessions
            .values()
            .filter(|s| s.mode == SessionMode::Restoring)
            .map(|s| s.id.clone())
            .collect();
        for sid in restoring {
            self.settle_if_done(devices, &sid, now, &mut out);
        }
        out
    }

    /// Closes a session, keeps its final state for later resumption and
    /// frees whatever it held.
    pub fn release_session(
        &mut self,
        devices: &mut DeviceRegistry,
        session_id: &str,
        now: Timestamp,
    ) -> Result<Vec<Transition>, SchedulerError> {
        let s = match self.sessions.get(session_id) {
            Some(s) if s.mode != SessionMode::Closed => s.clone(),
            _ => return Err(SchedulerError::UnknownSession(session_id.to_string())),
        };
        let class = self.class(&s.booking.device_class)?.clone();
        let current = s
            .device_instance
            .as_deref()
            .and_then(|d| devices.get_mut(d).ok())
            .and_then(|d| d.snapshot().ok());
        let final_snapshot = current.or_else(|| s.restore_target.clone()).or(s.saved_snapshot.clone());
        if s.mode == SessionMode::Shadow {
            if let Some(twin) = &s.device_instance {
                devices.remove(twin);
            }
        }
        let mut out = Vec::new();
        self.emit(
            &mut out,
            Transition::Closed {
                session_id: session_id.to_string(),
                final_snapshot,
            },
        );
        if s.holds_real() {
            self.promote_waiters(devices, &class, now, &mut out);
        }
        Ok(out)
    }

    /// Current state of every open session's device, keyed for
    /// persistence. Instances still ramping are skipped: their last
    /// checkpoint remains the best resume point.
    pub fn checkpoint(&self, devices: &mut DeviceRegistry) -> Vec<(SnapshotKey, Snapshot)> {
        self.sessions
            .values()
            .filter(|s| s.mode != SessionMode::Closed)
            .filter_map(|s| {
                let d = s.device_instance.as_deref()?;
                let snap = devices.get_mut(d).ok()?.snapshot().ok()?;
                Some((s.booking.key(), snap))
            })
            .collect()
    }

    /// Re-attaches replayed sessions to freshly started devices. Twins are
    /// rebuilt; sessions that held a real instance re-enter RESTORING toward
    /// their latest persisted state.
    pub fn resume(
        &mut self,
        devices: &mut DeviceRegistry,
        persisted: &BTreeMap<SnapshotKey, Snapshot>,
        now: Timestamp,
    ) -> Result<Vec<Transition>, SchedulerError> {
        self.install_devices(devices);
        self.last_tick = None;
        let open: Vec<_> = self
            .sessions
            .values()
            .filter(|s| s.mode != SessionMode::Closed)
            .cloned()
            .collect();
        let mut out = Vec::new();
        for s in open {
            let class = self.class(&s.booking.device_class)?.clone();
            let key = s.booking.key();
            let best = persisted
                .get(&key)
                .cloned()
                .or_else(|| s.restore_target.clone())
                .or_else(|| s.saved_snapshot.clone())
                .unwrap_or_else(|| self.resume_point(&class, &key));
            match s.mode {
                SessionMode::Shadow => {
                    self.spawn_twin(devices, &class, &s.id, &best);
                }
                SessionMode::Real | SessionMode::Restoring => {
                    let device_id = s.device_instance.clone().unwrap_or_default();
                    let (target, o) = self.restore_real(devices, &class, &device_id, best)?;
                    self.emit(
                        &mut out,
                        Transition::Resumed {
                            session_id: s.id.clone(),
                            device_id,
                            target,
                            expected_duration: o.expected_duration,
                        },
                    );
                    self.settle_if_done(devices, &s.id, now, &mut out);
                }
                _ => {}
            }
        }
        Ok(out)
    }
}
