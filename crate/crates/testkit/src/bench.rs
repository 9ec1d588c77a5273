//! Harnesses shared by the core suites and the acceptance run: a scheduler
//! lab on a manual clock, a data-access bench, and the property checks
//! built on them. Checks return `Err` with a description instead of
//! panicking so callers can report them.

use std::collections::BTreeMap;
use std::sync::Arc;

use elab_core::clock::{Clock, ManualClock, SharedClock, Timestamp};
use elab_core::device::{DeviceRegistry, Realism, Snapshot, WriteRequest};
use elab_core::protocol::{DaRequest, DaServer, RequestBody, ResponseBody, SubscribeItem};
use elab_core::scheduler::{
    Booking, DeviceClass, Scheduler, SchedulerConfig, SchedulerError, SessionMode, Transition,
};
use elab_core::sim::{LEVEL, Q_IN, SimModel, TANK_CLASS, TankParams};
use elab_core::types::Value;
use proptest::prelude::*;
use rand::Rng;
use rand::seq::IndexedRandom;

use crate::oracle::scheduler::Cmd;

pub fn tank_class(count: usize, realism: Realism) -> DeviceClass {
    DeviceClass::new(SimModel::Tank(TankParams::default()), count, realism)
}

pub fn names(ts: &[Transition]) -> Vec<(&'static str, String)> {
    ts.iter().map(|t| (t.name(), t.session_id().to_string())).collect()
}

pub fn level_of(state: &BTreeMap<String, Value>) -> f64 {
    state[LEVEL].as_f64().expect("level is numeric")
}

/// Scheduler plus devices on a manual clock, keeping every transition.
pub struct Lab {
    pub clock: Arc<ManualClock>,
    pub devices: DeviceRegistry,
    pub sched: Scheduler,
    pub log: Vec<Transition>,
    pub classes: Vec<DeviceClass>,
}

impl Lab {
    pub fn new(quantum: f64, shadow: bool, classes: Vec<DeviceClass>) -> Self {
        let clock = ManualClock::shared(Timestamp::ZERO);
        let shared: SharedClock = clock.clone();
        let config = SchedulerConfig {
            quantum,
            shadow_on_wait: shadow,
        };
        let sched = Scheduler::new(config, classes.clone(), shared).expect("valid lab config");
        let mut devices = DeviceRegistry::new();
        sched.install_devices(&mut devices);
        Lab {
            clock,
            devices,
            sched,
            log: Vec::new(),
            classes,
        }
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    pub fn request(&mut self, run: &str, user: &str, class: &str) -> Result<String, SchedulerError> {
        let booking = Booking {
            id: format!("b-{run}-{user}-{class}"),
            run_id: run.into(),
            user: user.into(),
            device_class: class.into(),
            submitted_at: self.now(),
        };
        let (id, ts) = self.sched.request_session(&mut self.devices, booking)?;
        self.log.extend(ts);
        Ok(id)
    }

    pub fn tick_at(&mut self, t: f64) -> Vec<Transition> {
        self.clock.set(Timestamp(t));
        let ts = self.sched.tick(&mut self.devices, Timestamp(t));
        self.log.extend(ts.clone());
        ts
    }

    pub fn release(&mut self, id: &str) -> Result<Vec<Transition>, SchedulerError> {
        let now = self.now();
        let ts = self.sched.release_session(&mut self.devices, id, now)?;
        self.log.extend(ts.clone());
        Ok(ts)
    }

    pub fn mode(&self, id: &str) -> SessionMode {
        self.sched.session(id).expect("known session").mode
    }

    pub fn device_of(&self, id: &str) -> String {
        self.sched.session(id).expect("known session").device_instance.clone().expect("bound session")
    }

    /// Panics if the device rejects the write.
    pub fn write_q(&mut self, id: &str, q: f64) {
        let d = self.device_of(id);
        let r = self.devices.get_mut(&d).expect("bound device").write(&[WriteRequest {
            path: Q_IN.into(),
            value: Value::Float(q),
        }]);
        assert!(r[0].accepted, "{r:?}");
    }

    pub fn state_of(&mut self, id: &str) -> BTreeMap<String, Value> {
        let d = self.device_of(id);
        self.devices.get_mut(&d).expect("bound device").snapshot().expect("snapshot").state
    }

    /// Rebuilds the scheduler from its transitions and compares.
    pub fn replay_matches(&self) -> Result<(), String> {
        let shared: SharedClock = self.clock.clone();
        let replayed = Scheduler::replay(self.sched.config().clone(), self.classes.clone(), shared, &self.log)
            .map_err(|e| format!("replay: {e}"))?;
        if replayed.state_view() != self.sched.state_view() {
            return Err("replayed scheduler differs".into());
        }
        replayed.check_invariants().map_err(|e| e.to_string())
    }

    pub fn check_replay(&self) {
        self.replay_matches().unwrap();
    }
}

pub fn random_command(rng: &mut impl Rng, lab: &Lab, classes: &[&str]) -> Cmd {
    let open: Vec<String> = lab
        .sched
        .sessions()
        .filter(|s| s.mode != SessionMode::Closed)
        .map(|s| s.id.clone())
        .collect();
    match rng.random_range(0..10) {
        0..=3 => Cmd::Request {
            run: ["r1", "r2"].choose(rng).unwrap().to_string(),
            user: ["u1", "u2", "u3", "u4"].choose(rng).unwrap().to_string(),
            class: classes.choose(rng).unwrap().to_string(),
        },
        4..=5 if !open.is_empty() || rng.random_bool(0.2) => Cmd::Release {
            session: open
                .choose(rng)
                .cloned()
                .unwrap_or_else(|| format!("s-{}", rng.random_range(0..50))),
        },
        _ => Cmd::Tick,
    }
}

pub fn run_command(lab: &mut Lab, cmd: &Cmd) -> Option<Vec<Transition>> {
    match cmd {
        Cmd::Request { run, user, class } => {
            let before = lab.log.len();
            lab.request(run, user, class).ok()?;
            Some(lab.log[before..].to_vec())
        }
        Cmd::Release { session } => lab.release(session).ok(),
        Cmd::Tick => {
            let t = lab.now().0;
            Some(lab.tick_at(t))
        }
    }
}

/// One random command/tick sequence on slew-limited tanks with learners
/// writing to whatever they drive. Checks invariants and mutual exclusion
/// after every step and replay at the end; returns the transition count.
pub fn random_sequence_case(rng: &mut impl Rng, case: usize) -> Result<usize, String> {
    let quantum = [2.0, 10.0][case % 2];
    let classes = vec![tank_class(1 + case % 3, Realism::RealConstrained)];
    let mut lab = Lab::new(quantum, case % 5 != 0, classes);
    let mut transitions = 0;
    let mut t = 0.0;
    for _ in 0..rng.random_range(5..30) {
        t += [0.1, 1.0, 5.0, 20.0][rng.random_range(0..4)];
        lab.clock.set(Timestamp(t));
        let cmd = random_command(rng, &lab, &[TANK_CLASS]);
        if let Some(ts) = run_command(&mut lab, &cmd) {
            transitions += ts.len();
        }
        let drivers: Vec<String> = lab
            .sched
            .sessions()
            .filter(|s| matches!(s.mode, SessionMode::Real | SessionMode::Shadow))
            .map(|s| s.id.clone())
            .collect();
        if let Some(id) = drivers.choose(rng) {
            let q = rng.random_range(0.0..0.2);
            lab.write_q(id, q);
        }
        lab.sched.check_invariants().map_err(|e| format!("case {case} at {t}: {e}"))?;
        let mut holders = BTreeMap::new();
        for s in lab.sched.sessions().filter(|s| s.holds_real()) {
            let d = s.device_instance.clone().unwrap_or_default();
            if let Some(other) = holders.insert(d.clone(), s.id.clone()) {
                return Err(format!("case {case} at {t}: {other} and {} both hold {d}", s.id));
            }
        }
    }
    lab.replay_matches().map_err(|e| format!("case {case}: {e}"))?;
    Ok(transitions)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Starvation {
    /// Longest time any booking waited for its first REAL.
    pub worst_wait: f64,
    pub max_ramp: f64,
    pub bound: f64,
}

/// One holder and three waiters on a single slew-limited tank, each
/// driving a different inflow; every booking must settle on the real
/// instance within three slices plus three worst-case ramps.
pub fn starvation(quantum: f64) -> Result<Starvation, String> {
    let mut lab = Lab::new(quantum, true, vec![tank_class(1, Realism::RealConstrained)]);
    let users = ["u0", "u1", "u2", "u3"];
    let ids: Vec<String> = users
        .iter()
        .map(|u| lab.request("r", u, TANK_CLASS).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    for (id, q) in ids.iter().zip([0.05, 0.0, 0.035, 0.02]) {
        lab.write_q(id, q);
    }
    let mut first_real: BTreeMap<String, f64> = BTreeMap::new();
    first_real.insert(ids[0].clone(), 0.0);
    let mut max_ramp: f64 = 0.0;
    let step = 0.1;
    for k in 1..=1200 {
        for tr in lab.tick_at(k as f64 * step) {
            match tr {
                Transition::Settled { session_id, at } => {
                    first_real.entry(session_id).or_insert(at.0);
                }
                Transition::Granted { expected_duration, .. } => max_ramp = max_ramp.max(expected_duration),
                _ => {}
            }
        }
        lab.sched.check_invariants().map_err(|e| e.to_string())?;
    }
    // Levels stay within 1 m, so no restore needs more than 20 s.
    let bound = 3.0 * (quantum + 20.0);
    if max_ramp > 20.0 {
        return Err(format!("ramp of {max_ramp} s"));
    }
    let mut worst_wait: f64 = 0.0;
    for id in &ids[1..] {
        let t = *first_real.get(id).ok_or_else(|| format!("{id} never got the tank"))?;
        // Ticks are 0.1 s apart; a settle is seen at the next tick.
        if t > bound + step {
            return Err(format!("{id} waited {t} s, bound {bound} s"));
        }
        worst_wait = worst_wait.max(t);
    }
    lab.replay_matches()?;
    Ok(Starvation {
        worst_wait,
        max_ramp,
        bound,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Continuity {
    pub demotions: usize,
    pub promotions: usize,
    /// Largest deviation between a restore target and the settled state.
    pub worst_settle_error: f64,
}

/// Two learners alternating on one tank: a preemption snapshot equals the
/// state the learner saw, a grant carries the shadow state over, and a
/// settled device matches its target within `epsilon`.
pub fn context_continuity(epsilon: f64) -> Result<Continuity, String> {
    let mut lab = Lab::new(10.0, true, vec![tank_class(1, Realism::RealConstrained)]);
    let a = lab.request("r", "alice", TANK_CLASS).map_err(|e| e.to_string())?;
    let b = lab.request("r", "bob", TANK_CLASS).map_err(|e| e.to_string())?;
    lab.write_q(&a, 0.05);
    lab.write_q(&b, 0.03);
    let mut out = Continuity {
        demotions: 0,
        promotions: 0,
        worst_settle_error: 0.0,
    };
    let mut pending: BTreeMap<String, Snapshot> = BTreeMap::new();
    for k in 1..=1500 {
        let t = k as f64 * 0.1;
        lab.clock.set(Timestamp(t));
        let mut before: BTreeMap<String, BTreeMap<String, Value>> = BTreeMap::new();
        for id in [&a, &b] {
            if lab.mode(id) != SessionMode::Restoring {
                let st = lab.state_of(id);
                before.insert(id.clone(), st);
            }
        }
        for tr in lab.tick_at(t) {
            match &tr {
                Transition::Preempted {
                    session_id, snapshot, ..
                } => {
                    if Some(&snapshot.state) != before.get(session_id) {
                        return Err(format!("t={t}: preemption snapshot differs from what {session_id} saw"));
                    }
                    if Some(&lab.state_of(session_id)) != before.get(session_id) {
                        return Err(format!("t={t}: twin of {session_id} differs from its real state"));
                    }
                    out.demotions += 1;
                }
                Transition::Granted { session_id, target, .. } => {
                    if Some(&target.state) != before.get(session_id) {
                        return Err(format!("t={t}: grant target differs from the shadow state"));
                    }
                    pending.insert(session_id.clone(), target.clone());
                }
                Transition::Settled { session_id, .. } => {
                    if let Some(target) = pending.remove(session_id) {
                        let now = lab.state_of(session_id);
                        for (p, v) in &target.state {
                            let want = v.as_f64().unwrap_or(0.0);
                            let got = now.get(p).and_then(Value::as_f64).unwrap_or(f64::NAN);
                            let d = (got - want).abs();
                            if !(d <= epsilon) {
                                return Err(format!("t={t}: {p} settled {d} away from target"));
                            }
                            out.worst_settle_error = out.worst_settle_error.max(d);
                        }
                        out.promotions += 1;
                    }
                }
                _ => {}
            }
        }
    }
    if out.demotions < 4 || out.promotions < 4 {
        return Err(format!("too few hand-overs: {out:?}"));
    }
    Ok(out)
}

/// Data-access server over a virtual tank and signal source.
pub struct DaBench {
    pub clock: Arc<ManualClock>,
    pub devices: DeviceRegistry,
    pub server: DaServer,
}

impl Default for DaBench {
    fn default() -> Self {
        Self::new()
    }
}

impl DaBench {
    pub fn new() -> Self {
        let clock = ManualClock::shared(Timestamp::ZERO);
        let shared: SharedClock = clock.clone();
        let mut devices = DeviceRegistry::new();
        devices.insert(SimModel::Tank(TankParams::default()).build("tank-1", Realism::Virtual, shared.clone()));
        devices.insert(SimModel::SignalSource { dt: 0.1 }.build("sig-1", Realism::Virtual, shared));
        DaBench {
            clock,
            devices,
            server: DaServer::new(Timestamp::ZERO),
        }
    }

    pub fn at(&mut self, t: f64, req: &str) -> String {
        self.clock.set(Timestamp(t));
        self.server.handle_bytes(&mut self.devices, req.as_bytes(), Timestamp(t))
    }

    pub fn call(&mut self, t: f64, body: RequestBody) -> ResponseBody {
        self.clock.set(Timestamp(t));
        self.server.handle(&mut self.devices, DaRequest::new(body), Timestamp(t)).body
    }

    pub fn set_signal(&mut self, x: f64) {
        let d = self.devices.get_mut("sig-1").expect("bench signal source");
        let r = d.write(&[WriteRequest {
            path: "setpoint".into(),
            value: Value::Float(x),
        }]);
        assert!(r[0].accepted);
    }
}

/// Replays a value timeline through a deadband subscription and checks
/// each refresh against an independent application of the deadband rule:
/// a change is reported exactly when it exceeds the deadband relative to
/// the last reported value, so the client never drifts further than that.
pub fn deadband_timeline(values: &[f64], refresh_after: &[bool], deadband: f64) -> Result<(), String> {
    let mut b = DaBench::new();
    let ResponseBody::Subscribe { handle, items } = b.call(
        0.0,
        RequestBody::Subscribe {
            device: "sig-1".into(),
            items: vec![SubscribeItem {
                path: "mirror".into(),
                deadband,
            }],
            ttl: None,
        },
    ) else {
        return Err("subscribe failed".into());
    };
    let mut client = items[0].value.as_ref().and_then(Value::as_f64).ok_or("no initial value")?;
    let mut oracle_last = 0.0;
    for (i, (&v, &poll)) in values.iter().zip(refresh_after).enumerate() {
        b.set_signal(v);
        if !poll {
            continue;
        }
        let ResponseBody::Refresh { items, .. } =
            b.call(i as f64, RequestBody::SubscriptionPolledRefresh { handle: handle.clone() })
        else {
            return Err(format!("refresh {i} failed"));
        };
        let expect_report = (v - oracle_last).abs() > deadband;
        if items.len() != usize::from(expect_report) {
            return Err(format!("step {i}: {} items, expected report = {expect_report}", items.len()));
        }
        if expect_report {
            oracle_last = v;
            client = items[0].value.as_ref().and_then(Value::as_f64).ok_or("non-numeric refresh")?;
        }
        if (client - v).abs() > deadband {
            return Err(format!("step {i}: client {client} true {v} deadband {deadband}"));
        }
    }
    Ok(())
}

/// Random walk of signal values, which steps to poll at, and a deadband.
pub fn timeline(monotone: bool) -> impl Strategy<Value = (Vec<f64>, Vec<bool>, f64)> {
    (1usize..60).prop_flat_map(move |n| {
        (
            prop::collection::vec(-0.3f64..0.3, n).prop_map(move |steps| {
                let mut x = 0.0f64;
                steps
                    .into_iter()
                    .map(|d| {
                        x = (x + if monotone { d.abs() } else { d }).clamp(-10.0, 10.0);
                        x
                    })
                    .collect()
            }),
            prop::collection::vec(any::<bool>(), n),
            prop_oneof![Just(0.0), 0.0f64..0.5],
        )
    })
}
