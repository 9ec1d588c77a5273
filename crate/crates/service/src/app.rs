//! Service state and the commands behind every endpoint.
//!
//! All state lives in one [`Core`] behind a mutex, so commands are
//! serialized. A command validates, mutates, appends its events and only
//! then returns; a failed append poisons the core and further mutations are
//! refused until restart, when the log is the source of truth again.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use elab_core::clock::{Clock, ManualClock, SharedClock, SystemClock, Timestamp};
use elab_core::compat::{CompatError, CompatReport, RequirementSet, check_compat, requirements_of};
use elab_core::device::{DeviceDescriptor, DeviceRegistry};
use elab_core::learning_design::{Manifest, ValidationReport, validate_manifest};
use elab_core::packaging::{PackageError, SliceSelector, load_package};
use elab_core::protocol::{DaServer, RequestBody, ResponseBody, decode_request, encode_response};
use elab_core::runtime::{
    Run, RunEvent, RunEventData, RunStatusReport, RuntimeError, SYSTEM_ACTOR, VisibleActivity, create_run,
    run_status,
};
use elab_core::scheduler::{Booking, Scheduler, SchedulerError, SchedulerView, SessionMode, Transition};
use serde::{Deserialize, Serialize};
use serde_json::{Value as Json, json};
use thiserror::Error;
use tokio::sync::watch;

use crate::config::{Caller, ClockMode, ConfigError, ServiceConfig, UserKind};
use crate::events::{Event, EventLog, LogError, NewEvent, Stream};
use crate::snapshots::SnapshotStore;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ApiError {
    #[error("missing or unknown bearer token")]
    Unauthorized,
    #[error("{0}")]
    Forbidden(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{message}")]
    Invalid { message: String, details: Option<Json> },
    #[error("{0}")]
    BadRequest(String),
    #[error("service unavailable: {0}")]
    Unavailable(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> u16 {
        match self {
            ApiError::Unauthorized => 401,
            ApiError::Forbidden(_) => 403,
            ApiError::NotFound(_) => 404,
            ApiError::Conflict(_) => 409,
            ApiError::Invalid { .. } => 422,
            ApiError::BadRequest(_) => 400,
            ApiError::Unavailable(_) => 503,
            ApiError::Internal(_) => 500,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            ApiError::Unauthorized => "UNAUTHORIZED",
            ApiError::Forbidden(_) => "FORBIDDEN",
            ApiError::NotFound(_) => "NOT_FOUND",
            ApiError::Conflict(_) => "CONFLICT",
            ApiError::Invalid { .. } => "INVALID",
            ApiError::BadRequest(_) => "BAD_REQUEST",
            ApiError::Unavailable(_) => "UNAVAILABLE",
            ApiError::Internal(_) => "INTERNAL",
        }
    }

    fn invalid(message: impl Into<String>) -> Self {
        ApiError::Invalid {
            message: message.into(),
            details: None,
        }
    }
}

impl From<RuntimeError> for ApiError {
    fn from(e: RuntimeError) -> Self {
        match &e {
            RuntimeError::InvalidUnit(r) => ApiError::Invalid {
                message: e.to_string(),
                details: serde_json::to_value(r).ok(),
            },
            RuntimeError::AlreadyCompleted(_) | RuntimeError::RunNotActive => ApiError::Conflict(e.to_string()),
            RuntimeError::NotStaff(_) => ApiError::Forbidden(e.to_string()),
            RuntimeError::BadEvent(_) => ApiError::Internal(e.to_string()),
            _ => ApiError::invalid(e.to_string()),
        }
    }
}

impl From<SchedulerError> for ApiError {
    fn from(e: SchedulerError) -> Self {
        match &e {
            SchedulerError::UnknownSession(_) => ApiError::NotFound(e.to_string()),
            SchedulerError::DuplicateSession { .. } => ApiError::Conflict(e.to_string()),
            SchedulerError::UnknownDeviceClass(_) | SchedulerError::InvalidConfig(_) => ApiError::invalid(e.to_string()),
            SchedulerError::IllegalTransition { .. } | SchedulerError::Device(_) => ApiError::Internal(e.to_string()),
        }
    }
}

impl From<CompatError> for ApiError {
    fn from(e: CompatError) -> Self {
        ApiError::invalid(e.to_string())
    }
}

#[derive(Debug, Error)]
pub enum StartError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("cannot bind {address}: {message}")]
    Bind { address: String, message: String },
    #[error("i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone)]
enum ServiceClock {
    System(Arc<SystemClock>),
    Manual(Arc<ManualClock>),
}

impl ServiceClock {
    fn start(mode: ClockMode, speed: f64, at: Timestamp) -> Self {
        match mode {
            ClockMode::System => ServiceClock::System(Arc::new(SystemClock::starting_at(at, speed))),
            ClockMode::Manual => ServiceClock::Manual(ManualClock::shared(at)),
        }
    }

    fn shared(&self) -> SharedClock {
        match self {
            ServiceClock::System(c) => c.clone(),
            ServiceClock::Manual(c) => c.clone(),
        }
    }

    fn now(&self) -> Timestamp {
        self.shared().now()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredPackage {
    pub package_id: String,
    pub manifest: Manifest,
    pub warnings: Vec<String>,
}

/// Everything replay must reproduce, for live-versus-replay comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateView {
    pub packages: BTreeMap<String, StoredPackage>,
    pub runs: BTreeMap<String, Run>,
    pub scheduler: SchedulerView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Appended {
    pub seq: u64,
    pub kind: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackageReceipt {
    pub package_id: String,
    pub identifier: String,
    pub title: String,
    pub report: ValidationReport,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub run_id: String,
    pub package_id: String,
    pub assignments: BTreeMap<String, BTreeSet<String>>,
    pub status: RunStatusReport,
    pub events: Vec<Appended>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityList {
    pub run_id: String,
    pub user: String,
    pub activities: Vec<VisibleActivity>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunUpdate {
    pub events: Vec<Appended>,
    pub status: RunStatusReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub run_id: String,
    pub user: String,
    pub device_class: String,
    pub mode: SessionMode,
    /// Device to address on the data-access endpoint.
    pub device_id: Option<String>,
    pub endpoint: String,
    pub queue_position: Option<usize>,
    pub events: Vec<Appended>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompatAnswer {
    pub package_id: String,
    pub devices: Vec<String>,
    #[serde(flatten)]
    pub report: CompatReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub devices: usize,
    pub time: Timestamp,
    pub last_seq: u64,
}

#[derive(Debug)]
pub struct Core {
    config: ServiceConfig,
    clock: ServiceClock,
    log: EventLog,
    snapshots: SnapshotStore,
    packages: BTreeMap<String, StoredPackage>,
    runs: BTreeMap<String, Run>,
    scheduler: Scheduler,
    devices: DeviceRegistry,
    da: DaServer,
    failed: Option<String>,
}

fn handle_number(h: &str) -> Option<u64> {
    h.strip_prefix("sub-")?.parse().ok()
}

fn require_staff(c: &Caller) -> Result<(), ApiError> {
    match c.kind {
        UserKind::Staff | UserKind::Admin => Ok(()),
        UserKind::Learner => Err(ApiError::Forbidden("staff or admin token required".into())),
    }
}

fn require_admin(c: &Caller) -> Result<(), ApiError> {
    match c.kind {
        UserKind::Admin => Ok(()),
        _ => Err(ApiError::Forbidden("admin token required".into())),
    }
}

fn require_self_or_staff(c: &Caller, user: &str) -> Result<(), ApiError> {
    if c.is_learner() && c.user != user {
        return Err(ApiError::Forbidden(format!("learner `{}` cannot act for `{user}`", c.user)));
    }
    Ok(())
}

impl Core {
    fn now(&self) -> Timestamp {
        self.clock.now()
    }

    fn fail(&mut self, why: String) -> ApiError {
        self.failed = Some(why.clone());
        ApiError::Unavailable(why)
    }

    fn guard(&self) -> Result<(), ApiError> {
        match &self.failed {
            Some(why) => Err(ApiError::Unavailable(why.clone())),
            None => Ok(()),
        }
    }

    fn append(
        &mut self,
        at: Timestamp,
        stream: Stream,
        stream_id: &str,
        kind: &str,
        actor: &str,
        payload: Json,
    ) -> Result<Appended, ApiError> {
        self.guard()?;
        let e = NewEvent {
            at,
            stream,
            stream_id: stream_id.to_string(),
            kind: kind.to_string(),
            actor: actor.to_string(),
            payload,
        };
        match self.log.append(e) {
            Ok(seq) => Ok(Appended {
                seq,
                kind: kind.to_string(),
            }),
            Err(e) => Err(self.fail(e.to_string())),
        }
    }

    fn append_run_events(&mut self, events: &[RunEvent]) -> Result<Vec<Appended>, ApiError> {
        let mut out = Vec::new();
        for e in events {
            let payload = serde_json::to_value(e).map_err(|e| ApiError::Internal(e.to_string()))?;
            out.push(self.append(e.at, Stream::Run, &e.run_id, e.kind(), &e.actor, payload)?);
        }
        Ok(out)
    }

    /// Logs scheduler transitions and keeps snapshot files in step.
    fn append_transitions(&mut self, ts: &[Transition], actor: &str) -> Result<Vec<Appended>, ApiError> {
        let now = self.now();
        let mut out = Vec::new();
        for t in ts {
            let payload = serde_json::to_value(t).map_err(|e| ApiError::Internal(e.to_string()))?;
            out.push(self.append(now, Stream::Session, t.session_id(), t.name(), actor, payload)?);
            if let Transition::Closed { session_id, .. } = t {
                if let Ok(s) = self.scheduler.session(session_id) {
                    let key = s.booking.key();
                    if let Err(e) = self.snapshots.remove(&key) {
                        return Err(self.fail(format!("snapshot store: {e}")));
                    }
                }
            }
        }
        self.forget_vanished_devices();
        Ok(out)
    }

    fn forget_vanished_devices(&mut self) {
        let gone: BTreeSet<String> = self
            .da
            .subscriptions()
            .map(|s| s.device_id.clone())
            .filter(|d| !self.devices.contains(d))
            .collect();
        for d in gone {
            self.da.drop_device(&d);
        }
    }

    /// Persists the current state of every open session's device.
    fn checkpoint(&mut self) -> Result<(), ApiError> {
        for (key, snap) in self.scheduler.checkpoint(&mut self.devices) {
            if let Err(e) = self.snapshots.save(&key, &snap) {
                return Err(self.fail(format!("snapshot store: {e}")));
            }
        }
        Ok(())
    }

    fn package(&self, id: &str) -> Result<&StoredPackage, ApiError> {
        self.packages
            .get(id)
            .ok_or_else(|| ApiError::NotFound(format!("no package `{id}`")))
    }

    fn run(&self, id: &str) -> Result<&Run, ApiError> {
        self.runs.get(id).ok_or_else(|| ApiError::NotFound(format!("no run `{id}`")))
    }

    fn manifest_of(&self, run: &Run) -> Result<&Manifest, ApiError> {
        self.packages
            .get(&run.uol_ref)
            .map(|p| &p.manifest)
            .ok_or_else(|| ApiError::Internal(format!("run refers to missing package `{}`", run.uol_ref)))
    }

    fn session_info(&self, session_id: &str, events: Vec<Appended>) -> Result<SessionInfo, ApiError> {
        let s = self.scheduler.session(session_id)?;
        Ok(SessionInfo {
            session_id: s.id.clone(),
            run_id: s.booking.run_id.clone(),
            user: s.booking.user.clone(),
            device_class: s.booking.device_class.clone(),
            mode: s.mode,
            device_id: s.device_instance.clone(),
            endpoint: "/da".into(),
            queue_position: self.scheduler.queue_position(&s.id),
            events,
        })
    }

    /// Devices bound to the learner's open sessions.
    fn devices_of(&self, user: &str) -> BTreeSet<String> {
        self.scheduler
            .sessions()
            .filter(|s| s.booking.user == user && s.mode != SessionMode::Closed)
            .filter_map(|s| s.device_instance.clone())
            .collect()
    }

    fn fold(&mut self, e: &Event) -> Result<(), String> {
        fold(&mut self.packages, &mut self.runs, &mut self.scheduler, e)
    }

    fn state_view(&self) -> StateView {
        StateView {
            packages: self.packages.clone(),
            runs: self.runs.clone(),
            scheduler: self.scheduler.state_view(),
        }
    }

    fn visible_to(&self, c: &Caller, e: &Event) -> bool {
        if !c.is_learner() {
            return true;
        }
        match e.stream {
            Stream::Run => self.runs.get(&e.stream_id).is_some_and(|r| r.assignments.contains_key(&c.user)),
            Stream::Session => self
                .scheduler
                .session(&e.stream_id)
                .is_ok_and(|s| s.booking.user == c.user),
            Stream::Device => e.actor == c.user,
            Stream::Admin => false,
        }
    }

    fn tick_at(&mut self, now: Timestamp) -> Result<Vec<Appended>, ApiError> {
        self.guard()?;
        let ts = self.scheduler.tick(&mut self.devices, now);
        self.da.purge_expired(now);
        let out = self.append_transitions(&ts, SYSTEM_ACTOR)?;
        self.checkpoint()?;
        Ok(out)
    }
}

/// Shared service handle used by the HTTP layer and by tests.
#[derive(Debug)]
pub struct App {
    core: Mutex<Core>,
    seq_tx: watch::Sender<u64>,
    config: ServiceConfig,
    closing: AtomicBool,
}

impl App {
    /// Opens the data directory, replays the log and re-attaches devices.
    pub fn open(config: ServiceConfig) -> Result<Arc<App>, StartError> {
        let dir = &config.data_dir;
        std::fs::create_dir_all(dir).map_err(|e| StartError::Io(format!("{}: {e}", dir.display())))?;
        let probe = dir.join(".write-probe");
        std::fs::write(&probe, b"")
            .and_then(|_| std::fs::remove_file(&probe))
            .map_err(|e| ConfigError::Invalid {
                key: "data_dir".into(),
                message: format!("{} is not writable: {e}", dir.display()),
            })?;
        config.scheduler_config().check().map_err(|e| ConfigError::Invalid {
            key: "quantum".into(),
            message: e.to_string(),
        })?;

        let log = EventLog::open(&dir.join("events.log"), config.fsync)?;
        let mut snapshots = SnapshotStore::new(dir.join("snapshots"), config.fsync);
        let (persisted, _unreadable) = snapshots.load_all();

        let last_at = log.events().iter().map(|e| e.at.0).fold(0.0, f64::max);
        let snap_at = persisted.values().map(|s| s.taken_at.0).fold(0.0, f64::max);
        let clock = ServiceClock::start(config.clock, config.clock_speed, Timestamp(last_at.max(snap_at)));
        let scheduler = Scheduler::new(config.scheduler_config(), config.device_classes(), clock.shared())
            .map_err(|e| ConfigError::Invalid {
                key: "devices".into(),
                message: e.to_string(),
            })?;
        let start = clock.now();
        let mut core = Core {
            config: config.clone(),
            clock,
            log,
            snapshots,
            packages: BTreeMap::new(),
            runs: BTreeMap::new(),
            scheduler,
            devices: DeviceRegistry::new(),
            da: DaServer::new(start).with_default_ttl(config.subscription_ttl),
            failed: None,
        };

        let events = core.log.events().to_vec();
        let mut max_handle = 0;
        for (i, e) in events.iter().enumerate() {
            core.fold(e).map_err(|reason| LogError::CorruptLog {
                seq: e.seq,
                line: i + 1,
                reason,
            })?;
            if e.kind == "DA_SUBSCRIBED" {
                let n = e.payload.get("handle").and_then(Json::as_str).and_then(handle_number);
                max_handle = max_handle.max(n.unwrap_or(0));
            }
        }
        core.da = DaServer::new(start)
            .with_default_ttl(config.subscription_ttl)
            .with_first_handle(max_handle + 1);

        let resumed = core
            .scheduler
            .resume(&mut core.devices, &persisted, start)
            .map_err(|e| StartError::Io(format!("resume: {e}")))?;
        core.append_transitions(&resumed, SYSTEM_ACTOR)
            .map_err(|e| StartError::Io(e.to_string()))?;
        core.append(
            start,
            Stream::Admin,
            "service",
            "SERVICE_STARTED",
            SYSTEM_ACTOR,
            json!({ "replayed": events.len(), "resumed_sessions": resumed.len() }),
        )
        .map_err(|e| StartError::Io(e.to_string()))?;
        core.checkpoint().map_err(|e| StartError::Io(e.to_string()))?;

        let (seq_tx, _) = watch::channel(core.log.last_seq());
        Ok(Arc::new(App {
            core: Mutex::new(core),
            seq_tx,
            config,
            closing: AtomicBool::new(false),
        }))
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    fn lock(&self) -> MutexGuard<'_, Core> {
        self.core.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Runs `f` under the lock and wakes event-stream readers afterwards.
    fn with<T>(&self, f: impl FnOnce(&mut Core) -> Result<T, ApiError>) -> Result<T, ApiError> {
        let mut core = self.lock();
        let r = f(&mut core);
        self.seq_tx.send_replace(core.log.last_seq());
        r
    }

    pub fn authenticate(&self, token: Option<&str>) -> Result<Caller, ApiError> {
        token
            .and_then(|t| self.config.caller(t))
            .cloned()
            .ok_or(ApiError::Unauthorized)
    }

    pub fn now(&self) -> Timestamp {
        self.lock().now()
    }

    pub fn health(&self) -> Health {
        let core = self.lock();
        Health {
            status: if core.failed.is_some() { "degraded" } else { "ok" }.into(),
            devices: core.scheduler.classes().map(|c| c.instances.len()).sum(),
            time: core.now(),
            last_seq: core.log.last_seq(),
        }
    }

    pub fn upload_package(&self, c: &Caller, zip: &[u8]) -> Result<PackageReceipt, ApiError> {
        require_staff(c)?;
        let loaded = load_package(zip).map_err(|e| match e {
            PackageError::InvalidManifest(report) => ApiError::Invalid {
                message: "manifest is invalid".into(),
                details: serde_json::to_value(report).ok(),
            },
            other => ApiError::invalid(other.to_string()),
        })?;
        let manifest = loaded.unit.manifest;
        let report = validate_manifest(&manifest);
        self.with(|core| {
            let package_id = format!("pkg-{}", core.packages.len() + 1);
            let stored = StoredPackage {
                package_id: package_id.clone(),
                manifest: manifest.clone(),
                warnings: loaded.warnings.clone(),
            };
            let dir = core.config.data_dir.join("packages");
            std::fs::create_dir_all(&dir)
                .and_then(|_| std::fs::write(dir.join(format!("{package_id}.zip")), zip))
                .map_err(|e| ApiError::Internal(format!("storing package: {e}")))?;
            let payload = serde_json::to_value(&stored).map_err(|e| ApiError::Internal(e.to_string()))?;
            let now = core.now();
            core.append(now, Stream::Admin, &package_id, "PACKAGE_LOADED", &c.user, payload)?;
            core.packages.insert(package_id.clone(), stored);
            Ok(PackageReceipt {
                package_id,
                identifier: manifest.identifier.clone(),
                title: manifest.title.clone(),
                report,
                warnings: loaded.warnings,
            })
        })
    }

    /// Checks the package (or a slice of it) against the configured
    /// devices, optionally restricted to one class.
    pub fn compat(
        &self,
        _c: &Caller,
        package_id: &str,
        device_class: Option<&str>,
        selector: Option<&SliceSelector>,
    ) -> Result<CompatAnswer, ApiError> {
        let core = self.lock();
        let p = core.package(package_id)?;
        let mut req = requirements_of(&p.manifest, selector)?;
        if let Some(class) = device_class {
            req = RequirementSet {
                classes: req.classes.into_iter().filter(|(k, _)| k == class).collect(),
            };
        }
        let descriptors: Vec<DeviceDescriptor> = core
            .scheduler
            .classes()
            .filter(|cl| device_class.is_none_or(|want| want == cl.name))
            .flat_map(|cl| cl.instances.iter().map(|id| cl.model.descriptor(id, cl.realism)))
            .collect();
        Ok(CompatAnswer {
            package_id: package_id.to_string(),
            devices: descriptors.iter().map(|d| d.device_id.clone()).collect(),
            report: check_compat(&req, &descriptors),
        })
    }

    pub fn create_run(
        &self,
        c: &Caller,
        package_id: &str,
        assignments: BTreeMap<String, BTreeSet<String>>,
    ) -> Result<RunInfo, ApiError> {
        require_staff(c)?;
        self.with(|core| {
            let manifest = core.package(package_id)?.manifest.clone();
            let run_id = format!("run-{}", core.runs.len() + 1);
            let (run, events) = create_run(&run_id, package_id, &manifest, assignments, core.now())?;
            let appended = core.append_run_events(&events)?;
            let info = RunInfo {
                run_id: run_id.clone(),
                package_id: package_id.to_string(),
                assignments: run.assignments.clone(),
                status: run_status(&run, &manifest),
                events: appended,
            };
            core.runs.insert(run_id, run);
            Ok(info)
        })
    }

    pub fn activities(&self, c: &Caller, run_id: &str, user: &str) -> Result<ActivityList, ApiError> {
        require_self_or_staff(c, user)?;
        let core = self.lock();
        let run = core.run(run_id)?;
        let m = core.manifest_of(run)?;
        Ok(ActivityList {
            run_id: run_id.to_string(),
            user: user.to_string(),
            activities: run.visible_activities(m, user)?,
        })
    }

    pub fn complete(&self, c: &Caller, run_id: &str, user: &str, activity_id: &str) -> Result<RunUpdate, ApiError> {
        require_self_or_staff(c, user)?;
        self.with(|core| {
            let mut run = core.run(run_id)?.clone();
            let m = core.manifest_of(&run)?.clone();
            let events = run.complete_activity(&m, user, activity_id, core.now())?;
            let appended = core.append_run_events(&events)?;
            let status = run_status(&run, &m);
            core.runs.insert(run_id.to_string(), run);
            Ok(RunUpdate {
                events: appended,
                status,
            })
        })
    }

    pub fn notify(&self, c: &Caller, run_id: &str, target_role: &str, activity_id: &str) -> Result<RunUpdate, ApiError> {
        require_staff(c)?;
        self.with(|core| {
            let mut run = core.run(run_id)?.clone();
            let m = core.manifest_of(&run)?.clone();
            let actor = if c.kind == UserKind::Admin && run.roles_of(&c.user).is_none() {
                // Admins act through any staff member's authority.
                let staff = m.staff_roles();
                run.assignments
                    .iter()
                    .find(|(_, roles)| roles.iter().any(|r| staff.contains(r.as_str())))
                    .map(|(u, _)| u.clone())
                    .unwrap_or_else(|| c.user.clone())
            } else {
                c.user.clone()
            };
            let events = run.notify(&m, &actor, target_role, activity_id, core.now())?;
            let appended = core.append_run_events(&events)?;
            let status = run_status(&run, &m);
            core.runs.insert(run_id.to_string(), run);
            Ok(RunUpdate {
                events: appended,
                status,
            })
        })
    }

    pub fn status(&self, _c: &Caller, run_id: &str) -> Result<RunStatusReport, ApiError> {
        let core = self.lock();
        let run = core.run(run_id)?;
        Ok(run_status(run, core.manifest_of(run)?))
    }

    pub fn request_session(&self, c: &Caller, run_id: &str, user: &str, device_class: &str) -> Result<SessionInfo, ApiError> {
        require_self_or_staff(c, user)?;
        self.with(|core| {
            core.guard()?;
            let run = core.run(run_id)?;
            if !run.assignments.contains_key(user) {
                return Err(ApiError::invalid(format!("user `{user}` is not assigned in run `{run_id}`")));
            }
            let booking = Booking {
                id: format!("b-{}", core.scheduler.sessions().count() + 1),
                run_id: run_id.to_string(),
                user: user.to_string(),
                device_class: device_class.to_string(),
                submitted_at: core.now(),
            };
            let (sid, ts) = core.scheduler.request_session(&mut core.devices, booking)?;
            let appended = core.append_transitions(&ts, &c.user)?;
            core.checkpoint()?;
            core.session_info(&sid, appended)
        })
    }

    pub fn session(&self, c: &Caller, session_id: &str) -> Result<SessionInfo, ApiError> {
        let core = self.lock();
        let info = core.session_info(session_id, Vec::new())?;
        require_self_or_staff(c, &info.user)?;
        Ok(info)
    }

    pub fn release_session(&self, c: &Caller, session_id: &str) -> Result<SessionInfo, ApiError> {
        self.with(|core| {
            core.guard()?;
            let owner = core.scheduler.session(session_id)?.booking.user.clone();
            require_self_or_staff(c, &owner)?;
            let now = core.now();
            let ts = core.scheduler.release_session(&mut core.devices, session_id, now)?;
            let appended = core.append_transitions(&ts, &c.user)?;
            core.checkpoint()?;
            core.session_info(session_id, appended)
        })
    }

    /// Data-access endpoint. Learners may only address devices bound to
    /// their own open sessions.
    pub fn da(&self, c: &Caller, body: &[u8]) -> Result<String, ApiError> {
        self.with(|core| {
            let now = core.now();
            let Ok(req) = decode_request(body) else {
                return Ok(core.da.handle_bytes(&mut core.devices, body, now));
            };
            if c.is_learner() {
                let target = match &req.body {
                    RequestBody::SubscriptionPolledRefresh { handle } | RequestBody::SubscriptionCancel { handle } => {
                        core.da.subscription(handle).map(|s| s.device_id.clone())
                    }
                    other => other.device().map(str::to_string),
                };
                if let Some(d) = target {
                    if core.devices.contains(&d) && !core.devices_of(&c.user).contains(&d) {
                        return Err(ApiError::Forbidden(format!("device `{d}` is not bound to your session")));
                    }
                }
            }
            if matches!(req.body, RequestBody::Write { .. }) {
                core.guard()?;
            }
            let resp = core.da.handle(&mut core.devices, req.clone(), now);
            match (&req.body, &resp.body) {
                (RequestBody::Write { device, writes }, ResponseBody::Write { results }) => {
                    let items: Vec<Json> = writes
                        .iter()
                        .zip(results)
                        .map(|(w, r)| {
                            json!({
                                "path": w.path,
                                "value": w.value,
                                "accepted": r.accepted,
                                "reason": r.reason,
                            })
                        })
                        .collect();
                    core.append(now, Stream::Device, device, "DA_WRITE", &c.user, json!({ "items": items }))?;
                    core.checkpoint()?;
                }
                (RequestBody::Subscribe { device, items, .. }, ResponseBody::Subscribe { handle, .. }) => {
                    let paths: Vec<&str> = items.iter().map(|i| i.path.as_str()).collect();
                    core.append(
                        now,
                        Stream::Device,
                        device,
                        "DA_SUBSCRIBED",
                        &c.user,
                        json!({ "handle": handle, "paths": paths }),
                    )?;
                }
                _ => {}
            }
            Ok(encode_response(&resp))
        })
    }

    /// One scheduler tick at the current service time.
    pub fn tick(&self) -> Result<Vec<Appended>, ApiError> {
        self.with(|core| {
            let now = core.now();
            core.tick_at(now)
        })
    }

    /// Manual clock only: moves service time forward, ticking at every
    /// whole second crossed.
    pub fn advance_clock(&self, c: &Caller, seconds: f64) -> Result<(Timestamp, Vec<Appended>), ApiError> {
        require_admin(c)?;
        if !(seconds >= 0.0 && seconds.is_finite()) {
            return Err(ApiError::BadRequest(format!("cannot advance by {seconds}")));
        }
        self.with(|core| {
            core.guard()?;
            let ServiceClock::Manual(clock) = core.clock.clone() else {
                return Err(ApiError::Conflict("service clock is not manual".into()));
            };
            let from = clock.now();
            let to = from + seconds;
            let mut out = Vec::new();
            let mut k = from.0.floor() + 1.0;
            while k <= to.0 {
                clock.set(Timestamp(k));
                out.extend(core.tick_at(Timestamp(k))?);
                k += 1.0;
            }
            clock.set(to);
            out.push(core.append(
                to,
                Stream::Admin,
                "clock",
                "CLOCK_ADVANCED",
                &c.user,
                json!({ "from": from, "to": to }),
            )?);
            Ok((to, out))
        })
    }

    /// Events after `since` visible to `c`, and the highest seq examined.
    pub fn events_after(&self, c: &Caller, since: u64) -> (Vec<Event>, u64) {
        let core = self.lock();
        let events: Vec<Event> = core
            .log
            .since(since)
            .iter()
            .filter(|e| core.visible_to(c, e))
            .cloned()
            .collect();
        (events, core.log.last_seq().max(since))
    }

    pub fn subscribe_seq(&self) -> watch::Receiver<u64> {
        self.seq_tx.subscribe()
    }

    /// Ends every held-open event stream, ahead of shutdown.
    pub fn close_streams(&self) {
        self.closing.store(true, Ordering::SeqCst);
        self.seq_tx.send_modify(|_| {});
    }

    pub fn is_closing(&self) -> bool {
        self.closing.load(Ordering::SeqCst)
    }

    pub fn state_view(&self) -> StateView {
        self.lock().state_view()
    }

    /// Current device state per open session, as the scheduler would
    /// checkpoint it.
    pub fn device_states(&self) -> BTreeMap<elab_core::scheduler::SnapshotKey, elab_core::device::Snapshot> {
        let mut core = self.lock();
        let core = &mut *core;
        core.scheduler.checkpoint(&mut core.devices).into_iter().collect()
    }

    pub fn data_dir(&self) -> PathBuf {
        self.config.data_dir.clone()
    }
}

/// Folds one logged event into state. Device events are audit only.
fn fold(
    packages: &mut BTreeMap<String, StoredPackage>,
    runs: &mut BTreeMap<String, Run>,
    scheduler: &mut Scheduler,
    e: &Event,
) -> Result<(), String> {
    match e.stream {
        Stream::Admin => {
            if e.kind == "PACKAGE_LOADED" {
                let p: StoredPackage =
                    serde_json::from_value(e.payload.clone()).map_err(|err| format!("bad package payload: {err}"))?;
                packages.insert(p.package_id.clone(), p);
            }
        }
        Stream::Run => {
            let ev: RunEvent =
                serde_json::from_value(e.payload.clone()).map_err(|err| format!("bad run payload: {err}"))?;
            if matches!(ev.data, RunEventData::RunCreated { .. }) {
                let run = Run::from_created(&ev).map_err(|err| err.to_string())?;
                runs.insert(run.id.clone(), run);
            } else {
                let run = runs
                    .get_mut(&ev.run_id)
                    .ok_or_else(|| format!("event for unknown run `{}`", ev.run_id))?;
                run.apply(&ev).map_err(|err| err.to_string())?;
            }
        }
        Stream::Session => {
            let t: Transition =
                serde_json::from_value(e.payload.clone()).map_err(|err| format!("bad transition payload: {err}"))?;
            scheduler.apply(&t).map_err(|err| err.to_string())?;
        }
        Stream::Device => {}
    }
    Ok(())
}

/// Rebuilds the replayable part of the state from log events alone,
/// without devices or snapshot files.
pub fn replay_log(config: &ServiceConfig, events: &[Event]) -> Result<StateView, LogError> {
    let clock = ServiceClock::start(ClockMode::Manual, 1.0, Timestamp::ZERO);
    let mut scheduler = Scheduler::new(config.scheduler_config(), config.device_classes(), clock.shared())
        .map_err(|e| LogError::Io(e.to_string()))?;
    let mut packages = BTreeMap::new();
    let mut runs = BTreeMap::new();
    for (i, e) in events.iter().enumerate() {
        fold(&mut packages, &mut runs, &mut scheduler, e).map_err(|reason| LogError::CorruptLog {
            seq: e.seq,
            line: i + 1,
            reason,
        })?;
    }
    Ok(StateView {
        packages,
        runs,
        scheduler: scheduler.state_view(),
    })
}
