mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::*;
use elab_core::device::WriteRequest;
use elab_core::protocol::{DaRequest, RequestBody, encode_request};
use elab_core::scheduler::SessionMode;
use elab_core::sim::Q_IN;
use elab_core::types::Value;
use elab_service::app::replay_log;
use elab_service::events::EventLog;
use elab_service::{App, Caller, UserKind};
use rand::Rng;
use rand::rngs::StdRng;

const USERS: [&str; 3] = ["ana", "ben", "ines"];
const ACTIVITIES: [&str; 9] = [
    "brief", "fill", "steady", "hint", "report-plot", "report-table", "supervise", "assess", "experiment",
];

fn staff() -> Caller {
    Caller::new("ines", UserKind::Staff)
}

fn setup(app: &App) -> String {
    let admin = Caller::new("root", UserKind::Admin);
    let pkg = app.upload_package(&admin, &elab_testkit::sample_package()).unwrap().package_id;
    let assignments: BTreeMap<String, BTreeSet<String>> = serde_json::from_value(assignments()).unwrap();
    app.create_run(&admin, &pkg, assignments).unwrap().run_id
}

fn write_body(device: &str, q: f64) -> String {
    encode_request(&DaRequest::new(RequestBody::Write {
        device: device.into(),
        writes: vec![WriteRequest {
            path: Q_IN.into(),
            value: Value::Float(q),
        }],
    }))
}

/// One random command; errors are part of normal traffic and ignored.
fn random_command(app: &App, run: &str, rng: &mut StdRng) {
    let user = USERS[rng.random_range(0..USERS.len())];
    let admin = Caller::new("root", UserKind::Admin);
    match rng.random_range(0..10) {
        0..=2 => {
            let a = ACTIVITIES[rng.random_range(0..ACTIVITIES.len())];
            let _ = app.complete(&staff(), run, user, a);
        }
        3 => {
            let _ = app.notify(&staff(), run, "learner", "hint");
        }
        4 => {
            let _ = app.request_session(&staff(), run, user, "tank");
        }
        5 => {
            let open: Vec<String> = app
                .state_view()
                .scheduler
                .sessions
                .iter()
                .filter(|s| s.mode != SessionMode::Closed)
                .map(|s| s.id.clone())
                .collect();
            if !open.is_empty() {
                let _ = app.release_session(&staff(), &open[rng.random_range(0..open.len())]);
            }
        }
        6 | 7 => {
            let devices: Vec<String> = app
                .state_view()
                .scheduler
                .sessions
                .iter()
                .filter(|s| s.mode != SessionMode::Closed)
                .filter_map(|s| s.device_instance.clone())
                .collect();
            if !devices.is_empty() {
                let d = &devices[rng.random_range(0..devices.len())];
                let q = rng.random_range(0.0..0.2);
                let _ = app.da(&staff(), write_body(d, q).as_bytes());
            }
        }
        _ => {
            let _ = app.advance_clock(&admin, rng.random_range(0.0..25.0));
        }
    }
}

fn replayed(app: &App) -> elab_service::StateView {
    let events = EventLog::read(&app.data_dir().join("events.log")).unwrap();
    replay_log(app.config(), &events).unwrap()
}

#[test]
fn replay_of_the_log_matches_live_state() {
    let mut writes = 0;
    for seed in 0..12 {
        let dir = tempfile::tempdir().unwrap();
        let app = App::open(config(dir.path())).unwrap();
        let run = setup(&app);
        let mut rng = elab_testkit::rng(seed);
        for step in 0..60 {
            random_command(&app, &run, &mut rng);
            if step % 10 == 9 {
                assert_eq!(replayed(&app), app.state_view(), "seed {seed} step {step}");
            }
        }
        assert_eq!(replayed(&app), app.state_view(), "seed {seed}");
        let log = EventLog::read(&app.data_dir().join("events.log")).unwrap();
        writes += log.iter().filter(|e| e.kind == "DA_WRITE").count();
    }
    assert!(writes > 0);
}

#[test]
fn restart_keeps_runs_and_resumes_open_sessions() {
    for seed in 100..106 {
        let dir = tempfile::tempdir().unwrap();
        let (before, open_before, last_seq) = {
            let app = App::open(config(dir.path())).unwrap();
            let run = setup(&app);
            let mut rng = elab_testkit::rng(seed);
            for _ in 0..50 {
                random_command(&app, &run, &mut rng);
            }
            // Make sure something holds the real tank.
            let _ = app.request_session(&staff(), &run, "ana", "tank");
            let view = app.state_view();
            let open: BTreeSet<String> = view
                .scheduler
                .sessions
                .iter()
                .filter(|s| s.mode != SessionMode::Closed)
                .map(|s| s.id.clone())
                .collect();
            (view, open, app.health().last_seq)
        };
        let app = App::open(config(dir.path())).unwrap();
        let after = app.state_view();
        assert_eq!(after.runs, before.runs, "seed {seed}");
        assert_eq!(after.packages, before.packages);
        let open_after: BTreeSet<String> = after
            .scheduler
            .sessions
            .iter()
            .filter(|s| s.mode != SessionMode::Closed)
            .map(|s| s.id.clone())
            .collect();
        assert_eq!(open_after, open_before);
        // Sessions on the real tank are restored again; one whose state the
        // fresh device already matches settles immediately.
        let log = EventLog::read(&dir.path().join("events.log")).unwrap();
        let resumed: BTreeSet<&str> = log
            .iter()
            .filter(|e| e.seq > last_seq && e.kind == "RESUMED")
            .map(|e| e.stream_id.as_str())
            .collect();
        for s in after.scheduler.sessions.iter().filter(|s| s.device_instance.as_deref() == Some("tank-1")) {
            if s.mode != SessionMode::Closed {
                assert!(resumed.contains(s.id.as_str()), "seed {seed}: {s:?}");
                assert!(matches!(s.mode, SessionMode::Restoring | SessionMode::Real));
            }
        }
        assert!(app.health().last_seq > last_seq);
        assert_eq!(replayed(&app), after);
        // Time never runs backwards across a restart.
        let prev_at = EventLog::read(&dir.path().join("events.log")).unwrap();
        assert!(prev_at.windows(2).all(|w| w[0].at.0 <= w[1].at.0));
    }
}
