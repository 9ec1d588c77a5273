mod common;

use std::time::Duration;

use common::*;
use std::io::Write as _;

use elab_core::device::WriteRequest;
use elab_core::protocol::{DaRequest, RequestBody, encode_request};
use elab_core::sim::Q_IN;
use elab_core::types::Value;
use elab_service::StartError;
use elab_service::client::{Api, ClientError};
use elab_service::http::{Running, spawn};
use serde_json::{Value as Json, json};

async fn start() -> (tempfile::TempDir, Running) {
    let dir = tempfile::tempdir().unwrap();
    let running = spawn(config(dir.path())).await.expect("service starts");
    (dir, running)
}

fn kinds(events: &[Json]) -> Vec<&str> {
    events.iter().map(|e| e["kind"].as_str().unwrap()).collect()
}

/// Completes everything for every user until no one has work left.
async fn finish_run(base: &str, run: &str) {
    let staff = Api::new(base, Some(STAFF));
    loop {
        let mut n = 0;
        for user in ["ana", "ben", "ines"] {
            n += complete_everything(&staff, run, user).await;
        }
        if n == 0 {
            return;
        }
    }
}

#[tokio::test]
async fn health_is_public_and_auth_is_enforced() {
    let (_dir, svc) = start().await;
    let base = svc.base_url();
    let anon = Api::new(&base, None);
    let h = anon.get("/health").await.unwrap();
    assert_eq!(h["status"], "ok");
    assert_eq!(h["devices"], 1);

    let (status, body) = anon.call("GET", "/runs/run-1/status", None).await.unwrap();
    assert_eq!(status, 401);
    assert_eq!(body["error"], "UNAUTHORIZED");
    let (status, _) = Api::new(&base, Some("nope")).call("GET", "/runs/run-1/status", None).await.unwrap();
    assert_eq!(status, 401);

    let ana = Api::new(&base, Some(ANA));
    let (status, _) = ana.upload_package(elab_testkit::sample_package()).await.unwrap();
    assert_eq!(status, 403);
    let (status, _) = ana.call("POST", "/admin/clock", Some(&json!({ "advance": 1 }))).await.unwrap();
    assert_eq!(status, 403);
    let (status, _) = Api::new(&base, Some(STAFF))
        .call("POST", "/admin/clock", Some(&json!({ "advance": 1 })))
        .await
        .unwrap();
    assert_eq!(status, 403);

    let (status, body) = Api::new(&base, Some(ADMIN)).call("GET", "/runs/run-9/status", None).await.unwrap();
    assert_eq!((status, body["error"].as_str()), (404, Some("NOT_FOUND")));
    let (status, _) = Api::new(&base, Some(ADMIN)).call("POST", "/runs", Some(&json!("garbage"))).await.unwrap();
    assert_eq!(status, 400);
    svc.shutdown().await;
}

#[tokio::test]
async fn unusable_listen_address_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.listen = "not-an-address".into();
    assert!(matches!(spawn(cfg).await, Err(StartError::Bind { .. })));
}

/// Archive written without any checks, for packages the crate refuses to save.
fn raw_zip(entries: &[(&str, &[u8])]) -> Vec<u8> {
    let mut zip = zip::ZipWriter::new(std::io::Cursor::new(Vec::new()));
    for (name, bytes) in entries {
        zip.start_file(*name, zip::write::SimpleFileOptions::default()).unwrap();
        zip.write_all(bytes).unwrap();
    }
    zip.finish().unwrap().into_inner()
}

#[tokio::test]
async fn invalid_package_is_rejected_with_issues() {
    let (_dir, svc) = start().await;
    let admin = Api::new(&svc.base_url(), Some(ADMIN));
    let xml = std::fs::read_to_string(elab_testkit::sample_dir().join("imsmanifest.xml"))
        .unwrap()
        .replace("role-ref=\"instructor\"", "role-ref=\"ghost\"");
    let (status, body) = admin.upload_package(raw_zip(&[("imsmanifest.xml", xml.as_bytes())])).await.unwrap();
    assert_eq!(status, 422, "{body}");
    assert_eq!(body["error"], "INVALID");
    assert!(body["details"]["issues"].as_array().is_some_and(|i| !i.is_empty()));

    let (status, _) = admin.upload_package(b"not a zip".to_vec()).await.unwrap();
    assert_eq!(status, 422);
    assert_eq!(admin.get("/health").await.unwrap()["last_seq"], 1);
    svc.shutdown().await;
}

#[tokio::test]
async fn compat_endpoint_checks_configured_devices() {
    let (_dir, svc) = start().await;
    let base = svc.base_url();
    let (pkg, _) = sample_run(&base).await;
    let staff = Api::new(&base, Some(STAFF));
    let all = staff.get(&format!("/packages/{pkg}/compat")).await.unwrap();
    assert_eq!(all["compatible"], true, "{all}");
    assert_eq!(all["devices"], json!(["tank-1"]));
    let brief = staff.get(&format!("/packages/{pkg}/compat?activity=brief")).await.unwrap();
    assert_eq!(brief["compatible"], true);
    let other = staff.get(&format!("/packages/{pkg}/compat?device_class=signal-source")).await.unwrap();
    assert_eq!(other["devices"], json!([]));
    let (status, _) = staff.call("GET", &format!("/packages/{pkg}/compat?play=nope"), None).await.unwrap();
    assert_eq!(status, 422);
    svc.shutdown().await;
}

#[tokio::test]
async fn run_flow_with_notification_reaches_done() {
    let (_dir, svc) = start().await;
    let base = svc.base_url();
    let (_, run) = sample_run(&base).await;
    let ana = Api::new(&base, Some(ANA));
    let staff = Api::new(&base, Some(STAFF));

    let ids = |list: &Json| -> Vec<String> {
        list["activities"].as_array().unwrap().iter().map(|a| a["activity_id"].as_str().unwrap().to_string()).collect()
    };
    let mine = ana.get(&format!("/runs/{run}/activities?user=ana")).await.unwrap();
    assert_eq!(ids(&mine), ["brief"]);
    let (status, _) = ana.call("GET", &format!("/runs/{run}/activities?user=ben"), None).await.unwrap();
    assert_eq!(status, 403);
    let (status, _) = ana
        .call("POST", &format!("/runs/{run}/notify"), Some(&json!({ "target_role": "learner", "activity_id": "hint" })))
        .await
        .unwrap();
    assert_eq!(status, 403);

    // A learner completing for themselves needs no user field.
    ana.post(&format!("/runs/{run}/complete"), &json!({ "activity_id": "brief" })).await.unwrap();
    let (status, body) = ana
        .call("POST", &format!("/runs/{run}/complete"), Some(&json!({ "activity_id": "brief" })))
        .await
        .unwrap();
    assert_eq!(status, 409, "{body}");
    staff.post(&format!("/runs/{run}/complete"), &json!({ "user": "ben", "activity_id": "brief" })).await.unwrap();
    assert_eq!(ids(&ana.get(&format!("/runs/{run}/activities?user=ana")).await.unwrap()), ["fill"]);

    staff
        .post(&format!("/runs/{run}/notify"), &json!({ "target_role": "learner", "activity_id": "hint" }))
        .await
        .unwrap();
    assert_eq!(ids(&ana.get(&format!("/runs/{run}/activities?user=ana")).await.unwrap()), ["fill", "hint"]);

    finish_run(&base, &run).await;
    let status = staff.get(&format!("/runs/{run}/status")).await.unwrap();
    assert_eq!(status["status"], "COMPLETED", "{status}");
    let events = staff.events(0).await.unwrap();
    let kinds = kinds(&events);
    assert!(kinds.contains(&"ACTIVITY_REVEALED"));
    assert_eq!(kinds.iter().filter(|k| **k == "RUN_DONE").count(), 1);
    svc.shutdown().await;
}

#[tokio::test]
async fn sessions_share_one_tank_and_learners_stay_on_their_device() {
    let (_dir, svc) = start().await;
    let base = svc.base_url();
    let (_, run) = sample_run(&base).await;
    let ana = Api::new(&base, Some(ANA));
    let ben = Api::new(&base, Some(BEN));

    let a = ana.post("/sessions", &json!({ "run_id": run, "device_class": "tank" })).await.unwrap();
    let a_id = a["session_id"].as_str().unwrap().to_string();
    advance(&base, 1.0).await;
    let a = session(&ana, &a_id).await;
    assert_eq!(a["mode"], "REAL", "{a}");
    assert_eq!(a["device_id"], "tank-1");

    let b = ben.post("/sessions", &json!({ "run_id": run, "device_class": "tank" })).await.unwrap();
    assert_eq!(b["mode"], "SHADOW", "{b}");
    assert_eq!(b["queue_position"], 1);
    let b_id = b["session_id"].as_str().unwrap().to_string();
    let twin = b["device_id"].as_str().unwrap().to_string();
    assert!(twin.starts_with("tank-twin-"));

    // Another learner's device is off limits, in either direction.
    let (status, _) = ana.call("GET", &format!("/sessions/{b_id}"), None).await.unwrap();
    assert_eq!(status, 403);
    match set_inflow_raw(&ben, "tank-1", 0.1).await {
        Err(ClientError::Http { status: 403, .. }) => {}
        other => panic!("{other:?}"),
    }
    assert_eq!(set_inflow(&ana, "tank-1", 0.1).await, None);
    assert_eq!(set_inflow(&ben, &twin, 0.05).await, None);
    assert_eq!(set_inflow(&ana, "tank-1", 5.0).await.as_deref(), Some("OutOfRange"));

    advance(&base, 5.0).await;
    let (level, q) = tank_state(&ana, "tank-1").await;
    assert!(level > 0.0 && q == 0.1, "{level} {q}");
    let (twin_level, _) = tank_state(&ben, &twin).await;
    assert!(twin_level > 0.0 && twin_level < level);

    let released = ana.delete(&format!("/sessions/{a_id}")).await.unwrap();
    assert_eq!(released["mode"], "CLOSED");
    let b = session(&ben, &b_id).await;
    assert_eq!(b["mode"], "RESTORING", "{b}");
    assert_eq!(b["device_id"], "tank-1");
    let mut waited = 0;
    while session(&ben, &b_id).await["mode"] != "REAL" {
        advance(&base, 1.0).await;
        waited += 1;
        assert!(waited < 120, "restore never finished");
    }
    let (level, q) = tank_state(&ben, "tank-1").await;
    assert!((level - twin_level).abs() < 0.2 && (q - 0.05).abs() < 1e-12, "{level} {q}");
    svc.shutdown().await;
}

async fn set_inflow_raw(api: &Api, device: &str, q: f64) -> Result<(), ClientError> {
    let req = DaRequest::new(RequestBody::Write {
        device: device.into(),
        writes: vec![WriteRequest {
            path: Q_IN.into(),
            value: Value::Float(q),
        }],
    });
    api.da_raw(encode_request(&req).as_bytes()).await.map(|_| ())
}

#[tokio::test]
async fn event_stream_follows_new_events_and_filters_learners() {
    let (_dir, svc) = start().await;
    let base = svc.base_url();
    let (_, run) = sample_run(&base).await;
    let staff = Api::new(&base, Some(STAFF));
    let ana = Api::new(&base, Some(ANA));
    let last = staff.get("/health").await.unwrap()["last_seq"].as_u64().unwrap();

    let mut stream = staff.follow(last).await.unwrap();
    staff.post(&format!("/runs/{run}/complete"), &json!({ "user": "ben", "activity_id": "brief" })).await.unwrap();
    let next = tokio::time::timeout(Duration::from_secs(10), stream.next()).await.expect("event arrives").unwrap();
    let next = next.expect("stream open");
    assert_eq!(next["kind"], "ACTIVITY_COMPLETED");
    assert_eq!(next["seq"].as_u64().unwrap(), last + 1);

    let b = Api::new(&base, Some(BEN)).post("/sessions", &json!({ "run_id": run, "device_class": "tank" })).await.unwrap();
    assert!(b["session_id"].is_string());
    let seen = ana.events(0).await.unwrap();
    assert!(!seen.is_empty());
    assert!(seen.iter().all(|e| e["stream"] != "ADMIN" && e["stream"] != "SESSION"), "{seen:?}");
    let everything = staff.events(0).await.unwrap();
    assert!(everything.iter().any(|e| e["stream"] == "SESSION"));
    assert!(everything.windows(2).all(|w| w[1]["seq"].as_u64() == w[0]["seq"].as_u64().map(|s| s + 1)));

    svc.shutdown().await;
    // Whatever was already sent drains, then the stream ends.
    tokio::time::timeout(Duration::from_secs(10), async {
        while let Ok(Some(_)) = stream.next().await {}
    })
    .await
    .expect("stream ends");
}
