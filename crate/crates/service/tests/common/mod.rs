#![allow(dead_code)]

use std::path::Path;

use elab_core::protocol::{DaRequest, RequestBody, ResponseBody, SubscribeItem};
use elab_core::device::WriteRequest;
use elab_core::sim::{LEVEL, Q_IN};
use elab_core::types::Value;
use elab_service::client::Api;
use elab_service::config::ServiceConfig;
use serde_json::{Value as Json, json};

pub const ADMIN: &str = "t-root";
pub const STAFF: &str = "t-ines";
pub const ANA: &str = "t-ana";
pub const BEN: &str = "t-ben";

pub fn config_text(data_dir: &Path, extra: &str) -> String {
    format!(
        "# test service\n\
         listen = 127.0.0.1:0\n\
         data_dir = {}\n\
         clock = manual\n\
         quantum = 10\n\
         fsync = false\n\
         devices = tank:1:real\n\
         tokens = t-ana:ana:LEARNER, t-ben:ben:LEARNER, t-ines:ines:STAFF, t-root:root:ADMIN\n\
         {extra}\n",
        data_dir.display()
    )
}

pub fn config(data_dir: &Path) -> ServiceConfig {
    ServiceConfig::parse(&config_text(data_dir, ""), |_| None).expect("test config parses")
}

pub fn assignments() -> Json {
    json!({ "ana": ["learner"], "ben": ["learner"], "ines": ["instructor"] })
}

/// Uploads the bundled sample and starts a run for ana, ben and ines.
pub async fn sample_run(base: &str) -> (String, String) {
    let admin = Api::new(base, Some(ADMIN));
    let (status, receipt) = admin
        .upload_package(elab_testkit::sample_package())
        .await
        .expect("upload");
    assert_eq!(status, 201, "{receipt}");
    let pkg = receipt["package_id"].as_str().unwrap().to_string();
    let run = admin
        .post("/runs", &json!({ "package_id": pkg, "assignments": assignments() }))
        .await
        .expect("run");
    (pkg, run["run_id"].as_str().unwrap().to_string())
}

pub async fn advance(base: &str, seconds: f64) -> Json {
    Api::new(base, Some(ADMIN))
        .post("/admin/clock", &json!({ "advance": seconds }))
        .await
        .expect("advance clock")
}

pub async fn session(api: &Api, id: &str) -> Json {
    api.get(&format!("/sessions/{id}")).await.expect("session")
}

pub async fn read_values(api: &Api, device: &str, paths: &[&str]) -> Vec<Option<Value>> {
    let r = api
        .da(&DaRequest::new(RequestBody::Read {
            device: device.into(),
            paths: paths.iter().map(|p| p.to_string()).collect(),
        }))
        .await
        .expect("read");
    let ResponseBody::Read { items } = r.body else { panic!("not a read response") };
    items.into_iter().map(|i| i.value).collect()
}

pub async fn tank_state(api: &Api, device: &str) -> (f64, f64) {
    let v = read_values(api, device, &[LEVEL, Q_IN]).await;
    (v[0].as_ref().unwrap().as_f64().unwrap(), v[1].as_ref().unwrap().as_f64().unwrap())
}

/// Writes q_in; returns the rejection reason, if any.
pub async fn set_inflow(api: &Api, device: &str, q: f64) -> Option<String> {
    let r = api
        .da(&DaRequest::new(RequestBody::Write {
            device: device.into(),
            writes: vec![WriteRequest {
                path: Q_IN.into(),
                value: Value::Float(q),
            }],
        }))
        .await
        .expect("write");
    let ResponseBody::Write { results } = r.body else { panic!("not a write response") };
    results[0].reason.map(|r| format!("{r:?}"))
}

pub fn subscribe_level(device: &str) -> DaRequest {
    DaRequest::new(RequestBody::Subscribe {
        device: device.into(),
        items: vec![SubscribeItem {
            path: LEVEL.into(),
            deadband: 0.01,
        }],
        ttl: None,
    })
}

/// Completes every actionable activity of `user` until nothing is left.
pub async fn complete_everything(api: &Api, run: &str, user: &str) -> usize {
    let mut done = 0;
    loop {
        let list = api
            .get(&format!("/runs/{run}/activities?user={user}"))
            .await
            .expect("activities");
        let next = list["activities"]
            .as_array()
            .unwrap()
            .iter()
            .find(|a| a["actionable"] == json!(true))
            .map(|a| a["activity_id"].as_str().unwrap().to_string());
        let Some(id) = next else { return done };
        api.post(
            &format!("/runs/{run}/complete"),
            &json!({ "user": user, "activity_id": id }),
        )
        .await
        .expect("complete");
        done += 1;
    }
}
