//! The desk scenario, driven through the HTTP API alone.

use std::time::Instant;

use elab_core::scheduler::Transition;
use elab_core::sim::{LEVEL, Q_IN};
use elab_core::types::Value;
use elab_service::app::replay_log;
use elab_service::client::Api;
use elab_service::events::EventLog;
use elab_service::http::spawn;
use serde_json::{Value as Json, json};

use crate::common::*;

fn err(e: impl std::fmt::Debug) -> String {
    format!("{e:?}")
}

fn transitions(events: &[Json]) -> Vec<Transition> {
    events
        .iter()
        .filter(|e| e["stream"] == "SESSION")
        .filter_map(|e| serde_json::from_value(e["payload"].clone()).ok())
        .collect()
}

fn float(state: &std::collections::BTreeMap<String, Value>, path: &str) -> f64 {
    state.get(path).and_then(Value::as_f64).unwrap_or(f64::NAN)
}

pub async fn desk_scenario() -> Result<String, String> {
    let started = Instant::now();
    let dir = tempfile::tempdir().map_err(err)?;
    let cfg = config(dir.path());
    let svc = spawn(cfg.clone()).await.map_err(err)?;
    let base = svc.base_url();
    let staff = Api::new(&base, Some(STAFF));
    let ana = Api::new(&base, Some(ANA));
    let ben = Api::new(&base, Some(BEN));

    let (pkg, run) = sample_run(&base).await;
    let compat = staff.get(&format!("/packages/{pkg}/compat")).await.map_err(err)?;
    if compat["compatible"] != true {
        return Err(format!("sample does not fit the tank: {compat}"));
    }

    let a = ana.post("/sessions", &json!({ "run_id": run, "device_class": "tank" })).await.map_err(err)?;
    let a_id = a["session_id"].as_str().unwrap_or_default().to_string();
    advance(&base, 1.0).await;
    if session(&ana, &a_id).await["mode"] != "REAL" {
        return Err("learner A did not get the real tank".into());
    }
    let b = ben.post("/sessions", &json!({ "run_id": run, "device_class": "tank" })).await.map_err(err)?;
    let b_id = b["session_id"].as_str().unwrap_or_default().to_string();
    if b["mode"] != "SHADOW" {
        return Err(format!("learner B got {} instead of SHADOW", b["mode"]));
    }
    let b_twin = b["device_id"].as_str().unwrap_or_default().to_string();
    if set_inflow(&ana, "tank-1", 0.05).await.is_some() || set_inflow(&ben, &b_twin, 0.03).await.is_some() {
        return Err("inflow writes were rejected".into());
    }

    // Step until A's slice runs out.
    let mut waited = 0;
    while session(&ana, &a_id).await["mode"] == "REAL" {
        advance(&base, 1.0).await;
        waited += 1;
        if waited > 30 {
            return Err("A was never preempted".into());
        }
    }
    let a_now = session(&ana, &a_id).await;
    let a_twin = a_now["device_id"].as_str().unwrap_or_default().to_string();
    if a_now["mode"] != "SHADOW" || !a_twin.starts_with("tank-twin-") {
        return Err(format!("A after preemption: {a_now}"));
    }
    let log = staff.events(0).await.map_err(err)?;
    let Some(saved) = transitions(&log).into_iter().find_map(|t| match t {
        Transition::Preempted { session_id, snapshot, .. } if session_id == a_id => Some(snapshot),
        _ => None,
    }) else {
        return Err("no PREEMPTED event for A".into());
    };
    let (twin_level, twin_q) = tank_state(&ana, &a_twin).await;
    if twin_level != float(&saved.state, LEVEL) || twin_q != float(&saved.state, Q_IN) {
        return Err(format!("A's twin ({twin_level}, {twin_q}) differs from the saved real state {:?}", saved.state));
    }

    // B is restored onto the real tank from its shadow work; step to where
    // the ramp lands and compare there.
    let log = staff.events(0).await.map_err(err)?;
    let granted = log
        .iter()
        .find(|e| e["kind"] == "GRANTED" && e["stream_id"] == b_id.as_str())
        .ok_or("no GRANTED event for B")?;
    let Ok(Transition::Granted { target, expected_duration, .. }) = serde_json::from_value(granted["payload"].clone())
    else {
        return Err("unreadable GRANTED event".into());
    };
    let now = staff.get("/health").await.map_err(err)?["time"].as_f64().unwrap_or(f64::NAN);
    let elapsed = now - granted["at"].as_f64().unwrap_or(f64::NAN);
    // Ramps move in whole simulation steps of the tank.
    let dt = elab_core::sim::TankParams::default().dt;
    let landing = (expected_duration / dt - 1e-9).ceil() * dt + 1e-9;
    if elapsed < landing {
        advance(&base, landing - elapsed).await;
    }
    let (b_level, b_q) = tank_state(&ben, "tank-1").await;
    let continuity = (b_level - float(&target.state, LEVEL)).abs().max((b_q - float(&target.state, Q_IN)).abs());
    if !(continuity <= 1e-3) {
        return Err(format!("B's real tank is {continuity} away from its shadow state"));
    }
    let mut ramp = 0;
    while session(&ben, &b_id).await["mode"] != "REAL" {
        advance(&base, 1.0).await;
        ramp += 1;
        if ramp > 2 {
            return Err("B did not settle at the tick after its ramp".into());
        }
    }

    // Everyone works through the unit; the instructor reveals the hint.
    staff
        .post(&format!("/runs/{run}/notify"), &json!({ "target_role": "learner", "activity_id": "hint" }))
        .await
        .map_err(err)?;
    let mut completed = 0;
    loop {
        let mut n = 0;
        for (api, user) in [(&ana, "ana"), (&ben, "ben"), (&staff, "ines")] {
            n += complete_everything(api, &run, user).await;
        }
        completed += n;
        if n == 0 {
            break;
        }
    }
    let status = staff.get(&format!("/runs/{run}/status")).await.map_err(err)?;
    if status["status"] != "COMPLETED" {
        return Err(format!("run not completed: {status}"));
    }
    for (api, id) in [(&ana, &a_id), (&ben, &b_id)] {
        api.delete(&format!("/sessions/{id}")).await.map_err(err)?;
    }
    let log = staff.events(0).await.map_err(err)?;
    if log.iter().filter(|e| e["kind"] == "RUN_DONE").count() != 1 {
        return Err("RUN_DONE missing from the event log".into());
    }

    let events = EventLog::read(&dir.path().join("events.log")).map_err(err)?;
    let replayed = replay_log(&cfg, &events).map_err(err)?;
    if replayed != svc.app.state_view() {
        return Err("replaying the log does not reproduce the final state".into());
    }
    svc.shutdown().await;
    let again = spawn(cfg).await.map_err(err)?;
    let status_again = Api::new(&again.base_url(), Some(STAFF)).get(&format!("/runs/{run}/status")).await.map_err(err)?;
    again.shutdown().await;
    if status_again != status {
        return Err("run status changed across a restart".into());
    }

    let secs = started.elapsed().as_secs_f64();
    if secs >= 90.0 {
        return Err(format!("took {secs:.1} s, limit 90 s"));
    }
    Ok(format!(
        "A preempted after {waited} s with twin equal to the saved state, B restored in {expected_duration:.2} s \
         to within {continuity:.1e} of its shadow state, {completed} completions, RUN_DONE, replay of {} events exact, {secs:.1} s",
        events.len()
    ))
}
