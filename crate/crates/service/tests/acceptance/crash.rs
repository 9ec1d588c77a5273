//! Kill -9 of the real binary after acknowledged work, then restart.

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::time::Duration;

use elab_core::device::{Realism, Snapshot};
use elab_core::sim::{LEVEL, Q_IN, SimModel, TankParams};
use elab_core::types::Value;
use elab_service::client::Api;
use serde_json::json;

use crate::common::*;

fn err(e: impl std::fmt::Debug) -> String {
    format!("{e:?}")
}

struct Service {
    child: Child,
    base: String,
}

impl Drop for Service {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Starts `elab serve` and waits for its listening line.
fn launch(config: &Path) -> Result<Service, String> {
    let mut child = Command::new(env!("CARGO_BIN_EXE_elab"))
        .args(["serve", "--config"])
        .arg(config)
        .stderr(Stdio::piped())
        .stdout(Stdio::null())
        .spawn()
        .map_err(err)?;
    let stderr = child.stderr.take().ok_or("no stderr")?;
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        for line in BufReader::new(stderr).lines().map_while(Result::ok) {
            if let Some(url) = line.split("listening on ").nth(1) {
                let _ = tx.send(url.trim().to_string());
            }
        }
    });
    let base = rx.recv_timeout(Duration::from_secs(30)).map_err(|_| "service did not start".to_string())?;
    Ok(Service { child, base })
}

fn float(s: &Snapshot, path: &str) -> f64 {
    s.state.get(path).and_then(Value::as_f64).unwrap_or(f64::NAN)
}

pub async fn crash_restart() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let data = dir.path().join("data");
    let config = dir.path().join("elab.conf");
    std::fs::write(&config, config_text(&data, "").replace("fsync = false", "fsync = true")).map_err(err)?;

    let svc = launch(&config)?;
    let (_, run) = sample_run(&svc.base).await;
    let ana = Api::new(&svc.base, Some(ANA));
    let staff = Api::new(&svc.base, Some(STAFF));
    let s = ana.post("/sessions", &json!({ "run_id": run, "device_class": "tank" })).await.map_err(err)?;
    let sid = s["session_id"].as_str().unwrap_or_default().to_string();
    advance(&svc.base, 1.0).await;
    if let Some(reason) = set_inflow(&ana, "tank-1", 0.1).await {
        return Err(format!("write rejected: {reason}"));
    }
    advance(&svc.base, 6.0).await;
    ana.post(&format!("/runs/{run}/complete"), &json!({ "activity_id": "brief" })).await.map_err(err)?;
    let status_before = staff.get(&format!("/runs/{run}/status")).await.map_err(err)?;
    let (level_before, _) = tank_state(&ana, "tank-1").await;

    // No shutdown path runs: SIGKILL.
    drop(svc);
    let snap_file = data.join("snapshots").join(&run).join("ana").join("tank.json");
    let saved: Snapshot = serde_json::from_slice(&std::fs::read(&snap_file).map_err(err)?).map_err(err)?;

    let svc = launch(&config)?;
    let ana = Api::new(&svc.base, Some(ANA));
    let staff = Api::new(&svc.base, Some(STAFF));
    let status_after = staff.get(&format!("/runs/{run}/status")).await.map_err(err)?;
    if status_after != status_before {
        return Err(format!("status changed: {status_before} vs {status_after}"));
    }
    let s = session(&ana, &sid).await;
    if s["mode"] != "RESTORING" || s["device_id"] != "tank-1" {
        return Err(format!("session after restart: {s}"));
    }
    if (float(&saved, LEVEL) - level_before).abs() > 1e-9 {
        return Err(format!("snapshot level {} vs acknowledged {level_before}", float(&saved, LEVEL)));
    }
    let rejected = set_inflow(&ana, "tank-1", 0.0).await;
    if rejected.as_deref() != Some("Restoring") {
        return Err(format!("write during restore answered {rejected:?}"));
    }

    let d = SimModel::Tank(TankParams::default()).descriptor("tank-1", Realism::RealConstrained);
    let c = d.constraints.ok_or("real tank has no constraints")?;
    let slew_h = c.slew_rates[LEVEL];
    let slew_q = c.slew_rates[Q_IN];
    let eps = c.settle_epsilon.get(LEVEL).copied().unwrap_or(1e-3);
    // The ramp moves in whole simulation steps and lands exactly on the
    // first step boundary at or after the expected duration. Check every
    // half second up to there, then the landing point itself.
    let log = staff.events(0).await.map_err(err)?;
    let resumed = log
        .iter()
        .find(|e| e["kind"] == "RESUMED" && e["stream_id"] == sid.as_str())
        .ok_or("no RESUMED event")?;
    let duration = resumed["payload"]["expected_duration"].as_f64().ok_or("no expected duration")?;
    let expected = (float(&saved, LEVEL) / slew_h).max(float(&saved, Q_IN) / slew_q);
    if (duration - expected).abs() > 1e-6 {
        return Err(format!("expected duration {duration} s, slew limits give {expected} s"));
    }
    let (mut h, mut q) = tank_state(&ana, "tank-1").await;
    if h != 0.0 || q != 0.0 {
        return Err(format!("fresh tank reads ({h}, {q})"));
    }
    let dt = TankParams::default().dt;
    let landing = (duration / dt - 1e-9).ceil() * dt + 1e-9;
    let (mut worst_h, mut worst_q): (f64, f64) = (0.0, 0.0);
    let mut t = 0.0;
    while t < landing {
        let step = (landing - t).min(0.5);
        advance(&svc.base, step).await;
        t += step;
        let (h2, q2) = tank_state(&ana, "tank-1").await;
        worst_h = worst_h.max((h2 - h).abs() / step);
        worst_q = worst_q.max((q2 - q).abs() / step);
        if (h2 - h).abs() > slew_h * step + 1e-9 || (q2 - q).abs() > slew_q * step + 1e-9 {
            return Err(format!("slew exceeded at {t} s: level {h} -> {h2}, q_in {q} -> {q2}"));
        }
        (h, q) = (h2, q2);
    }
    let off = (h - float(&saved, LEVEL)).abs().max((q - float(&saved, Q_IN)).abs());
    if off > eps {
        return Err(format!("ramp landed {off} from the snapshot"));
    }
    // The next scheduler tick sees the finished restore.
    advance(&svc.base, 1.0).await;
    let s = session(&ana, &sid).await;
    if s["mode"] != "REAL" {
        return Err(format!("still {} after the ramp", s["mode"]));
    }
    Ok(format!(
        "status identical after kill -9, RESTORING for {t:.2} s at <= {worst_h:.3} m/s (limit {slew_h}) and \
         <= {worst_q:.3}/s q_in (limit {slew_q}), writes rejected while restoring, settled {off:.1e} from the snapshot"
    ))
}
