//! Acceptance run: one PASS or FAIL line per criterion, with the measured
//! figures. Exits non-zero if any criterion fails.

#[path = "../common/mod.rs"]
mod common;
mod crash;
mod desk;
mod offline;

use std::panic::{AssertUnwindSafe, catch_unwind};
use std::process::ExitCode;
use std::time::Instant;

fn report(n: u32, title: &str, f: impl FnOnce() -> Result<String, String>) -> bool {
    let started = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let secs = started.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("PASS {n} {title}: {detail} [{secs:.1} s]");
            true
        }
        Err(detail) => {
            println!("FAIL {n} {title}: {detail} [{secs:.1} s]");
            false
        }
    }
}

fn main() -> ExitCode {
    let rt = tokio::runtime::Runtime::new().expect("tokio runtime");
    let results = [
        report(1, "manifest and package round-trips", offline::round_trips),
        report(2, "runtime matches the reference automaton", offline::runtime_oracle),
        report(3, "tank physics", offline::tank_physics),
        report(4, "data-access protocol properties", offline::protocol_properties),
        report(5, "scheduler safety, liveness and continuity", offline::scheduler_properties),
        report(6, "compatibility checker and slicing", offline::compat_checker),
        report(7, "desk scenario over the API", || rt.block_on(desk::desk_scenario())),
        report(8, "crash and restart", || rt.block_on(crash::crash_restart())),
    ];
    let passed = results.iter().filter(|ok| **ok).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed == results.len() { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
