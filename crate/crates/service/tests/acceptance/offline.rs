//! Criteria that need no running service.

use std::cell::Cell;
use std::time::Instant;

use elab_core::compat::{check_compat, requirements_of};
use elab_core::learning_design::{parse_manifest, serialize_manifest};
use elab_core::packaging::{load_package, save_package};
use elab_core::protocol::{DaServer, decode_request, decode_response, encode_request};
use elab_core::clock::Timestamp;
use elab_core::sim::{TankParams, TankState, simulate_tank};
use elab_testkit::bench::{DaBench, context_continuity, deadband_timeline, random_sequence_case, starvation, timeline};
use elab_testkit::generate::{arb_request, descriptors, manifest_corpus, requirement_set, selector, unit_for};
use elab_testkit::oracle::compat::{expected, project};
use elab_testkit::oracle::runtime::{assignments, compare_exhaustively, enumerate_methods};
use elab_testkit::oracle::tank::{fixed_point, rk4_level};
use elab_testkit::rng;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::Rng;

/// Shared by criteria 1 and 6.
pub const CORPUS_SEED: u64 = 1;
pub const CORPUS_SIZE: usize = 250;

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

pub fn round_trips() -> Result<String, String> {
    let started = Instant::now();
    let corpus = manifest_corpus(CORPUS_SEED, CORPUS_SIZE);
    let mut r = rng(CORPUS_SEED);
    for (i, m) in corpus.iter().enumerate() {
        let xml = serialize_manifest(m).map_err(|e| format!("manifest {i}: {e}"))?;
        let back = parse_manifest(&xml).map_err(|e| format!("manifest {i}: {e}"))?;
        if &back != m || serialize_manifest(&back).ok().as_ref() != Some(&xml) {
            return Err(format!("manifest {i}: parse after serialize is not the identity"));
        }
        let unit = unit_for(m, &mut r);
        let bytes = save_package(&unit).map_err(|e| format!("package {i}: {e}"))?;
        let loaded = load_package(&bytes).map_err(|e| format!("package {i}: {e}"))?;
        if loaded.unit != unit || save_package(&loaded.unit).ok().as_ref() != Some(&bytes) {
            return Err(format!("package {i}: load after save is not the identity"));
        }
    }
    let secs = started.elapsed().as_secs_f64();
    if secs >= 10.0 {
        return Err(format!("{} manifests took {secs:.2} s, limit 10 s", corpus.len()));
    }
    Ok(format!("{n}/{n} manifests and packages, {secs:.2} s (limit 10 s)", n = corpus.len()))
}

pub fn runtime_oracle() -> Result<String, String> {
    let started = Instant::now();
    let methods = enumerate_methods();
    let (mut runs, mut states, mut transitions) = (0usize, 0usize, 0usize);
    for m in &methods {
        for users in assignments() {
            let cov = compare_exhaustively(m, &users).map_err(|e| format!("divergence after {runs} runs: {e}"))?;
            runs += 1;
            states += cov.states;
            transitions += cov.transitions;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    if secs >= 60.0 {
        return Err(format!("took {secs:.1} s, limit 60 s"));
    }
    Ok(format!(
        "{} methods, {runs} runs, {states} states, {transitions} transitions, 0 divergences, {secs:.1} s (limit 60 s)",
        methods.len()
    ))
}

fn level_at(p: &TankParams, q_in: f64, seconds: f64) -> f64 {
    let init = TankState {
        q_in,
        ..TankState::default()
    };
    simulate_tank(init, p, seconds).last().map(|s| s.level).unwrap_or(f64::NAN)
}

pub fn tank_physics() -> Result<String, String> {
    let p = TankParams::default();
    if (p.area, p.outflow_coeff, p.dt) != (1.0, 0.05, 0.1) {
        return Err(format!("unexpected default parameters {p:?}"));
    }
    let target = fixed_point(0.05, p.outflow_coeff);
    let h = level_at(&p, 0.05, 600.0);
    let err = (h - target).abs();
    let h_half = level_at(&TankParams { dt: 0.05, ..p }, 0.05, 600.0);
    let shift = (h - h_half).abs();
    let rk = rk4_level(0.0, 0.05, p.area, p.outflow_coeff, p.h_max, 600.0, 1e-3);
    let vs_rk = (h - rk).abs();
    if !(err < 1e-3 && shift < 1e-3 && vs_rk < 1e-3) {
        return Err(format!("|h-1| = {err:.2e}, dt shift = {shift:.2e}, vs RK4 = {vs_rk:.2e}"));
    }
    Ok(format!(
        "h(600 s) = {h:.6} m, |err| = {err:.2e}, dt/2 shift = {shift:.2e}, vs RK4 = {vs_rk:.2e} (limits 1e-3)"
    ))
}

fn fail(e: impl std::fmt::Display) -> TestCaseError {
    TestCaseError::fail(e.to_string())
}

pub fn protocol_properties() -> Result<String, String> {
    let cases = Cell::new(0u32);
    runner(1000)
        .run(&arb_request(), |req| {
            cases.set(cases.get() + 1);
            let bytes = encode_request(&req);
            let back = decode_request(bytes.as_bytes()).map_err(|e| fail(format!("{e:?} on {bytes}")))?;
            if back != req || encode_request(&back) != bytes {
                return Err(fail(format!("not the identity: {bytes}")));
            }
            Ok(())
        })
        .map_err(|e| format!("encoding: {e}"))?;
    let encoded = cases.get();

    let timelines = Cell::new(0u32);
    for monotone in [true, false] {
        runner(500)
            .run(&timeline(monotone), |(values, polls, db)| {
                timelines.set(timelines.get() + 1);
                deadband_timeline(&values, &polls, db).map_err(fail)
            })
            .map_err(|e| format!("deadband: {e}"))?;
    }

    // Random byte strings, half of them built from protocol fragments so
    // that parsing gets past the first byte.
    let fragments: [&[u8]; 8] = [
        b"<DaRequest",
        b" op=\"Read\"",
        b" device=\"tank-1\"",
        b">",
        b"<Item path=\"sensors/level\"/>",
        b"</DaRequest>",
        b"&amp;",
        b"\xff\xfe",
    ];
    let mut r = rng(4);
    let mut b = DaBench::new();
    let mut crashes = 0;
    for i in 0..1000 {
        let bytes: Vec<u8> = if i % 2 == 0 {
            let n = r.random_range(0..64);
            (0..n).map(|_| r.random()).collect()
        } else {
            let n = r.random_range(0..8);
            (0..n).flat_map(|_| fragments[r.random_range(0..fragments.len())].to_vec()).collect()
        };
        let server: &mut DaServer = &mut b.server;
        let out = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            server.handle_bytes(&mut b.devices, &bytes, Timestamp(1.0))
        }));
        match out {
            Ok(text) if decode_response(text.as_bytes()).is_ok() => {}
            _ => crashes += 1,
        }
    }
    if crashes > 0 {
        return Err(format!("{crashes} of 1000 byte strings crashed or produced undecodable output"));
    }
    Ok(format!(
        "{encoded} requests round-trip, {} deadband timelines, 1000 byte strings with 0 crashes",
        timelines.get()
    ))
}

pub fn scheduler_properties() -> Result<String, String> {
    let mut r = rng(12);
    let mut transitions = 0;
    let sequences = 10_000;
    for case in 0..sequences {
        transitions += random_sequence_case(&mut r, case)?;
    }
    let s = starvation(10.0)?;
    let c = context_continuity(1e-3)?;
    Ok(format!(
        "{sequences} sequences ({transitions} transitions) without shared instances; worst wait {:.1} s \
         (bound {:.0} s); {} preemptions and {} restores, worst settle error {:.1e} (limit 1e-3)",
        s.worst_wait, s.bound, c.demotions, c.promotions, c.worst_settle_error
    ))
}

pub fn compat_checker() -> Result<String, String> {
    let mut r = rng(21);
    let pairs = 2000;
    let mut incompatible = 0;
    for case in 0..pairs {
        let req = requirement_set(&mut r);
        let ds = descriptors(&mut r);
        let report = check_compat(&req, &ds);
        let (ok, want) = expected(&req, &ds);
        if report.compatible != ok || project(&report.violations) != want {
            return Err(format!("pair {case} differs from the exhaustive matcher"));
        }
        incompatible += usize::from(!ok);
    }

    let corpus = manifest_corpus(CORPUS_SEED, CORPUS_SIZE);
    let mut r = rng(22);
    let mut slices = 0;
    for (i, m) in corpus.iter().enumerate() {
        let whole = requirements_of(m, None).map_err(|e| format!("manifest {i}: {e}"))?;
        let ds = descriptors(&mut r);
        let whole_report = check_compat(&whole, &ds);
        for _ in 0..4 {
            let sel = selector(m, &mut r);
            let part = requirements_of(m, Some(&sel)).map_err(|e| format!("manifest {i}: {e}"))?;
            let report = check_compat(&part, &ds);
            if !part.is_subset_of(&whole) {
                return Err(format!("manifest {i}: slice needs more than the whole"));
            }
            if whole_report.compatible && !report.compatible {
                return Err(format!("manifest {i}: slice incompatible while whole is compatible"));
            }
            slices += 1;
        }
    }
    Ok(format!(
        "{pairs} pairs agree with the exhaustive matcher ({incompatible} incompatible); \
         {slices} slices of {} manifests monotone",
        corpus.len()
    ))
}
