use elab_core::clock::{ManualClock, SharedClock, Timestamp};
use elab_core::device::{Realism, WriteRequest};
use elab_core::sim::{LEVEL, Q_IN, SimModel, Stepper, TankParams, TankState, simulate_tank, step_tank};
use elab_core::types::Value;
use elab_testkit::oracle::tank::{fixed_point, rk4_level};
use proptest::prelude::*;

fn level_at(params: &TankParams, q_in: f64, seconds: f64) -> f64 {
    let init = TankState {
        q_in,
        ..TankState::default()
    };
    simulate_tank(init, params, seconds).last().unwrap().level
}

#[test]
fn converges_to_fixed_point() {
    let p = TankParams::default();
    let h = level_at(&p, 0.05, 600.0);
    assert!((fixed_point(0.05, 0.05) - 1.0).abs() < 1e-15);
    assert!((p.steady_level(0.05) - 1.0).abs() < 1e-15);
    assert!((h - 1.0).abs() < 1e-3, "level at 600 s = {h}");
}

#[test]
fn halving_dt_barely_moves_result() {
    let p = TankParams::default();
    let half = TankParams { dt: 0.05, ..p };
    let a = level_at(&p, 0.05, 600.0);
    let b = level_at(&half, 0.05, 600.0);
    assert!((a - b).abs() < 1e-3, "{a} vs {b}");
    assert_eq!(simulate_tank(TankState::default(), &half, 600.0).len(), 12_001);
}

#[test]
fn euler_tracks_reference_integrator() {
    let p = TankParams::default();
    for (h0, q) in [(0.0, 0.05), (1.5, 0.0), (0.3, 0.2), (2.0, 0.01)] {
        let init = TankState {
            level: h0,
            q_in: q,
            sim_time: 0.0,
        };
        let traj = simulate_tank(init, &p, 120.0);
        for t in [10.0, 60.0, 120.0] {
            let euler = traj[(t / p.dt).round() as usize].level;
            let rk = rk4_level(h0, q, p.area, p.outflow_coeff, p.h_max, t, p.dt / 1000.0);
            // Explicit Euler is first order; the √h kink at 0 costs a bit more.
            assert!((euler - rk).abs() < 5e-3, "h0={h0} q={q} t={t}: {euler} vs {rk}");
        }
    }
}

#[test]
fn clamps_at_top_and_bottom() {
    let p = TankParams {
        outflow_coeff: 0.0,
        ..TankParams::default()
    };
    let full = simulate_tank(
        TankState {
            q_in: 0.2,
            ..TankState::default()
        },
        &p,
        30.0,
    );
    assert_eq!(full.last().unwrap().level, p.h_max);
    let p = TankParams::default();
    let drain = simulate_tank(
        TankState {
            level: 0.001,
            ..TankState::default()
        },
        &p,
        10.0,
    );
    assert!(drain.iter().all(|s| s.level >= 0.0));
    assert_eq!(drain.last().unwrap().level, 0.0);
}

#[test]
fn stepper_carries_remainder() {
    let mut s = Stepper::new(0.1);
    let total: u64 = (0..30).map(|_| s.advance(1.0 / 3.0)).sum();
    assert_eq!(total, 100);
    assert_eq!(s.steps(), 100);
}

#[test]
fn device_matches_pure_simulation() {
    let params = TankParams::default();
    let clock = ManualClock::shared(Timestamp::ZERO);
    let shared: SharedClock = clock.clone();
    let mut dev = SimModel::Tank(params).build("t", Realism::Virtual, shared);
    dev.write(&[WriteRequest {
        path: Q_IN.into(),
        value: Value::Float(0.05),
    }]);
    // Irregular read times must not change the trajectory.
    let mut t = 0.0;
    for dt in [0.03, 1.7, 0.33, 12.0, 0.01, 45.96] {
        t += dt;
        clock.set(Timestamp(t));
        dev.read(&[LEVEL.to_string()]);
    }
    let h = dev.read(&[LEVEL.to_string()])[0].value.clone().unwrap();
    let expect = level_at(&params, 0.05, t);
    assert_eq!(h, Value::Float(expect));
}

proptest! {
    #[test]
    fn level_stays_in_bounds(h0 in 0.0f64..2.0, q in 0.0f64..0.2, n in 1usize..400) {
        let p = TankParams::default();
        let mut s = TankState { level: h0, q_in: q, sim_time: 0.0 };
        for _ in 0..n {
            s = step_tank(s, &p);
            prop_assert!((0.0..=p.h_max).contains(&s.level));
        }
        prop_assert!((s.sim_time - n as f64 * p.dt).abs() < 1e-9);
    }

    #[test]
    fn level_moves_toward_equilibrium(h0 in 0.0f64..2.0, q in 0.0f64..0.07) {
        let p = TankParams::default();
        let eq = p.steady_level(q);
        let s = step_tank(TankState { level: h0, q_in: q, sim_time: 0.0 }, &p);
        prop_assert!((s.level - eq).abs() <= (h0 - eq).abs() + 1e-12);
    }
}
