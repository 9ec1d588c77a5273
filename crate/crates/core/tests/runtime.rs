use std::collections::{BTreeMap, BTreeSet};

use elab_core::clock::Timestamp;
use elab_core::learning_design::Manifest;
use elab_core::runtime::{
    RunEventData, RunState, RuntimeError, create_run, replay_run, run_status,
};
use elab_testkit::oracle::runtime::{assignments, compare_exhaustively, enumerate_methods};
use elab_testkit::sample_unit;

fn sample() -> Manifest {
    sample_unit().manifest
}

fn people() -> BTreeMap<String, BTreeSet<String>> {
    [
        ("alice", "learner"),
        ("bob", "learner"),
        ("carol", "instructor"),
    ]
    .into_iter()
    .map(|(u, r)| (u.to_string(), BTreeSet::from([r.to_string()])))
    .collect()
}

fn visible_ids(run: &elab_core::runtime::Run, m: &Manifest, user: &str) -> Vec<String> {
    run.visible_activities(m, user)
        .unwrap()
        .into_iter()
        .filter(|v| v.actionable)
        .map(|v| v.activity_id)
        .collect()
}

#[test]
fn role_bounds_enforced_at_creation() {
    let m = sample();
    let mut too_many = people();
    too_many.insert("dave".into(), BTreeSet::from(["learner".to_string()]));
    assert!(matches!(
        create_run("r", "u", &m, too_many, Timestamp::ZERO),
        Err(RuntimeError::RoleOverfilled { .. })
    ));
    let mut none: BTreeMap<String, BTreeSet<String>> = people();
    none.remove("carol");
    assert!(matches!(
        create_run("r", "u", &m, none, Timestamp::ZERO),
        Err(RuntimeError::RoleUnderfilled { ref role, .. }) if role == "instructor"
    ));
    let mut ghost = people();
    ghost.insert("eve".into(), BTreeSet::from(["auditor".to_string()]));
    assert!(matches!(
        create_run("r", "u", &m, ghost, Timestamp::ZERO),
        Err(RuntimeError::UnknownRole(_))
    ));
}

#[test]
fn sample_scenario_runs_to_completion() {
    let m = sample();
    let (mut run, mut log) = create_run("run-1", "tank-level", &m, people(), Timestamp::ZERO).unwrap();
    // Nothing for the instructor in the intro act.
    assert!(visible_ids(&run, &m, "carol").is_empty());
    assert_eq!(visible_ids(&run, &m, "alice"), ["brief"]);
    assert!(matches!(
        run.complete_activity(&m, "alice", "fill", Timestamp(1.0)),
        Err(RuntimeError::NotVisible(_))
    ));

    let mut t = 1.0;
    let mut step = |run: &mut elab_core::runtime::Run, u: &str, a: &str, log: &mut Vec<_>| {
        t += 1.0;
        log.extend(run.complete_activity(&m, u, a, Timestamp(t)).unwrap());
    };
    step(&mut run, "alice", "brief", &mut log);
    assert!(matches!(
        run.complete_activity(&m, "alice", "brief", Timestamp(3.0)),
        Err(RuntimeError::AlreadyCompleted(_))
    ));
    step(&mut run, "bob", "brief", &mut log);
    assert!(matches!(log.last().unwrap().data, RunEventData::ActAdvanced { to_index: 1, .. }));

    // The hint stays hidden until staff reveals it.
    assert_eq!(visible_ids(&run, &m, "alice"), ["fill"]);
    assert!(matches!(
        run.notify(&m, "alice", "learner", "hint", Timestamp(9.0)),
        Err(RuntimeError::NotStaff(_))
    ));
    log.extend(run.notify(&m, "carol", "learner", "hint", Timestamp(10.0)).unwrap());
    assert_eq!(visible_ids(&run, &m, "alice"), ["fill", "hint"]);
    // A second notification does not reveal twice.
    let again = run.notify(&m, "carol", "learner", "hint", Timestamp(11.0)).unwrap();
    assert_eq!(again.len(), 1);
    log.extend(again);

    for u in ["alice", "bob"] {
        step(&mut run, u, "fill", &mut log);
        assert_eq!(visible_ids(&run, &m, u), ["steady", "hint"]);
        step(&mut run, u, "steady", &mut log);
        match &log.last().unwrap().data {
            RunEventData::ActivityCompleted { structures, .. } => assert_eq!(structures, &["experiment"]),
            other => panic!("unexpected {other:?}"),
        }
        step(&mut run, u, "hint", &mut log);
    }
    step(&mut run, "carol", "supervise", &mut log);
    assert_eq!(visible_ids(&run, &m, "alice"), ["report-plot", "report-table"]);
    step(&mut run, "alice", "report-plot", &mut log);
    assert!(visible_ids(&run, &m, "alice").is_empty());
    step(&mut run, "bob", "report-table", &mut log);
    let status = run_status(&run, &m);
    let alice = &status.users["alice"];
    assert_eq!((alice.completed, alice.total), (alice.total, 5));
    step(&mut run, "carol", "assess", &mut log);
    assert_eq!(run.status, RunState::Completed);
    let kinds: Vec<&str> = log.iter().rev().take(3).map(|e| e.data.kind()).collect();
    assert_eq!(kinds, ["RUN_DONE", "PLAY_DONE", "ACTIVITY_COMPLETED"]);
    assert!(matches!(
        run.complete_activity(&m, "alice", "report-table", Timestamp(99.0)),
        Err(RuntimeError::RunNotActive)
    ));

    let seqs: Vec<u64> = log.iter().map(|e| e.seq).collect();
    assert_eq!(seqs, (1..=log.len() as u64).collect::<Vec<_>>());
    assert_eq!(replay_run(&log).unwrap(), run);
    let json = serde_json::to_string(&log).unwrap();
    let back: Vec<elab_core::runtime::RunEvent> = serde_json::from_str(&json).unwrap();
    assert_eq!(back, log);
}

#[test]
fn progress_fraction_counts_leaves() {
    let m = sample();
    let (mut run, _) = create_run("r", "u", &m, people(), Timestamp::ZERO).unwrap();
    let s = run_status(&run, &m);
    // brief + fill + steady + hint + one report.
    assert_eq!(s.users["alice"].total, 5);
    assert_eq!(s.users["alice"].fraction, 0.0);
    assert_eq!(s.users["carol"].total, 2);
    run.complete_activity(&m, "alice", "brief", Timestamp(1.0)).unwrap();
    let s = run_status(&run, &m);
    assert!((s.users["alice"].fraction - 0.2).abs() < 1e-12);
    assert_eq!(s.plays[0].current_act_id.as_deref(), Some("act-intro"));
}

#[test]
fn replay_rejects_gaps() {
    let m = sample();
    let (mut run, mut log) = create_run("r", "u", &m, people(), Timestamp::ZERO).unwrap();
    log.extend(run.complete_activity(&m, "alice", "brief", Timestamp(1.0)).unwrap());
    log.extend(run.complete_activity(&m, "bob", "brief", Timestamp(2.0)).unwrap());
    log.remove(1);
    assert!(matches!(replay_run(&log), Err(RuntimeError::BadEvent(_))));
}

#[test]
fn methods_match_reference_automaton() {
    let methods = enumerate_methods();
    let mut states = 0;
    let mut runs = 0;
    for m in &methods {
        for users in assignments() {
            let cov = compare_exhaustively(m, &users)
                .unwrap_or_else(|e| panic!("divergence: {e}\nmethod: {:#?}\nusers: {users:?}", m.method));
            states += cov.states;
            runs += 1;
        }
    }
    assert!(runs > 30_000, "{runs}");
    assert!(states > runs);
}

#[test]
fn hidden_hint_holds_the_act_until_revealed_and_done() {
    let m = sample();
    let (mut run, _) = create_run("r", "u", &m, people(), Timestamp::ZERO).unwrap();
    for (u, a) in [
        ("alice", "brief"),
        ("bob", "brief"),
        ("alice", "fill"),
        ("bob", "fill"),
        ("alice", "steady"),
        ("bob", "steady"),
        ("carol", "supervise"),
    ] {
        run.complete_activity(&m, u, a, Timestamp(1.0)).unwrap();
    }
    let act = |run: &elab_core::runtime::Run| run_status(run, &m).plays[0].current_act_id.clone();
    assert_eq!(act(&run).as_deref(), Some("act-lab"));
    run.notify(&m, "carol", "learner", "hint", Timestamp(2.0)).unwrap();
    run.complete_activity(&m, "alice", "hint", Timestamp(3.0)).unwrap();
    assert_eq!(act(&run).as_deref(), Some("act-lab"));
    run.complete_activity(&m, "bob", "hint", Timestamp(3.0)).unwrap();
    assert_eq!(act(&run).as_deref(), Some("act-report"));
}
