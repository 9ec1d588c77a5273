use elab_core::compat::{CompatError, RequirementSet, ViolationKind, check_compat, requirements_of};
use elab_core::device::{DeviceDescriptor, Realism};
use elab_core::learning_design::{DeviceRequirement, ItemRequirement};
use elab_core::packaging::SliceSelector;
use elab_core::sim::{TANK_CLASS, TankParams, tank_descriptor};
use elab_core::types::{Access, DataType, Range};
use elab_testkit::generate::{descriptors, manifest_corpus, requirement_set, selector};
use elab_testkit::oracle::compat::{expected, project};
use elab_testkit::{rng, sample_unit};

fn tank() -> DeviceDescriptor {
    tank_descriptor("tank-1", Realism::RealConstrained, &TankParams::default())
}

fn need(path: &str, ty: DataType, access: Access, range: Option<(f64, f64)>) -> ItemRequirement {
    ItemRequirement {
        path: path.into(),
        data_type: ty,
        access,
        range: range.map(|(lo, hi)| Range::new(lo, hi)),
    }
}

#[test]
fn empty_requirements() {
    let mut m = sample_unit().manifest;
    for e in &mut m.environments {
        e.device_requirements.clear();
    }
    let req = requirements_of(&m, None).unwrap();
    assert!(req.is_empty());
    assert!(check_compat(&req, &[]).compatible);
}

#[test]
fn sample_unit_fits_the_tank() {
    let m = sample_unit().manifest;
    let req = requirements_of(&m, None).unwrap();
    let q = req.get(TANK_CLASS, "actuators/q_in").unwrap();
    assert_eq!(q.access, Access::ReadWrite);
    assert_eq!(q.range, Some(Range::new(0.0, 0.2)));
    let report = check_compat(&req, &[tank()]);
    assert!(report.compatible, "{:?}", report.violations);
    let none = check_compat(&req, &[]);
    assert_eq!(none.violations.len(), 1);
    assert_eq!(none.violations[0].kind, ViolationKind::ClassUnavailable);
}

#[test]
fn ranges_merge_by_hull() {
    let mut req = RequirementSet::default();
    req.add(TANK_CLASS, &need("actuators/q_in", DataType::Float, Access::Write, Some((0.0, 0.1))))
        .unwrap();
    req.add(TANK_CLASS, &need("actuators/q_in", DataType::Float, Access::Read, Some((0.05, 0.2))))
        .unwrap();
    let q = req.get(TANK_CLASS, "actuators/q_in").unwrap();
    assert_eq!(q.range, Some(Range::new(0.0, 0.2)));
    assert_eq!(q.access, Access::ReadWrite);
    // An unbounded need does not loosen a bounded one.
    req.add(TANK_CLASS, &need("actuators/q_in", DataType::Float, Access::Read, None)).unwrap();
    assert_eq!(req.get(TANK_CLASS, "actuators/q_in").unwrap().range, Some(Range::new(0.0, 0.2)));
}

#[test]
fn conflicting_types_across_activities() {
    let mut m = sample_unit().manifest;
    let mut extra = m.environments[0].clone();
    extra.id = "env-extra".into();
    extra.learning_objects.clear();
    extra.services.clear();
    extra.device_requirements = vec![DeviceRequirement {
        device_class: TANK_CLASS.into(),
        items: vec![need("actuators/q_in", DataType::Bool, Access::Write, None)],
    }];
    m.environments.push(extra);
    let target = m
        .activities
        .iter()
        .position(|a| a.id == "report-plot")
        .expect("sample has report-plot");
    m.activities[target].environment_refs.push("env-extra".into());
    assert!(matches!(
        requirements_of(&m, None),
        Err(CompatError::TypeConflict { ref path, first, second, .. })
            if path == "actuators/q_in" && first != second
    ));
    // A slice that avoids the conflicting activity is fine.
    let sel = SliceSelector::activities(["experiment"]);
    assert!(requirements_of(&m, Some(&sel)).is_ok());
    assert!(matches!(
        requirements_of(&m, Some(&SliceSelector::plays(["nope"]))),
        Err(CompatError::UnknownSelectorId(ids)) if ids == ["nope"]
    ));
}

#[test]
fn missing_item_and_range() {
    let mut req = RequirementSet::default();
    req.add(TANK_CLASS, &need("actuators/heater", DataType::Bool, Access::Write, None)).unwrap();
    req.add(TANK_CLASS, &need("actuators/q_in", DataType::Float, Access::Write, Some((0.0, 0.5))))
        .unwrap();
    req.add(TANK_CLASS, &need("sensors/level", DataType::Float, Access::ReadWrite, None)).unwrap();
    req.add(TANK_CLASS, &need("sensors/outflow", DataType::Int, Access::Read, None)).unwrap();
    let report = check_compat(&req, &[tank()]);
    assert!(!report.compatible);
    let kinds: Vec<_> = report.violations.iter().map(|v| (v.path.as_str(), v.kind)).collect();
    assert_eq!(
        kinds,
        [
            ("actuators/heater", ViolationKind::MissingItem),
            ("actuators/q_in", ViolationKind::RangeExceeds),
            ("sensors/level", ViolationKind::AccessInsufficient),
            ("sensors/outflow", ViolationKind::TypeMismatch),
        ]
    );
    assert!(report.violations.iter().all(|v| v.device_id.as_deref() == Some("tank-1")));
    assert!(report.violations[1].detail.contains("[0, 0.5]"));
}

#[test]
fn best_descriptor_wins() {
    let mut req = RequirementSet::default();
    req.add(TANK_CLASS, &need("actuators/q_in", DataType::Float, Access::Write, Some((0.0, 0.5))))
        .unwrap();
    let small = tank_descriptor("tank-a", Realism::Virtual, &TankParams::default());
    let big = tank_descriptor(
        "tank-b",
        Realism::Virtual,
        &TankParams {
            q_max: 1.0,
            ..TankParams::default()
        },
    );
    assert!(check_compat(&req, &[small.clone(), big.clone()]).compatible);
    let r = check_compat(&req, &[small.clone(), small.clone()]);
    assert_eq!(r.violations[0].device_id.as_deref(), Some("tank-a"));
}

#[test]
fn matches_exhaustive_matcher() {
    let mut rng = rng(21);
    let mut incompatible = 0;
    for case in 0..2000 {
        let req = requirement_set(&mut rng);
        let ds = descriptors(&mut rng);
        let report = check_compat(&req, &ds);
        let (ok, want) = expected(&req, &ds);
        assert_eq!(report.compatible, ok, "case {case}");
        assert_eq!(project(&report.violations), want, "case {case}: {req:?} {ds:?}");
        assert_eq!(report.compatible, report.violations.is_empty());
        assert_eq!(check_compat(&req, &ds), report, "deterministic");
        incompatible += usize::from(!ok);
    }
    // Both verdicts must be well represented.
    assert!((200..1800).contains(&incompatible), "{incompatible}");
}

#[test]
fn slicing_is_monotone_on_corpus() {
    let corpus = manifest_corpus(1, 200);
    let mut rng = rng(22);
    let mut pairs = 0;
    for (i, m) in corpus.iter().enumerate() {
        let whole = requirements_of(m, None).unwrap();
        let ds = descriptors(&mut rng);
        let whole_ok = check_compat(&whole, &ds).compatible;
        for _ in 0..5 {
            let sel = selector(m, &mut rng);
            let part = requirements_of(m, Some(&sel)).unwrap();
            assert!(part.is_subset_of(&whole), "manifest {i} {sel:?}");
            let report = check_compat(&part, &ds);
            assert!(!whole_ok || report.compatible, "manifest {i}");
            assert!(report.violations.len() <= check_compat(&whole, &ds).violations.len());
            pairs += 1;
        }
    }
    assert_eq!(pairs, 1000);
}
