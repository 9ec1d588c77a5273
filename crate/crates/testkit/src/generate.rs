//! Random generators for manifests, units of learning and protocol traffic.

use std::collections::{BTreeMap, BTreeSet};

use elab_core::compat::RequirementSet;
use elab_core::device::{DeviceDescriptor, Item, Realism, WriteRequest};
use elab_core::learning_design::{
    Act, Activity, ActivityKind, Completion, DeviceRequirement, Environment, ItemRequirement,
    Manifest, MaxPersons, Play, ResourceRef, Role, RoleKind, RolePart, Structure, StructureMode,
};
use elab_core::packaging::{SliceSelector, UnitOfLearning};
use elab_core::protocol::{DaRequest, RequestBody, SubscribeItem};
use elab_core::types::{Access, DataType, Range, Value};
use proptest::prelude::*;
use rand::Rng;
use rand::rngs::StdRng;
use rand::seq::IndexedRandom;

pub const TITLES: &[&str] = &[
    "Intro",
    "Fill & drain",
    "Level <1 m>",
    "\"Quoted\" 'title'",
    "Tab\there",
    "Line\nbreak",
    "Ünïcødé ☃",
    "  spaced  ",
    "",
];

/// (class, path, type) triples requirements are drawn from. Types are fixed
/// per path so generated scenarios never conflict with themselves.
pub const REQUIREMENT_POOL: &[(&str, &str, DataType)] = &[
    ("tank", "actuators/q_in", DataType::Float),
    ("tank", "sensors/level", DataType::Float),
    ("tank", "sensors/outflow", DataType::Float),
    ("tank", "actuators/heater", DataType::Bool),
    ("tank", "status/mode", DataType::String),
    ("signal-source", "setpoint", DataType::Float),
    ("signal-source", "mirror", DataType::Float),
    ("laser", "power", DataType::Int),
];

fn access(rng: &mut StdRng) -> Access {
    *[Access::Read, Access::Write, Access::ReadWrite].choose(rng).unwrap()
}

/// Range on a 0.05 grid within [-0.1, 0.4].
pub fn grid_range(rng: &mut StdRng) -> Range {
    let a = rng.random_range(-2i32..=8) as f64 * 0.05;
    let b = rng.random_range(-2i32..=8) as f64 * 0.05;
    Range::new(a.min(b), a.max(b))
}

fn title(rng: &mut StdRng) -> String {
    TITLES.choose(rng).unwrap().to_string()
}

fn requirement(rng: &mut StdRng) -> DeviceRequirement {
    let class = *["tank", "tank", "signal-source", "laser"].choose(rng).unwrap();
    let pool: Vec<_> = REQUIREMENT_POOL.iter().filter(|(c, _, _)| *c == class).collect();
    let n = rng.random_range(0..=pool.len());
    let mut items: Vec<ItemRequirement> = pool
        .choose_multiple(rng, n)
        .map(|(_, path, ty)| ItemRequirement {
            path: path.to_string(),
            data_type: *ty,
            access: access(rng),
            range: (ty.is_numeric() && rng.random_bool(0.6)).then(|| grid_range(rng)),
        })
        .collect();
    items.sort_by(|a, b| a.path.cmp(&b.path));
    DeviceRequirement {
        device_class: class.to_string(),
        items,
    }
}

/// A random manifest that passes validation.
pub fn manifest(rng: &mut StdRng) -> Manifest {
    let mut m = Manifest::empty(&format!("uol-{}", rng.random::<u32>()), &title(rng));

    let n_roles = rng.random_range(1..=3);
    for i in 0..n_roles {
        let min = rng.random_range(0..=2);
        m.roles.push(Role {
            id: format!("r{i}"),
            kind: if i == 0 || rng.random_bool(0.5) {
                RoleKind::Learner
            } else {
                RoleKind::Staff
            },
            min_persons: min,
            max_persons: if rng.random_bool(0.3) {
                MaxPersons::Unbounded
            } else {
                MaxPersons::Bounded(min.max(1) + rng.random_range(0..=2))
            },
        });
    }

    let n_res = rng.random_range(0..=4);
    for i in 0..n_res {
        let ext = *["html", "pdf", "png", "txt", "bin"].choose(rng).unwrap();
        m.resources.push(ResourceRef {
            id: format!("res{i}"),
            href: format!("content/{}/res{i}.{ext}", rng.random_range(0..3)),
            media_type: rng.random_bool(0.3).then(|| "application/x-custom".to_string()),
        });
    }
    let res_ids: Vec<String> = m.resources.iter().map(|r| r.id.clone()).collect();

    let n_env = rng.random_range(0..=3);
    for i in 0..n_env {
        let los = if res_ids.is_empty() {
            Vec::new()
        } else {
            let k = rng.random_range(0..=res_ids.len().min(2));
            res_ids.choose_multiple(rng, k).cloned().collect()
        };
        let n_req = rng.random_range(0..=2);
        let mut reqs: Vec<DeviceRequirement> = (0..n_req).map(|_| requirement(rng)).collect();
        reqs.dedup_by(|a, b| a.device_class == b.device_class);
        m.environments.push(Environment {
            id: format!("e{i}"),
            learning_objects: los,
            services: (0..rng.random_range(0..=2)).map(|j| format!("svc-{j}")).collect(),
            device_requirements: reqs,
        });
    }
    let env_ids: Vec<String> = m.environments.iter().map(|e| e.id.clone()).collect();

    let n_leaves = rng.random_range(1..=5);
    for i in 0..n_leaves {
        let support = rng.random_bool(0.3);
        let mut a = Activity::learning(&format!("a{i}"), &title(rng));
        if support {
            a.kind = ActivityKind::Support;
            a.initially_hidden = rng.random_bool(0.5);
        }
        if !env_ids.is_empty() {
            let k = rng.random_range(0..=env_ids.len().min(2));
            a.environment_refs = env_ids.choose_multiple(rng, k).cloned().collect();
        }
        if !res_ids.is_empty() && rng.random_bool(0.5) {
            a.content_ref = Some(res_ids.choose(rng).unwrap().clone());
        }
        m.activities.push(a);
    }
    let n_struct = rng.random_range(0..=2);
    for i in 0..n_struct {
        // Children come from earlier activities only, so no cycles arise.
        let pool: Vec<String> = m.activities.iter().map(|a| a.id.clone()).collect();
        let k = rng.random_range(1..=pool.len().min(3));
        let children: Vec<String> = pool.choose_multiple(rng, k).cloned().collect();
        let mode = if rng.random_bool(0.5) {
            StructureMode::Sequence
        } else {
            StructureMode::Selection
        };
        let mut a = Activity::learning(&format!("s{i}"), &title(rng));
        a.kind = ActivityKind::Structure;
        a.completion = Completion::AutoOnChildren;
        a.structure = Some(Structure {
            mode,
            number_to_select: (mode == StructureMode::Selection)
                .then(|| rng.random_range(1..=children.len() as u32)),
            children,
        });
        if !env_ids.is_empty() && rng.random_bool(0.3) {
            a.environment_refs = vec![env_ids.choose(rng).unwrap().clone()];
        }
        m.activities.push(a);
    }
    let act_ids: Vec<String> = m.activities.iter().map(|a| a.id.clone()).collect();
    let role_ids: Vec<String> = m.roles.iter().map(|r| r.id.clone()).collect();

    let n_plays = rng.random_range(1..=2);
    for p in 0..n_plays {
        let acts = (0..rng.random_range(1..=3))
            .map(|a| Act {
                id: format!("p{p}-act{a}"),
                role_parts: (0..rng.random_range(1..=3))
                    .map(|r| RolePart {
                        id: format!("p{p}-act{a}-rp{r}"),
                        role_ref: role_ids.choose(rng).unwrap().clone(),
                        activity_ref: act_ids.choose(rng).unwrap().clone(),
                    })
                    .collect(),
            })
            .collect();
        m.method.plays.push(Play {
            id: format!("p{p}"),
            acts,
        });
    }
    m
}

pub fn manifest_corpus(seed: u64, n: usize) -> Vec<Manifest> {
    let mut rng = crate::rng(seed);
    (0..n).map(|_| manifest(&mut rng)).collect()
}

pub fn arb_manifest() -> impl Strategy<Value = Manifest> {
    any::<u64>().prop_map(|s| manifest(&mut crate::rng(s)))
}

/// The manifest plus random bytes for each resource.
pub fn unit_for(m: &Manifest, rng: &mut StdRng) -> UnitOfLearning {
    let bytes: BTreeMap<String, Vec<u8>> = m
        .resources
        .iter()
        .map(|r| {
            let len = rng.random_range(0..200);
            (r.id.clone(), (0..len).map(|_| rng.random::<u8>()).collect())
        })
        .collect();
    UnitOfLearning::from_parts(m.clone(), bytes)
}

pub fn arb_unit() -> impl Strategy<Value = UnitOfLearning> {
    any::<u64>().prop_map(|s| {
        let mut rng = crate::rng(s);
        let m = manifest(&mut rng);
        unit_for(&m, &mut rng)
    })
}

/// Up to six merged item needs over the requirement pool.
pub fn requirement_set(rng: &mut StdRng) -> RequirementSet {
    let mut out = RequirementSet::default();
    for _ in 0..rng.random_range(0..=6) {
        let (class, path, ty) = *REQUIREMENT_POOL.choose(rng).unwrap();
        let req = ItemRequirement {
            path: path.to_string(),
            data_type: ty,
            access: access(rng),
            range: (ty.is_numeric() && rng.random_bool(0.6)).then(|| grid_range(rng)),
        };
        out.add(class, &req).expect("pool types are fixed per path");
    }
    out
}

/// A descriptor of `class` exposing a random subset of the pool's paths,
/// occasionally with the wrong type.
pub fn descriptor(rng: &mut StdRng, class: &str, device_id: &str) -> DeviceDescriptor {
    let types = [DataType::Float, DataType::Int, DataType::Bool, DataType::String];
    let mut items = Vec::new();
    for (_, path, ty) in REQUIREMENT_POOL.iter().filter(|(c, _, _)| *c == class) {
        if !rng.random_bool(0.75) {
            continue;
        }
        let data_type = if rng.random_bool(0.15) { *types.choose(rng).unwrap() } else { *ty };
        items.push(Item {
            path: path.to_string(),
            data_type,
            access: access(rng),
            engineering_unit: String::new(),
            range: (data_type.is_numeric() && rng.random_bool(0.7)).then(|| grid_range(rng)),
            state: rng.random_bool(0.5),
        });
    }
    DeviceDescriptor {
        device_id: device_id.to_string(),
        device_class: class.to_string(),
        realism: if rng.random_bool(0.5) { Realism::Virtual } else { Realism::RealConstrained },
        items,
        constraints: None,
    }
}

/// Zero to four descriptors over the pool's classes.
pub fn descriptors(rng: &mut StdRng) -> Vec<DeviceDescriptor> {
    let classes = ["tank", "signal-source", "laser"];
    (0..rng.random_range(0..=4))
        .map(|i| {
            let class = *classes.choose(rng).unwrap();
            descriptor(rng, class, &format!("{class}-{}", 4 - i))
        })
        .collect()
}

/// Random nonempty selector over the manifest's plays or top-level activities.
pub fn selector(m: &Manifest, rng: &mut StdRng) -> SliceSelector {
    if rng.random_bool(0.5) {
        let ids: Vec<&str> = m.method.plays.iter().map(|p| p.id.as_str()).collect();
        let k = rng.random_range(1..=ids.len());
        SliceSelector::plays(ids.choose_multiple(rng, k).copied())
    } else {
        let ids: BTreeSet<&str> = m.role_parts().map(|rp| rp.activity_ref.as_str()).collect();
        let ids: Vec<&str> = ids.into_iter().collect();
        let k = rng.random_range(1..=ids.len());
        SliceSelector::activities(ids.choose_multiple(rng, k).copied())
    }
}

fn arb_text() -> impl Strategy<Value = String> {
    prop_oneof![
        "[a-z0-9/_.-]{0,12}",
        Just("sensors/level".to_string()),
        Just("actuators/q_in".to_string()),
        "\\PC{0,8}",
    ]
}

pub fn arb_value() -> impl Strategy<Value = Value> {
    prop_oneof![
        any::<f64>()
            .prop_filter("finite", |x| x.is_finite())
            .prop_map(Value::Float),
        (-1e6f64..1e6).prop_map(Value::Float),
        any::<i64>().prop_map(Value::Int),
        any::<bool>().prop_map(Value::Bool),
        "\\PC{0,10}".prop_map(Value::String),
    ]
}

fn arb_deadband() -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.0), 0.0f64..10.0, (0u32..100).prop_map(|n| n as f64 * 0.01)]
}

pub fn arb_request() -> impl Strategy<Value = DaRequest> {
    let device = prop_oneof![Just("tank-1".to_string()), "[a-z0-9-]{1,10}"];
    let body = prop_oneof![
        Just(RequestBody::GetStatus),
        (device.clone(), arb_text()).prop_map(|(device, path)| RequestBody::Browse { device, path }),
        (device.clone(), prop::collection::vec(arb_text(), 0..4))
            .prop_map(|(device, paths)| RequestBody::Read { device, paths }),
        (
            device.clone(),
            prop::collection::vec((arb_text(), arb_value()), 0..4)
        )
            .prop_map(|(device, ws)| RequestBody::Write {
                device,
                writes: ws
                    .into_iter()
                    .map(|(path, value)| WriteRequest { path, value })
                    .collect(),
            }),
        (
            device,
            prop::collection::vec((arb_text(), arb_deadband()), 0..4),
            prop::option::of(prop_oneof![Just(60.0), 0.5f64..1000.0]),
        )
            .prop_map(|(device, items, ttl)| RequestBody::Subscribe {
                device,
                items: items
                    .into_iter()
                    .map(|(path, deadband)| SubscribeItem { path, deadband })
                    .collect(),
                ttl,
            }),
        "sub-[0-9]{1,3}".prop_map(|handle| RequestBody::SubscriptionPolledRefresh { handle }),
        "sub-[0-9]{1,3}".prop_map(|handle| RequestBody::SubscriptionCancel { handle }),
    ];
    (prop::option::of("\\PC{0,8}"), body).prop_map(|(client_handle, body)| DaRequest { client_handle, body })
}
