use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{PackageError, UnitOfLearning};
use crate::learning_design::{Act, Manifest, Play, RoleKind, RolePart, validate_manifest};

/// Which part of a scenario to keep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceSelector {
    Plays(BTreeSet<String>),
    Activities(BTreeSet<String>),
}

impl SliceSelector {
    pub fn plays<I: IntoIterator<Item = S>, S: Into<String>>(ids: I) -> Self {
        SliceSelector::Plays(ids.into_iter().map(Into::into).collect())
    }

    pub fn activities<I: IntoIterator<Item = S>, S: Into<String>>(ids: I) -> Self {
        SliceSelector::Activities(ids.into_iter().map(Into::into).collect())
    }
}

pub(crate) fn fresh_id(base: &str, taken: &mut BTreeSet<String>) -> String {
    let base: String = base.chars().take(112).collect();
    let mut candidate = base.clone();
    let mut n = 2;
    while taken.contains(&candidate) {
        candidate = format!("{base}-{n}");
        n += 1;
    }
    taken.insert(candidate.clone());
    candidate
}

/// Method restricted to `sel`. Fails on unknown or empty selections.
fn select_method(m: &Manifest, sel: &SliceSelector) -> Result<Vec<Play>, PackageError> {
    match sel {
        SliceSelector::Plays(ids) => {
            if ids.is_empty() {
                return Err(PackageError::EmptySelection);
            }
            let unknown: Vec<String> = ids.iter().filter(|id| m.play(id).is_none()).cloned().collect();
            if !unknown.is_empty() {
                return Err(PackageError::UnknownSelectorId(unknown));
            }
            Ok(m.method
                .plays
                .iter()
                .filter(|p| ids.contains(&p.id))
                .cloned()
                .collect())
        }
        SliceSelector::Activities(ids) => {
            if ids.is_empty() {
                return Err(PackageError::EmptySelection);
            }
            let unknown: Vec<String> = ids
                .iter()
                .filter(|id| m.activity(id).is_none())
                .cloned()
                .collect();
            if !unknown.is_empty() {
                return Err(PackageError::UnknownSelectorId(unknown));
            }

            let mut taken: BTreeSet<String> = m.declared_ids().into_iter().map(str::to_string).collect();
            let mut role_parts: Vec<RolePart> = Vec::new();
            let mut bound: BTreeSet<(String, String)> = BTreeSet::new();
            for a in m.activities.iter().filter(|a| ids.contains(&a.id)) {
                let direct: Vec<&RolePart> = m.role_parts().filter(|rp| rp.activity_ref == a.id).collect();
                if !direct.is_empty() {
                    for rp in direct {
                        if bound.insert((rp.role_ref.clone(), rp.activity_ref.clone())) {
                            role_parts.push(rp.clone());
                        }
                    }
                    continue;
                }
                // Nested activity: bind it to the roles that reach it.
                let mut roles: Vec<&str> = Vec::new();
                for rp in m.role_parts() {
                    if m.activity_closure([rp.activity_ref.as_str()]).contains(&a.id)
                        && !roles.contains(&rp.role_ref.as_str())
                    {
                        roles.push(&rp.role_ref);
                    }
                }
                if roles.is_empty() {
                    roles = m
                        .roles
                        .iter()
                        .filter(|r| r.kind == RoleKind::Learner)
                        .map(|r| r.id.as_str())
                        .collect();
                }
                if roles.is_empty() {
                    roles = m.roles.iter().map(|r| r.id.as_str()).collect();
                }
                for role in roles {
                    if bound.insert((role.to_string(), a.id.clone())) {
                        role_parts.push(RolePart {
                            id: fresh_id(&format!("rp-{}-{}", a.id, role), &mut taken),
                            role_ref: role.to_string(),
                            activity_ref: a.id.clone(),
                        });
                    }
                }
            }
            let play_id = fresh_id(&format!("{}-slice", m.identifier), &mut taken);
            let act_id = fresh_id(&format!("{play_id}-act"), &mut taken);
            Ok(vec![Play {
                id: play_id,
                acts: vec![Act {
                    id: act_id,
                    role_parts,
                }],
            }])
        }
    }
}

/// Restricts a manifest to `plays` and everything they transitively reference.
pub(crate) fn restrict(m: &Manifest, plays: Vec<Play>) -> Manifest {
    let mut out = Manifest::empty(&m.identifier, &m.title);
    out.method.plays = plays;

    let roots: Vec<&str> = out.role_parts().map(|rp| rp.activity_ref.as_str()).collect();
    let activities = m.activity_closure(roots);
    let roles: BTreeSet<&str> = out.role_parts().map(|rp| rp.role_ref.as_str()).collect();
    let (envs, resources) = m.referenced_by(&activities);

    out.roles = m.roles.iter().filter(|r| roles.contains(r.id.as_str())).cloned().collect();
    out.activities = m
        .activities
        .iter()
        .filter(|a| activities.contains(&a.id))
        .cloned()
        .collect();
    out.environments = m
        .environments
        .iter()
        .filter(|e| envs.contains(&e.id))
        .cloned()
        .collect();
    out.resources = m
        .resources
        .iter()
        .filter(|r| resources.contains(&r.id))
        .cloned()
        .collect();
    out
}

/// Manifest-level slice: the selected part plus its reference closure.
pub fn slice_manifest(m: &Manifest, sel: &SliceSelector) -> Result<Manifest, PackageError> {
    let plays = select_method(m, sel)?;
    let out = restrict(m, plays);
    let report = validate_manifest(&out);
    if !report.ok {
        return Err(PackageError::InvalidManifest(report));
    }
    Ok(out)
}

pub fn slice_package(uol: &UnitOfLearning, sel: &SliceSelector) -> Result<UnitOfLearning, PackageError> {
    let manifest = slice_manifest(&uol.manifest, sel)?;
    let resources = uol
        .resources
        .iter()
        .filter(|(id, _)| manifest.resource(id).is_some())
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    Ok(UnitOfLearning {
        manifest,
        resources,
    })
}
