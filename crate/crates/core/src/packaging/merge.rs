use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{PackageError, Resource, UnitOfLearning};
use crate::learning_design::{Manifest, validate_manifest};

/// How [`merge_packages`] resolves identifiers declared by both units.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConflictPolicy {
    Reject,
    PreferLeft,
    RenameRight { suffix: String },
}

/// Renames declarations and every reference to them.
fn rename_ids(m: &mut Manifest, map: &BTreeMap<String, String>) {
    let r = |s: &mut String| {
        if let Some(new) = map.get(s.as_str()) {
            *s = new.clone();
        }
    };
    for role in &mut m.roles {
        r(&mut role.id);
    }
    for a in &mut m.activities {
        r(&mut a.id);
        a.environment_refs.iter_mut().for_each(r);
        if let Some(c) = &mut a.content_ref {
            r(c);
        }
        if let Some(s) = &mut a.structure {
            s.children.iter_mut().for_each(r);
        }
    }
    for e in &mut m.environments {
        r(&mut e.id);
        e.learning_objects.iter_mut().for_each(r);
    }
    for p in &mut m.method.plays {
        r(&mut p.id);
        for act in &mut p.acts {
            r(&mut act.id);
            for rp in &mut act.role_parts {
                r(&mut rp.id);
                r(&mut rp.role_ref);
                r(&mut rp.activity_ref);
            }
        }
    }
    for res in &mut m.resources {
        r(&mut res.id);
    }
}

/// Drops declarations whose id is in `drop`. References are left alone:
/// they now resolve to the other unit's element of the same id.
fn drop_ids(m: &mut Manifest, drop: &BTreeSet<String>) {
    m.roles.retain(|x| !drop.contains(&x.id));
    m.activities.retain(|x| !drop.contains(&x.id));
    m.environments.retain(|x| !drop.contains(&x.id));
    m.resources.retain(|x| !drop.contains(&x.id));
    m.method.plays.retain(|p| !drop.contains(&p.id));
    for p in &mut m.method.plays {
        p.acts.retain(|a| !drop.contains(&a.id));
        for act in &mut p.acts {
            act.role_parts.retain(|rp| !drop.contains(&rp.id));
        }
        p.acts.retain(|a| !a.role_parts.is_empty());
    }
    m.method.plays.retain(|p| !p.acts.is_empty());
}

fn with_suffix_before_ext(path: &str, suffix: &str) -> String {
    let (dir, file) = match path.rsplit_once('/') {
        Some((d, f)) => (Some(d), f),
        None => (None, path),
    };
    let file = match file.rsplit_once('.') {
        Some((stem, ext)) if !stem.is_empty() => format!("{stem}{suffix}.{ext}"),
        _ => format!("{file}{suffix}"),
    };
    match dir {
        Some(d) => format!("{d}/{file}"),
        None => file,
    }
}

fn check_input(u: &UnitOfLearning, side: &str) -> Result<(), PackageError> {
    // An empty method is tolerated on input so that content-only units can be
    // merged into a scenario; the merged result must still validate.
    let report = validate_manifest(&u.manifest);
    let blocking: Vec<_> = report.errors().filter(|i| i.code != "EMPTY_METHOD").collect();
    if !blocking.is_empty() {
        return Err(PackageError::InvalidUnit(format!(
            "{side} unit is invalid: {} ({})",
            blocking[0].code, blocking[0].message
        )));
    }
    Ok(())
}

pub fn merge_packages(
    left: &UnitOfLearning,
    right: &UnitOfLearning,
    policy: &ConflictPolicy,
) -> Result<UnitOfLearning, PackageError> {
    check_input(left, "left")?;
    check_input(right, "right")?;

    let left_ids: BTreeSet<String> = left.manifest.declared_ids().into_iter().map(str::to_string).collect();
    let right_ids: BTreeSet<String> = right.manifest.declared_ids().into_iter().map(str::to_string).collect();
    let collisions: BTreeSet<String> = left_ids.intersection(&right_ids).cloned().collect();

    let left_paths: BTreeMap<&str, &str> = left
        .manifest
        .resources
        .iter()
        .map(|r| (r.href.as_str(), r.id.as_str()))
        .collect();
    let path_clashes: Vec<(String, String)> = right
        .manifest
        .resources
        .iter()
        .filter(|r| !collisions.contains(&r.id))
        .filter_map(|r| left_paths.get(r.href.as_str()).map(|lid| (r.id.clone(), lid.to_string())))
        .collect();

    let mut rm = right.manifest.clone();
    let mut right_resources: BTreeMap<String, Resource> = right.resources.clone();

    match policy {
        ConflictPolicy::Reject => {
            let mut all: Vec<String> = collisions.iter().cloned().collect();
            all.extend(path_clashes.iter().map(|(rid, _)| {
                format!("path:{}", right.manifest.resource(rid).map(|r| r.href.as_str()).unwrap_or(""))
            }));
            if !all.is_empty() {
                return Err(PackageError::IdConflict(all));
            }
        }
        ConflictPolicy::PreferLeft => {
            drop_ids(&mut rm, &collisions);
            right_resources.retain(|id, _| !collisions.contains(id));
            // Same file under a different id: reuse the left resource.
            let alias: BTreeMap<String, String> = path_clashes.into_iter().collect();
            let dropped: BTreeSet<String> = alias.keys().cloned().collect();
            drop_ids(&mut rm, &dropped);
            right_resources.retain(|id, _| !dropped.contains(id));
            rename_ids(&mut rm, &alias);
        }
        ConflictPolicy::RenameRight { suffix } => {
            if suffix.is_empty() {
                return Err(PackageError::InvalidUnit("rename suffix must be nonempty".into()));
            }
            let mut taken: BTreeSet<String> = left_ids.union(&right_ids).cloned().collect();
            let mut map = BTreeMap::new();
            for id in &collisions {
                let mut new = format!("{id}{suffix}");
                while taken.contains(&new) {
                    new.push_str(suffix);
                }
                taken.insert(new.clone());
                map.insert(id.clone(), new);
            }
            rename_ids(&mut rm, &map);
            right_resources = right_resources
                .into_iter()
                .map(|(id, res)| (map.get(&id).cloned().unwrap_or(id), res))
                .collect();

            let mut used_paths: BTreeSet<String> = left_paths.keys().map(|p| p.to_string()).collect();
            used_paths.extend(rm.resources.iter().map(|r| r.href.clone()));
            for r in &mut rm.resources {
                if left_paths.contains_key(r.href.as_str()) {
                    let mut new = with_suffix_before_ext(&r.href, suffix);
                    while used_paths.contains(&new) {
                        new = with_suffix_before_ext(&new, suffix);
                    }
                    used_paths.insert(new.clone());
                    if let Some(res) = right_resources.get_mut(&r.id) {
                        res.path = new.clone();
                    }
                    r.href = new;
                }
            }
        }
    }

    let mut manifest = left.manifest.clone();
    manifest.parse_warnings.clear();
    manifest.roles.extend(rm.roles);
    manifest.activities.extend(rm.activities);
    manifest.environments.extend(rm.environments);
    manifest.method.plays.extend(rm.method.plays);
    manifest.resources.extend(rm.resources);

    let mut resources = left.resources.clone();
    resources.extend(right_resources);

    let report = validate_manifest(&manifest);
    if !report.ok {
        return Err(PackageError::InvalidManifest(report));
    }
    Ok(UnitOfLearning {
        manifest,
        resources,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suffix_goes_before_extension() {
        assert_eq!(with_suffix_before_ext("content/a1.html", "_b"), "content/a1_b.html");
        assert_eq!(with_suffix_before_ext("README", "_b"), "README_b");
        assert_eq!(with_suffix_before_ext("x/.hidden", "_b"), "x/.hidden_b");
    }
}
