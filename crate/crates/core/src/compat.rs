//! Structural compatibility between a scenario's device requirements and
//! concrete device descriptors: presence, type, access and range.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::device::DeviceDescriptor;
use crate::learning_design::{ItemRequirement, Manifest};
use crate::packaging::{PackageError, SliceSelector, slice_manifest};
use crate::types::{DataType, Range};

#[derive(Debug, thiserror::Error)]
pub enum CompatError {
    #[error("unknown selector ids: {}", .0.join(", "))]
    UnknownSelectorId(Vec<String>),
    #[error("`{device_class}:{path}` is required both as {first} and as {second}")]
    TypeConflict {
        device_class: String,
        path: String,
        first: DataType,
        second: DataType,
    },
    #[error(transparent)]
    Package(PackageError),
}

impl From<PackageError> for CompatError {
    fn from(e: PackageError) -> Self {
        match e {
            PackageError::UnknownSelectorId(ids) => CompatError::UnknownSelectorId(ids),
            other => CompatError::Package(other),
        }
    }
}

/// Merged item needs, per device class and path.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RequirementSet {
    pub classes: BTreeMap<String, BTreeMap<String, ItemRequirement>>,
}

impl RequirementSet {
    pub fn is_empty(&self) -> bool {
        self.classes.values().all(BTreeMap::is_empty)
    }

    pub fn get(&self, class: &str, path: &str) -> Option<&ItemRequirement> {
        self.classes.get(class)?.get(path)
    }

    /// Adds one requirement: access needs are unioned, ranges hulled.
    pub fn add(&mut self, class: &str, req: &ItemRequirement) -> Result<(), CompatError> {
        let items = self.classes.entry(class.to_string()).or_default();
        match items.get_mut(&req.path) {
            None => {
                items.insert(req.path.clone(), req.clone());
            }
            Some(have) => {
                if have.data_type != req.data_type {
                    return Err(CompatError::TypeConflict {
                        device_class: class.to_string(),
                        path: req.path.clone(),
                        first: have.data_type,
                        second: req.data_type,
                    });
                }
                have.access = have.access.union(req.access);
                have.range = match (have.range, req.range) {
                    (Some(a), Some(b)) => Some(a.hull(&b)),
                    (a, b) => a.or(b),
                };
            }
        }
        Ok(())
    }

    /// True when every need in `self` is implied by a need in `other`.
    pub fn is_subset_of(&self, other: &RequirementSet) -> bool {
        self.classes.iter().all(|(class, items)| {
            items.values().all(|r| match other.get(class, &r.path) {
                None => false,
                Some(o) => {
                    o.data_type == r.data_type
                        && o.access.subsumes(r.access)
                        && match (r.range, o.range) {
                            (None, _) => true,
                            (Some(_), None) => false,
                            (Some(a), Some(b)) => b.contains_range(&a),
                        }
                }
            })
        })
    }
}

/// Device requirements reachable from the selected part of the scenario,
/// or from every activity when no selector is given.
pub fn requirements_of(m: &Manifest, sel: Option<&SliceSelector>) -> Result<RequirementSet, CompatError> {
    let sliced;
    let m = match sel {
        Some(sel) => {
            sliced = slice_manifest(m, sel)?;
            &sliced
        }
        None => m,
    };
    let activities: BTreeSet<String> = m.activities.iter().map(|a| a.id.clone()).collect();
    let (envs, _) = m.referenced_by(&activities);
    let mut out = RequirementSet::default();
    for env in envs.iter().filter_map(|id| m.environment(id)) {
        for dr in &env.device_requirements {
            out.classes.entry(dr.device_class.clone()).or_default();
            for item in &dr.items {
                out.add(&dr.device_class, item)?;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ViolationKind {
    ClassUnavailable,
    MissingItem,
    TypeMismatch,
    AccessInsufficient,
    RangeExceeds,
}

impl ViolationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationKind::ClassUnavailable => "CLASS_UNAVAILABLE",
            ViolationKind::MissingItem => "MISSING_ITEM",
            ViolationKind::TypeMismatch => "TYPE_MISMATCH",
            ViolationKind::AccessInsufficient => "ACCESS_INSUFFICIENT",
            ViolationKind::RangeExceeds => "RANGE_EXCEEDS",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub device_class: String,
    /// Empty for CLASS_UNAVAILABLE.
    pub path: String,
    pub kind: ViolationKind,
    /// Descriptor the violation was measured against, if any.
    pub device_id: Option<String>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompatReport {
    pub compatible: bool,
    pub violations: Vec<Violation>,
}

fn fmt_range(r: &Range) -> String {
    format!("[{}, {}]", r.lo, r.hi)
}

/// Violations of `d` against one class's requirements, in path order.
pub fn violations_for(class: &str, items: &BTreeMap<String, ItemRequirement>, d: &DeviceDescriptor) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |path: &str, kind, detail: String| {
        out.push(Violation {
            device_class: class.to_string(),
            path: path.to_string(),
            kind,
            device_id: Some(d.device_id.clone()),
            detail,
        })
    };
    for r in items.values() {
        let Some(item) = d.item(&r.path) else {
            push(&r.path, ViolationKind::MissingItem, format!("`{}` has no item `{}`", d.device_id, r.path));
            continue;
        };
        if item.data_type != r.data_type {
            push(
                &r.path,
                ViolationKind::TypeMismatch,
                format!("required {}, device has {}", r.data_type, item.data_type),
            );
        }
        if !item.access.subsumes(r.access) {
            push(
                &r.path,
                ViolationKind::AccessInsufficient,
                format!("required {}, device allows {}", r.access, item.access),
            );
        }
        if let (Some(need), Some(have)) = (r.range, item.range) {
            if !have.contains_range(&need) {
                push(
                    &r.path,
                    ViolationKind::RangeExceeds,
                    format!("required {} exceeds device {}", fmt_range(&need), fmt_range(&have)),
                );
            }
        }
    }
    out
}

/// For each required class, reports the violations of the best-matching
/// descriptor: fewest violations, ties broken by device id.
pub fn check_compat(req: &RequirementSet, descriptors: &[DeviceDescriptor]) -> CompatReport {
    let mut violations = Vec::new();
    for (class, items) in &req.classes {
        let mut candidates: Vec<&DeviceDescriptor> =
            descriptors.iter().filter(|d| &d.device_class == class).collect();
        candidates.sort_by(|a, b| a.device_id.cmp(&b.device_id));
        let best = candidates
            .iter()
            .map(|d| violations_for(class, items, d))
            .min_by_key(Vec::len);
        match best {
            Some(v) => violations.extend(v),
            None => violations.push(Violation {
                device_class: class.clone(),
                path: String::new(),
                kind: ViolationKind::ClassUnavailable,
                device_id: None,
                detail: format!("no device of class `{class}`"),
            }),
        }
    }
    CompatReport {
        compatible: violations.is_empty(),
        violations,
    }
}
