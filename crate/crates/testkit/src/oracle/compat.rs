//! Exhaustive compatibility matcher: scans every device item for every
//! required item rather than looking paths up.

use elab_core::compat::{RequirementSet, Violation, ViolationKind};
use elab_core::device::DeviceDescriptor;
use elab_core::types::{Access, Range};

fn access_bits(a: Access) -> (bool, bool) {
    match a {
        Access::Read => (true, false),
        Access::Write => (false, true),
        Access::ReadWrite => (true, true),
    }
}

fn interval_inside(inner: &Range, outer: &Range) -> bool {
    // Sample the inner interval's endpoints against the outer one.
    inner.lo >= outer.lo && inner.hi <= outer.hi
}

/// (class, path, kind) per violation for one descriptor.
pub fn violations_against(
    class: &str,
    req: &RequirementSet,
    d: &DeviceDescriptor,
) -> Vec<(String, String, ViolationKind)> {
    let mut out = Vec::new();
    let Some(items) = req.classes.get(class) else {
        return out;
    };
    for r in items.values() {
        let mut found = None;
        for it in &d.items {
            if it.path == r.path {
                found = Some(it);
            }
        }
        let Some(it) = found else {
            out.push((class.to_string(), r.path.clone(), ViolationKind::MissingItem));
            continue;
        };
        if format!("{:?}", it.data_type) != format!("{:?}", r.data_type) {
            out.push((class.to_string(), r.path.clone(), ViolationKind::TypeMismatch));
        }
        let (hr, hw) = access_bits(it.access);
        let (nr, nw) = access_bits(r.access);
        if (nr && !hr) || (nw && !hw) {
            out.push((class.to_string(), r.path.clone(), ViolationKind::AccessInsufficient));
        }
        if let (Some(need), Some(have)) = (&r.range, &it.range) {
            if !interval_inside(need, have) {
                out.push((class.to_string(), r.path.clone(), ViolationKind::RangeExceeds));
            }
        }
    }
    out
}

/// Expected (compatible, violations) using the best descriptor per class.
pub fn expected(req: &RequirementSet, descriptors: &[DeviceDescriptor]) -> (bool, Vec<(String, String, ViolationKind)>) {
    let mut all = Vec::new();
    for class in req.classes.keys() {
        let mut best: Option<(usize, String, Vec<_>)> = None;
        for d in descriptors.iter().filter(|d| &d.device_class == class) {
            let v = violations_against(class, req, d);
            let better = match &best {
                None => true,
                Some((n, id, _)) => v.len() < *n || (v.len() == *n && d.device_id < *id),
            };
            if better {
                best = Some((v.len(), d.device_id.clone(), v));
            }
        }
        match best {
            Some((_, _, v)) => all.extend(v),
            None => all.push((class.clone(), String::new(), ViolationKind::ClassUnavailable)),
        }
    }
    (all.is_empty(), all)
}

pub fn project(v: &[Violation]) -> Vec<(String, String, ViolationKind)> {
    v.iter()
        .map(|v| (v.device_class.clone(), v.path.clone(), v.kind))
        .collect()
}
