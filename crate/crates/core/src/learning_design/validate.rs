use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{ActivityKind, Completion, Manifest, MaxPersons, StructureMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub severity: Severity,
    pub code: String,
    pub element_id: String,
    pub message: String,
}

impl Issue {
    pub fn error(code: &str, element_id: &str, message: impl Into<String>) -> Self {
        Issue {
            severity: Severity::Error,
            code: code.to_string(),
            element_id: element_id.to_string(),
            message: message.into(),
        }
    }

    pub fn warning(code: &str, element_id: &str, message: impl Into<String>) -> Self {
        Issue {
            severity: Severity::Warning,
            code: code.to_string(),
            element_id: element_id.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn from_issues(issues: Vec<Issue>) -> Self {
        let ok = !issues.iter().any(|i| i.severity == Severity::Error);
        ValidationReport { ok, issues }
    }

    pub fn error_count(&self) -> usize {
        self.errors().count()
    }

    pub fn errors(&self) -> impl Iterator<Item = &Issue> {
        self.issues.iter().filter(|i| i.severity == Severity::Error)
    }

    pub fn has(&self, code: &str) -> bool {
        self.issues.iter().any(|i| i.code == code)
    }
}

/// Identifiers: nonempty, at most 128 chars of `[A-Za-z0-9._-]`.
pub fn is_valid_identifier(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'))
}

/// Package-relative, normalized, no `..`, `.`, empty segments or backslashes.
pub(crate) fn is_normalized_relative_path(path: &str) -> bool {
    !path.is_empty()
        && !path.starts_with('/')
        && !path.contains('\\')
        && path
            .split('/')
            .all(|seg| !seg.is_empty() && seg != "." && seg != "..")
}

/// Checks every manifest invariant. Never fails; violations are returned as
/// issues with stable codes, in a deterministic order.
pub fn validate_manifest(m: &Manifest) -> ValidationReport {
    let mut issues: Vec<Issue> = m.parse_warnings.clone();

    check_identifiers(m, &mut issues);
    check_roles(m, &mut issues);
    check_activities(m, &mut issues);
    check_environments(m, &mut issues);
    check_method(m, &mut issues);
    check_resources(m, &mut issues);

    ValidationReport::from_issues(issues)
}

fn check_identifiers(m: &Manifest, issues: &mut Vec<Issue>) {
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    let mut reported: BTreeSet<&str> = BTreeSet::new();
    for id in m.declared_ids() {
        if !is_valid_identifier(id) {
            issues.push(Issue::error(
                "INVALID_ID",
                id,
                format!("identifier `{id}` must be 1-128 chars of [A-Za-z0-9._-]"),
            ));
        }
        if !seen.insert(id) && reported.insert(id) {
            issues.push(Issue::error(
                "DUPLICATE_ID",
                id,
                format!("identifier `{id}` is declared more than once"),
            ));
        }
    }
}

fn check_roles(m: &Manifest, issues: &mut Vec<Issue>) {
    for r in &m.roles {
        match r.max_persons {
            MaxPersons::Bounded(0) => issues.push(Issue::error(
                "ROLE_BOUNDS",
                &r.id,
                "max-persons must be positive",
            )),
            MaxPersons::Bounded(max) if r.min_persons > max => issues.push(Issue::error(
                "ROLE_BOUNDS",
                &r.id,
                format!("min-persons {} exceeds max-persons {max}", r.min_persons),
            )),
            _ => {}
        }
    }
}

fn dangling(issues: &mut Vec<Issue>, element_id: &str, what: &str, target: &str) {
    issues.push(Issue::error(
        "DANGLING_REF",
        element_id,
        format!("{what} `{target}` is not declared"),
    ));
}

fn check_activities(m: &Manifest, issues: &mut Vec<Issue>) {
    let kinds = m.id_kinds();
    let is = |id: &str, kind: &str| kinds.get(id).copied() == Some(kind);

    for a in &m.activities {
        for env in &a.environment_refs {
            if !is(env, "environment") {
                dangling(issues, &a.id, "environment", env);
            }
        }
        if let Some(res) = &a.content_ref {
            if !is(res, "resource") {
                dangling(issues, &a.id, "resource", res);
            }
        }

        let is_structure = a.kind == ActivityKind::Structure;
        match (&a.structure, is_structure) {
            (Some(_), false) => issues.push(Issue::error(
                "STRUCTURE_MISMATCH",
                &a.id,
                "only STRUCTURE activities may carry a structure",
            )),
            (None, true) => issues.push(Issue::error(
                "STRUCTURE_MISMATCH",
                &a.id,
                "STRUCTURE activity has no structure",
            )),
            _ => {}
        }
        if is_structure && a.completion != Completion::AutoOnChildren {
            issues.push(Issue::error(
                "STRUCTURE_COMPLETION",
                &a.id,
                "STRUCTURE activities complete automatically on their children",
            ));
        }
        if !is_structure && a.completion == Completion::AutoOnChildren {
            issues.push(Issue::error(
                "STRUCTURE_COMPLETION",
                &a.id,
                "only STRUCTURE activities may complete on children",
            ));
        }
        if a.initially_hidden && a.kind != ActivityKind::Support {
            issues.push(Issue::error(
                "HIDDEN_NOT_SUPPORT",
                &a.id,
                "only SUPPORT activities may be initially hidden",
            ));
        }

        if let Some(s) = &a.structure {
            if s.children.is_empty() {
                issues.push(Issue::error(
                    "EMPTY_STRUCTURE",
                    &a.id,
                    "structure has no children",
                ));
            }
            for child in &s.children {
                if !is(child, "activity") {
                    dangling(issues, &a.id, "activity", child);
                }
            }
            match (s.mode, s.number_to_select) {
                (StructureMode::Selection, None) => issues.push(Issue::error(
                    "SELECTION_COUNT",
                    &a.id,
                    "selection requires number-to-select",
                )),
                (StructureMode::Selection, Some(n)) if n == 0 || n as usize > s.children.len() => {
                    issues.push(Issue::error(
                        "SELECTION_COUNT",
                        &a.id,
                        format!(
                            "number-to-select {n} must be in 1..={}",
                            s.children.len()
                        ),
                    ))
                }
                (StructureMode::Sequence, Some(_)) => issues.push(Issue::error(
                    "SELECTION_COUNT",
                    &a.id,
                    "number-to-select only applies to selections",
                )),
                _ => {}
            }
        }
    }

    for id in structure_cycles(m) {
        issues.push(Issue::error(
            "STRUCTURE_CYCLE",
            &id,
            format!("structure `{id}` contains itself through its children"),
        ));
    }
}

/// Structure activities lying on a cycle of the child graph, in declaration order.
fn structure_cycles(m: &Manifest) -> Vec<String> {
    let children: BTreeMap<&str, Vec<&str>> = m
        .activities
        .iter()
        .filter_map(|a| {
            a.structure
                .as_ref()
                .map(|s| (a.id.as_str(), s.children.iter().map(String::as_str).collect()))
        })
        .collect();

    let mut out = Vec::new();
    for a in &m.activities {
        let Some(start) = children.get(a.id.as_str()) else {
            continue;
        };
        // Does a path from one of `a`'s children lead back to `a`?
        let mut seen = BTreeSet::new();
        let mut stack: Vec<&str> = start.clone();
        let mut cyclic = false;
        while let Some(id) = stack.pop() {
            if id == a.id {
                cyclic = true;
                break;
            }
            if seen.insert(id) {
                if let Some(next) = children.get(id) {
                    stack.extend(next.iter().copied());
                }
            }
        }
        if cyclic {
            out.push(a.id.clone());
        }
    }
    out
}

fn check_environments(m: &Manifest, issues: &mut Vec<Issue>) {
    let kinds = m.id_kinds();
    for e in &m.environments {
        for lo in &e.learning_objects {
            if kinds.get(lo.as_str()).copied() != Some("resource") {
                dangling(issues, &e.id, "resource", lo);
            }
        }
        for req in &e.device_requirements {
            if req.device_class.is_empty() {
                issues.push(Issue::error(
                    "INVALID_REQUIREMENT",
                    &e.id,
                    "device requirement without a device class",
                ));
            }
            let mut paths = BTreeSet::new();
            for item in &req.items {
                if !paths.insert(item.path.as_str()) {
                    issues.push(Issue::error(
                        "DUPLICATE_PATH",
                        &e.id,
                        format!(
                            "path `{}` repeated in requirement for `{}`",
                            item.path, req.device_class
                        ),
                    ));
                }
                if let Some(r) = &item.range {
                    if !item.data_type.is_numeric() {
                        issues.push(Issue::error(
                            "INVALID_RANGE",
                            &e.id,
                            format!("range on non-numeric item `{}`", item.path),
                        ));
                    } else if !r.is_valid() {
                        issues.push(Issue::error(
                            "INVALID_RANGE",
                            &e.id,
                            format!("range [{}, {}] on `{}` has lo > hi", r.lo, r.hi, item.path),
                        ));
                    }
                }
            }
        }
    }
}

fn check_method(m: &Manifest, issues: &mut Vec<Issue>) {
    let kinds = m.id_kinds();
    if m.method.plays.is_empty() {
        issues.push(Issue::error(
            "EMPTY_METHOD",
            &m.identifier,
            "method must contain at least one play",
        ));
    }
    for play in &m.method.plays {
        if play.acts.is_empty() {
            issues.push(Issue::error(
                "EMPTY_PLAY",
                &play.id,
                "play must contain at least one act",
            ));
        }
        for act in &play.acts {
            if act.role_parts.is_empty() {
                issues.push(Issue::error(
                    "EMPTY_ACT",
                    &act.id,
                    "act must contain at least one role-part",
                ));
            }
            for rp in &act.role_parts {
                if kinds.get(rp.role_ref.as_str()).copied() != Some("role") {
                    dangling(issues, &rp.id, "role", &rp.role_ref);
                }
                if kinds.get(rp.activity_ref.as_str()).copied() != Some("activity") {
                    dangling(issues, &rp.id, "activity", &rp.activity_ref);
                }
            }
        }
    }
}

fn check_resources(m: &Manifest, issues: &mut Vec<Issue>) {
    let mut hrefs: BTreeSet<&str> = BTreeSet::new();
    for r in &m.resources {
        if !is_normalized_relative_path(&r.href) || r.href == crate::packaging::MANIFEST_ENTRY {
            issues.push(Issue::error(
                "INVALID_HREF",
                &r.id,
                format!("`{}` is not a normalized package-relative path", r.href),
            ));
        }
        if !hrefs.insert(r.href.as_str()) {
            issues.push(Issue::error(
                "DUPLICATE_HREF",
                &r.id,
                format!("path `{}` used by more than one resource", r.href),
            ));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identifier_syntax() {
        assert!(is_valid_identifier("a-1.b_c"));
        assert!(!is_valid_identifier(""));
        assert!(!is_valid_identifier("a b"));
        assert!(!is_valid_identifier("a/b"));
        assert!(is_valid_identifier(&"x".repeat(128)));
        assert!(!is_valid_identifier(&"x".repeat(129)));
    }

    #[test]
    fn path_normalization() {
        assert!(is_normalized_relative_path("content/a1.html"));
        assert!(!is_normalized_relative_path("../a"));
        assert!(!is_normalized_relative_path("a/../b"));
        assert!(!is_normalized_relative_path("/abs"));
        assert!(!is_normalized_relative_path("a//b"));
        assert!(!is_normalized_relative_path("./a"));
        assert!(!is_normalized_relative_path("a\\b"));
    }
}
