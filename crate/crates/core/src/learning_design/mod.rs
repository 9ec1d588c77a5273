//! Scenario manifests: roles, activities, environments, and the method
//! (plays of sequential acts binding roles to activities).
//!
//! [`parse_manifest`] reads the XML vocabulary documented in
//! `docs/manifest-schema.md`, [`validate_manifest`] checks every structural
//! invariant and returns the violations as data, and [`serialize_manifest`]
//! writes the canonical form back out.

mod validate;
mod xml;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{Access, DataType, Range};

pub use validate::{Issue, Severity, ValidationReport, is_valid_identifier, validate_manifest};
pub use xml::{parse_manifest, serialize_manifest};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ManifestError {
    #[error("xml syntax error: {0}")]
    XmlSyntax(String),
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("manifest is invalid ({} errors)", .0.error_count())]
    InvalidManifest(ValidationReport),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub identifier: String,
    pub title: String,
    pub roles: Vec<Role>,
    pub activities: Vec<Activity>,
    pub environments: Vec<Environment>,
    pub method: Method,
    pub resources: Vec<ResourceRef>,
    /// Warnings recorded while parsing (unknown elements). Reported again by
    /// [`validate_manifest`].
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub parse_warnings: Vec<Issue>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RoleKind {
    Learner,
    Staff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MaxPersons {
    Bounded(u32),
    Unbounded,
}

impl MaxPersons {
    pub fn allows(self, n: usize) -> bool {
        match self {
            MaxPersons::Bounded(max) => n <= max as usize,
            MaxPersons::Unbounded => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Role {
    pub id: String,
    pub kind: RoleKind,
    pub min_persons: u32,
    pub max_persons: MaxPersons,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ActivityKind {
    Learning,
    Support,
    Structure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Completion {
    UserChoice,
    AutoOnChildren,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StructureMode {
    Sequence,
    Selection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Structure {
    pub mode: StructureMode,
    pub children: Vec<String>,
    /// Only meaningful for [`StructureMode::Selection`].
    pub number_to_select: Option<u32>,
}

impl Structure {
    /// Number of complete children that completes the structure.
    pub fn required(&self) -> usize {
        match self.mode {
            StructureMode::Sequence => self.children.len(),
            StructureMode::Selection => self
                .number_to_select
                .map(|n| n as usize)
                .unwrap_or(self.children.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Activity {
    pub id: String,
    pub kind: ActivityKind,
    pub title: String,
    pub environment_refs: Vec<String>,
    pub content_ref: Option<String>,
    pub completion: Completion,
    pub structure: Option<Structure>,
    pub initially_hidden: bool,
}

impl Activity {
    pub fn learning(id: &str, title: &str) -> Self {
        Activity {
            id: id.to_string(),
            kind: ActivityKind::Learning,
            title: title.to_string(),
            environment_refs: Vec::new(),
            content_ref: None,
            completion: Completion::UserChoice,
            structure: None,
            initially_hidden: false,
        }
    }

    pub fn structure(id: &str, title: &str, mode: StructureMode, children: &[&str]) -> Self {
        Activity {
            id: id.to_string(),
            kind: ActivityKind::Structure,
            title: title.to_string(),
            environment_refs: Vec::new(),
            content_ref: None,
            completion: Completion::AutoOnChildren,
            structure: Some(Structure {
                mode,
                children: children.iter().map(|c| c.to_string()).collect(),
                number_to_select: None,
            }),
            initially_hidden: false,
        }
    }

    pub fn is_hidden_support(&self) -> bool {
        self.kind == ActivityKind::Support && self.initially_hidden
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub id: String,
    pub learning_objects: Vec<String>,
    pub services: Vec<String>,
    pub device_requirements: Vec<DeviceRequirement>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceRequirement {
    pub device_class: String,
    pub items: Vec<ItemRequirement>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRequirement {
    pub path: String,
    pub data_type: DataType,
    pub access: Access,
    pub range: Option<Range>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Method {
    pub plays: Vec<Play>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Play {
    pub id: String,
    pub acts: Vec<Act>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Act {
    pub id: String,
    pub role_parts: Vec<RolePart>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolePart {
    pub id: String,
    pub role_ref: String,
    pub activity_ref: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceRef {
    pub id: String,
    pub href: String,
    /// Explicit media type; when absent it is derived from the file extension.
    pub media_type: Option<String>,
}

impl ResourceRef {
    pub fn effective_media_type(&self) -> String {
        self.media_type
            .clone()
            .unwrap_or_else(|| media_type_for_path(&self.href).to_string())
    }
}

pub fn media_type_for_path(path: &str) -> &'static str {
    let ext = path.rsplit_once('.').map(|(_, e)| e.to_ascii_lowercase());
    match ext.as_deref() {
        Some("html") | Some("htm") => "text/html",
        Some("txt") => "text/plain",
        Some("xml") => "application/xml",
        Some("json") => "application/json",
        Some("css") => "text/css",
        Some("js") => "text/javascript",
        Some("png") => "image/png",
        Some("jpg") | Some("jpeg") => "image/jpeg",
        Some("svg") => "image/svg+xml",
        Some("pdf") => "application/pdf",
        _ => "application/octet-stream",
    }
}

impl Manifest {
    /// A manifest with no content; useful as a builder seed.
    pub fn empty(identifier: &str, title: &str) -> Self {
        Manifest {
            identifier: identifier.to_string(),
            title: title.to_string(),
            roles: Vec::new(),
            activities: Vec::new(),
            environments: Vec::new(),
            method: Method::default(),
            resources: Vec::new(),
            parse_warnings: Vec::new(),
        }
    }

    pub fn role(&self, id: &str) -> Option<&Role> {
        self.roles.iter().find(|r| r.id == id)
    }

    pub fn activity(&self, id: &str) -> Option<&Activity> {
        self.activities.iter().find(|a| a.id == id)
    }

    pub fn environment(&self, id: &str) -> Option<&Environment> {
        self.environments.iter().find(|e| e.id == id)
    }

    pub fn resource(&self, id: &str) -> Option<&ResourceRef> {
        self.resources.iter().find(|r| r.id == id)
    }

    pub fn play(&self, id: &str) -> Option<&Play> {
        self.method.plays.iter().find(|p| p.id == id)
    }

    pub fn role_parts(&self) -> impl Iterator<Item = &RolePart> {
        self.method
            .plays
            .iter()
            .flat_map(|p| p.acts.iter())
            .flat_map(|a| a.role_parts.iter())
    }

    /// Every identifier declared in the manifest, in declaration order.
    pub fn declared_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = Vec::new();
        ids.extend(self.roles.iter().map(|r| r.id.as_str()));
        ids.extend(self.activities.iter().map(|a| a.id.as_str()));
        ids.extend(self.environments.iter().map(|e| e.id.as_str()));
        for play in &self.method.plays {
            ids.push(&play.id);
            for act in &play.acts {
                ids.push(&act.id);
                ids.extend(act.role_parts.iter().map(|rp| rp.id.as_str()));
            }
        }
        ids.extend(self.resources.iter().map(|r| r.id.as_str()));
        ids
    }

    /// `root` plus every activity reachable through structure children.
    /// Unknown ids are skipped; cycles are tolerated.
    pub fn activity_closure<'a, I>(&self, roots: I) -> BTreeSet<String>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut seen = BTreeSet::new();
        let mut stack: Vec<String> = roots.into_iter().map(str::to_string).collect();
        while let Some(id) = stack.pop() {
            if !seen.insert(id.clone()) {
                continue;
            }
            if let Some(s) = self.activity(&id).and_then(|a| a.structure.as_ref()) {
                stack.extend(s.children.iter().cloned());
            }
        }
        seen.retain(|id| self.activity(id).is_some());
        seen
    }

    /// Leaf (non-structure) activities under `id`, deduplicated.
    pub fn leaves_of(&self, id: &str) -> BTreeSet<String> {
        self.activity_closure(std::iter::once(id))
            .into_iter()
            .filter(|a| {
                self.activity(a)
                    .map(|a| a.kind != ActivityKind::Structure)
                    .unwrap_or(false)
            })
            .collect()
    }

    /// Environments and resources referenced by `activities`.
    pub fn referenced_by(&self, activities: &BTreeSet<String>) -> (BTreeSet<String>, BTreeSet<String>) {
        let mut envs = BTreeSet::new();
        let mut resources = BTreeSet::new();
        for a in activities.iter().filter_map(|id| self.activity(id)) {
            envs.extend(a.environment_refs.iter().cloned());
            resources.extend(a.content_ref.iter().cloned());
        }
        for e in envs.iter().filter_map(|id| self.environment(id)) {
            resources.extend(e.learning_objects.iter().cloned());
        }
        (envs, resources)
    }

    /// Count of each element kind: (roles, activities, plays, acts, role-parts).
    pub fn counts(&self) -> (usize, usize, usize, usize, usize) {
        let acts = self.method.plays.iter().map(|p| p.acts.len()).sum();
        (
            self.roles.len(),
            self.activities.len(),
            self.method.plays.len(),
            acts,
            self.role_parts().count(),
        )
    }

    /// Roles of kind STAFF.
    pub fn staff_roles(&self) -> BTreeSet<&str> {
        self.roles
            .iter()
            .filter(|r| r.kind == RoleKind::Staff)
            .map(|r| r.id.as_str())
            .collect()
    }

    /// Map of declared id to its element kind name.
    pub(crate) fn id_kinds(&self) -> BTreeMap<&str, &'static str> {
        let mut out = BTreeMap::new();
        for r in &self.roles {
            out.insert(r.id.as_str(), "role");
        }
        for a in &self.activities {
            out.insert(a.id.as_str(), "activity");
        }
        for e in &self.environments {
            out.insert(e.id.as_str(), "environment");
        }
        for p in &self.method.plays {
            out.insert(p.id.as_str(), "play");
            for act in &p.acts {
                out.insert(act.id.as_str(), "act");
                for rp in &act.role_parts {
                    out.insert(rp.id.as_str(), "role-part");
                }
            }
        }
        for r in &self.resources {
            out.insert(r.id.as_str(), "resource");
        }
        out
    }
}
