use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::DeviceError;
use crate::types::{Access, DataType, Range};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Realism {
    Virtual,
    RealConstrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    /// Slash-separated, e.g. `sensors/level`.
    pub path: String,
    pub data_type: DataType,
    pub access: Access,
    pub engineering_unit: String,
    pub range: Option<Range>,
    /// Captured by snapshots and set by restores.
    #[serde(default)]
    pub state: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Constraints {
    /// Maximum rate of change in engineering units per second.
    pub slew_rates: BTreeMap<String, f64>,
    /// Per-item settle tolerance; items not listed use `default_epsilon`.
    #[serde(default)]
    pub settle_epsilon: BTreeMap<String, f64>,
    #[serde(default = "default_epsilon")]
    pub default_epsilon: f64,
}

fn default_epsilon() -> f64 {
    1e-3
}

impl Constraints {
    pub fn epsilon_for(&self, path: &str) -> f64 {
        self.settle_epsilon
            .get(path)
            .copied()
            .unwrap_or(if self.default_epsilon > 0.0 {
                self.default_epsilon
            } else {
                default_epsilon()
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceDescriptor {
    pub device_id: String,
    pub device_class: String,
    pub realism: Realism,
    /// Leaf items; the browse tree is derived from their paths.
    pub items: Vec<Item>,
    pub constraints: Option<Constraints>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BrowseEntry {
    Branch { path: String },
    Item(Item),
}

impl BrowseEntry {
    pub fn path(&self) -> &str {
        match self {
            BrowseEntry::Branch { path } => path,
            BrowseEntry::Item(i) => &i.path,
        }
    }
}

impl DeviceDescriptor {
    pub fn item(&self, path: &str) -> Option<&Item> {
        self.items.iter().find(|i| i.path == path)
    }

    pub fn state_items(&self) -> impl Iterator<Item = &Item> {
        self.items.iter().filter(|i| i.state)
    }

    /// Children of `path` (`""` is the root), sorted by path.
    pub fn browse(&self, path: &str) -> Result<Vec<BrowseEntry>, DeviceError> {
        let prefix = if path.is_empty() {
            String::new()
        } else {
            format!("{}/", path.trim_end_matches('/'))
        };
        let mut branches = BTreeSet::new();
        let mut out = Vec::new();
        let mut found = path.is_empty();
        for item in &self.items {
            if item.path == path {
                found = true;
                continue;
            }
            let Some(rest) = item.path.strip_prefix(&prefix) else {
                continue;
            };
            found = true;
            match rest.split_once('/') {
                Some((head, _)) => {
                    branches.insert(format!("{prefix}{head}"));
                }
                None => out.push(BrowseEntry::Item(item.clone())),
            }
        }
        if !found {
            return Err(DeviceError::UnknownPath(path.to_string()));
        }
        out.extend(branches.into_iter().map(|path| BrowseEntry::Branch { path }));
        out.sort_by(|a, b| a.path().cmp(b.path()));
        Ok(out)
    }

    /// Descriptor invariants; returns the first violation.
    pub fn check(&self) -> Result<(), String> {
        let mut paths = BTreeSet::new();
        for i in &self.items {
            if !paths.insert(i.path.as_str()) {
                return Err(format!("duplicate item path `{}`", i.path));
            }
            if i.access.can_write() && i.data_type.is_numeric() && i.range.is_none() {
                return Err(format!("writable numeric item `{}` has no range", i.path));
            }
            if let Some(r) = i.range {
                if !r.is_valid() {
                    return Err(format!("item `{}` has lo > hi", i.path));
                }
            }
        }
        if let Some(c) = &self.constraints {
            for (path, rate) in &c.slew_rates {
                let Some(item) = self.item(path) else {
                    return Err(format!("slew rate on unknown item `{path}`"));
                };
                if !(item.data_type.is_numeric() && (item.access.can_write() || item.state)) {
                    return Err(format!("slew rate on `{path}` which is neither writable nor state"));
                }
                if !(*rate > 0.0) {
                    return Err(format!("slew rate on `{path}` must be positive"));
                }
            }
        }
        Ok(())
    }
}
