//! Offline commands behind `elab package`, `elab compat` and `elab sim`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use elab_core::compat::{CompatReport, check_compat, requirements_of};
use elab_core::device::{DeviceDescriptor, Realism};
use elab_core::learning_design::{Severity, ValidationReport, parse_manifest, validate_manifest};
use elab_core::packaging::{
    ConflictPolicy, MANIFEST_ENTRY, PackageError, SliceSelector, UnitOfLearning, load_package, merge_packages,
    save_package, slice_package,
};
use elab_core::sim::{SimModel, TankParams, TankState, simulate_tank};
use serde_json::{Value as Json, json};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ToolError {
    #[error("{path}: {message}")]
    Read { path: String, message: String },
    #[error(transparent)]
    Package(#[from] PackageError),
    #[error("{0}")]
    Other(String),
}

fn read(path: &Path) -> Result<Vec<u8>, ToolError> {
    std::fs::read(path).map_err(|e| ToolError::Read {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Builds a unit from a directory holding `imsmanifest.xml` and the
/// resource files it declares.
pub fn unit_from_dir(dir: &Path) -> Result<UnitOfLearning, ToolError> {
    let xml = String::from_utf8(read(&dir.join(MANIFEST_ENTRY))?).map_err(|e| ToolError::Other(e.to_string()))?;
    let manifest = parse_manifest(&xml).map_err(PackageError::from)?;
    let mut bytes = BTreeMap::new();
    for r in &manifest.resources {
        bytes.insert(r.id.clone(), read(&dir.join(&r.href))?);
    }
    Ok(UnitOfLearning::from_parts(manifest, bytes))
}

/// A package archive, or a directory in the same layout.
pub fn read_unit(path: &Path) -> Result<UnitOfLearning, ToolError> {
    if path.is_dir() {
        let unit = unit_from_dir(path)?;
        unit.check()?;
        return Ok(unit);
    }
    Ok(load_package(&read(path)?)?.unit)
}

pub fn pack(dir: &Path) -> Result<Vec<u8>, ToolError> {
    let unit = unit_from_dir(dir)?;
    Ok(save_package(&unit)?)
}

/// Rendered outcome of a check: human text, machine JSON and the verdict.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub ok: bool,
    pub text: String,
    pub json: Json,
}

fn render_report(report: &ValidationReport, warnings: &[String]) -> Outcome {
    let mut text = String::new();
    for i in &report.issues {
        let sev = match i.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        let _ = writeln!(text, "{sev} {} [{}]: {}", i.code, i.element_id, i.message);
    }
    for w in warnings {
        let _ = writeln!(text, "warning: {w}");
    }
    let _ = writeln!(
        text,
        "{} ({} errors)",
        if report.ok { "valid" } else { "invalid" },
        report.error_count()
    );
    Outcome {
        ok: report.ok,
        text,
        json: json!({ "ok": report.ok, "issues": report.issues, "warnings": warnings }),
    }
}

pub fn validate(path: &Path) -> Result<Outcome, ToolError> {
    if path.is_dir() {
        let unit = unit_from_dir(path)?;
        let report = validate_manifest(&unit.manifest);
        if report.ok {
            unit.check()?;
        }
        return Ok(render_report(&report, &[]));
    }
    match load_package(&read(path)?) {
        Ok(p) => Ok(render_report(&validate_manifest(&p.unit.manifest), &p.warnings)),
        Err(PackageError::InvalidManifest(report)) => Ok(render_report(&report, &[])),
        Err(e) => Err(e.into()),
    }
}

pub fn slice(path: &Path, sel: &SliceSelector) -> Result<Vec<u8>, ToolError> {
    let unit = read_unit(path)?;
    Ok(save_package(&slice_package(&unit, sel)?)?)
}

pub fn merge(left: &Path, right: &Path, policy: &ConflictPolicy) -> Result<Vec<u8>, ToolError> {
    let (l, r) = (read_unit(left)?, read_unit(right)?);
    Ok(save_package(&merge_packages(&l, &r, policy)?)?)
}

/// One virtual instance of every built-in class.
pub fn default_descriptors() -> Vec<DeviceDescriptor> {
    [SimModel::Tank(TankParams::default()), SimModel::SignalSource { dt: 0.1 }]
        .iter()
        .map(|m| m.descriptor(&format!("{}-1", m.class_name()), Realism::Virtual))
        .collect()
}

fn render_compat(report: &CompatReport, devices: &[DeviceDescriptor]) -> Outcome {
    let mut text = String::new();
    for v in &report.violations {
        let on = v.device_id.as_deref().map(|d| format!(" on {d}")).unwrap_or_default();
        let path = if v.path.is_empty() { String::new() } else { format!(" {}", v.path) };
        let _ = writeln!(text, "{} {}{path}{on}: {}", v.kind.as_str(), v.device_class, v.detail);
    }
    let _ = writeln!(
        text,
        "{} against {} device(s)",
        if report.compatible { "compatible" } else { "incompatible" },
        devices.len()
    );
    Outcome {
        ok: report.compatible,
        text,
        json: serde_json::to_value(report).expect("reports serialize"),
    }
}

/// `devices` is a JSON array of device descriptors; default is
/// [`default_descriptors`].
pub fn compat_check(path: &Path, devices: Option<&Path>, sel: Option<&SliceSelector>) -> Result<Outcome, ToolError> {
    let unit = read_unit(path)?;
    let descriptors: Vec<DeviceDescriptor> = match devices {
        Some(p) => serde_json::from_slice(&read(p)?).map_err(|e| ToolError::Read {
            path: p.display().to_string(),
            message: e.to_string(),
        })?,
        None => default_descriptors(),
    };
    for d in &descriptors {
        d.check().map_err(|e| ToolError::Other(format!("descriptor {}: {e}", d.device_id)))?;
    }
    let req = requirements_of(&unit.manifest, sel).map_err(|e| ToolError::Other(e.to_string()))?;
    Ok(render_compat(&check_compat(&req, &descriptors), &descriptors))
}

/// CSV trajectory `t,level,q_in,outflow`, one row every `every` steps
/// plus the final state.
pub fn sim_tank_csv(params: &TankParams, level0: f64, q_in: f64, seconds: f64, every: usize) -> Result<String, ToolError> {
    params.check().map_err(ToolError::Other)?;
    if !(0.0..=params.q_max).contains(&q_in) || !(0.0..=params.h_max).contains(&level0) {
        return Err(ToolError::Other("initial level or inflow outside the tank's range".into()));
    }
    let every = every.max(1);
    let traj = simulate_tank(
        TankState {
            level: level0,
            q_in,
            sim_time: 0.0,
        },
        params,
        seconds,
    );
    let mut out = String::from("t,level,q_in,outflow\n");
    let last = traj.len() - 1;
    for (i, s) in traj.iter().enumerate() {
        if i % every == 0 || i == last {
            let outflow = params.outflow_coeff * s.level.max(0.0).sqrt();
            let _ = writeln!(out, "{},{},{},{}", (i as f64 * params.dt * 1e9).round() / 1e9, s.level, s.q_in, outflow);
        }
    }
    Ok(out)
}
