//! Flat `key = value` configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key can be
//! overridden by the environment variable `ELAB_<KEY>` (upper-cased), which
//! also supplies keys absent from the file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use elab_core::device::Realism;
use elab_core::scheduler::{DeviceClass, SchedulerConfig};
use elab_core::sim::SimModel;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("`{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error("cannot read {path}: {message}")]
    Read { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum UserKind {
    Learner,
    Staff,
    Admin,
}

impl UserKind {
    fn parse(s: &str) -> Option<UserKind> {
        match s.to_ascii_uppercase().as_str() {
            "LEARNER" => Some(UserKind::Learner),
            "STAFF" => Some(UserKind::Staff),
            "ADMIN" => Some(UserKind::Admin),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caller {
    pub user: String,
    pub kind: UserKind,
}

impl Caller {
    pub fn new(user: &str, kind: UserKind) -> Self {
        Caller {
            user: user.to_string(),
            kind,
        }
    }

    pub fn is_learner(&self) -> bool {
        self.kind == UserKind::Learner
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    /// Wall clock scaled by `clock_speed`.
    System,
    /// Time moves only through `POST /admin/clock`.
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub class: String,
    pub count: usize,
    pub realism: Realism,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub listen: String,
    pub data_dir: PathBuf,
    pub quantum: f64,
    pub shadow_on_wait: bool,
    pub sim_dt: f64,
    pub clock: ClockMode,
    pub clock_speed: f64,
    pub subscription_ttl: f64,
    pub fsync: bool,
    pub devices: Vec<DeviceSpec>,
    /// token → caller
    pub tokens: BTreeMap<String, Caller>,
}

const KEYS: &[&str] = &[
    "listen",
    "data_dir",
    "quantum",
    "shadow_on_wait",
    "sim_dt",
    "clock",
    "clock_speed",
    "subscription_ttl",
    "fsync",
    "devices",
    "tokens",
];

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            listen: "127.0.0.1:8080".into(),
            data_dir: PathBuf::from("data"),
            quantum: SchedulerConfig::default().quantum,
            shadow_on_wait: true,
            sim_dt: 0.1,
            clock: ClockMode::System,
            clock_speed: 1.0,
            subscription_ttl: elab_core::protocol::DEFAULT_TTL,
            fsync: true,
            devices: vec![DeviceSpec {
                class: elab_core::sim::TANK_CLASS.into(),
                count: 1,
                realism: Realism::RealConstrained,
            }],
            tokens: BTreeMap::new(),
        }
    }
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        message: message.into(),
    }
}

fn positive(key: &str, v: &str) -> Result<f64, ConfigError> {
    match v.parse::<f64>() {
        Ok(x) if x > 0.0 && x.is_finite() => Ok(x),
        _ => Err(invalid(key, format!("expected a positive number, got `{v}`"))),
    }
}

fn boolean(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(invalid(key, format!("expected true or false, got `{v}`"))),
    }
}

fn is_safe_id(s: &str) -> bool {
    !s.is_empty()
        && s.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
        && !s.starts_with('.')
}

fn realism(v: &str) -> Option<Realism> {
    match v {
        "real" | "real_constrained" => Some(Realism::RealConstrained),
        "virtual" => Some(Realism::Virtual),
        _ => None,
    }
}

/// `class:count[:realism]`, comma separated.
fn devices(v: &str) -> Result<Vec<DeviceSpec>, ConfigError> {
    let mut out: Vec<DeviceSpec> = Vec::new();
    for part in v.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let fields: Vec<&str> = part.split(':').map(str::trim).collect();
        if !(2..=3).contains(&fields.len()) {
            return Err(invalid("devices", format!("expected class:count[:realism], got `{part}`")));
        }
        let class = fields[0].to_string();
        if SimModel::from_class(&class, 0.1).is_none() {
            return Err(invalid("devices", format!("unknown device class `{class}`")));
        }
        let count = fields[1]
            .parse::<usize>()
            .map_err(|_| invalid("devices", format!("bad instance count `{}`", fields[1])))?;
        let realism = match fields.get(2) {
            None => Realism::RealConstrained,
            Some(r) => realism(r).ok_or_else(|| invalid("devices", format!("bad realism `{r}`")))?,
        };
        if out.iter().any(|d| d.class == class) {
            return Err(invalid("devices", format!("class `{class}` listed twice")));
        }
        out.push(DeviceSpec { class, count, realism });
    }
    Ok(out)
}

/// `token:user:KIND`, comma separated.
fn tokens(v: &str) -> Result<BTreeMap<String, Caller>, ConfigError> {
    let mut out = BTreeMap::new();
    for part in v.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let fields: Vec<&str> = part.split(':').map(str::trim).collect();
        let [token, user, kind] = fields[..] else {
            return Err(invalid("tokens", format!("expected token:user:KIND, got `{part}`")));
        };
        if token.is_empty() {
            return Err(invalid("tokens", "empty token"));
        }
        if !is_safe_id(user) {
            return Err(invalid("tokens", format!("user id `{user}` must be [A-Za-z0-9._-]+")));
        }
        let kind = UserKind::parse(kind).ok_or_else(|| invalid("tokens", format!("bad user kind `{kind}`")))?;
        if out.insert(token.to_string(), Caller::new(user, kind)).is_some() {
            return Err(invalid("tokens", "duplicate token"));
        }
    }
    Ok(out)
}

impl ServiceConfig {
    /// Parses `text`, then applies overrides from `env`.
    pub fn parse(text: &str, env: impl Fn(&str) -> Option<String>) -> Result<ServiceConfig, ConfigError> {
        let mut raw: BTreeMap<String, String> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    message: "expected key = value".into(),
                });
            };
            let k = k.trim().to_string();
            if !KEYS.contains(&k.as_str()) {
                return Err(ConfigError::UnknownKey(k));
            }
            raw.insert(k, v.trim().to_string());
        }
        for key in KEYS {
            if let Some(v) = env(&format!("ELAB_{}", key.to_ascii_uppercase())) {
                raw.insert(key.to_string(), v.trim().to_string());
            }
        }

        let mut cfg = ServiceConfig::default();
        for (k, v) in &raw {
            match k.as_str() {
                "listen" => cfg.listen = v.clone(),
                "data_dir" => {
                    if v.is_empty() {
                        return Err(invalid(k, "empty path"));
                    }
                    cfg.data_dir = PathBuf::from(v);
                }
                "quantum" => cfg.quantum = positive(k, v)?,
                "shadow_on_wait" => cfg.shadow_on_wait = boolean(k, v)?,
                "sim_dt" => cfg.sim_dt = positive(k, v)?,
                "clock" => {
                    cfg.clock = match v.as_str() {
                        "system" => ClockMode::System,
                        "manual" => ClockMode::Manual,
                        _ => return Err(invalid(k, format!("expected system or manual, got `{v}`"))),
                    }
                }
                "clock_speed" => cfg.clock_speed = positive(k, v)?,
                "subscription_ttl" => cfg.subscription_ttl = positive(k, v)?,
                "fsync" => cfg.fsync = boolean(k, v)?,
                "devices" => cfg.devices = devices(v)?,
                "tokens" => cfg.tokens = tokens(v)?,
                _ => unreachable!("keys are checked above"),
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ServiceConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        ServiceConfig::parse(&text, |k| std::env::var(k).ok())
    }

    pub fn scheduler_config(&self) -> SchedulerConfig {
        SchedulerConfig {
            quantum: self.quantum,
            shadow_on_wait: self.shadow_on_wait,
        }
    }

    pub fn device_classes(&self) -> Vec<DeviceClass> {
        self.devices
            .iter()
            .map(|d| {
                let model = SimModel::from_class(&d.class, self.sim_dt).expect("classes are checked on parse");
                DeviceClass::new(model, d.count, d.realism)
            })
            .collect()
    }

    pub fn caller(&self, token: &str) -> Option<&Caller> {
        self.tokens.get(token)
    }
}
