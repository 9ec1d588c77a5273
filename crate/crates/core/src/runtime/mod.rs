//! Run-time sequencing of a unit of learning.
//!
//! A [`Run`] is pure data. Commands ([`create_run`], [`Run::complete_activity`],
//! [`Run::notify`]) validate against the current state, decide which
//! [`RunEvent`]s happen, then fold them in through [`Run::apply`]. Replaying
//! the same events through `apply` rebuilds the same run.
//!
//! Sequencing rules:
//! - plays progress independently; each play exposes only its current act;
//! - an act is complete once every user holding a role-part's role has
//!   completed that role-part's activity;
//! - `SEQUENCE` structures expose their first incomplete child, `SELECTION`
//!   structures expose every incomplete child until `number_to_select` are
//!   complete;
//! - hidden `SUPPORT` activities stay invisible until a staff notification.

mod status;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Timestamp;
use crate::learning_design::{
    ActivityKind, Environment, Manifest, StructureMode, ValidationReport, validate_manifest,
};

pub use status::{PlayProgress, RunStatusReport, UserProgress, run_status};

pub const SYSTEM_ACTOR: &str = "SYSTEM";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RuntimeError {
    #[error("unit of learning is invalid")]
    InvalidUnit(ValidationReport),
    #[error("role `{role}` needs at least {needed} persons, got {got}")]
    RoleUnderfilled { role: String, needed: u32, got: usize },
    #[error("role `{role}` allows at most {max} persons, got {got}")]
    RoleOverfilled { role: String, max: u32, got: usize },
    #[error("unknown role `{0}`")]
    UnknownRole(String),
    #[error("user `{0}` is not assigned in this run")]
    UnknownUser(String),
    #[error("activity `{0}` is not visible and actionable for this user")]
    NotVisible(String),
    #[error("activity `{0}` is already completed")]
    AlreadyCompleted(String),
    #[error("run is not active")]
    RunNotActive,
    #[error("user `{0}` holds no staff role")]
    NotStaff(String),
    #[error("activity `{0}` is not a hidden support activity")]
    NotHiddenSupport(String),
    #[error("event does not apply to this run: {0}")]
    BadEvent(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunState {
    Active,
    Completed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlayPosition {
    Act(usize),
    Done,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlayState {
    pub play_id: String,
    pub position: PlayPosition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Run {
    pub id: String,
    pub uol_ref: String,
    pub assignments: BTreeMap<String, BTreeSet<String>>,
    pub play_states: Vec<PlayState>,
    /// user → activity → completion time. Structures appear once their
    /// children satisfy them.
    pub completion: BTreeMap<String, BTreeMap<String, Timestamp>>,
    pub revealed: BTreeSet<String>,
    pub status: RunState,
    pub last_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunEventData {
    RunCreated {
        uol_ref: String,
        assignments: BTreeMap<String, BTreeSet<String>>,
        plays: Vec<String>,
    },
    ActivityCompleted {
        user: String,
        activity_id: String,
        /// Structures completed as a consequence, innermost first.
        structures: Vec<String>,
    },
    ActAdvanced {
        play_id: String,
        from_index: usize,
        to_index: usize,
    },
    PlayDone {
        play_id: String,
    },
    RunDone,
    ActivityRevealed {
        activity_id: String,
    },
    Notified {
        target_role: String,
        activity_id: String,
    },
}

impl RunEventData {
    pub fn kind(&self) -> &'static str {
        match self {
            RunEventData::RunCreated { .. } => "RUN_CREATED",
            RunEventData::ActivityCompleted { .. } => "ACTIVITY_COMPLETED",
            RunEventData::ActAdvanced { .. } => "ACT_ADVANCED",
            RunEventData::PlayDone { .. } => "PLAY_DONE",
            RunEventData::RunDone => "RUN_DONE",
            RunEventData::ActivityRevealed { .. } => "ACTIVITY_REVEALED",
            RunEventData::Notified { .. } => "NOTIFIED",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEvent {
    pub run_id: String,
    pub seq: u64,
    pub at: Timestamp,
    pub actor: String,
    #[serde(flatten)]
    pub data: RunEventData,
}

impl RunEvent {
    pub fn kind(&self) -> &'static str {
        self.data.kind()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisibleActivity {
    pub activity_id: String,
    pub title: String,
    pub kind: ActivityKind,
    pub play_id: String,
    pub source_role_part: String,
    pub actionable: bool,
    pub environments: Vec<Environment>,
}

pub fn create_run(
    run_id: &str,
    uol_ref: &str,
    manifest: &Manifest,
    assignments: BTreeMap<String, BTreeSet<String>>,
    at: Timestamp,
) -> Result<(Run, Vec<RunEvent>), RuntimeError> {
    let report = validate_manifest(manifest);
    if !report.ok {
        return Err(RuntimeError::InvalidUnit(report));
    }
    for roles in assignments.values() {
        if let Some(unknown) = roles.iter().find(|r| manifest.role(r).is_none()) {
            return Err(RuntimeError::UnknownRole(unknown.clone()));
        }
    }
    for role in &manifest.roles {
        let got = assignments.values().filter(|rs| rs.contains(&role.id)).count();
        if got < role.min_persons as usize {
            return Err(RuntimeError::RoleUnderfilled {
                role: role.id.clone(),
                needed: role.min_persons,
                got,
            });
        }
        if let crate::learning_design::MaxPersons::Bounded(max) = role.max_persons {
            if got > max as usize {
                return Err(RuntimeError::RoleOverfilled {
                    role: role.id.clone(),
                    max,
                    got,
                });
            }
        }
    }

    let created = RunEvent {
        run_id: run_id.to_string(),
        seq: 1,
        at,
        actor: SYSTEM_ACTOR.to_string(),
        data: RunEventData::RunCreated {
            uol_ref: uol_ref.to_string(),
            assignments,
            plays: manifest.method.plays.iter().map(|p| p.id.clone()).collect(),
        },
    };
    let mut run = Run::from_created(&created)?;
    let mut events = vec![created];
    // Acts addressed only to empty roles complete immediately.
    let advanced = run.advance_events(manifest, at);
    events.extend(run.commit(advanced)?);
    Ok((run, events))
}

impl Run {
    /// Builds the initial state from a `RUN_CREATED` event.
    pub fn from_created(event: &RunEvent) -> Result<Run, RuntimeError> {
        let RunEventData::RunCreated {
            uol_ref,
            assignments,
            plays,
        } = &event.data
        else {
            return Err(RuntimeError::BadEvent(format!(
                "expected RUN_CREATED, got {}",
                event.kind()
            )));
        };
        Ok(Run {
            id: event.run_id.clone(),
            uol_ref: uol_ref.clone(),
            assignments: assignments.clone(),
            play_states: plays
                .iter()
                .map(|p| PlayState {
                    play_id: p.clone(),
                    position: PlayPosition::Act(0),
                })
                .collect(),
            completion: BTreeMap::new(),
            revealed: BTreeSet::new(),
            status: RunState::Active,
            last_seq: event.seq,
        })
    }

    /// Folds one event into the state.
    pub fn apply(&mut self, event: &RunEvent) -> Result<(), RuntimeError> {
        if event.run_id != self.id || event.seq != self.last_seq + 1 {
            return Err(RuntimeError::BadEvent(format!(
                "event {}#{} does not follow {}#{}",
                event.run_id, event.seq, self.id, self.last_seq
            )));
        }
        match &event.data {
            RunEventData::RunCreated { .. } => {
                return Err(RuntimeError::BadEvent("duplicate RUN_CREATED".into()));
            }
            RunEventData::ActivityCompleted {
                user,
                activity_id,
                structures,
            } => {
                let done = self.completion.entry(user.clone()).or_default();
                done.insert(activity_id.clone(), event.at);
                for s in structures {
                    done.insert(s.clone(), event.at);
                }
            }
            RunEventData::ActAdvanced {
                play_id,
                from_index,
                to_index,
            } => {
                let ps = self.play_mut(play_id)?;
                if ps.position != PlayPosition::Act(*from_index) || *to_index != from_index + 1 {
                    return Err(RuntimeError::BadEvent(format!(
                        "play `{play_id}` cannot advance {from_index}->{to_index}"
                    )));
                }
                ps.position = PlayPosition::Act(*to_index);
            }
            RunEventData::PlayDone { play_id } => {
                self.play_mut(play_id)?.position = PlayPosition::Done;
            }
            RunEventData::RunDone => self.status = RunState::Completed,
            RunEventData::ActivityRevealed { activity_id } => {
                self.revealed.insert(activity_id.clone());
            }
            RunEventData::Notified { .. } => {}
        }
        self.last_seq = event.seq;
        Ok(())
    }

    fn play_mut(&mut self, play_id: &str) -> Result<&mut PlayState, RuntimeError> {
        self.play_states
            .iter_mut()
            .find(|p| p.play_id == play_id)
            .ok_or_else(|| RuntimeError::BadEvent(format!("unknown play `{play_id}`")))
    }

    /// Stamps `data` with sequence numbers and applies it.
    fn commit(&mut self, data: Vec<(String, Timestamp, RunEventData)>) -> Result<Vec<RunEvent>, RuntimeError> {
        let mut out = Vec::with_capacity(data.len());
        for (actor, at, d) in data {
            let e = RunEvent {
                run_id: self.id.clone(),
                seq: self.last_seq + 1,
                at,
                actor,
                data: d,
            };
            self.apply(&e)?;
            out.push(e);
        }
        Ok(out)
    }

    pub fn is_complete(&self, user: &str, activity: &str) -> bool {
        self.completion
            .get(user)
            .map(|m| m.contains_key(activity))
            .unwrap_or(false)
    }

    pub fn roles_of(&self, user: &str) -> Option<&BTreeSet<String>> {
        self.assignments.get(user)
    }

    fn users_with_role<'a>(&'a self, role: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.assignments
            .iter()
            .filter(move |(_, roles)| roles.contains(role))
            .map(|(u, _)| u.as_str())
    }

    /// Structure satisfied by the user's finished children.
    fn structure_satisfied(&self, m: &Manifest, user: &str, activity: &str) -> bool {
        self.satisfied_at(m, user, activity, 0)
    }

    fn satisfied_at(&self, m: &Manifest, user: &str, activity: &str, depth: usize) -> bool {
        let Some(s) = m.activity(activity).and_then(|a| a.structure.as_ref()) else {
            return false;
        };
        if depth > m.activities.len() {
            return false;
        }
        let done = s
            .children
            .iter()
            .filter(|c| self.is_complete(user, c) || self.satisfied_at(m, user, c, depth + 1))
            .count();
        done >= s.required()
    }

    /// Recorded complete, or a structure whose children are finished even
    /// if they were finished while it was out of scope.
    pub fn is_done(&self, m: &Manifest, user: &str, activity: &str) -> bool {
        self.is_complete(user, activity) || self.structure_satisfied(m, user, activity)
    }

    fn expose(
        &self,
        m: &Manifest,
        user: &str,
        activity: &str,
        top_level: bool,
        out: &mut Vec<(String, bool)>,
        depth: usize,
    ) {
        let Some(a) = m.activity(activity) else {
            return;
        };
        if depth > m.activities.len() {
            return;
        }
        let complete = self.is_done(m, user, activity);
        match &a.structure {
            None => {
                if a.is_hidden_support() && !self.revealed.contains(&a.id) {
                    return;
                }
                if !complete || top_level {
                    out.push((a.id.clone(), !complete));
                }
            }
            Some(s) => {
                if complete {
                    return;
                }
                match s.mode {
                    StructureMode::Sequence => {
                        if let Some(next) = s.children.iter().find(|c| !self.is_done(m, user, c)) {
                            self.expose(m, user, next, false, out, depth + 1);
                        }
                    }
                    StructureMode::Selection => {
                        for c in s.children.iter().filter(|c| !self.is_done(m, user, c)) {
                            self.expose(m, user, c, false, out, depth + 1);
                        }
                    }
                }
            }
        }
    }

    /// Activities the user can currently see, in play then role-part order.
    pub fn visible_activities(&self, m: &Manifest, user: &str) -> Result<Vec<VisibleActivity>, RuntimeError> {
        let roles = self
            .roles_of(user)
            .ok_or_else(|| RuntimeError::UnknownUser(user.to_string()))?;
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for (ps, play) in self.play_states.iter().zip(&m.method.plays) {
            let PlayPosition::Act(idx) = ps.position else {
                continue;
            };
            let Some(act) = play.acts.get(idx) else {
                continue;
            };
            for rp in act.role_parts.iter().filter(|rp| roles.contains(&rp.role_ref)) {
                let mut exposed = Vec::new();
                self.expose(m, user, &rp.activity_ref, true, &mut exposed, 0);
                for (id, actionable) in exposed {
                    if !seen.insert(id.clone()) {
                        continue;
                    }
                    let a = m.activity(&id).expect("exposed activity exists");
                    out.push(VisibleActivity {
                        activity_id: id,
                        title: a.title.clone(),
                        kind: a.kind,
                        play_id: play.id.clone(),
                        source_role_part: rp.id.clone(),
                        actionable,
                        environments: a
                            .environment_refs
                            .iter()
                            .filter_map(|e| m.environment(e).cloned())
                            .collect(),
                    });
                }
            }
        }
        Ok(out)
    }

    /// Structures in scope for `user`: those under role-parts of current acts.
    fn structures_in_scope(&self, m: &Manifest, user: &str) -> Vec<String> {
        let Some(roles) = self.roles_of(user) else {
            return Vec::new();
        };
        let mut roots = Vec::new();
        for (ps, play) in self.play_states.iter().zip(&m.method.plays) {
            if let PlayPosition::Act(idx) = ps.position {
                if let Some(act) = play.acts.get(idx) {
                    roots.extend(
                        act.role_parts
                            .iter()
                            .filter(|rp| roles.contains(&rp.role_ref))
                            .map(|rp| rp.activity_ref.as_str()),
                    );
                }
            }
        }
        let scope = m.activity_closure(roots);
        m.activities
            .iter()
            .filter(|a| a.structure.is_some() && scope.contains(&a.id))
            .map(|a| a.id.clone())
            .collect()
    }

    fn act_complete(&self, m: &Manifest, play_idx: usize, act_idx: usize) -> bool {
        let act = &m.method.plays[play_idx].acts[act_idx];
        act.role_parts.iter().all(|rp| {
            self.users_with_role(&rp.role_ref)
                .all(|u| self.is_done(m, u, &rp.activity_ref))
        })
    }

    /// Advances every play whose current act is complete, repeatedly, and
    /// reports run completion. Works on a scratch copy of the positions.
    fn advance_events(&self, m: &Manifest, at: Timestamp) -> Vec<(String, Timestamp, RunEventData)> {
        let mut out = Vec::new();
        let mut positions: Vec<PlayPosition> = self.play_states.iter().map(|p| p.position).collect();
        for (pi, play) in m.method.plays.iter().enumerate() {
            while let PlayPosition::Act(idx) = positions[pi] {
                if !self.act_complete(m, pi, idx) {
                    break;
                }
                if idx + 1 < play.acts.len() {
                    out.push((
                        SYSTEM_ACTOR.to_string(),
                        at,
                        RunEventData::ActAdvanced {
                            play_id: play.id.clone(),
                            from_index: idx,
                            to_index: idx + 1,
                        },
                    ));
                    positions[pi] = PlayPosition::Act(idx + 1);
                } else {
                    out.push((
                        SYSTEM_ACTOR.to_string(),
                        at,
                        RunEventData::PlayDone {
                            play_id: play.id.clone(),
                        },
                    ));
                    positions[pi] = PlayPosition::Done;
                }
            }
        }
        if self.status == RunState::Active && positions.iter().all(|p| *p == PlayPosition::Done) {
            out.push((SYSTEM_ACTOR.to_string(), at, RunEventData::RunDone));
        }
        out
    }

    /// Marks `activity_id` complete for `user` and advances the method.
    /// On error the run is left untouched.
    pub fn complete_activity(
        &mut self,
        m: &Manifest,
        user: &str,
        activity_id: &str,
        at: Timestamp,
    ) -> Result<Vec<RunEvent>, RuntimeError> {
        if self.status != RunState::Active {
            return Err(RuntimeError::RunNotActive);
        }
        let visible = self.visible_activities(m, user)?;
        if self.is_complete(user, activity_id) {
            return Err(RuntimeError::AlreadyCompleted(activity_id.to_string()));
        }
        if !visible
            .iter()
            .any(|v| v.activity_id == activity_id && v.actionable)
        {
            return Err(RuntimeError::NotVisible(activity_id.to_string()));
        }

        // Propagate structure completion to a fixpoint on a scratch copy.
        let scope = self.structures_in_scope(m, user);
        let mut scratch = self.clone();
        scratch
            .completion
            .entry(user.to_string())
            .or_default()
            .insert(activity_id.to_string(), at);
        let mut structures = Vec::new();
        loop {
            let newly: Vec<String> = scope
                .iter()
                .filter(|s| !scratch.is_complete(user, s) && scratch.structure_satisfied(m, user, s))
                .cloned()
                .collect();
            if newly.is_empty() {
                break;
            }
            for s in newly {
                scratch
                    .completion
                    .entry(user.to_string())
                    .or_default()
                    .insert(s.clone(), at);
                structures.push(s);
            }
        }

        let mut pending = vec![(
            user.to_string(),
            at,
            RunEventData::ActivityCompleted {
                user: user.to_string(),
                activity_id: activity_id.to_string(),
                structures,
            },
        )];
        pending.extend(scratch.advance_events(m, at));
        self.commit(pending)
    }

    /// Staff notification revealing a hidden support activity.
    pub fn notify(
        &mut self,
        m: &Manifest,
        actor: &str,
        target_role: &str,
        activity_id: &str,
        at: Timestamp,
    ) -> Result<Vec<RunEvent>, RuntimeError> {
        if self.status != RunState::Active {
            return Err(RuntimeError::RunNotActive);
        }
        let staff = m.staff_roles();
        let is_staff = self
            .roles_of(actor)
            .map(|roles| roles.iter().any(|r| staff.contains(r.as_str())))
            .unwrap_or(false);
        if !is_staff {
            return Err(RuntimeError::NotStaff(actor.to_string()));
        }
        if m.role(target_role).is_none() {
            return Err(RuntimeError::UnknownRole(target_role.to_string()));
        }
        match m.activity(activity_id) {
            Some(a) if a.is_hidden_support() => {}
            _ => return Err(RuntimeError::NotHiddenSupport(activity_id.to_string())),
        }
        let mut pending = vec![(
            actor.to_string(),
            at,
            RunEventData::Notified {
                target_role: target_role.to_string(),
                activity_id: activity_id.to_string(),
            },
        )];
        if !self.revealed.contains(activity_id) {
            pending.push((
                SYSTEM_ACTOR.to_string(),
                at,
                RunEventData::ActivityRevealed {
                    activity_id: activity_id.to_string(),
                },
            ));
        }
        self.commit(pending)
    }
}

/// Rebuilds a run from its complete event history.
pub fn replay_run(events: &[RunEvent]) -> Result<Run, RuntimeError> {
    let (first, rest) = events
        .split_first()
        .ok_or_else(|| RuntimeError::BadEvent("empty history".into()))?;
    let mut run = Run::from_created(first)?;
    for e in rest {
        run.apply(e)?;
    }
    Ok(run)
}
