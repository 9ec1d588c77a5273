use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{PlayPosition, Run, RunState};
use crate::learning_design::{Manifest, StructureMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlayProgress {
    pub play_id: String,
    /// `None` once the play is done.
    pub current_act: Option<usize>,
    pub current_act_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProgress {
    pub completed: usize,
    pub total: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatusReport {
    pub run_id: String,
    pub status: RunState,
    pub plays: Vec<PlayProgress>,
    /// Users with at least one addressed activity.
    pub users: BTreeMap<String, UserProgress>,
}

/// Leaf weight of an activity: 1 for a leaf, the sum over children for a
/// sequence, the sum of the `k` heaviest children for a selection of `k`.
fn weight(m: &Manifest, id: &str, depth: usize) -> usize {
    let Some(a) = m.activity(id) else { return 0 };
    let Some(s) = &a.structure else { return 1 };
    if depth > m.activities.len() {
        return 0;
    }
    let mut ws: Vec<usize> = s.children.iter().map(|c| weight(m, c, depth + 1)).collect();
    match s.mode {
        StructureMode::Sequence => ws.iter().sum(),
        StructureMode::Selection => {
            ws.sort_unstable_by(|a, b| b.cmp(a));
            ws.iter().take(s.required()).sum()
        }
    }
}

/// Completed leaf weight; a completed structure counts in full.
fn done(m: &Manifest, run: &Run, user: &str, id: &str, depth: usize) -> usize {
    let Some(a) = m.activity(id) else { return 0 };
    if run.is_complete(user, id) {
        return weight(m, id, depth);
    }
    let Some(s) = &a.structure else { return 0 };
    if depth > m.activities.len() {
        return 0;
    }
    let sum: usize = s.children.iter().map(|c| done(m, run, user, c, depth + 1)).sum();
    sum.min(weight(m, id, depth))
}

pub fn run_status(run: &Run, m: &Manifest) -> RunStatusReport {
    let plays = run
        .play_states
        .iter()
        .zip(&m.method.plays)
        .map(|(ps, play)| {
            let current = match ps.position {
                PlayPosition::Act(i) => Some(i),
                PlayPosition::Done => None,
            };
            PlayProgress {
                play_id: ps.play_id.clone(),
                current_act: current,
                current_act_id: current.and_then(|i| play.acts.get(i)).map(|a| a.id.clone()),
            }
        })
        .collect();

    let mut users = BTreeMap::new();
    for (user, roles) in &run.assignments {
        let addressed: BTreeSet<&str> = m
            .role_parts()
            .filter(|rp| roles.contains(&rp.role_ref))
            .map(|rp| rp.activity_ref.as_str())
            .collect();
        let total: usize = addressed.iter().map(|a| weight(m, a, 0)).sum();
        if total == 0 {
            continue;
        }
        let completed: usize = addressed.iter().map(|a| done(m, run, user, a, 0)).sum();
        users.insert(
            user.clone(),
            UserProgress {
                completed,
                total,
                fraction: completed as f64 / total as f64,
            },
        );
    }

    RunStatusReport {
        run_id: run.id.clone(),
        status: run.status,
        plays,
        users,
    }
}
