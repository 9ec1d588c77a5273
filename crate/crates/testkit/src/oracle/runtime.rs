//! Brute-force method automaton: state is the raw set of finished leaves
//! per user, everything else is recomputed from scratch on every query.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use elab_core::clock::Timestamp;
use elab_core::learning_design::{
    Act, Activity, ActivityKind, Manifest, MaxPersons, Play, Role, RoleKind, RolePart, StructureMode,
};
use elab_core::runtime::{PlayPosition, Run, RunEvent, RunEventData, RunState, create_run, replay_run};

/// Event shape compared between model and implementation.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Sig {
    Created,
    Completed {
        user: String,
        activity: String,
        structures: BTreeSet<String>,
    },
    ActAdvanced { play: String, from: usize, to: usize },
    PlayDone { play: String },
    RunDone,
    Notified { role: String, activity: String },
    Revealed { activity: String },
}

pub fn sig_of(e: &RunEvent) -> Sig {
    match &e.data {
        RunEventData::RunCreated { .. } => Sig::Created,
        RunEventData::ActivityCompleted {
            user,
            activity_id,
            structures,
        } => Sig::Completed {
            user: user.clone(),
            activity: activity_id.clone(),
            structures: structures.iter().cloned().collect(),
        },
        RunEventData::ActAdvanced {
            play_id,
            from_index,
            to_index,
        } => Sig::ActAdvanced {
            play: play_id.clone(),
            from: *from_index,
            to: *to_index,
        },
        RunEventData::PlayDone { play_id } => Sig::PlayDone { play: play_id.clone() },
        RunEventData::RunDone => Sig::RunDone,
        RunEventData::ActivityRevealed { activity_id } => Sig::Revealed {
            activity: activity_id.clone(),
        },
        RunEventData::Notified {
            target_role,
            activity_id,
        } => Sig::Notified {
            role: target_role.clone(),
            activity: activity_id.clone(),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RefRun {
    pub users: BTreeMap<String, BTreeSet<String>>,
    /// Current act per play; None once the play is done.
    pub pos: Vec<Option<usize>>,
    pub leaves: BTreeMap<String, BTreeSet<String>>,
    pub recorded: BTreeMap<String, BTreeSet<String>>,
    pub revealed: BTreeSet<String>,
    pub done: bool,
}

impl RefRun {
    pub fn new(m: &Manifest, users: BTreeMap<String, BTreeSet<String>>) -> (RefRun, Vec<Sig>) {
        let mut r = RefRun {
            leaves: users.keys().map(|u| (u.clone(), BTreeSet::new())).collect(),
            recorded: users.keys().map(|u| (u.clone(), BTreeSet::new())).collect(),
            users,
            pos: m.method.plays.iter().map(|_| Some(0)).collect(),
            revealed: BTreeSet::new(),
            done: false,
        };
        let mut sigs = vec![Sig::Created];
        r.settle(m, &mut sigs);
        (r, sigs)
    }

    fn act_of<'m>(m: &'m Manifest, p: usize, i: usize) -> &'m Act {
        &m.method.plays[p].acts[i]
    }

    pub fn finished(&self, m: &Manifest, user: &str, id: &str) -> bool {
        let a = m.activity(id).expect("known activity");
        match &a.structure {
            None => self.leaves[user].contains(id),
            Some(s) => {
                let need = match s.mode {
                    StructureMode::Sequence => s.children.len(),
                    StructureMode::Selection => s.number_to_select.unwrap() as usize,
                };
                s.children.iter().filter(|c| self.finished(m, user, c)).count() >= need
            }
        }
    }

    fn holders<'a>(&'a self, role: &'a str) -> impl Iterator<Item = &'a String> + 'a {
        self.users
            .iter()
            .filter(move |(_, rs)| rs.contains(role))
            .map(|(u, _)| u)
    }

    fn act_finished(&self, m: &Manifest, p: usize, i: usize) -> bool {
        Self::act_of(m, p, i)
            .role_parts
            .iter()
            .all(|rp| self.holders(&rp.role_ref).all(|u| self.finished(m, u, &rp.activity_ref)))
    }

    fn settle(&mut self, m: &Manifest, sigs: &mut Vec<Sig>) {
        for p in 0..self.pos.len() {
            while let Some(i) = self.pos[p] {
                if !self.act_finished(m, p, i) {
                    break;
                }
                let play = &m.method.plays[p];
                if i + 1 == play.acts.len() {
                    self.pos[p] = None;
                    sigs.push(Sig::PlayDone { play: play.id.clone() });
                } else {
                    self.pos[p] = Some(i + 1);
                    sigs.push(Sig::ActAdvanced {
                        play: play.id.clone(),
                        from: i,
                        to: i + 1,
                    });
                }
            }
        }
        if !self.done && self.pos.iter().all(Option::is_none) {
            self.done = true;
            sigs.push(Sig::RunDone);
        }
    }

    fn my_role_parts<'m>(&self, m: &'m Manifest, user: &str) -> Vec<&'m RolePart> {
        let roles = &self.users[user];
        let mut out = Vec::new();
        for (p, pos) in self.pos.iter().enumerate() {
            if let Some(i) = pos {
                out.extend(
                    Self::act_of(m, p, *i)
                        .role_parts
                        .iter()
                        .filter(|rp| roles.contains(&rp.role_ref)),
                );
            }
        }
        out
    }

    fn walk(&self, m: &Manifest, user: &str, id: &str, top: bool, out: &mut Vec<(String, bool)>) {
        let a = m.activity(id).unwrap();
        let fin = self.finished(m, user, id);
        if let Some(s) = &a.structure {
            if fin {
                return;
            }
            let open: Vec<&String> = s.children.iter().filter(|c| !self.finished(m, user, c)).collect();
            let shown = match s.mode {
                StructureMode::Sequence => open.into_iter().take(1).collect::<Vec<_>>(),
                StructureMode::Selection => open,
            };
            for c in shown {
                self.walk(m, user, c, false, out);
            }
            return;
        }
        if a.kind == ActivityKind::Support && a.initially_hidden && !self.revealed.contains(id) {
            return;
        }
        if !fin {
            out.push((id.to_string(), true));
        } else if top {
            out.push((id.to_string(), false));
        }
    }

    /// (activity, actionable) in presentation order.
    pub fn visible(&self, m: &Manifest, user: &str) -> Vec<(String, bool)> {
        let mut raw = Vec::new();
        for rp in self.my_role_parts(m, user) {
            self.walk(m, user, &rp.activity_ref, true, &mut raw);
        }
        let mut seen = HashSet::new();
        raw.into_iter().filter(|(id, _)| seen.insert(id.clone())).collect()
    }

    fn scope_structures(&self, m: &Manifest, user: &str) -> BTreeSet<String> {
        let mut stack: Vec<String> = self
            .my_role_parts(m, user)
            .into_iter()
            .map(|rp| rp.activity_ref.clone())
            .collect();
        let mut out = BTreeSet::new();
        let mut seen = BTreeSet::new();
        while let Some(id) = stack.pop() {
            if !seen.insert(id.clone()) {
                continue;
            }
            if let Some(s) = &m.activity(&id).unwrap().structure {
                out.insert(id.clone());
                stack.extend(s.children.iter().cloned());
            }
        }
        out
    }

    pub fn complete(&mut self, m: &Manifest, user: &str, id: &str) -> Option<Vec<Sig>> {
        if self.done || !self.visible(m, user).contains(&(id.to_string(), true)) {
            return None;
        }
        let scope = self.scope_structures(m, user);
        self.leaves.get_mut(user).unwrap().insert(id.to_string());
        let newly: BTreeSet<String> = scope
            .into_iter()
            .filter(|s| !self.recorded[user].contains(s) && self.finished(m, user, s))
            .collect();
        self.recorded.get_mut(user).unwrap().extend(newly.iter().cloned());
        let mut sigs = vec![Sig::Completed {
            user: user.to_string(),
            activity: id.to_string(),
            structures: newly,
        }];
        self.settle(m, &mut sigs);
        Some(sigs)
    }

    pub fn notify(&mut self, target_role: &str, id: &str) -> Vec<Sig> {
        let mut sigs = vec![Sig::Notified {
            role: target_role.to_string(),
            activity: id.to_string(),
        }];
        if self.revealed.insert(id.to_string()) {
            sigs.push(Sig::Revealed { activity: id.to_string() });
        }
        sigs
    }

    /// Compares against the implementation's persistent state.
    pub fn matches(&self, run: &Run) -> Result<(), String> {
        let pos: Vec<Option<usize>> = run
            .play_states
            .iter()
            .map(|p| match p.position {
                PlayPosition::Act(i) => Some(i),
                PlayPosition::Done => None,
            })
            .collect();
        if pos != self.pos {
            return Err(format!("positions {pos:?} vs model {:?}", self.pos));
        }
        if (run.status == RunState::Completed) != self.done {
            return Err(format!("status {:?} vs model done={}", run.status, self.done));
        }
        if run.revealed != self.revealed {
            return Err("revealed sets differ".into());
        }
        for u in self.users.keys() {
            let have: BTreeSet<String> = run
                .completion
                .get(u)
                .map(|c| c.keys().cloned().collect())
                .unwrap_or_default();
            let want: BTreeSet<String> = self.leaves[u].union(&self.recorded[u]).cloned().collect();
            if have != want {
                return Err(format!("completion of {u}: {have:?} vs model {want:?}"));
            }
        }
        Ok(())
    }
}

pub const ROLE_LEARNER: &str = "L";
pub const ROLE_STAFF: &str = "T";

/// Activities available to enumerated methods: two leaves, a hidden
/// support, a two-step sequence and a pick-one selection.
fn pool_manifest() -> Manifest {
    let mut m = Manifest::empty("enum", "Enumerated");
    m.roles = vec![
        Role {
            id: ROLE_LEARNER.into(),
            kind: RoleKind::Learner,
            min_persons: 0,
            max_persons: MaxPersons::Unbounded,
        },
        Role {
            id: ROLE_STAFF.into(),
            kind: RoleKind::Staff,
            min_persons: 0,
            max_persons: MaxPersons::Unbounded,
        },
    ];
    let mut h = Activity::learning("h", "Hint");
    h.kind = ActivityKind::Support;
    h.initially_hidden = true;
    let mut sel = Activity::structure("k", "Pick", StructureMode::Selection, &["c1", "c2"]);
    sel.structure.as_mut().unwrap().number_to_select = Some(1);
    m.activities = vec![
        Activity::learning("a1", "A1"),
        Activity::learning("a2", "A2"),
        h,
        Activity::learning("b1", "B1"),
        Activity::learning("b2", "B2"),
        Activity::structure("q", "Steps", StructureMode::Sequence, &["b1", "b2"]),
        Activity::learning("c1", "C1"),
        Activity::learning("c2", "C2"),
        sel,
    ];
    m
}

pub const TOP_ACTIVITIES: &[&str] = &["a1", "a2", "h", "q", "k"];

/// Act sizes per play with at most 2 plays, 3 acts and 3 role-parts in total.
fn shapes() -> Vec<Vec<Vec<usize>>> {
    let mut plays_alone: Vec<Vec<usize>> = Vec::new();
    fn acts(rem_acts: usize, rem_rps: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if !cur.is_empty() {
            out.push(cur.clone());
        }
        if rem_acts == 0 {
            return;
        }
        for k in 1..=rem_rps {
            cur.push(k);
            acts(rem_acts - 1, rem_rps - k, cur, out);
            cur.pop();
        }
    }
    acts(3, 3, &mut Vec::new(), &mut plays_alone);
    let count = |p: &Vec<usize>| (p.len(), p.iter().sum::<usize>());
    let mut out: Vec<Vec<Vec<usize>>> = plays_alone.iter().map(|p| vec![p.clone()]).collect();
    for a in &plays_alone {
        for b in &plays_alone {
            let (na, ra) = count(a);
            let (nb, rb) = count(b);
            if na + nb <= 3 && ra + rb <= 3 {
                out.push(vec![a.clone(), b.clone()]);
            }
        }
    }
    out
}

/// Every method over the pool within the size limits.
pub fn enumerate_methods() -> Vec<Manifest> {
    let base = pool_manifest();
    let options: Vec<(&str, &str)> = [ROLE_LEARNER, ROLE_STAFF]
        .iter()
        .flat_map(|r| TOP_ACTIVITIES.iter().map(move |a| (*r, *a)))
        .collect();
    let mut out = Vec::new();
    for shape in shapes() {
        let slots: usize = shape.iter().flatten().sum();
        let total = options.len().pow(slots as u32);
        for mut code in 0..total {
            let mut m = base.clone();
            for (pi, play) in shape.iter().enumerate() {
                let mut acts = Vec::new();
                for (ai, n) in play.iter().enumerate() {
                    let mut rps = Vec::new();
                    for ri in 0..*n {
                        let (role, act) = options[code % options.len()];
                        code /= options.len();
                        rps.push(RolePart {
                            id: format!("p{pi}a{ai}r{ri}"),
                            role_ref: role.into(),
                            activity_ref: act.into(),
                        });
                    }
                    acts.push(Act {
                        id: format!("p{pi}a{ai}"),
                        role_parts: rps,
                    });
                }
                m.method.plays.push(Play {
                    id: format!("p{pi}"),
                    acts,
                });
            }
            out.push(m);
        }
    }
    out
}

/// User populations: one or two users over the two roles.
pub fn assignments() -> Vec<BTreeMap<String, BTreeSet<String>>> {
    let set = |rs: &[&str]| rs.iter().map(|r| r.to_string()).collect::<BTreeSet<_>>();
    vec![
        [("u1".to_string(), set(&[ROLE_LEARNER]))].into(),
        [("u1".to_string(), set(&[ROLE_LEARNER])), ("u2".to_string(), set(&[ROLE_LEARNER]))].into(),
        [("u1".to_string(), set(&[ROLE_LEARNER])), ("u2".to_string(), set(&[ROLE_STAFF]))].into(),
        [("u1".to_string(), set(&[ROLE_LEARNER, ROLE_STAFF]))].into(),
    ]
}

#[derive(Debug, Default, Clone, Copy)]
pub struct Coverage {
    pub states: usize,
    pub transitions: usize,
    pub terminal_states: usize,
}

enum Action {
    Complete(String, String),
    Notify(String, String),
}

/// Explores every reachable state of the method under every legal
/// completion and notification order, comparing visible sets, emitted
/// events and state at each edge. States are memoized: any permutation is
/// a path through the explored graph.
pub fn compare_exhaustively(
    m: &Manifest,
    users: &BTreeMap<String, BTreeSet<String>>,
) -> Result<Coverage, String> {
    let (run, events) = create_run("run", "uol", m, users.clone(), Timestamp::ZERO).map_err(|e| e.to_string())?;
    let (model, sigs) = RefRun::new(m, users.clone());
    let got: Vec<Sig> = events.iter().map(sig_of).collect();
    if got != sigs {
        return Err(format!("create: {got:?} vs model {sigs:?}"));
    }
    let mut cov = Coverage::default();
    let mut seen = HashSet::new();
    explore(m, run, events, model, &mut seen, &mut cov)?;
    Ok(cov)
}

fn explore(
    m: &Manifest,
    run: Run,
    log: Vec<RunEvent>,
    model: RefRun,
    seen: &mut HashSet<RefRun>,
    cov: &mut Coverage,
) -> Result<(), String> {
    if !seen.insert(model.clone()) {
        return Ok(());
    }
    cov.states += 1;
    model.matches(&run)?;
    let replayed = replay_run(&log).map_err(|e| format!("replay failed: {e}"))?;
    if replayed != run {
        return Err("replayed run differs from live run".into());
    }

    let mut actions = Vec::new();
    for u in model.users.keys() {
        let want = model.visible(m, u);
        let got: Vec<(String, bool)> = run
            .visible_activities(m, u)
            .map_err(|e| e.to_string())?
            .into_iter()
            .map(|v| (v.activity_id, v.actionable))
            .collect();
        if got != want {
            return Err(format!("visible({u}): {got:?} vs model {want:?}"));
        }
        if !model.done {
            actions.extend(
                want.iter()
                    .filter(|(_, act)| *act)
                    .map(|(a, _)| Action::Complete(u.clone(), a.clone())),
            );
        }
    }
    let staff = model.users.iter().find(|(_, rs)| rs.contains(ROLE_STAFF)).map(|(u, _)| u.clone());
    if let (Some(staff), false) = (staff, model.done) {
        if m.activity("h").is_some() && !model.revealed.contains("h") {
            actions.push(Action::Notify(staff, "h".into()));
        }
    }
    if actions.is_empty() {
        cov.terminal_states += 1;
    }
    for action in actions {
        let mut run2 = run.clone();
        let mut model2 = model.clone();
        let at = Timestamp(log.len() as f64);
        let (events, sigs) = match &action {
            Action::Complete(u, a) => {
                let sigs = model2.complete(m, u, a).ok_or("model rejected a visible action")?;
                let ev = run2
                    .complete_activity(m, u, a, at)
                    .map_err(|e| format!("complete({u},{a}) rejected: {e}"))?;
                (ev, sigs)
            }
            Action::Notify(u, a) => {
                let sigs = model2.notify(ROLE_LEARNER, a);
                let ev = run2
                    .notify(m, u, ROLE_LEARNER, a, at)
                    .map_err(|e| format!("notify rejected: {e}"))?;
                (ev, sigs)
            }
        };
        let got: Vec<Sig> = events.iter().map(sig_of).collect();
        if got != sigs {
            return Err(format!("events: {got:?} vs model {sigs:?}"));
        }
        cov.transitions += 1;
        let mut log2 = log.clone();
        log2.extend(events);
        explore(m, run2, log2, model2, seen, cov)?;
    }
    Ok(())
}
