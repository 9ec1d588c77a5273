//! Discrete-event model of the FIFO fixed-quantum time-sharing policy for
//! devices whose restores complete instantly. Sessions are plain records;
//! no device is simulated.

use std::collections::{BTreeMap, VecDeque};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Real,
    Shadow,
    Queued,
    Closed,
}

#[derive(Debug, Clone)]
pub struct Sess {
    pub class: String,
    pub key: (String, String),
    pub mode: Mode,
    pub instance: Option<String>,
    pub slice_start: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cmd {
    Request { run: String, user: String, class: String },
    Release { session: String },
    Tick,
}

/// (transition name, session id) in emission order.
pub type Out = Vec<(&'static str, String)>;

#[derive(Debug, Clone)]
pub struct Des {
    pub quantum: f64,
    pub shadow: bool,
    pub instances: BTreeMap<String, Vec<String>>,
    pub sessions: BTreeMap<String, Sess>,
    pub queue: BTreeMap<String, VecDeque<String>>,
    pub next: u64,
    /// Wall time at which each session first reached REAL.
    pub first_real: BTreeMap<String, f64>,
}

impl Des {
    pub fn new(quantum: f64, shadow: bool, instances: BTreeMap<String, Vec<String>>) -> Self {
        Des {
            quantum,
            shadow,
            instances,
            sessions: BTreeMap::new(),
            queue: BTreeMap::new(),
            next: 1,
            first_real: BTreeMap::new(),
        }
    }

    fn held(&self, inst: &str) -> bool {
        self.sessions
            .values()
            .any(|s| s.mode == Mode::Real && s.instance.as_deref() == Some(inst))
    }

    fn free(&self, class: &str) -> Vec<String> {
        self.instances[class].iter().filter(|i| !self.held(i)).cloned().collect()
    }

    fn make_real(&mut self, id: &str, inst: String, t: f64) {
        let s = self.sessions.get_mut(id).unwrap();
        s.mode = Mode::Real;
        s.instance = Some(inst);
        s.slice_start = t;
        self.first_real.entry(id.to_string()).or_insert(t);
    }

    fn promote(&mut self, class: &str, t: f64, out: &mut Out) {
        while let Some(inst) = self.free(class).into_iter().next() {
            let Some(id) = self.queue.get_mut(class).and_then(|q| q.pop_front()) else {
                break;
            };
            self.make_real(&id, inst, t);
            out.push(("GRANTED", id.clone()));
            out.push(("SETTLED", id));
        }
    }

    /// Returns None when the implementation is expected to reject the command.
    pub fn step(&mut self, cmd: &Cmd, t: f64) -> Option<Out> {
        let mut out = Vec::new();
        match cmd {
            Cmd::Request { run, user, class } => {
                if !self.instances.contains_key(class) {
                    return None;
                }
                let key = (run.clone(), user.clone());
                if self
                    .sessions
                    .values()
                    .any(|s| s.mode != Mode::Closed && s.class == *class && s.key == key)
                {
                    return None;
                }
                let id = format!("s-{}", self.next);
                self.next += 1;
                let free = self.free(class);
                self.sessions.insert(
                    id.clone(),
                    Sess {
                        class: class.clone(),
                        key,
                        mode: Mode::Queued,
                        instance: None,
                        slice_start: 0.0,
                    },
                );
                out.push(("SESSION_CREATED", id.clone()));
                if let Some(inst) = free.into_iter().next() {
                    self.make_real(&id, inst, t);
                    out.push(("SETTLED", id));
                } else {
                    if self.shadow {
                        self.sessions.get_mut(&id).unwrap().mode = Mode::Shadow;
                    }
                    self.queue.entry(class.clone()).or_default().push_back(id);
                }
            }
            Cmd::Release { session } => {
                let s = self.sessions.get(session)?.clone();
                if s.mode == Mode::Closed {
                    return None;
                }
                let sm = self.sessions.get_mut(session).unwrap();
                sm.mode = Mode::Closed;
                sm.instance = None;
                if let Some(q) = self.queue.get_mut(&s.class) {
                    q.retain(|x| x != session);
                }
                out.push(("CLOSED", session.clone()));
                if s.mode == Mode::Real {
                    self.promote(&s.class, t, &mut out);
                }
            }
            Cmd::Tick => {
                let classes: Vec<String> = self.instances.keys().cloned().collect();
                for class in classes {
                    let waiting = self.queue.get(&class).map_or(0, |q| q.len());
                    let free = self.free(&class).len();
                    let budget = waiting.saturating_sub(free);
                    let mut expired: Vec<(f64, String)> = self
                        .sessions
                        .iter()
                        .filter(|(_, s)| s.class == class && s.mode == Mode::Real && t - s.slice_start >= self.quantum)
                        .map(|(id, s)| (s.slice_start, id.clone()))
                        .collect();
                    expired.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                    for (_, id) in expired.into_iter().take(budget) {
                        let s = self.sessions.get_mut(&id).unwrap();
                        s.mode = if self.shadow { Mode::Shadow } else { Mode::Queued };
                        s.instance = None;
                        self.queue.entry(class.clone()).or_default().push_back(id.clone());
                        out.push(("PREEMPTED", id));
                    }
                    self.promote(&class, t, &mut out);
                }
            }
        }
        Some(out)
    }
}
