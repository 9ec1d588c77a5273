//! Device state persisted per learner: `snapshots/<run>/<user>/<class>.json`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use elab_core::device::Snapshot;
use elab_core::scheduler::SnapshotKey;

#[derive(Debug)]
pub struct SnapshotStore {
    root: PathBuf,
    fsync: bool,
    /// Last state written per key, to skip rewriting unchanged files.
    written: BTreeMap<SnapshotKey, Snapshot>,
}

impl SnapshotStore {
    pub fn new(root: PathBuf, fsync: bool) -> Self {
        SnapshotStore {
            root,
            fsync,
            written: BTreeMap::new(),
        }
    }

    fn path_of(&self, key: &SnapshotKey) -> PathBuf {
        self.root
            .join(&key.run_id)
            .join(&key.user)
            .join(format!("{}.json", key.device_class))
    }

    /// Writes atomically (temp file, then rename).
    pub fn save(&mut self, key: &SnapshotKey, snap: &Snapshot) -> std::io::Result<()> {
        if self.written.get(key).is_some_and(|w| w.state == snap.state) {
            return Ok(());
        }
        let path = self.path_of(key);
        let dir = path.parent().expect("snapshot path has a parent");
        std::fs::create_dir_all(dir)?;
        let tmp = path.with_extension("json.tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&serde_json::to_vec(snap).map_err(std::io::Error::other)?)?;
            if self.fsync {
                f.sync_data()?;
            }
        }
        std::fs::rename(&tmp, &path)?;
        self.written.insert(key.clone(), snap.clone());
        Ok(())
    }

    pub fn remove(&mut self, key: &SnapshotKey) -> std::io::Result<()> {
        self.written.remove(key);
        match std::fs::remove_file(self.path_of(key)) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e),
            _ => Ok(()),
        }
    }

    /// Every readable snapshot on disk. Unreadable files are skipped and
    /// reported; the scheduler then falls back to older state.
    pub fn load_all(&mut self) -> (BTreeMap<SnapshotKey, Snapshot>, Vec<String>) {
        let mut out = BTreeMap::new();
        let mut problems = Vec::new();
        for (run, user, class, path) in walk(&self.root) {
            let key = SnapshotKey {
                run_id: run,
                user,
                device_class: class,
            };
            match std::fs::read(&path).map_err(|e| e.to_string()).and_then(|b| {
                serde_json::from_slice::<Snapshot>(&b).map_err(|e| e.to_string())
            }) {
                Ok(s) => {
                    out.insert(key, s);
                }
                Err(e) => problems.push(format!("{}: {e}", path.display())),
            }
        }
        self.written = out.clone();
        (out, problems)
    }
}

fn subdirs(p: &Path) -> Vec<(String, PathBuf)> {
    let Ok(rd) = std::fs::read_dir(p) else { return Vec::new() };
    let mut v: Vec<(String, PathBuf)> = rd
        .filter_map(Result::ok)
        .filter_map(|e| Some((e.file_name().into_string().ok()?, e.path())))
        .collect();
    v.sort();
    v
}

fn walk(root: &Path) -> Vec<(String, String, String, PathBuf)> {
    let mut out = Vec::new();
    for (run, rp) in subdirs(root).into_iter().filter(|(_, p)| p.is_dir()) {
        for (user, up) in subdirs(&rp).into_iter().filter(|(_, p)| p.is_dir()) {
            for (name, fp) in subdirs(&up) {
                if let Some(class) = name.strip_suffix(".json") {
                    out.push((run.clone(), user.clone(), class.to_string(), fp));
                }
            }
        }
    }
    out
}
