use elab_core::clock::Timestamp;
use elab_service::events::{EventLog, LogError, NewEvent, Stream};
use serde_json::json;

fn event(kind: &str) -> NewEvent {
    NewEvent {
        at: Timestamp(1.5),
        stream: Stream::Run,
        stream_id: "run-1".into(),
        kind: kind.into(),
        actor: "ana".into(),
        payload: json!({ "x": 0.1 }),
    }
}

#[test]
fn appends_number_from_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("events.log");
    let mut log = EventLog::open(&path, true).unwrap();
    assert_eq!(log.last_seq(), 0);
    assert_eq!(log.append(event("A")).unwrap(), 1);
    assert_eq!(log.append(event("B")).unwrap(), 2);
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 2);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["seq"], 1);
    assert_eq!(first["stream"], "RUN");
    assert_eq!(log.since(1).len(), 1);
    assert_eq!(log.since(5).len(), 0);
}

#[test]
fn reopen_continues_numbering() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("events.log");
    {
        let mut log = EventLog::open(&path, false).unwrap();
        for _ in 0..3 {
            log.append(event("A")).unwrap();
        }
    }
    let mut log = EventLog::open(&path, false).unwrap();
    assert_eq!(log.events().len(), 3);
    assert_eq!(log.append(event("B")).unwrap(), 4);
    assert_eq!(EventLog::read(&path).unwrap().len(), 4);
}

#[test]
fn gap_is_corrupt_at_the_gap() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("events.log");
    {
        let mut log = EventLog::open(&path, false).unwrap();
        for _ in 0..4 {
            log.append(event("A")).unwrap();
        }
    }
    let text = std::fs::read_to_string(&path).unwrap();
    let kept: Vec<&str> = text.lines().enumerate().filter(|(i, _)| *i != 2).map(|(_, l)| l).collect();
    std::fs::write(&path, kept.join("\n") + "\n").unwrap();
    match EventLog::open(&path, false) {
        Err(LogError::CorruptLog { seq, line, .. }) => assert_eq!((seq, line), (3, 3)),
        other => panic!("{other:?}"),
    }
}

#[test]
fn unparsable_line_is_corrupt() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("events.log");
    {
        let mut log = EventLog::open(&path, false).unwrap();
        log.append(event("A")).unwrap();
    }
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("{not json}\n");
    std::fs::write(&path, &text).unwrap();
    assert!(matches!(EventLog::read(&path), Err(LogError::CorruptLog { seq: 2, .. })));
}

#[test]
fn torn_tail_is_dropped() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("events.log");
    {
        let mut log = EventLog::open(&path, false).unwrap();
        log.append(event("A")).unwrap();
        log.append(event("B")).unwrap();
    }
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, &text[..text.len() - 10]).unwrap();
    let mut log = EventLog::open(&path, false).unwrap();
    assert_eq!(log.last_seq(), 1);
    assert_eq!(log.append(event("C")).unwrap(), 2);
    assert_eq!(EventLog::read(&path).unwrap()[1].kind, "C");
}
