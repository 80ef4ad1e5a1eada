use chrono::{DateTime, Duration, TimeZone, Utc};
use smokewatch_service::alert::{AlertState, BoxScore, Decision, DispatchOutcome};
use smokewatch_service::engine::{Engine, EngineError, FrameReport};
use smokewatch_service::eventlog::{replay_bytes, replay_file, Health, LogError};

fn t(secs: i64) -> DateTime<Utc> {
    Utc.timestamp_opt(1_700_000_000 + secs, 0).unwrap()
}

fn frame(camera: &str, secs: i64, smoke: bool) -> FrameReport {
    FrameReport {
        camera_id: camera.into(),
        captured_at: t(secs),
        sha256: format!("{:064x}", secs),
        width: 256,
        height: 256,
        detections: if smoke {
            vec![BoxScore {
                x0: 10.0,
                y0: 20.0,
                x1: 60.0,
                y1: 90.0,
                score: 0.8,
            }]
        } else {
            Vec::new()
        },
        latency_ms: 12.0,
    }
}

fn engine(dir: &tempfile::TempDir, debounce: u32) -> Engine {
    let mut e = Engine::open(dir.path().join("events.jsonl"), debounce, 600).unwrap();
    e.set_sync(false);
    e
}

fn outcome(endpoint: &str, ok: bool) -> DispatchOutcome {
    DispatchOutcome {
        endpoint: endpoint.into(),
        ok,
        attempts: if ok { 1 } else { 3 },
        error: (!ok).then(|| "HTTP 500".to_string()),
    }
}

#[test]
fn single_detection_frame_raises_pending_alert() {
    let dir = tempfile::tempdir().unwrap();
    let mut e = engine(&dir, 1);
    assert_eq!(e.record_frame(frame("c1", 0, false), t(0)).unwrap().created, None);
    let id = e.record_frame(frame("c1", 30, true), t(31)).unwrap().created.unwrap();
    let alert = e.state().alert(&id).unwrap();
    assert_eq!(alert.state, AlertState::PendingConfirmation);
    assert_eq!(alert.first_seen, t(30));
    assert_eq!(alert.snapshot_sha256, format!("{:064x}", 30));
    assert_eq!(alert.boxes.len(), 1);
}

#[test]
fn debounce_needs_consecutive_frames() {
    let dir = tempfile::tempdir().unwrap();
    let mut e = engine(&dir, 2);
    assert_eq!(e.record_frame(frame("c1", 0, true), t(0)).unwrap().created, None);
    assert_eq!(e.record_frame(frame("c1", 30, false), t(30)).unwrap().created, None);
    assert_eq!(e.record_frame(frame("c1", 60, true), t(60)).unwrap().created, None);
    assert!(e.state().alerts.is_empty());
    let id = e.record_frame(frame("c1", 90, true), t(90)).unwrap().created.unwrap();
    // The alert is dated from the first frame of the streak.
    assert_eq!(e.state().alert(&id).unwrap().first_seen, t(60));
}

#[test]
fn detections_within_window_attach_to_open_alert() {
    let dir = tempfile::tempdir().unwrap();
    let mut e = engine(&dir, 1);
    let id = e.record_frame(frame("c1", 0, true), t(0)).unwrap().created.unwrap();
    let o = e.record_frame(frame("c1", 300, true), t(300)).unwrap();
    assert_eq!((o.created, o.attached.as_deref()), (None, Some(id.as_str())));
    // Other cameras are independent.
    assert!(e.record_frame(frame("c2", 301, true), t(301)).unwrap().created.is_some());
    // Past the window a new alert is raised.
    let later = e.record_frame(frame("c1", 300 + 601, true), t(901)).unwrap();
    assert!(later.created.is_some());
    assert_eq!(e.state().alert(&id).unwrap().frame_count, 2);
    // A decided alert no longer absorbs detections.
    let newest = later.created.unwrap();
    e.decide(&newest, Decision::Reject, "op", t(902)).unwrap();
    assert!(e.record_frame(frame("c1", 903, true), t(903)).unwrap().created.is_some());
}

#[test]
fn decisions_follow_the_transition_table() {
    let dir = tempfile::tempdir().unwrap();
    let mut e = engine(&dir, 1);
    let a = e.record_frame(frame("c1", 0, true), t(0)).unwrap().created.unwrap();
    let b = e.record_frame(frame("c2", 0, true), t(0)).unwrap().created.unwrap();

    let confirmed = e.decide(&a, Decision::Confirm, "alice", t(10)).unwrap();
    assert_eq!(confirmed.state, AlertState::Confirmed);
    assert_eq!(confirmed.operator_id.as_deref(), Some("alice"));
    assert_eq!(confirmed.decided_at, Some(t(10)));
    let dispatched = e.record_dispatch(&a, vec![outcome("http://hook", true)], t(11)).unwrap();
    assert_eq!(dispatched.state, AlertState::Dispatched);

    let rejected = e.decide(&b, Decision::Reject, "bob", t(12)).unwrap();
    assert_eq!(rejected.state, AlertState::Rejected);
    assert!(matches!(
        e.decide(&b, Decision::Confirm, "bob", t(13)),
        Err(EngineError::InvalidTransition(_))
    ));
    assert!(matches!(
        e.record_dispatch(&b, vec![outcome("http://hook", true)], t(13)),
        Err(EngineError::InvalidTransition(_))
    ));
    assert!(matches!(e.decide("nope", Decision::Confirm, "x", t(14)), Err(EngineError::NotFound(_))));
    assert_eq!(e.state().alert(&b).unwrap().operator_id.as_deref(), Some("bob"));
}

#[test]
fn dispatch_outcomes() {
    let dir = tempfile::tempdir().unwrap();
    let mut e = engine(&dir, 1);
    let confirmed = |e: &mut Engine, cam: &str| {
        let id = e.record_frame(frame(cam, 0, true), t(0)).unwrap().created.unwrap();
        e.decide(&id, Decision::Confirm, "op", t(1)).unwrap();
        id
    };
    let down = confirmed(&mut e, "c1");
    let a = e
        .record_dispatch(&down, vec![outcome("http://a", false), outcome("http://b", false)], t(2))
        .unwrap();
    assert_eq!(a.state, AlertState::Confirmed);
    assert!(a.dispatch_failed);
    assert_eq!(e.awaiting_dispatch().len(), 1);
    // The sweep retries later and succeeds.
    let a = e.record_dispatch(&down, vec![outcome("http://a", true)], t(30)).unwrap();
    assert_eq!(a.state, AlertState::Dispatched);
    assert!(!a.dispatch_failed);
    assert_eq!(a.dispatch_log.len(), 3);

    let partial = confirmed(&mut e, "c2");
    let a = e
        .record_dispatch(&partial, vec![outcome("http://a", false), outcome("http://b", true)], t(3))
        .unwrap();
    assert_eq!(a.state, AlertState::Dispatched);
    assert_eq!(a.dispatch_log.iter().filter(|o| !o.ok).count(), 1);

    let none = confirmed(&mut e, "c3");
    let a = e.record_dispatch(&none, Vec::new(), t(4)).unwrap();
    assert!(a.dispatch_failed);
    assert!(e.awaiting_dispatch().iter().any(|x| x.id == none));
}

#[test]
fn health_changes_are_logged_once() {
    let dir = tempfile::tempdir().unwrap();
    let mut e = engine(&dir, 1);
    e.record_health("c1", Health::Healthy, 0, t(0)).unwrap();
    e.record_health("c1", Health::Healthy, 0, t(1)).unwrap();
    e.record_health("c1", Health::Degraded, 3, t(2)).unwrap();
    assert_eq!(e.state().last_seq, 2);
    assert_eq!(e.state().cameras["c1"].health, Some(Health::Degraded));
}

#[test]
fn restart_after_many_events_rebuilds_identical_state() {
    let dir = tempfile::tempdir().unwrap();
    let before = {
        let mut e = engine(&dir, 1);
        let mut secs = 0;
        while e.state().last_seq < 100 {
            secs += 37;
            let cam = ["c1", "c2", "c3"][(secs / 37 % 3) as usize];
            let smoke = secs % 5 != 0;
            if let Some(id) = e.record_frame(frame(cam, secs, smoke), t(secs)).unwrap().created {
                if secs % 2 == 0 {
                    e.decide(&id, Decision::Confirm, "op", t(secs + 1)).unwrap();
                    e.record_dispatch(&id, vec![outcome("http://a", secs % 4 == 0)], t(secs + 2)).unwrap();
                } else {
                    e.decide(&id, Decision::Reject, "op", t(secs + 1)).unwrap();
                }
            }
        }
        e.record_rejected_frame("c2", t(secs + 5), &"0".repeat(64), "bad bytes", t(secs + 5)).unwrap();
        e.state().clone()
    };
    assert!(before.last_seq > 100);
    let after = engine(&dir, 1);
    assert_eq!(after.state(), &before);
    let (replayed, records) = replay_file(dir.path().join("events.jsonl")).unwrap();
    assert_eq!(replayed, before);
    assert_eq!(records.len() as u64, before.last_seq);
    assert!(records.iter().all(|r| r.v == 1));
}

#[test]
fn empty_log_gives_empty_state() {
    let (state, records, _) = replay_bytes(b"").unwrap();
    assert_eq!(state, Default::default());
    assert!(records.is_empty());
    let dir = tempfile::tempdir().unwrap();
    let (state, _) = replay_file(dir.path().join("missing.jsonl")).unwrap();
    assert!(state.alerts.is_empty());
}

#[test]
fn torn_final_line_is_dropped_and_log_stays_appendable() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("events.jsonl");
    let state = {
        let mut e = engine(&dir, 1);
        e.record_frame(frame("c1", 0, true), t(0)).unwrap();
        e.state().clone()
    };
    let mut bytes = std::fs::read(&path).unwrap();
    let good_len = bytes.len();
    bytes.extend_from_slice(br#"{"v":1,"seq":4,"at":"2023-11-14T22:13:20Z","type":"fra"#);
    std::fs::write(&path, &bytes).unwrap();
    let (replayed, _) = replay_file(&path).unwrap();
    assert_eq!(replayed, state);

    let mut e = engine(&dir, 1);
    assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, good_len);
    e.record_frame(frame("c1", 10, false), t(10)).unwrap();
    drop(e);
    let (replayed, records) = replay_file(&path).unwrap();
    assert_eq!(records.last().unwrap().seq, state.last_seq + 1);
    assert_eq!(replayed.cameras["c1"].frames, 2);
}

#[test]
fn invalid_transition_record_halts_replay() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("events.jsonl");
    let id = {
        let mut e = engine(&dir, 1);
        let id = e.record_frame(frame("c1", 0, true), t(0)).unwrap().created.unwrap();
        e.decide(&id, Decision::Reject, "op", t(1)).unwrap();
        id
    };
    let seq = replay_file(&path).unwrap().0.last_seq + 1;
    let forged = format!(
        r#"{{"v":1,"seq":{seq},"at":"2023-11-14T22:13:30Z","type":"alert_transition","alert_id":"{id}","from":"REJECTED","to":"DISPATCHED"}}"#
    );
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.extend_from_slice(forged.as_bytes());
    bytes.push(b'\n');
    bytes.extend_from_slice(b"\n");
    std::fs::write(&path, &bytes).unwrap();
    let err = replay_file(&path).unwrap_err();
    assert!(matches!(err, LogError::Integrity { .. }), "{err}");
    assert!(Engine::open(&path, 1, 600).is_err());
}

#[test]
fn corrupt_middle_line_is_an_integrity_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("events.jsonl");
    {
        let mut e = engine(&dir, 1);
        e.record_frame(frame("c1", 0, false), t(0)).unwrap();
    }
    let mut bytes = b"not json\n".to_vec();
    bytes.extend(std::fs::read(&path).unwrap());
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(replay_file(&path), Err(LogError::Integrity { line: 1, .. })));
}

#[test]
fn stream_messages_follow_commits() {
    let dir = tempfile::tempdir().unwrap();
    let mut e = engine(&dir, 1);
    let mut rx = e.subscribe();
    let id = e.record_frame(frame("c1", 0, true), t(0)).unwrap().created.unwrap();
    e.decide(&id, Decision::Confirm, "op", t(1) + Duration::seconds(1)).unwrap();
    let kinds: Vec<(String, Option<AlertState>)> = std::iter::from_fn(|| rx.try_recv().ok())
        .map(|m| (m.kind, m.alert.map(|a| a.state)))
        .collect();
    assert_eq!(
        kinds,
        vec![
            ("alert_created".to_string(), Some(AlertState::New)),
            ("alert_transition".to_string(), Some(AlertState::PendingConfirmation)),
            ("alert_transition".to_string(), Some(AlertState::Confirmed)),
        ]
    );
}
