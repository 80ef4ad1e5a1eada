//! Randomised command sequences against the engine, checked against an
//! explicit transition table and a shadow copy of every alert's state.

use std::collections::HashMap;

use chrono::{DateTime, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smokewatch_service::alert::{AlertState, BoxScore, Decision, DispatchOutcome, ALL_STATES};
use smokewatch_service::engine::{Engine, EngineError, FrameReport};
use smokewatch_service::eventlog::{replay_file, Event};

const TABLE: [(AlertState, AlertState); 4] = [
    (AlertState::New, AlertState::PendingConfirmation),
    (AlertState::PendingConfirmation, AlertState::Confirmed),
    (AlertState::PendingConfirmation, AlertState::Rejected),
    (AlertState::Confirmed, AlertState::Dispatched),
];

fn allowed(from: AlertState, to: AlertState) -> bool {
    TABLE.contains(&(from, to))
}

fn t(secs: i64) -> DateTime<Utc> {
    Utc.timestamp_opt(1_700_000_000 + secs, 0).unwrap()
}

fn frame(camera: usize, secs: i64, smoke: bool) -> FrameReport {
    FrameReport {
        camera_id: format!("cam-{camera}"),
        captured_at: t(secs),
        sha256: format!("{secs:064x}"),
        width: 64,
        height: 64,
        detections: if smoke {
            vec![BoxScore {
                x0: 1.0,
                y0: 1.0,
                x1: 9.0,
                y1: 9.0,
                score: 0.9,
            }]
        } else {
            Vec::new()
        },
        latency_ms: 1.0,
    }
}

#[test]
fn random_commands_never_break_the_transition_table() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("events.jsonl");
    let mut engine = Engine::open(&path, 1, 600).unwrap();
    engine.set_sync(false);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut shadow: HashMap<String, AlertState> = HashMap::new();
    let mut ids: Vec<String> = Vec::new();
    let mut clock = 0i64;
    let mut accepted = 0usize;
    let mut refused = 0usize;

    while accepted < 10_000 {
        let pick_id = |rng: &mut ChaCha8Rng, ids: &[String]| {
            if ids.is_empty() || rng.random_bool(0.05) {
                "alert-unknown".to_string()
            } else {
                ids[rng.random_range(0..ids.len())].clone()
            }
        };
        match rng.random_range(0..4) {
            0 => {
                clock += rng.random_range(10..400);
                let out = engine
                    .record_frame(frame(rng.random_range(0..3), clock, rng.random_bool(0.6)), t(clock))
                    .unwrap();
                if let Some(id) = out.created {
                    // Created as NEW, then moved to PENDING_CONFIRMATION.
                    assert!(!shadow.contains_key(&id));
                    shadow.insert(id.clone(), AlertState::PendingConfirmation);
                    ids.push(id);
                    accepted += 1;
                }
                if let Some(id) = out.attached {
                    assert!(shadow[&id].is_undecided());
                }
            }
            1 => {
                let id = pick_id(&mut rng, &ids);
                let decision = if rng.random_bool(0.5) { Decision::Confirm } else { Decision::Reject };
                let result = engine.decide(&id, decision, "op", t(clock));
                check(&mut shadow, &id, decision.target(), result, &mut accepted, &mut refused);
            }
            2 => {
                let id = pick_id(&mut rng, &ids);
                let outcomes: Vec<DispatchOutcome> = (0..rng.random_range(0..3))
                    .map(|i| DispatchOutcome {
                        endpoint: format!("http://hook-{i}"),
                        ok: rng.random_bool(0.6),
                        attempts: 1,
                        error: None,
                    })
                    .collect();
                let delivered = outcomes.iter().any(|o| o.ok);
                let result = engine.record_dispatch(&id, outcomes, t(clock));
                match (shadow.get(&id).copied(), &result) {
                    (None, Err(EngineError::NotFound(_))) => {}
                    (Some(AlertState::Confirmed), Ok(a)) => {
                        let expected = if delivered { AlertState::Dispatched } else { AlertState::Confirmed };
                        assert_eq!(a.state, expected);
                        assert_eq!(a.dispatch_failed, !delivered);
                        if delivered {
                            accepted += 1;
                        }
                        shadow.insert(id, expected);
                    }
                    (Some(s), Err(EngineError::InvalidTransition(e))) if s != AlertState::Confirmed => {
                        assert_eq!(e.from, s);
                        refused += 1;
                    }
                    (s, r) => panic!("dispatch on {s:?} gave {r:?}"),
                }
            }
            _ => {
                let id = pick_id(&mut rng, &ids);
                let to = ALL_STATES[rng.random_range(0..ALL_STATES.len())];
                let result = engine.transition(&id, to, None, t(clock));
                check(&mut shadow, &id, to, result, &mut accepted, &mut refused);
            }
        }
    }
    assert!(refused > 1000, "the sequence should exercise refusals too ({refused})");

    for (id, s) in &shadow {
        assert_eq!(engine.state().alert(id).unwrap().state, *s);
    }

    // Every logged transition is in the table and DISPATCHED always has an
    // earlier CONFIRMED for the same alert.
    let (replayed, records) = replay_file(&path).unwrap();
    assert_eq!(&replayed, engine.state());
    let mut seen: HashMap<&str, Vec<AlertState>> = HashMap::new();
    let mut transitions = 0;
    for r in &records {
        match &r.event {
            Event::AlertCreated { alert_id, .. } => {
                seen.insert(alert_id, vec![AlertState::New]);
            }
            Event::AlertTransition { alert_id, from, to, .. } => {
                let history = seen.get_mut(alert_id.as_str()).expect("transition after creation");
                assert_eq!(history.last(), Some(from));
                assert!(allowed(*from, *to), "{from} -> {to}");
                if *to == AlertState::Dispatched {
                    assert!(history.contains(&AlertState::Confirmed));
                }
                history.push(*to);
                transitions += 1;
            }
            _ => {}
        }
    }
    assert!(transitions >= 10_000, "{transitions} transitions");
}

fn check(
    shadow: &mut HashMap<String, AlertState>,
    id: &str,
    to: AlertState,
    result: Result<smokewatch_service::Alert, EngineError>,
    accepted: &mut usize,
    refused: &mut usize,
) {
    match (shadow.get(id).copied(), result) {
        (None, Err(EngineError::NotFound(_))) => *refused += 1,
        (Some(from), Ok(a)) => {
            assert!(allowed(from, to), "engine accepted {from} -> {to}");
            assert_eq!(a.state, to);
            shadow.insert(id.to_string(), to);
            *accepted += 1;
        }
        (Some(from), Err(EngineError::InvalidTransition(e))) => {
            assert!(!allowed(from, to), "engine refused legal {from} -> {to}");
            assert_eq!((e.from, e.to), (from, to));
            *refused += 1;
        }
        (s, r) => panic!("unexpected result for {s:?} -> {to}: {r:?}"),
    }
}
