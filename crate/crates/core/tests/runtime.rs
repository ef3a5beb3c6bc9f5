use lpm_core::runtime::{parse_script, run_session, SessionConfig, SessionState, SessionTrace};

const SCRIPT: &str = include_str!("data/golden_script.ndjson");
const GOLDEN: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/golden_trace.ndjson");

fn golden_run() -> SessionTrace {
    run_session(&parse_script(SCRIPT).unwrap(), 16, &SessionConfig::default()).unwrap()
}

/// First chunk whose generation starts at or after `t`.
fn boundary_at(trace: &SessionTrace, t: f64) -> usize {
    trace.records.iter().find(|r| r.timings.gen.start >= t).map_or(trace.records.len(), |r| r.index)
}

#[test]
fn golden_session_states() {
    use SessionState::*;
    let trace = golden_run();
    let changes: Vec<(SessionState, SessionState)> = trace.state_changes.iter().map(|c| (c.from, c.to)).collect();
    assert_eq!(
        changes,
        vec![
            (Warmup, Idle),
            (Idle, Listening),
            (Listening, Responding),
            (Responding, Listening),
            (Listening, Idle),
            (Idle, Terminated),
        ]
    );
    let b = |i: usize| trace.state_changes[i].boundary;
    assert_eq!(b(0), 3, "warmup spans the sink chunks");
    assert_eq!(b(1), boundary_at(&trace, 2500.0));
    assert_eq!(b(2), boundary_at(&trace, 3000.0));
    assert_eq!(b(3), boundary_at(&trace, 4200.0));
    // speech end waits out the grace period
    assert_eq!(b(4), boundary_at(&trace, 6900.0 + 500.0));
    assert_eq!(b(5), boundary_at(&trace, 9000.0));
    assert_eq!(trace.final_state, Terminated);
    assert_eq!(trace.records.len(), b(5));

    // text edits change conditioning only from the next chunk on
    let k = boundary_at(&trace, 6100.0);
    let text = |i: usize| &trace.records[i].stamp.text_hash;
    assert_eq!(text(k - 1), text(k - 2));
    assert_ne!(text(k), text(k - 1));
    assert!(trace.records[..3].iter().all(|r| r.discarded));
    assert!(trace.records[3..].iter().all(|r| !r.discarded));
}

#[test]
fn golden_trace_matches_fixture() {
    let mut buf = Vec::new();
    golden_run().write_ndjson(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    if std::env::var_os("LPM_BLESS").is_some() {
        std::fs::write(GOLDEN, &text).unwrap();
    }
    let want = std::fs::read_to_string(GOLDEN).expect("fixture; regenerate with LPM_BLESS=1");
    assert_eq!(text, want);
}
