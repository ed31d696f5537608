use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use storyloom_core::backend::mock::{MockBackends, Scenario};
use storyloom_core::config::{ClockMode, EngineConfig};
use storyloom_core::director::Director;
use storyloom_core::image::ImageData;
use storyloom_core::memory::{load, JournalEntry, MemoryError, RunStatus, SharedMemory, EVENTS_FILE, OBJECTS_DIR};
use storyloom_core::report::ConsistencyReport;
use storyloom_core::schema::{parse_story_bytes, ParseMode, StoryScript};

fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

fn listing() -> StoryScript {
    let bytes = std::fs::read(fixture("listings/girl_hamster.json")).unwrap();
    parse_story_bytes(&bytes, ParseMode::Lenient).unwrap()
}

fn director(script: &StoryScript) -> Director {
    let s = Scenario::load(&fixture("scenarios/girl_hamster.json")).unwrap();
    Director::new(MockBackends::new(s.with_script_defaults(script)).suite())
}

fn looping() -> EngineConfig {
    let mut c = EngineConfig {
        clock: ClockMode::Logical,
        ..EngineConfig::default()
    };
    c.director.tau = 99.0;
    c
}

fn finished_run(root: &Path) -> storyloom_core::memory::RunState {
    let script = listing();
    let mem = SharedMemory::persistent(root);
    director(&script).run_pipeline(&mem, "r", script, looping()).unwrap()
}

#[test]
fn a_finished_run_loads_back_identically() {
    let dir = tempfile::tempdir().unwrap();
    let live = finished_run(dir.path());
    let loaded = load(&dir.path().join("r")).unwrap();
    assert_eq!(loaded.digest(), live.digest());
    assert_eq!(loaded, live);
    for k in 0..live.ci_history.len() {
        assert!(dir.path().join(format!("r/report_{k}.json")).is_file());
    }
    for p in &live.panels {
        assert!(dir.path().join(format!("r/panels/{}.{}", p.index, p.image.extension())).is_file());
    }
    let mem = SharedMemory::persistent(dir.path());
    assert!(mem.open_all().is_empty());
    assert_eq!(mem.list().len(), 1);
    assert_eq!(mem.snapshot("r").unwrap().status, RunStatus::Done);
}

#[test]
fn a_truncated_report_is_a_corrupt_run() {
    let dir = tempfile::tempdir().unwrap();
    finished_run(dir.path());
    let report = dir.path().join("r/report_0.json");
    let bytes = fs::read(&report).unwrap();
    fs::write(&report, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load(&dir.path().join("r")), Err(MemoryError::CorruptRun(_))));
}

#[test]
fn a_tampered_object_is_a_corrupt_run() {
    let dir = tempfile::tempdir().unwrap();
    finished_run(dir.path());
    let objects = dir.path().join("r").join(OBJECTS_DIR);
    let first = fs::read_dir(&objects).unwrap().next().unwrap().unwrap().path();
    fs::write(&first, b"not the original").unwrap();
    assert!(matches!(load(&dir.path().join("r")), Err(MemoryError::CorruptRun(_))));
}

#[test]
fn a_torn_last_line_is_dropped_on_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let live = finished_run(dir.path());
    let journal = dir.path().join("r").join(EVENTS_FILE);
    let mut bytes = fs::read(&journal).unwrap();
    bytes.extend_from_slice(br#"{"seq": 999, "at": 999, "entry": {"type": "no"#);
    fs::write(&journal, &bytes).unwrap();
    let mem = SharedMemory::persistent(dir.path());
    let h = mem.open(&dir.path().join("r")).unwrap();
    assert_eq!(h.snapshot().digest(), live.digest());
    // Appending after the reopen yields a clean journal.
    h.claim().unwrap().note("after reopen").unwrap();
    let reloaded = load(&dir.path().join("r")).unwrap();
    assert_eq!(reloaded.seq, live.seq + 1);
}

#[test]
fn a_garbled_middle_line_is_a_corrupt_run() {
    let dir = tempfile::tempdir().unwrap();
    finished_run(dir.path());
    let journal = dir.path().join("r").join(EVENTS_FILE);
    let text = fs::read_to_string(&journal).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[3] = "{not json";
    fs::write(&journal, lines.join("\n") + "\n").unwrap();
    assert!(matches!(load(&dir.path().join("r")), Err(MemoryError::CorruptRun(_))));
}

fn report(ci: f64) -> ConsistencyReport {
    ConsistencyReport {
        audit_iteration: 0,
        ordinal: 0,
        findings: Vec::new(),
        panel_similarity: Vec::new(),
        s_cons: ci / 50.0 - 1.0,
        ci,
        repairable: Vec::new(),
    }
}

#[test]
fn ci_outside_0_to_100_is_refused() {
    let mem = SharedMemory::in_memory();
    let h = mem.create_run("r", listing(), EngineConfig::default()).unwrap();
    let w = h.claim().unwrap();
    let r = w.put_image(&ImageData::new("image/png", b"ref".to_vec())).unwrap();
    w.set_reference(&r).unwrap();
    for i in 1..=6 {
        let p = w.put_image(&ImageData::new("image/png", vec![i as u8])).unwrap();
        w.add_panel(i, &p, 0.37).unwrap();
    }
    w.set_status(RunStatus::Auditing, None).unwrap();
    for bad in [-0.001, 100.001, f64::NAN, f64::INFINITY] {
        assert!(matches!(w.record_audit(&report(bad)), Err(MemoryError::OutOfRangeCi(_))), "{bad}");
    }
    assert!(h.snapshot().ci_history.is_empty());
    w.record_audit(&report(0.0)).unwrap();
    let mut second = report(100.0);
    second.ordinal = 1;
    w.record_audit(&second).unwrap();
    assert_eq!(h.snapshot().ci_history, vec![0.0, 100.0]);
    // A stale ordinal is refused.
    assert!(matches!(w.record_audit(&report(50.0)), Err(MemoryError::Invalid(_))));
}

#[test]
fn a_second_writer_is_refused() {
    let mem = SharedMemory::in_memory();
    let h = mem.create_run("r", listing(), EngineConfig::default()).unwrap();
    let w = h.claim().unwrap();
    assert!(matches!(h.claim(), Err(MemoryError::Busy)));
    drop(w);
    assert!(h.claim().is_ok());
    assert!(matches!(
        mem.create_run("r", listing(), EngineConfig::default()),
        Err(MemoryError::RunExists(_))
    ));
}

#[test]
fn readers_see_consistent_snapshots_while_the_run_advances() {
    let script = listing();
    let d = director(&script);
    let mem = SharedMemory::in_memory();
    let h = mem.create_run("r", script, looping()).unwrap();
    let stop = Arc::new(AtomicBool::new(false));
    let readers: Vec<_> = (0..4)
        .map(|_| {
            let h = h.clone();
            let stop = stop.clone();
            std::thread::spawn(move || {
                let mut last_seq = 0;
                let mut seen = 0usize;
                while !stop.load(Ordering::SeqCst) {
                    let s = h.snapshot();
                    assert!(s.seq >= last_seq);
                    last_seq = s.seq;
                    assert_eq!(s.ci_history.len(), s.audits());
                    assert_eq!(s.latest_ci(), s.latest_report.as_ref().map(|r| r.ci));
                    assert!(s.ci_history.len() <= s.repair_passes as usize + 1);
                    for p in &s.panels {
                        assert!(h.image(&p.image).is_some());
                    }
                    // The event that produced this snapshot is already published.
                    let events = h.events();
                    assert!(events.len() as u64 >= s.seq);
                    assert_eq!(events[s.seq as usize - 1].seq, s.seq);
                    seen += 1;
                }
                seen
            })
        })
        .collect();
    let claim = h.claim().unwrap();
    let done = d.drive(&claim).unwrap();
    stop.store(true, Ordering::SeqCst);
    for r in readers {
        assert!(r.join().unwrap() > 0);
    }
    assert_eq!(done.status, RunStatus::Done);
}

#[test]
fn subscribers_see_every_event_once_in_order() {
    let script = listing();
    let d = director(&script);
    let mem = SharedMemory::in_memory();
    let h = mem.create_run("r", script, looping()).unwrap();
    let (past, _, rx) = h.subscribe();
    let claim = h.claim().unwrap();
    let final_state = d.drive(&claim).unwrap();
    drop(claim);
    let live: Vec<_> = rx.try_iter().collect();
    let seqs: Vec<u64> = past.iter().chain(&live).map(|e| e.seq).collect();
    assert_eq!(seqs, (1..=final_state.seq).collect::<Vec<_>>());
    let last = live.last().unwrap();
    assert_eq!(last.status, RunStatus::Done);
    assert!(matches!(last.event, JournalEntry::StatusChanged { to: RunStatus::Done, .. }));
}
