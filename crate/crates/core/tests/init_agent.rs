use std::path::{Path, PathBuf};

use storyloom_core::backend::mock::{MockBackends, MockImage, Scenario, Service};
use storyloom_core::config::{ClockMode, EngineConfig, InitMode};
use storyloom_core::director::{Director, DirectorError};
use storyloom_core::init::{initialize, InitError};
use storyloom_core::memory::{RunStatus, SharedMemory};
use storyloom_core::schema::{merged_character_prompt, parse_story_bytes, ParseMode, StoryScript};

fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

fn listing() -> StoryScript {
    let bytes = std::fs::read(fixture("listings/girl_hamster.json")).unwrap();
    parse_story_bytes(&bytes, ParseMode::Lenient).unwrap()
}

fn mocks(script: &StoryScript, edit: impl FnOnce(&mut Scenario)) -> MockBackends {
    let mut s = Scenario::load(&fixture("scenarios/girl_hamster.json")).unwrap();
    edit(&mut s);
    MockBackends::new(s.with_script_defaults(script))
}

fn config(mode: InitMode) -> EngineConfig {
    let mut c = EngineConfig {
        clock: ClockMode::Logical,
        ..EngineConfig::default()
    };
    c.director.mode = mode;
    c
}

#[test]
fn one_reference_and_one_call_per_panel() {
    for mode in [InitMode::EditingBased, InitMode::StoryGeneration] {
        let script = listing();
        let m = mocks(&script, |_| {});
        let mem = SharedMemory::in_memory();
        let h = mem.create_run("r", script.clone(), config(mode)).unwrap();
        initialize(&h.claim().unwrap(), &m.suite()).unwrap();
        let gens: Vec<_> = m.log().calls().into_iter().filter(|c| c.service == Service::Generator).collect();
        assert_eq!(gens.len(), script.panel_count() + 1, "{mode:?}");
        assert_eq!(gens[0].detail, merged_character_prompt(&script).unwrap());
        let s = h.snapshot();
        assert!(s.reference.is_some());
        assert_eq!(s.panels.len(), 6);
        assert!(s.panels.iter().all(|p| p.conditioning_scale == 0.37));
        assert_eq!(s.status, RunStatus::Initializing);
        let r = MockImage::decode(&h.image(s.reference.as_ref().unwrap()).unwrap()).unwrap();
        assert_eq!(r.tag, "ref");
    }
}

#[test]
fn a_failing_panel_keeps_the_ones_before_it() {
    let script = listing();
    let m = mocks(&script, |s| {
        s.failures.generate_panels.insert(4);
    });
    let mem = SharedMemory::in_memory();
    let mut cfg = config(InitMode::EditingBased);
    cfg.director.sequential_init = true;
    let h = mem.create_run("r", script.clone(), cfg).unwrap();
    let err = initialize(&h.claim().unwrap(), &m.suite()).unwrap_err();
    assert!(matches!(err, InitError::PartialInit { index: 4, .. }), "{err}");
    let s = h.snapshot();
    assert_eq!(s.panels.iter().map(|p| p.index).collect::<Vec<_>>(), vec![1, 2, 3]);

    // Through the director the run is marked failed with the reason.
    let m = mocks(&script, |s| {
        s.failures.generate_panels.insert(4);
    });
    let mem = SharedMemory::in_memory();
    let err = Director::new(m.suite())
        .run_pipeline(&mem, "r", script, config(InitMode::EditingBased))
        .unwrap_err();
    assert!(matches!(err, DirectorError::Init(InitError::PartialInit { index: 4, .. })));
    let s = mem.snapshot("r").unwrap();
    assert_eq!(s.status, RunStatus::Failed);
    assert_eq!(s.panels.len(), 3);
}

#[test]
fn parallel_and_sequential_init_agree() {
    let script = listing();
    let run = |sequential: bool| {
        let m = mocks(&script, |_| {});
        let mem = SharedMemory::in_memory();
        let mut cfg = config(InitMode::EditingBased);
        cfg.director.sequential_init = sequential;
        let h = mem.create_run("r", script.clone(), cfg).unwrap();
        initialize(&h.claim().unwrap(), &m.suite()).unwrap();
        h.snapshot().image_hashes()
    };
    assert_eq!(run(true), run(false));
}

#[test]
fn same_seed_same_images_other_seed_other_images() {
    let script = listing();
    let run = |seed: u64| {
        let m = mocks(&script, |_| {});
        let mem = SharedMemory::in_memory();
        let mut cfg = config(InitMode::EditingBased);
        cfg.director.seed = seed;
        let h = mem.create_run("r", script.clone(), cfg).unwrap();
        initialize(&h.claim().unwrap(), &m.suite()).unwrap();
        h.snapshot().image_hashes()
    };
    assert_eq!(run(3), run(3));
    assert_ne!(run(3), run(4));
}

#[test]
fn a_failed_reference_stops_before_any_panel() {
    let script = listing();
    let m = mocks(&script, |s| s.failures.reference = true);
    let mem = SharedMemory::in_memory();
    let h = mem.create_run("r", script, config(InitMode::EditingBased)).unwrap();
    let err = initialize(&h.claim().unwrap(), &m.suite()).unwrap_err();
    assert!(matches!(err, InitError::Reference(_)));
    assert!(h.snapshot().panels.is_empty());
    assert_eq!(m.log().count(Service::Generator), 1);
}
