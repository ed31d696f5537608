//! The HTTP backend clients against the wire server, with the mock world
//! on the other end of the socket.

mod common;

use serde_json::json;

use storyloom_core::backend::mock::{MockBackends, MockImage, Scenario};
use storyloom_core::backend::http::SuiteEndpoints;
use storyloom_core::backend::wire::WireImage;
use storyloom_core::backend::{EndpointConfig, GenerateRequest};
use storyloom_core::config::{ClockMode, EngineConfig};
use storyloom_core::director::Director;
use storyloom_core::memory::SharedMemory;
use storyloom_core::schema::{parse_story_bytes, ParseMode, StoryScript};
use storyloom_service::wire::wire_router;

use common::*;

fn listing(name: &str) -> StoryScript {
    parse_story_bytes(listing_text(name).as_bytes(), ParseMode::Lenient).unwrap()
}

fn mocks(script: &StoryScript, scenario: &str) -> MockBackends {
    let s = Scenario::load(&fixture(&format!("scenarios/{scenario}.json"))).unwrap();
    MockBackends::new(s.with_script_defaults(script))
}

fn looping() -> EngineConfig {
    let mut c = EngineConfig {
        clock: ClockMode::Logical,
        ..EngineConfig::default()
    };
    c.director.tau = 99.0;
    c
}

fn girl() -> GenerateRequest {
    GenerateRequest {
        prompt: "a girl with curly hair".into(),
        reference: None,
        seed: 7,
        panel_index: None,
    }
}

fn serve_mocks(m: &MockBackends, with_metric: bool) -> String {
    let suite = m.suite();
    let metric = with_metric.then(|| m.perceptual());
    serve(move || wire_router(suite, metric))
}

#[test]
fn pipeline_over_http_matches_the_in_process_run() {
    for scenario in ["girl_hamster", "boy_dragon_cape", "trajectory"] {
        let script = listing("girl_hamster");
        let direct = mocks(&script, scenario);
        let local = Director::new(direct.suite())
            .run_pipeline(&SharedMemory::in_memory(), "r", script.clone(), looping())
            .unwrap();

        let remote = mocks(&script, scenario);
        let base = serve_mocks(&remote, false);
        let dim = remote.scenario().embedding_dim;
        let suite = SuiteEndpoints::single(EndpointConfig::new(base), dim).build().unwrap();
        let mem = SharedMemory::in_memory();
        let over_wire = Director::new(suite).run_pipeline(&mem, "r", script, looping()).unwrap();

        assert_eq!(over_wire.digest(), local.digest(), "{scenario}");
        assert_eq!(over_wire.ci_history, local.ci_history, "{scenario}");
    }
}

#[test]
fn backend_errors_map_to_status_codes() {
    let script = listing("girl_hamster");
    let m = mocks(&script, "girl_hamster");
    let base = serve_mocks(&m, false);
    let image = m.suite().generator.generate(&girl()).unwrap();
    assert!(MockImage::decode(&image).is_some());
    let wire_image = serde_json::to_value(WireImage::from_image(&image)).unwrap();

    let r = post(
        &format!("{base}/v1/edit"),
        &json!({"image": wire_image, "prompt": "make it red", "conditioning_scale": 0.0, "seed": 0}),
    );
    assert_eq!(r.status, 422);
    assert!(r.json()["error"].is_string());

    let r = post(&format!("{base}/v1/distance"), &json!({"a": wire_image, "b": wire_image}));
    assert_eq!(r.status, 404);

    let r = post(&format!("{base}/v1/embed"), &json!({"image": 3}));
    assert_eq!(r.status, 422);

    let r = post(&format!("{base}/v1/embed"), &json!({"image": wire_image}));
    assert_eq!(r.status, 200);
    assert_eq!(r.json()["embedding"].as_array().unwrap().len(), m.scenario().embedding_dim);
}

#[test]
fn distance_is_served_when_a_metric_is_configured() {
    let script = listing("girl_hamster");
    let m = mocks(&script, "girl_hamster");
    let base = serve_mocks(&m, true);
    let image = m.suite().generator.generate(&girl()).unwrap();
    let wire_image = serde_json::to_value(WireImage::from_image(&image)).unwrap();
    let r = post(&format!("{base}/v1/distance"), &json!({"a": wire_image, "b": wire_image}));
    assert_eq!(r.status, 200);
    assert_eq!(r.json()["distance"].as_f64().unwrap(), 0.0);
}
