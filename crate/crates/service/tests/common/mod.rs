#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::Value;

use storyloom_core::config::{BackendsConfig, ClockMode, RunConfigFile};
use storyloom_core::memory::ProgressEvent;
use storyloom_service::api;
use storyloom_service::runs::RunManager;

pub fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(rel)
}

pub fn listing_text(name: &str) -> String {
    std::fs::read_to_string(fixture(&format!("listings/{name}.json"))).unwrap()
}

/// Mock-backed config under `runs_dir`, with a threshold that keeps the
/// loop going past the first audit.
pub fn mock_config(runs_dir: &Path, scenario: &str) -> RunConfigFile {
    let mut c = RunConfigFile {
        runs_dir: runs_dir.to_path_buf(),
        clock: ClockMode::Logical,
        backends: BackendsConfig::mock(fixture(&format!("scenarios/{scenario}.json"))),
        ..RunConfigFile::default()
    };
    c.director.tau = 99.0;
    c
}

/// Serves `router` on an ephemeral port from a background runtime.
pub fn serve(build: impl FnOnce() -> axum::Router + Send + 'static) -> String {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
        rt.block_on(async move {
            let app = build();
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            let addr: SocketAddr = listener.local_addr().unwrap();
            tx.send(addr).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}

pub fn serve_runs(runs: Arc<RunManager>, token: Option<String>) -> String {
    serve(move || api::router(runs, token))
}

pub fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .into()
}

pub struct Reply {
    pub status: u16,
    pub content_type: String,
    pub body: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.body)))
    }
}

fn finish(mut resp: ureq::http::Response<ureq::Body>) -> Reply {
    let content_type = resp
        .headers()
        .get("content-type")
        .map(|v| v.to_str().unwrap().to_owned())
        .unwrap_or_default();
    Reply {
        status: resp.status().as_u16(),
        content_type,
        body: resp.body_mut().read_to_vec().unwrap(),
    }
}

pub fn get(url: &str) -> Reply {
    finish(agent().get(url).call().unwrap())
}

pub fn post(url: &str, body: &Value) -> Reply {
    finish(agent().post(url).send_json(body).unwrap())
}

pub fn post_raw(url: &str, body: &str) -> Reply {
    finish(
        agent()
            .post(url)
            .header("content-type", "application/json")
            .send(body)
            .unwrap(),
    )
}

/// Reads the NDJSON stream until the server closes it.
pub fn stream_events(url: &str) -> Vec<ProgressEvent> {
    let mut resp = agent().get(url).call().unwrap();
    assert_eq!(resp.status().as_u16(), 200);
    assert_eq!(resp.headers().get("content-type").unwrap(), api::NDJSON);
    let reader = BufReader::new(resp.body_mut().as_reader());
    reader
        .lines()
        .map(|l| serde_json::from_str(&l.unwrap()).unwrap())
        .collect()
}
