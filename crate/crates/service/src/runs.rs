//! Run bookkeeping shared by the HTTP service and the command line.
//!
//! Every run directory created here carries the backend wiring it was
//! started with (`backends.json`, plus `scenario.json` on mocks), so a run
//! can be resumed, audited or corrected without the original config file.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::Deserialize;
use serde_json::Value;
use thiserror::Error;

use storyloom_core::backend::mock::Scenario;
use storyloom_core::config::{BackendsConfig, ConfigError, EngineConfig, ResolvedBackends, RunConfigFile};
use storyloom_core::director::{default_run_id, Director, DirectorError};
use storyloom_core::memory::{MemoryError, RunHandle, RunState, SharedMemory};
use storyloom_core::schema::{parse_story_script_with, ParseMode, SchemaError, StoryScript};

pub const BACKENDS_FILE: &str = "backends.json";
pub const SCENARIO_FILE: &str = "scenario.json";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ServiceError {
    #[error("unknown run `{0}`")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Internal(String),
}

impl From<MemoryError> for ServiceError {
    fn from(e: MemoryError) -> Self {
        match e {
            MemoryError::UnknownRun(id) => ServiceError::NotFound(id),
            MemoryError::RunExists(_) | MemoryError::Busy => ServiceError::Conflict(e.to_string()),
            MemoryError::Invalid(_) | MemoryError::BadIndex(_) => ServiceError::Invalid(e.to_string()),
            _ => ServiceError::Internal(e.to_string()),
        }
    }
}

impl From<DirectorError> for ServiceError {
    fn from(e: DirectorError) -> Self {
        match e {
            DirectorError::Memory(m) => m.into(),
            DirectorError::NotReviewable(_) => ServiceError::Conflict(e.to_string()),
            DirectorError::BadIndex(_) => ServiceError::Invalid(e.to_string()),
            other => ServiceError::Internal(other.to_string()),
        }
    }
}

impl From<SchemaError> for ServiceError {
    fn from(e: SchemaError) -> Self {
        ServiceError::Invalid(format!("script: {e}"))
    }
}

fn config_error(e: ConfigError) -> ServiceError {
    match e {
        ConfigError::Backend(b) => ServiceError::Internal(b.to_string()),
        other => ServiceError::Invalid(other.to_string()),
    }
}

/// Body of a run creation request.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewRun {
    /// Script object, or listing text (parsed leniently).
    pub script: Value,
    /// Replaces the engine settings of the service config when present.
    #[serde(default)]
    pub config: Option<EngineConfig>,
    /// Inline mock scenario; only accepted when the backends are mocks.
    #[serde(default)]
    pub scenario: Option<Scenario>,
    #[serde(default)]
    pub run_id: Option<String>,
}

pub fn parse_script(value: &Value) -> Result<StoryScript, ServiceError> {
    match value {
        Value::String(text) => Ok(parse_story_script_with(text, ParseMode::Lenient)?),
        Value::Object(_) => Ok(StoryScript::from_value(value)?),
        _ => Err(ServiceError::Invalid("script must be an object or listing text".into())),
    }
}

/// Rebuilds the backends a run directory was started with. Without a
/// `backends.json`, `fallback` is used.
pub fn backends_for_run(
    dir: &Path,
    script: &StoryScript,
    fallback: Option<&BackendsConfig>,
) -> Result<ResolvedBackends, ServiceError> {
    let path = dir.join(BACKENDS_FILE);
    let mut cfg: BackendsConfig = match std::fs::read(&path) {
        Ok(bytes) => serde_json::from_slice(&bytes)
            .map_err(|e| ServiceError::Internal(format!("{}: {e}", path.display())))?,
        Err(_) => fallback
            .cloned()
            .ok_or_else(|| ServiceError::Invalid(format!("{} has no {BACKENDS_FILE}; pass --config", dir.display())))?,
    };
    if let Some(s) = &cfg.scenario {
        if s.is_relative() {
            cfg.scenario = Some(dir.join(s));
        }
    }
    cfg.resolve(Some(script), None).map_err(config_error)
}

/// Run registry plus the directors driving its runs.
pub struct RunManager {
    memory: SharedMemory,
    config: RunConfigFile,
    directors: Mutex<HashMap<String, Director>>,
}

impl RunManager {
    /// Runs live under `config.runs_dir`.
    pub fn new(config: RunConfigFile) -> Self {
        Self {
            memory: SharedMemory::persistent(config.runs_dir.clone()),
            config,
            directors: Mutex::new(HashMap::new()),
        }
    }

    pub fn memory(&self) -> &SharedMemory {
        &self.memory
    }

    pub fn config(&self) -> &RunConfigFile {
        &self.config
    }

    pub fn runs_dir(&self) -> &Path {
        &self.config.runs_dir
    }

    /// Registers every run directory on disk and returns the runs that
    /// still have pipeline work pending.
    pub fn open_existing(&self) -> Vec<Arc<RunHandle>> {
        for (dir, e) in self.memory.open_all() {
            tracing::warn!(dir = %dir.display(), error = %e, "skipping run directory");
        }
        self.memory
            .list()
            .into_iter()
            .filter(|s| !s.status.is_settled())
            .filter_map(|s| self.memory.get(&s.run_id).ok())
            .collect()
    }

    /// Validates the request and creates the run. Nothing is driven yet.
    pub fn create(&self, req: NewRun) -> Result<(Arc<RunHandle>, Director), ServiceError> {
        let script = parse_script(&req.script)?;
        let engine = req.config.unwrap_or_else(|| self.config.engine());
        engine.validate().map_err(config_error)?;
        if let Some(s) = &req.scenario {
            let problems = s.problems();
            if !problems.is_empty() {
                return Err(ServiceError::Invalid(format!("scenario: {}", problems.join("; "))));
            }
        }
        let resolved = self
            .config
            .backends
            .resolve(Some(&script), req.scenario)
            .map_err(config_error)?;
        let run_id = req.run_id.unwrap_or_else(|| default_run_id(&script, &engine));
        let handle = self.memory.create_run(&run_id, script, engine)?;
        if let Some(dir) = handle.dir() {
            self.write_wiring(dir, &resolved)?;
        }
        let director = Director::new(resolved.suite);
        self.directors
            .lock()
            .expect("director map poisoned")
            .insert(run_id, director.clone());
        Ok((handle, director))
    }

    fn write_wiring(&self, dir: &Path, resolved: &ResolvedBackends) -> Result<(), ServiceError> {
        let mut backends = self.config.backends.clone();
        if let Some(s) = &resolved.scenario {
            write_json(&dir.join(SCENARIO_FILE), &serde_json::to_value(s).expect("scenario serializes"))?;
            backends.scenario = Some(PathBuf::from(SCENARIO_FILE));
        }
        write_json(&dir.join(BACKENDS_FILE), &serde_json::to_value(&backends).expect("config serializes"))
    }

    /// The director of a run, rebuilt from its directory when needed.
    pub fn director(&self, handle: &RunHandle) -> Result<Director, ServiceError> {
        let mut map = self.directors.lock().expect("director map poisoned");
        if let Some(d) = map.get(handle.run_id()) {
            return Ok(d.clone());
        }
        let state = handle.snapshot();
        let resolved = match handle.dir() {
            Some(dir) => backends_for_run(dir, &state.script, Some(&self.config.backends))?,
            None => self.config.backends.resolve(Some(&state.script), None).map_err(config_error)?,
        };
        let d = Director::new(resolved.suite);
        map.insert(handle.run_id().to_owned(), d.clone());
        Ok(d)
    }

    pub fn get(&self, run_id: &str) -> Result<Arc<RunHandle>, ServiceError> {
        Ok(self.memory.get(run_id)?)
    }

    /// Drives a run to a settled status on the calling thread.
    pub fn drive(&self, handle: &Arc<RunHandle>) -> Result<RunState, ServiceError> {
        let director = self.director(handle)?;
        let claim = handle.claim()?;
        Ok(director.drive(&claim)?)
    }
}

fn write_json(path: &Path, value: &Value) -> Result<(), ServiceError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serializes");
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| ServiceError::Internal(format!("{}: {e}", path.display())))
}
