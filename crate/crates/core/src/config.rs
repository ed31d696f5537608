//! Engine and run configuration.
//!
//! [`EngineConfig`] travels with every run (it is recorded in the journal).
//! [`RunConfigFile`] is the TOML file read by the command-line tool and the
//! service; it adds backend wiring and the run directory root.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::http::{HttpEmbedder, HttpPerceptual, HttpTransport, SuiteEndpoints};
use crate::backend::mock::{MockBackends, Scenario, ScenarioError};
use crate::backend::{BackendError, BackendSuite, EmbedderHandle, EndpointConfig, PerceptualMetric};
use crate::schema::StoryScript;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    #[default]
    EditingBased,
    StoryGeneration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DirectorConfig {
    pub tau: f64,
    pub t_max: u32,
    pub mode: InitMode,
    pub seed: u64,
    pub sequential_init: bool,
    /// Park finished runs in `awaiting_user` instead of `done`.
    pub await_user: bool,
}

impl Default for DirectorConfig {
    fn default() -> Self {
        Self {
            tau: 90.0,
            t_max: 2,
            mode: InitMode::EditingBased,
            seed: 0,
            sequential_init: false,
            await_user: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    pub initial_scale: f64,
    pub step: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// On the 0–100 CI scale.
    pub over_edit_threshold: f64,
    /// Cosine between pre- and post-edit panel above which an edit counts
    /// as invisible.
    pub subtle_threshold: f64,
    pub max_attempts: u32,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            initial_scale: 0.37,
            step: 0.08,
            scale_min: 0.10,
            scale_max: 0.95,
            over_edit_threshold: 60.0,
            subtle_threshold: 0.995,
            max_attempts: 3,
        }
    }
}

/// Timestamp source for journal entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    /// Unix milliseconds.
    #[default]
    System,
    /// The entry's sequence number; makes run artifacts byte-reproducible.
    Logical,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub director: DirectorConfig,
    pub controller: ControllerConfig,
    pub clock: ClockMode,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(String),
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

impl EngineConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let d = &self.director;
        if !(0.0..=100.0).contains(&d.tau) {
            out.push(format!("director.tau {} outside [0, 100]", d.tau));
        }
        let c = &self.controller;
        if !(c.scale_min > 0.0 && c.scale_min <= c.scale_max && c.scale_max <= 1.0) {
            out.push("controller scales must satisfy 0 < scale_min <= scale_max <= 1".into());
        }
        if !(c.scale_min..=c.scale_max).contains(&c.initial_scale) {
            out.push(format!(
                "controller.initial_scale {} outside [scale_min, scale_max]",
                c.initial_scale
            ));
        }
        if !(c.step > 0.0 && c.step.is_finite()) {
            out.push("controller.step must be positive".into());
        }
        if !(0.0..=100.0).contains(&c.over_edit_threshold) {
            out.push("controller.over_edit_threshold outside [0, 100]".into());
        }
        if !(-1.0..=1.0).contains(&c.subtle_threshold) {
            out.push("controller.subtle_threshold outside [-1, 1]".into());
        }
        if c.max_attempts == 0 {
            out.push("controller.max_attempts must be at least 1".into());
        }
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(p))
        }
    }
}

/// Backend wiring: either a mock scenario or network endpoints.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsConfig {
    /// Scenario file driving the mock backends. Mutually exclusive with
    /// the endpoint tables.
    #[serde(default)]
    pub scenario: Option<PathBuf>,
    /// Declared output dimension of the embedder endpoint.
    #[serde(default)]
    pub embedding_dim: Option<usize>,
    #[serde(default)]
    pub vlm: Option<EndpointConfig>,
    #[serde(default)]
    pub generator: Option<EndpointConfig>,
    #[serde(default)]
    pub editor: Option<EndpointConfig>,
    #[serde(default)]
    pub embedder: Option<EndpointConfig>,
    #[serde(default)]
    pub segmenter: Option<EndpointConfig>,
    /// Learned perceptual distance, only needed by the metrics harness.
    #[serde(default)]
    pub perceptual: Option<EndpointConfig>,
    /// Second image embedder for the CLIP-I column of the metrics harness.
    #[serde(default)]
    pub clip_embedder: Option<EndpointConfig>,
    #[serde(default)]
    pub clip_embedding_dim: Option<usize>,
}

/// Backends resolved for one run.
#[derive(Clone)]
pub struct ResolvedBackends {
    pub suite: BackendSuite,
    pub perceptual: Option<Arc<dyn PerceptualMetric>>,
    pub clip: Option<EmbedderHandle>,
    /// Scenario in effect when running on mocks.
    pub scenario: Option<Scenario>,
}

impl BackendsConfig {
    pub fn mock(scenario: impl Into<PathBuf>) -> Self {
        Self {
            scenario: Some(scenario.into()),
            ..Default::default()
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let endpoints = [
            ("vlm", &self.vlm),
            ("generator", &self.generator),
            ("editor", &self.editor),
            ("embedder", &self.embedder),
            ("segmenter", &self.segmenter),
        ];
        let given = endpoints.iter().filter(|(_, e)| e.is_some()).count();
        if self.scenario.is_some() && given > 0 {
            out.push("backends.scenario cannot be combined with endpoint tables".into());
        }
        if self.scenario.is_none() {
            for (name, e) in endpoints {
                if e.is_none() {
                    out.push(format!("backends.{name} is required without a scenario"));
                }
            }
            if self.embedding_dim.unwrap_or(0) == 0 {
                out.push("backends.embedding_dim is required without a scenario".into());
            }
        }
        if self.clip_embedder.is_some() && self.clip_embedding_dim.unwrap_or(0) == 0 {
            out.push("backends.clip_embedding_dim is required with backends.clip_embedder".into());
        }
        if self.scenario.is_some() && (self.perceptual.is_some() || self.clip_embedder.is_some()) {
            out.push("backends.scenario cannot be combined with endpoint tables".into());
        }
        out
    }

    pub fn is_mock(&self) -> bool {
        self.scenario.is_some()
    }

    /// Builds the suite. `scenario` overrides the configured scenario file
    /// and is only accepted in mock mode.
    pub fn resolve(
        &self,
        script: Option<&StoryScript>,
        scenario: Option<Scenario>,
    ) -> Result<ResolvedBackends, ConfigError> {
        if let Some(path) = &self.scenario {
            let base = match scenario {
                Some(s) => s,
                None => Scenario::load(path)?,
            };
            let s = match script {
                Some(script) => base.with_script_defaults(script),
                None => base,
            };
            let mocks = MockBackends::new(s.clone());
            let suite = mocks.suite();
            return Ok(ResolvedBackends {
                clip: Some(suite.embedder.clone()),
                suite,
                perceptual: Some(mocks.perceptual()),
                scenario: Some(s),
            });
        }
        if scenario.is_some() {
            return Err(ConfigError::Invalid(vec![
                "a scenario can only be supplied when the backends are mocks".into(),
            ]));
        }
        let problems = self.problems();
        if !problems.is_empty() {
            return Err(ConfigError::Invalid(problems));
        }
        let endpoints = SuiteEndpoints {
            vlm: self.vlm.clone().expect("checked"),
            generator: self.generator.clone().expect("checked"),
            editor: self.editor.clone().expect("checked"),
            embedder: self.embedder.clone().expect("checked"),
            embedding_dim: self.embedding_dim.expect("checked"),
            segmenter: self.segmenter.clone().expect("checked"),
        };
        let perceptual = match &self.perceptual {
            Some(e) => Some(Arc::new(HttpPerceptual(HttpTransport::new(e.clone())?)) as Arc<dyn PerceptualMetric>),
            None => None,
        };
        let clip = match &self.clip_embedder {
            Some(e) => Some(EmbedderHandle::new(
                Arc::new(HttpEmbedder(HttpTransport::new(e.clone())?)),
                self.clip_embedding_dim.expect("checked"),
            )),
            None => None,
        };
        Ok(ResolvedBackends {
            suite: endpoints.build()?,
            perceptual,
            clip,
            scenario: None,
        })
    }
}

/// The TOML run configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    #[serde(default = "RunConfigFile::default_runs_dir")]
    pub runs_dir: PathBuf,
    #[serde(default)]
    pub director: DirectorConfig,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub clock: ClockMode,
    #[serde(default)]
    pub backends: BackendsConfig,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        Self {
            runs_dir: Self::default_runs_dir(),
            director: DirectorConfig::default(),
            controller: ControllerConfig::default(),
            clock: ClockMode::default(),
            backends: BackendsConfig::default(),
        }
    }
}

impl RunConfigFile {
    fn default_runs_dir() -> PathBuf {
        PathBuf::from("runs")
    }

    /// Parses and validates; relative paths resolve against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg: RunConfigFile = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        if cfg.runs_dir.is_relative() {
            cfg.runs_dir = base_dir.join(&cfg.runs_dir);
        }
        if let Some(s) = &cfg.backends.scenario {
            if s.is_relative() {
                cfg.backends.scenario = Some(base_dir.join(s));
            }
        }
        let mut problems = cfg.engine().problems();
        problems.extend(cfg.backends.problems());
        if !problems.is_empty() {
            return Err(ConfigError::Invalid(problems));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn engine(&self) -> EngineConfig {
        EngineConfig {
            director: self.director.clone(),
            controller: self.controller.clone(),
            clock: self.clock,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_published_constants() {
        let c = EngineConfig::default();
        assert_eq!(c.director.tau, 90.0);
        assert_eq!(c.director.t_max, 2);
        assert_eq!(c.controller.initial_scale, 0.37);
        assert_eq!(c.director.mode, InitMode::EditingBased);
        assert!(c.problems().is_empty());
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let text = r#"
            runs_dir = "out"
            clock = "logical"
            [director]
            tau = 85.0
            t_max = 3
            [controller]
            step = 0.05
            [backends]
            scenario = "cape.json"
        "#;
        let cfg = RunConfigFile::from_toml(text, Path::new("/base")).unwrap();
        assert_eq!(cfg.runs_dir, PathBuf::from("/base/out"));
        assert_eq!(cfg.backends.scenario, Some(PathBuf::from("/base/cape.json")));
        assert_eq!(cfg.director.t_max, 3);
        assert_eq!(cfg.controller.max_attempts, 3);
        assert_eq!(cfg.clock, ClockMode::Logical);

        let bad = "[director]\ntau = 90\nbogus = 1\n[backends]\nscenario = \"x\"";
        assert!(matches!(RunConfigFile::from_toml(bad, Path::new(".")), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn backends_must_be_complete() {
        let text = "[backends.vlm]\nbase_url = \"http://localhost:1\"";
        match RunConfigFile::from_toml(text, Path::new(".")) {
            Err(ConfigError::Invalid(p)) => assert!(p.iter().any(|m| m.contains("generator"))),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_scales_rejected() {
        let mut c = EngineConfig::default();
        c.controller.initial_scale = 0.99;
        assert_eq!(c.problems().len(), 1);
        c.controller.initial_scale = 0.37;
        c.controller.max_attempts = 0;
        assert!(c.validate().is_err());
    }
}
