//! The `storyloom` command line.
//!
//! Every subcommand exits 0 on success and 1 on failure; `--json` replaces
//! the human-readable output with one JSON object on stdout (`{"error": ..}`
//! on failure).

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use storyloom_core::audit::{build_report, AuditContext, PromptTemplates};
use storyloom_core::backend::mock::{MockBackends, Scenario};
use storyloom_core::config::RunConfigFile;
use storyloom_core::director::{default_run_id, Director, UserCorrection};
use storyloom_core::image::ImageData;
use storyloom_core::memory::{load_run_dir, JournalEntry, RunState, SharedMemory, EVENTS_FILE};
use storyloom_core::metrics::{
    aggregate_corpus, load_scores, merge_external_scores, story_metrics, MetricBackends, StoryMetrics,
};
use storyloom_core::schema::{parse_story_bytes, ParseMode};

use crate::api;
use crate::runs::{backends_for_run, parse_script, NewRun, RunManager};
use crate::wire::wire_router;

#[derive(Debug, Parser)]
#[command(name = "storyloom", version, about = "Audit and repair character consistency across story panels")]
pub struct Cli {
    /// Print one JSON object on stdout instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create a run from a story script and drive it to completion.
    Run {
        script: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run_id: Option<String>,
        /// Mock scenario replacing the one named in the config.
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Audit a run directory again without recording the report.
    Audit {
        run_dir: PathBuf,
        /// Backend wiring for runs without a recorded one.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Apply natural-language corrections to panels of a finished run.
    Repair {
        run_dir: PathBuf,
        /// 1-based panel; pair each with an --instruction.
        #[arg(long = "panel", required = true)]
        panels: Vec<usize>,
        #[arg(long = "instruction", required = true)]
        instructions: Vec<String>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score finished runs and write report.csv and report.md.
    Metrics(MetricsArgs),
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Environment variable holding the shared bearer token.
        #[arg(long)]
        token_env: Option<String>,
    },
    /// Mock scenario tools.
    Scenario {
        #[command(subcommand)]
        command: ScenarioCommand,
    },
}

#[derive(Debug, Subcommand)]
pub enum ScenarioCommand {
    /// Check a scenario file.
    Validate { file: PathBuf },
    /// Serve the scenario's mock backends over the backend wire contract.
    Serve {
        file: PathBuf,
        /// Script whose characters fill in missing scenario entities.
        #[arg(long)]
        script: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8090")]
        addr: String,
    },
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Run directories, or directories holding run directories.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    /// Add foreground-masked columns.
    #[arg(long)]
    pub fg: bool,
    /// Per-image external scores: run, panel, metric, value.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Backends to score with; defaults to each run's own.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "storyloom")]
    pub method: String,
    /// Also score each run's initial panels under this method name.
    #[arg(long)]
    pub initial_method: Option<String>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

/// Result of a subcommand: JSON for `--json`, text otherwise.
struct Outcome {
    json: Value,
    text: String,
    ok: bool,
}

impl Outcome {
    fn ok(json: Value, text: String) -> Self {
        Self { json, text, ok: true }
    }
}

type CmdResult = Result<Outcome, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    execute(cli)
}

pub fn execute(cli: Cli) -> ExitCode {
    let json = cli.json;
    let result = match cli.command {
        Command::Run {
            script,
            config,
            run_id,
            scenario,
        } => cmd_run(&script, &config, run_id, scenario.as_deref()),
        Command::Audit { run_dir, config } => cmd_audit(&run_dir, config.as_deref()),
        Command::Repair {
            run_dir,
            panels,
            instructions,
            config,
        } => cmd_repair(&run_dir, &panels, &instructions, config.as_deref()),
        Command::Metrics(args) => cmd_metrics(&args),
        Command::Serve { addr, config, token_env } => cmd_serve(&addr, config.as_deref(), token_env.as_deref(), json),
        Command::Scenario { command } => match command {
            ScenarioCommand::Validate { file } => cmd_validate(&file),
            ScenarioCommand::Serve { file, script, addr } => cmd_scenario_serve(&file, script.as_deref(), &addr, json),
        },
    };
    match result {
        Ok(o) => {
            if json {
                println!("{}", o.json);
            } else if !o.text.is_empty() {
                println!("{}", o.text.trim_end());
            }
            if o.ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            if json {
                println!("{}", json!({ "error": e }));
            }
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfigFile, String> {
    RunConfigFile::load(path).map_err(err)
}

fn run_summary(state: &RunState, dir: Option<&Path>) -> Value {
    json!({
        "run_id": state.run_id,
        "run_dir": dir.map(|d| d.display().to_string()),
        "status": state.status,
        "T": state.iteration,
        "ci_history": state.ci_history,
        "repair_passes": state.repair_passes,
        "report_files": state.report_files,
        "diagnostics": state.diagnostics,
        "digest": state.digest().to_hex(),
    })
}

fn ci_line(state: &RunState) -> String {
    let cis: Vec<String> = state.ci_history.iter().map(|c| format!("{c:.2}")).collect();
    format!(
        "{} {}: CI {} after {} repair pass(es)",
        state.run_id,
        state.status.as_str(),
        if cis.is_empty() { "-".to_string() } else { cis.join(" -> ") },
        state.repair_passes
    )
}

fn cmd_run(script: &Path, config: &Path, run_id: Option<String>, scenario: Option<&Path>) -> CmdResult {
    let cfg = load_config(config)?;
    let text = std::fs::read_to_string(script).map_err(|e| format!("{}: {e}", script.display()))?;
    let scenario = scenario.map(Scenario::load).transpose().map_err(err)?;
    let parsed = parse_script(&Value::String(text.clone())).map_err(err)?;
    let run_id = run_id.unwrap_or_else(|| default_run_id(&parsed, &cfg.engine()));
    let mgr = RunManager::new(cfg);
    let dir = mgr.runs_dir().join(&run_id);
    let handle = if dir.join(EVENTS_FILE).is_file() {
        let h = mgr.memory().open(&dir).map_err(err)?;
        if h.status().is_settled() {
            return Err(format!(
                "run `{run_id}` already finished as {} in {}",
                h.status().as_str(),
                dir.display()
            ));
        }
        h
    } else {
        mgr.create(NewRun {
            script: Value::String(text),
            config: None,
            scenario,
            run_id: Some(run_id),
        })
        .map_err(err)?
        .0
    };
    let state = match mgr.drive(&handle) {
        Ok(s) => s,
        Err(_) => handle.snapshot(),
    };
    let mut text = ci_line(&state);
    text.push_str(&format!("\n  dir: {}", dir.display()));
    for d in &state.diagnostics {
        text.push_str(&format!("\n  {d}"));
    }
    Ok(Outcome {
        json: run_summary(&state, Some(&dir)),
        text,
        ok: !matches!(state.status, storyloom_core::memory::RunStatus::Failed),
    })
}

fn fallback_backends(config: Option<&Path>) -> Result<Option<storyloom_core::config::BackendsConfig>, String> {
    Ok(config.map(load_config).transpose()?.map(|c| c.backends))
}

fn cmd_audit(run_dir: &Path, config: Option<&Path>) -> CmdResult {
    let loaded = load_run_dir(run_dir).map_err(err)?;
    let state = &loaded.state;
    let resolved = backends_for_run(run_dir, &state.script, fallback_backends(config)?.as_ref()).map_err(err)?;
    let image = |r: &storyloom_core::image::ImageRef| {
        loaded
            .images
            .get(&r.content_hash)
            .ok_or_else(|| format!("image {} is missing", r.id))
    };
    let reference = image(state.reference.as_ref().ok_or("run has no reference image yet")?)?;
    if state.panels.len() != state.script.panel_count() {
        return Err("run has not finished initialization".into());
    }
    let panels: Vec<ImageData> = state.panels.iter().map(|p| image(&p.image)).collect::<Result<_, _>>()?;
    let templates = PromptTemplates::default();
    let ctx = AuditContext {
        suite: &resolved.suite,
        script: &state.script,
        templates: &templates,
        iteration: state.iteration,
    };
    let report = build_report(&ctx, &reference, &panels, state.ci_history.len() as u32).map_err(err)?;
    let mut text = format!("{}: CI {:.2} (not recorded)", state.run_id, report.ci);
    for f in &report.findings {
        for m in f.mismatches.iter().filter(|m| m.validated) {
            text.push_str(&format!(
                "\n  panel {}: {} {} is {}, expected {}",
                f.panel_index, m.entity_name, m.attribute, m.observed, m.expected
            ));
        }
        if let Some(e) = &f.error {
            text.push_str(&format!("\n  panel {}: audit failed: {e}", f.panel_index));
        }
    }
    Ok(Outcome::ok(
        json!({ "run_id": state.run_id, "recorded": false, "report": report }),
        text,
    ))
}

fn cmd_repair(run_dir: &Path, panels: &[usize], instructions: &[String], config: Option<&Path>) -> CmdResult {
    if panels.len() != instructions.len() {
        return Err(format!(
            "{} --panel value(s) but {} --instruction value(s)",
            panels.len(),
            instructions.len()
        ));
    }
    if instructions.iter().any(|i| i.trim().is_empty()) {
        return Err("instructions must not be empty".into());
    }
    if !run_dir.join(EVENTS_FILE).is_file() {
        return Err(format!("{} is not a run directory", run_dir.display()));
    }
    let memory = SharedMemory::persistent(run_dir.parent().unwrap_or(Path::new(".")));
    let handle = memory.open(run_dir).map_err(err)?;
    let state = handle.snapshot();
    let resolved = backends_for_run(run_dir, &state.script, fallback_backends(config)?.as_ref()).map_err(err)?;
    let corrections: Vec<UserCorrection> = panels
        .iter()
        .zip(instructions)
        .map(|(&panel_index, instruction)| UserCorrection {
            panel_index,
            instruction: instruction.clone(),
        })
        .collect();
    let outcome = Director::new(resolved.suite)
        .ingest_user_corrections(&handle, &corrections)
        .map_err(err)?;
    let after = handle.snapshot();
    let mut text = ci_line(&after);
    for p in &outcome.applied {
        text.push_str(&format!("\n  panel {}: {}", p.panel_index, p.prompt));
    }
    for (i, why) in &outcome.rejected {
        text.push_str(&format!("\n  panel {i}: {why}"));
    }
    let mut summary = run_summary(&after, Some(run_dir));
    summary["corrections"] = serde_json::to_value(&outcome).expect("outcome serializes");
    Ok(Outcome::ok(summary, text))
}

fn run_dirs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, String> {
    let mut out = Vec::new();
    for p in inputs {
        if p.join(EVENTS_FILE).is_file() {
            out.push(p.clone());
            continue;
        }
        let entries = std::fs::read_dir(p).map_err(|e| format!("{}: {e}", p.display()))?;
        let mut found: Vec<PathBuf> = entries
            .flatten()
            .map(|e| e.path())
            .filter(|d| d.join(EVENTS_FILE).is_file())
            .collect();
        if found.is_empty() {
            return Err(format!("{} holds no run directories", p.display()));
        }
        found.sort();
        out.extend(found);
    }
    Ok(out)
}

/// Panels as first generated, before any repair.
fn initial_panels(loaded: &storyloom_core::memory::LoadedRun) -> Result<Vec<ImageData>, String> {
    let mut first = vec![None; loaded.state.panels.len()];
    for e in &loaded.events {
        if let JournalEntry::PanelGenerated { index, image, .. } = &e.event {
            if let Some(slot) = first.get_mut(index - 1) {
                slot.get_or_insert_with(|| image.clone());
            }
        }
    }
    first
        .into_iter()
        .map(|r| {
            let r = r.ok_or("initial panel missing from the journal")?;
            loaded
                .images
                .get(&r.content_hash)
                .ok_or_else(|| format!("image {} is missing", r.id))
        })
        .collect()
}

fn cmd_metrics(args: &MetricsArgs) -> CmdResult {
    let shared = args.config.as_deref().map(load_config).transpose()?;
    let scores = args.scores.as_deref().map(load_scores).transpose().map_err(err)?;
    let mut stories: Vec<StoryMetrics> = Vec::new();
    for dir in run_dirs(&args.runs)? {
        let loaded = load_run_dir(&dir).map_err(err)?;
        let state = &loaded.state;
        let resolved = match &shared {
            Some(c) => c.backends.resolve(Some(&state.script), None).map_err(err)?,
            None => backends_for_run(&dir, &state.script, None).map_err(err)?,
        };
        let backends = MetricBackends {
            dino: resolved.suite.embedder.clone(),
            clip: resolved.clip.clone(),
            perceptual: resolved.perceptual.clone(),
            segmenter: args.fg.then(|| resolved.suite.segmenter.clone()),
        };
        let labels: Vec<String> = state.script.characters.iter().map(|c| c.category.clone()).collect();
        let fg = args.fg.then_some(labels.as_slice());
        let current: Vec<ImageData> = state
            .panels
            .iter()
            .map(|p| {
                loaded
                    .images
                    .get(&p.image.content_hash)
                    .ok_or_else(|| format!("{}: image {} is missing", dir.display(), p.image.id))
            })
            .collect::<Result<_, _>>()?;
        let mut sets = vec![(args.method.clone(), current)];
        if let Some(m) = &args.initial_method {
            sets.push((m.clone(), initial_panels(&loaded)?));
        }
        for (method, panels) in sets {
            let mut m = story_metrics(&backends, &state.run_id, &method, &panels, fg)
                .map_err(|e| format!("{}: {e}", dir.display()))?;
            if let Some(s) = &scores {
                merge_external_scores(&mut m, s);
            }
            stories.push(m);
        }
    }
    let corpus = aggregate_corpus(&stories);
    std::fs::create_dir_all(&args.out).map_err(|e| format!("{}: {e}", args.out.display()))?;
    let csv_path = args.out.join("report.csv");
    let md_path = args.out.join("report.md");
    let markdown = corpus.to_markdown();
    std::fs::write(&csv_path, corpus.to_csv()).map_err(|e| format!("{}: {e}", csv_path.display()))?;
    std::fs::write(&md_path, &markdown).map_err(|e| format!("{}: {e}", md_path.display()))?;
    Ok(Outcome::ok(
        json!({
            "corpus": corpus,
            "stories": stories,
            "files": [csv_path.display().to_string(), md_path.display().to_string()],
        }),
        markdown,
    ))
}

fn cmd_validate(file: &Path) -> CmdResult {
    let text = std::fs::read_to_string(file).map_err(|e| format!("{}: {e}", file.display()))?;
    let problems = match serde_json::from_str::<Scenario>(&text) {
        Ok(s) => s.problems(),
        Err(e) => vec![format!("cannot parse: {e}")],
    };
    let ok = problems.is_empty();
    let text = if ok {
        format!("{}: ok", file.display())
    } else {
        problems.iter().map(|p| format!("{}: {p}", file.display())).collect::<Vec<_>>().join("\n")
    };
    Ok(Outcome {
        json: json!({ "file": file.display().to_string(), "valid": ok, "problems": problems }),
        text,
        ok,
    })
}

fn runtime() -> Result<tokio::runtime::Runtime, String> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(err)
}

/// Binds, announces the bound address on stdout and serves until ctrl-c.
fn serve_router(addr: &str, app: axum::Router, json: bool, before: impl FnOnce() + Send) -> Result<(), String> {
    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| format!("{addr}: {e}"))?;
        let local: SocketAddr = listener.local_addr().map_err(err)?;
        before();
        if json {
            println!("{}", json!({ "listening": local.to_string() }));
        } else {
            println!("listening on http://{local}");
        }
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(err)
    })
}

fn cmd_serve(addr: &str, config: Option<&Path>, token_env: Option<&str>, json: bool) -> CmdResult {
    let cfg = match config {
        Some(p) => load_config(p)?,
        None => RunConfigFile::default(),
    };
    let token = match token_env {
        Some(var) => Some(std::env::var(var).map_err(|_| format!("environment variable `{var}` is not set"))?),
        None => None,
    };
    let runs = Arc::new(RunManager::new(cfg));
    let app = api::router(runs.clone(), token);
    serve_router(addr, app, json, move || {
        let n = api::resume_pending(&runs);
        if n > 0 {
            tracing::info!(runs = n, "resuming unfinished runs");
        }
    })?;
    Ok(Outcome::ok(Value::Null, String::new()))
}

fn cmd_scenario_serve(file: &Path, script: Option<&Path>, addr: &str, json: bool) -> CmdResult {
    let mut scenario = Scenario::load(file).map_err(err)?;
    if let Some(p) = script {
        let bytes = std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()))?;
        let script = parse_story_bytes(&bytes, ParseMode::Lenient).map_err(err)?;
        scenario = scenario.with_script_defaults(&script);
    }
    let mocks = MockBackends::new(scenario);
    serve_router(addr, wire_router(mocks.suite(), Some(mocks.perceptual())), json, || {})?;
    Ok(Outcome::ok(Value::Null, String::new()))
}
