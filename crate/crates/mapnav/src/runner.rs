//! Episode-parallel batch driver.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};

use mapnav_core::agent::{run_episode, AgentConfig, AgentError, EpisodeSpec, StopReason, TrajectoryLog};
use mapnav_core::env::WorldGraph;
use mapnav_core::llm::{Backend, BackendError};
use mapnav_core::prompts::Dataset;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backends::{
    load_script, CachingBackend, CallCounts, CallStats, RemoteBackend, ReplayBackend, ResponseCache,
};
use crate::config::{BackendKind, ConfigError, RunConfig};
use crate::io::{load_worlds, read_episodes, IoError};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("episode {0}: unknown world `{1}`")]
    UnknownWorld(String, String),
    #[error("duplicate episode id `{0}`")]
    DuplicateEpisode(String),
    #[error("episode {0}: {1}")]
    Agent(String, AgentError),
    #[error("backend: {0}")]
    Backend(#[from] BackendError),
}

/// Written next to the output as `<output>.manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub version: String,
    /// SHA-256 of each input file, keyed by path.
    pub inputs: BTreeMap<String, String>,
    pub output_sha256: String,
    pub episodes: usize,
    pub stop_reasons: BTreeMap<String, usize>,
    pub counters: CallCounts,
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub fn sha256_file(path: &Path) -> Result<String, IoError> {
    let bytes = std::fs::read(path).map_err(|e| IoError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Builds the configured backend; the returned stats are shared with it.
pub fn build_backend(cfg: &RunConfig) -> Result<(Box<dyn Backend + Send + Sync>, Arc<CallStats>), RunError> {
    let stats = Arc::new(CallStats::default());
    let cache = cfg.cache.as_deref().map(ResponseCache::open).transpose()?.map(Arc::new);
    let backend: Box<dyn Backend + Send + Sync> = match (cfg.backend, cache) {
        (BackendKind::Replay, Some(cache)) => Box::new(ReplayBackend::new(cache, stats.clone())),
        (BackendKind::Replay, None) => return Err(ConfigError::Missing("cache").into()),
        (BackendKind::Scripted, cache) => {
            let path = cfg.script.as_deref().ok_or(ConfigError::Missing("script"))?;
            let script = load_script(path)?;
            match cache {
                Some(c) => Box::new(CachingBackend::new(script, c, stats.clone())),
                None => Box::new(script),
            }
        }
        (BackendKind::Remote, cache) => {
            let remote = RemoteBackend::new(cfg.remote.clone(), stats.clone())?;
            match cache {
                Some(c) => Box::new(CachingBackend::new(remote, c, stats.clone())),
                None => Box::new(remote),
            }
        }
    };
    Ok((backend, stats))
}

/// Loads inputs, checks every selected episode against its world, runs the
/// batch and writes the logs plus manifest.
pub fn run(cfg: &RunConfig, verbose: bool) -> Result<Manifest, RunError> {
    cfg.validate()?;
    let worlds = load_worlds(&cfg.worlds)?;
    let mut episodes = read_episodes(&cfg.episodes)?;
    if let Some(style) = cfg.style {
        let style = Dataset::from(style);
        episodes.retain(|e| e.style == style);
    }
    let mut seen = std::collections::BTreeSet::new();
    for ep in &episodes {
        if !seen.insert(ep.episode_id.as_str()) {
            return Err(RunError::DuplicateEpisode(ep.episode_id.clone()));
        }
        let world = worlds
            .get(&ep.world_id)
            .ok_or_else(|| RunError::UnknownWorld(ep.episode_id.clone(), ep.world_id.clone()))?;
        ep.validate(world).map_err(|e| RunError::Agent(ep.episode_id.clone(), e))?;
    }
    let (backend, stats) = build_backend(cfg)?;
    let agent = cfg.agent_config();

    let file = File::create(&cfg.output).map_err(|e| IoError::io(&cfg.output, e))?;
    let mut out = BufWriter::new(file);
    let mut stop_reasons: BTreeMap<String, usize> = BTreeMap::new();
    run_batch(&worlds, &episodes, backend.as_ref(), &agent, cfg.parallelism, |log| {
        if verbose {
            print_trace(&log);
        }
        log::info!("{}: {:?} at {} after {} steps", log.episode_id, log.stop_reason, log.final_node, log.steps.len());
        *stop_reasons.entry(format!("{:?}", log.stop_reason)).or_default() += 1;
        let line = serde_json::to_string(&log).expect("log serializes");
        writeln!(out, "{line}").map_err(|e| IoError::io(&cfg.output, e))
    })?;
    out.flush().map_err(|e| IoError::io(&cfg.output, e))?;
    drop(out);

    let mut inputs = BTreeMap::new();
    let mut world_files: Vec<PathBuf> = std::fs::read_dir(&cfg.worlds)
        .map_err(|e| IoError::io(&cfg.worlds, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    world_files.sort();
    for p in world_files.iter().chain([&cfg.episodes]).chain(&cfg.script) {
        inputs.insert(p.display().to_string(), sha256_file(p)?);
    }
    let manifest = Manifest {
        config: cfg.clone(),
        version: env!("CARGO_PKG_VERSION").into(),
        inputs,
        output_sha256: sha256_file(&cfg.output)?,
        episodes: episodes.len(),
        stop_reasons,
        counters: stats.snapshot(),
    };
    let mpath = manifest_path(&cfg.output);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&mpath, text + "\n").map_err(|e| IoError::io(&mpath, e))?;
    Ok(manifest)
}

/// Runs `episodes` on `workers` threads and hands each log to `sink` in
/// episode order. Stops at the first error from an episode or the sink.
pub fn run_batch<B, F, E>(
    worlds: &BTreeMap<String, WorldGraph>,
    episodes: &[EpisodeSpec],
    backend: &B,
    agent: &AgentConfig,
    workers: usize,
    mut sink: F,
) -> Result<(), RunError>
where
    B: Backend + Sync + ?Sized,
    F: FnMut(TrajectoryLog) -> Result<(), E>,
    RunError: From<E>,
{
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, Result<TrajectoryLog, RunError>)>();
    std::thread::scope(|s| {
        for _ in 0..workers.max(1).min(episodes.len().max(1)) {
            let tx = tx.clone();
            let next = &next;
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(ep) = episodes.get(i) else { break };
                let result = match worlds.get(&ep.world_id) {
                    Some(w) => run_episode(w, ep, backend, agent).map_err(|e| RunError::Agent(ep.episode_id.clone(), e)),
                    None => Err(RunError::UnknownWorld(ep.episode_id.clone(), ep.world_id.clone())),
                };
                let failed = result.is_err();
                if tx.send((i, result)).is_err() || failed {
                    // Make the others stop picking up work.
                    next.store(episodes.len(), Ordering::SeqCst);
                    break;
                }
            });
        }
        drop(tx);

        // Single writer: buffer out-of-order results, emit in order.
        let mut pending = BTreeMap::new();
        let mut emitted = 0;
        for (i, result) in rx {
            pending.insert(i, result?);
            while let Some(log) = pending.remove(&emitted) {
                sink(log)?;
                emitted += 1;
            }
        }
        Ok(())
    })
}

/// Per-step text trace of one episode.
pub fn format_trace(log: &TrajectoryLog) -> String {
    use mapnav_core::agent::ExecutedAction;
    let mut s = format!(
        "episode {} (world {}): {:?} at {} after {} steps\nvisited: {}\n",
        log.episode_id,
        log.world_id,
        log.stop_reason,
        log.final_node,
        log.steps.len(),
        log.visited_env_nodes.join(" -> ")
    );
    for step in &log.steps {
        let action = match &step.executed_action {
            ExecutedAction::Stop => "stop".to_string(),
            ExecutedAction::Move { place_id, env_node } => format!("move to Place {place_id} ({env_node})"),
            ExecutedAction::Halt => "halt".to_string(),
        };
        s.push_str(&format!("  step {}: {action}\n", step.step_index));
        if let Some(p) = &step.parsed {
            s.push_str(&format!("    thought: {}\n    planning: {}\n", p.thought, p.planning));
        }
        for f in &step.failed_attempts {
            s.push_str(&format!("    attempt {} failed: {}\n", f.attempt, f.error));
        }
    }
    s
}

fn print_trace(log: &TrajectoryLog) {
    for step in &log.steps {
        println!("=== {} step {} ===\n{}", log.episode_id, step.step_index, step.prompt.render_dump());
        if let Some(r) = &step.raw_response {
            println!("[response]\n{r}");
        }
    }
    print!("{}", format_trace(log));
}

pub fn stop_reason_counts(logs: &[TrajectoryLog]) -> BTreeMap<StopReason, usize> {
    let mut m = BTreeMap::new();
    for l in logs {
        *m.entry(l.stop_reason).or_default() += 1;
    }
    m
}
