use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use mapnav::backends::load_script;
use mapnav::config::{BackendKind, ModeName, PartialRunConfig, RunConfig, StyleName};
use mapnav::io::{load_world, load_worlds, read_episodes, read_logs, IoError};
use mapnav::report::evaluate;
use mapnav::runner::{format_trace, manifest_path, run};
use mapnav_core::agent::{run_episode, AgentConfig};
use mapnav_core::eval::DEFAULT_SUCCESS_THRESHOLD;
use mapnav_core::llm::ScriptedBackend;

/// Zero-shot vision-and-language navigation with an online topological map.
#[derive(Parser)]
#[command(name = "mapnav", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a batch of episodes and write trajectory logs.
    Run(RunArgs),
    /// Score trajectory logs and print a summary table.
    Eval(EvalArgs),
    /// Print the prompts an episode produces under a scripted walk.
    Prompt(PromptArgs),
    /// Describe a world file or the trajectories in a log file.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML file with run settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    worlds: Option<PathBuf>,
    #[arg(long)]
    episodes: Option<PathBuf>,
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    /// Scripted replies, one JSON object per line.
    #[arg(long)]
    script: Option<PathBuf>,
    #[arg(long)]
    model_id: Option<String>,
    #[arg(long, value_enum)]
    style: Option<StyleName>,
    #[arg(long, value_enum)]
    mode: Option<ModeName>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Replies tried per step before the episode halts.
    #[arg(long)]
    retries: Option<usize>,
    #[arg(long)]
    success_threshold: Option<f64>,
    #[arg(long)]
    prompt_budget: Option<usize>,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[arg(long, short = 'j')]
    parallelism: Option<usize>,
    /// Print every prompt and response to stdout.
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    logs: PathBuf,
    #[arg(long)]
    episodes: PathBuf,
    #[arg(long)]
    worlds: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SUCCESS_THRESHOLD)]
    success_threshold: f64,
    /// Where to write the JSON summary; defaults to `<logs>.summary.json`.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args)]
struct PromptArgs {
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    episodes: PathBuf,
    /// Required when the episodes file holds more than one episode.
    #[arg(long)]
    episode_id: Option<String>,
    /// Scripted replies, one JSON object per line.
    #[arg(long, conflicts_with = "labels", required_unless_present = "labels")]
    script: Option<PathBuf>,
    /// Option labels chosen at each step, e.g. `BBCA`.
    #[arg(long)]
    labels: Option<String>,
    #[arg(long, value_enum, default_value = "two-stage")]
    mode: ModeName,
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long, conflicts_with = "logs", required_unless_present = "logs")]
    world: Option<PathBuf>,
    #[arg(long)]
    logs: Option<PathBuf>,
    #[arg(long)]
    episode_id: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Prompt(a) => cmd_prompt(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for failures to read or write files, 1 for everything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    let io = e.chain().any(|c| {
        c.downcast_ref::<std::io::Error>().is_some() || matches!(c.downcast_ref::<IoError>(), Some(IoError::Io { .. }))
    });
    if io {
        2
    } else {
        1
    }
}

fn cmd_run(a: RunArgs) -> anyhow::Result<()> {
    let flags = PartialRunConfig {
        worlds: a.worlds,
        episodes: a.episodes,
        backend: a.backend,
        script: a.script,
        model_id: a.model_id,
        style: a.style,
        mode: a.mode,
        max_steps: a.max_steps,
        retries: a.retries,
        success_threshold: a.success_threshold,
        prompt_budget: a.prompt_budget,
        cache: a.cache,
        output: a.output,
        parallelism: a.parallelism,
        remote: None,
    };
    let file = match &a.config {
        Some(p) => PartialRunConfig::from_toml_file(p)?,
        None => PartialRunConfig::default(),
    };
    let cfg = RunConfig::resolve(flags.or(file))?;
    let m = run(&cfg, a.verbose)?;
    eprintln!(
        "{} episodes -> {} ({} remote calls, {} cache hits); manifest {}",
        m.episodes,
        cfg.output.display(),
        m.counters.remote_calls,
        m.counters.cache_hits,
        manifest_path(&cfg.output).display()
    );
    Ok(())
}

fn summary_path(logs: &Path) -> PathBuf {
    let mut s = logs.as_os_str().to_owned();
    s.push(".summary.json");
    PathBuf::from(s)
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let logs = read_logs(&a.logs)?;
    let episodes = read_episodes(&a.episodes)?;
    let worlds = load_worlds(&a.worlds)?;
    let report = evaluate(&worlds, &episodes, &logs, a.success_threshold)?;
    print!("{}", report.table());
    let path = a.summary.unwrap_or_else(|| summary_path(&a.logs));
    let text = serde_json::to_string_pretty(&report)?;
    std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_prompt(a: PromptArgs) -> anyhow::Result<()> {
    let world = load_world(&a.world)?;
    let episodes = read_episodes(&a.episodes)?;
    let episode = match (&a.episode_id, episodes.as_slice()) {
        (Some(id), eps) => eps.iter().find(|e| &e.episode_id == id).with_context(|| format!("no episode `{id}`"))?,
        (None, [only]) => only,
        (None, _) => bail!("--episode-id is required when the file holds {} episodes", episodes.len()),
    };
    let backend = match (&a.script, &a.labels) {
        (Some(p), _) => load_script(p)?,
        (None, Some(l)) => ScriptedBackend::from_labels(&episode.episode_id, &l.chars().collect::<Vec<_>>()),
        (None, None) => bail!("one of --script or --labels is required"),
    };
    let mut cfg = AgentConfig { mode: a.mode.into(), ..AgentConfig::default() };
    if let Some(n) = a.max_steps {
        cfg.max_steps = n;
    }
    let log = run_episode(&world, episode, &backend, &cfg)?;
    for (i, step) in log.steps.iter().enumerate() {
        if i > 0 {
            println!();
        }
        println!("=== step {} ===", step.step_index);
        print!("{}", step.prompt.render_dump());
    }
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> anyhow::Result<()> {
    if let Some(p) = a.world {
        let w = load_world(&p)?;
        println!("world {}: {} nodes, {} edges", w.world_id(), w.node_count(), w.edge_count());
        for n in w.node_ids() {
            let pose = w.pose(n).expect("listed node");
            let nbrs: Vec<&str> = w.neighbors(n).collect();
            println!("  {n} at ({:.2}, {:.2}, {:.2}) -> {}", pose.x, pose.y, pose.z, nbrs.join(", "));
        }
        return Ok(());
    }
    let path = a.logs.expect("clap requires --world or --logs");
    let logs = read_logs(&path)?;
    let mut shown = 0;
    for log in logs.iter().filter(|l| a.episode_id.as_ref().is_none_or(|id| &l.episode_id == id)) {
        print!("{}", format_trace(log));
        shown += 1;
    }
    if shown == 0 {
        bail!("no matching trajectories in {}", path.display());
    }
    Ok(())
}
