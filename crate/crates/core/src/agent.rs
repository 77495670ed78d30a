//! The map-guided episode loop.
//!
//! Each step observes the current place, updates the topological map,
//! compiles the prompt, asks the backend for thought/plan/action, and
//! executes the chosen option until the agent stops, runs out of moves or
//! keeps producing unusable replies.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::env::{NodeId, WorldError, WorldGraph};
use crate::llm::{parse_response, Backend, LlmRequest, ParsedStep, RequestContext};
use crate::prompts::{
    self, assemble, correction_notice, format_action_space, format_history, format_supplementary,
    format_surroundings, task_description, ActionOption, Dataset, Mode, ObservationFormatter,
    OptionKind, PromptBundle, PromptError, StepPrompt, TaskStyle,
};
use crate::topomap::{PlaceId, TopoError, TopoMap};

pub const DEFAULT_MAX_STEPS: usize = 15;
pub const DEFAULT_MAX_ATTEMPTS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AgentError {
    #[error("invalid episode {0}: {1}")]
    InvalidEpisode(String, String),
    #[error("invalid agent config: {0}")]
    Config(String),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Map(#[from] TopoError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("label {label} is not one of the options A-{last}")]
    InvalidLabel { label: char, last: char },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub episode_id: String,
    pub world_id: String,
    pub instruction: String,
    pub start_node: NodeId,
    #[serde(default)]
    pub start_heading: f64,
    pub style: Dataset,
    pub goal_nodes: Vec<NodeId>,
    #[serde(default)]
    pub target_object: Option<String>,
}

impl EpisodeSpec {
    pub fn validate(&self, world: &WorldGraph) -> Result<(), AgentError> {
        let bad = |msg: String| Err(AgentError::InvalidEpisode(self.episode_id.clone(), msg));
        if world.world_id() != self.world_id {
            return bad(format!("expects world {}, got {}", self.world_id, world.world_id()));
        }
        if !world.contains(&self.start_node) {
            return bad(format!("unknown start node {}", self.start_node));
        }
        if self.goal_nodes.is_empty() {
            return bad("no goal nodes".into());
        }
        if let Some(g) = self.goal_nodes.iter().find(|g| !world.contains(g)) {
            return bad(format!("unknown goal node {g}"));
        }
        if !self.start_heading.is_finite() {
            return bad("non-finite start heading".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub model_id: String,
    pub mode: Mode,
    /// Moves allowed before the episode is cut off.
    pub max_steps: usize,
    /// Replies tried per step before halting in place.
    pub max_attempts: usize,
    /// Soft limit on user prompt characters.
    pub prompt_budget: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            model_id: "scripted".into(),
            mode: Mode::TwoStage,
            max_steps: DEFAULT_MAX_STEPS,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            prompt_budget: prompts::DEFAULT_PROMPT_BUDGET,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub env_node: NodeId,
    pub heading: f64,
    pub map: TopoMap,
    /// Label-stripped option texts of executed moves.
    pub history: Vec<String>,
    /// Plan from the previous reply; `None` before the first one.
    pub plan_text: Option<String>,
    pub step_index: usize,
}

impl AgentState {
    /// Agent standing on the start node with its neighbors observed.
    pub fn start(world: &WorldGraph, episode: &EpisodeSpec) -> Result<Self, AgentError> {
        let mut map = TopoMap::new(&episode.start_node);
        let seen: Vec<NodeId> = world
            .candidates(&episode.start_node, episode.start_heading)
            .into_iter()
            .map(|c| c.neighbor)
            .collect();
        map.observe(&episode.start_node, &seen)?;
        Ok(AgentState {
            env_node: episode.start_node.clone(),
            heading: episode.start_heading,
            map,
            history: Vec::new(),
            plan_text: None,
            step_index: 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExecutedAction {
    Stop,
    Move { place_id: PlaceId, env_node: NodeId },
    /// No usable reply; the agent stays put.
    Halt,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedAttempt {
    pub attempt: usize,
    pub raw_response: Option<String>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step_index: usize,
    pub prompt: PromptBundle,
    /// Reply that produced the executed action.
    pub raw_response: Option<String>,
    pub parsed: Option<ParsedStep>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failed_attempts: Vec<FailedAttempt>,
    pub executed_action: ExecutedAction,
    pub env_node_after: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StopReason {
    AgentStop,
    MaxSteps,
    ParseFailure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub episode_id: String,
    pub world_id: String,
    pub visited_env_nodes: Vec<NodeId>,
    pub steps: Vec<StepRecord>,
    pub stop_reason: StopReason,
    pub final_node: NodeId,
    pub final_map: TopoMap,
}

/// Option with the given label.
pub fn select_action(options: &[ActionOption], label: char) -> Result<&ActionOption, AgentError> {
    options.iter().find(|o| o.label == label).ok_or_else(|| AgentError::InvalidLabel {
        label,
        last: options.last().map_or('A', |o| o.label),
    })
}

/// Executes `option`. Moves step the world, extend the map and history and
/// carry `planning` forward; stop leaves the state untouched.
pub fn apply_action(
    mut state: AgentState,
    option: &ActionOption,
    planning: &str,
    world: &WorldGraph,
) -> Result<AgentState, AgentError> {
    if option.kind == OptionKind::Stop {
        return Ok(state);
    }
    let place = option
        .place_id
        .ok_or_else(|| AgentError::Config("move option without a place".into()))?;
    let target = state
        .map
        .env_node(place)
        .ok_or_else(|| AgentError::Config(format!("place {place} not on map")))?
        .to_string();
    let (node, heading) = world.step(&state.env_node, &target)?;
    state.map.mark_visited(&node)?;
    let seen: Vec<NodeId> = world.candidates(&node, heading).into_iter().map(|c| c.neighbor).collect();
    state.map.observe(&node, &seen)?;
    state.env_node = node;
    state.heading = heading;
    state.history.push(option.history_text.clone());
    state.plan_text = Some(planning.to_string());
    state.step_index += 1;
    Ok(state)
}

/// Prompt and options for the agent's current step.
pub fn build_prompt(
    world: &WorldGraph,
    episode: &EpisodeSpec,
    state: &AgentState,
    mode: Mode,
) -> Result<(PromptBundle, Vec<ActionOption>), AgentError> {
    let cands = world.candidates(&state.env_node, state.heading);
    let mut fmt = ObservationFormatter::new(mode);
    let supplementary = format_supplementary(&state.map.supplementary(world), &mut fmt);
    let (action_space, options) = format_action_space(&cands, &state.map, &mut fmt)?;
    let surroundings = match episode.style {
        Dataset::Reverie => Some(format_surroundings(world.objects_at(&state.env_node))),
        Dataset::R2R => None,
    };
    let system = task_description(TaskStyle { dataset: episode.style, mode });
    let bundle = assemble(
        &system,
        StepPrompt {
            step_index: state.step_index,
            instruction: &episode.instruction,
            history: format_history(&state.history),
            trajectory: state.map.trajectory_prompt(),
            connectivity: state.map.connectivity_prompt(),
            supplementary,
            previous_planning: state.plan_text.as_deref(),
            surroundings,
            action_space,
            images: fmt.into_images(),
        },
    );
    Ok((bundle, options))
}

struct Choice {
    raw: String,
    parsed: ParsedStep,
    option: ActionOption,
}

/// Runs one episode to completion. Backend and reply failures end the
/// episode with [`StopReason::ParseFailure`]; only invalid episodes or
/// configuration return an error.
pub fn run_episode<B: Backend + ?Sized>(
    world: &WorldGraph,
    episode: &EpisodeSpec,
    backend: &B,
    config: &AgentConfig,
) -> Result<TrajectoryLog, AgentError> {
    episode.validate(world)?;
    if config.max_attempts == 0 {
        return Err(AgentError::Config("max_attempts must be at least 1".into()));
    }
    let mut state = AgentState::start(world, episode)?;
    let mut visited = alloc::vec![state.env_node.clone()];
    let mut steps = Vec::new();

    let stop_reason = loop {
        if state.step_index >= config.max_steps {
            break StopReason::MaxSteps;
        }
        let (bundle, options) = build_prompt(world, episode, &state, config.mode)?;
        bundle.check_budget(config.prompt_budget);
        let prev_plan = state.plan_text.as_deref().unwrap_or(prompts::INITIAL_PLANNING);

        let mut failed = Vec::new();
        let mut choice = None;
        for attempt in 0..config.max_attempts {
            let user_text = if attempt == 0 {
                bundle.user_text.clone()
            } else {
                format!("{}\n{}", bundle.user_text, correction_notice(options.len()))
            };
            let req = LlmRequest {
                model_id: config.model_id.clone(),
                system_text: bundle.system_text.clone(),
                user_text,
                image_refs: bundle.image_refs.clone(),
                context: RequestContext {
                    episode_id: episode.episode_id.clone(),
                    step_index: state.step_index,
                    attempt,
                },
            };
            let raw = match backend.complete(&req) {
                Ok(raw) => raw,
                Err(e) => {
                    // The backend already retried what it could.
                    failed.push(FailedAttempt { attempt, raw_response: None, error: e.to_string() });
                    break;
                }
            };
            let outcome = parse_response(&raw, prev_plan)
                .map_err(|e| e.to_string())
                .and_then(|p| match select_action(&options, p.action_label) {
                    Ok(o) => Ok((p, o.clone())),
                    Err(e) => Err(e.to_string()),
                });
            match outcome {
                Ok((parsed, option)) => {
                    choice = Some(Choice { raw, parsed, option });
                    break;
                }
                Err(error) => failed.push(FailedAttempt { attempt, raw_response: Some(raw), error }),
            }
        }

        let Some(Choice { raw, parsed, option }) = choice else {
            steps.push(StepRecord {
                step_index: state.step_index,
                prompt: bundle,
                raw_response: None,
                parsed: None,
                failed_attempts: failed,
                executed_action: ExecutedAction::Halt,
                env_node_after: state.env_node.clone(),
            });
            break StopReason::ParseFailure;
        };

        let step_index = state.step_index;
        let executed = match option.kind {
            OptionKind::Stop => ExecutedAction::Stop,
            OptionKind::Move => {
                state = apply_action(state, &option, &parsed.planning, world)?;
                visited.push(state.env_node.clone());
                ExecutedAction::Move {
                    place_id: option.place_id.expect("move option has a place"),
                    env_node: state.env_node.clone(),
                }
            }
        };
        let stopped = executed == ExecutedAction::Stop;
        steps.push(StepRecord {
            step_index,
            prompt: bundle,
            raw_response: Some(raw),
            parsed: Some(parsed),
            failed_attempts: failed,
            executed_action: executed,
            env_node_after: state.env_node.clone(),
        });
        if stopped {
            break StopReason::AgentStop;
        }
    };

    Ok(TrajectoryLog {
        episode_id: episode.episode_id.clone(),
        world_id: world.world_id().to_string(),
        final_node: state.env_node.clone(),
        visited_env_nodes: visited,
        steps,
        stop_reason,
        final_map: state.map,
    })
}

/// Option labels that walk `route` (starting at `route[0]` facing
/// `start_heading`) and then stop. `None` if consecutive nodes are not
/// adjacent.
pub fn route_labels(world: &WorldGraph, start_heading: f64, route: &[NodeId]) -> Option<Vec<char>> {
    let mut labels = Vec::with_capacity(route.len());
    let mut heading = start_heading;
    for pair in route.windows(2) {
        let cands = world.candidates(&pair[0], heading);
        let idx = cands.iter().position(|c| c.neighbor == pair[1])?;
        labels.push((b'B' + idx as u8) as char);
        heading = world.step(&pair[0], &pair[1]).ok()?.1;
    }
    labels.push('A');
    Some(labels)
}

/// Nodes on any shortest path from `from` to the nearest goal; used by
/// oracle scripts.
pub fn nearest_goal_route(world: &WorldGraph, from: &str, goals: &[NodeId]) -> Option<Vec<NodeId>> {
    let unique: BTreeSet<&NodeId> = goals.iter().collect();
    let best = unique.into_iter().min_by(|a, b| {
        world.geodesic(from, a).total_cmp(&world.geodesic(from, b)).then_with(|| a.cmp(b))
    })?;
    world.shortest_path(from, best)
}
