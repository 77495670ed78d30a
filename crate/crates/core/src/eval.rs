//! Trajectory metrics: navigation error, success, oracle success, SPL, and
//! the backtracking/correction statistics.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::agent::{EpisodeSpec, TrajectoryLog};
use crate::env::{NodeId, WorldGraph};

/// Stopping within this many meters of a goal counts as success.
pub const DEFAULT_SUCCESS_THRESHOLD: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("invalid trajectory for episode {0}: {1}")]
    InvalidTrajectory(String, String),
    #[error("no episodes to aggregate")]
    EmptyInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    /// Geodesic distance from the final node to the nearest goal.
    pub ne: f64,
    pub success: bool,
    pub oracle_success: bool,
    pub spl: f64,
    pub path_length: f64,
    pub shortest_length: f64,
    pub backtracked: bool,
    pub corrected_after_backtrack: bool,
}

fn goal_distance(world: &WorldGraph, goals: &[NodeId], node: &str) -> f64 {
    goals
        .iter()
        .map(|g| world.geodesic(node, g))
        .fold(f64::INFINITY, f64::min)
}

fn check_trajectory(world: &WorldGraph, episode: &EpisodeSpec, log: &TrajectoryLog) -> Result<(), EvalError> {
    let bad = |msg: String| Err(EvalError::InvalidTrajectory(log.episode_id.clone(), msg));
    let Some(first) = log.visited_env_nodes.first() else {
        return bad("no visited nodes".into());
    };
    if *first != episode.start_node {
        return bad(format!("starts at {first}, episode starts at {}", episode.start_node));
    }
    if log.visited_env_nodes.last() != Some(&log.final_node) {
        return bad("final node is not the last visited node".into());
    }
    if let Some(n) = log.visited_env_nodes.iter().find(|n| !world.contains(n)) {
        return bad(format!("unknown node {n}"));
    }
    if let Some(g) = episode.goal_nodes.iter().find(|g| !world.contains(g)) {
        return bad(format!("unknown goal node {g}"));
    }
    if episode.goal_nodes.is_empty() {
        return bad("no goal nodes".into());
    }
    for w in log.visited_env_nodes.windows(2) {
        if !world.is_adjacent(&w[0], &w[1]) {
            return bad(format!("{} -> {} is not an edge", w[0], w[1]));
        }
    }
    Ok(())
}

/// Scores one trajectory against its episode.
pub fn score(
    world: &WorldGraph,
    episode: &EpisodeSpec,
    log: &TrajectoryLog,
    threshold: f64,
) -> Result<EpisodeMetrics, EvalError> {
    check_trajectory(world, episode, log)?;
    let visited = &log.visited_env_nodes;
    let dist: Vec<f64> = visited
        .iter()
        .map(|n| goal_distance(world, &episode.goal_nodes, n))
        .collect();

    let ne = *dist.last().expect("checked non-empty");
    let success = ne <= threshold;
    let oracle_success = dist.iter().any(|d| *d <= threshold);
    let path_length: f64 = visited
        .windows(2)
        .map(|w| world.edge_length(&w[0], &w[1]).expect("checked adjacent"))
        .sum();
    let shortest_length = dist[0];
    let spl = if !success {
        0.0
    } else {
        let denom = path_length.max(shortest_length);
        if denom == 0.0 { 1.0 } else { shortest_length / denom }
    };
    let (backtracked, corrected_after_backtrack) = backtrack_stats_from(visited, &dist);
    Ok(EpisodeMetrics {
        ne,
        success,
        oracle_success,
        spl,
        path_length,
        shortest_length,
        backtracked,
        corrected_after_backtrack,
    })
}

/// Whether the trajectory revisits a node, and whether after some revisit
/// it reaches a node strictly closer to the goal than everything visited
/// before that revisit.
pub fn backtrack_stats(world: &WorldGraph, episode: &EpisodeSpec, log: &TrajectoryLog) -> (bool, bool) {
    let dist: Vec<f64> = log
        .visited_env_nodes
        .iter()
        .map(|n| goal_distance(world, &episode.goal_nodes, n))
        .collect();
    backtrack_stats_from(&log.visited_env_nodes, &dist)
}

fn backtrack_stats_from(visited: &[NodeId], goal_dist: &[f64]) -> (bool, bool) {
    let mut backtracked = false;
    let mut best_before = f64::INFINITY;
    for i in 0..visited.len() {
        if visited[..i].contains(&visited[i]) {
            backtracked = true;
            if goal_dist[i + 1..].iter().any(|d| *d < best_before) {
                return (true, true);
            }
        }
        best_before = best_before.min(goal_dist[i]);
    }
    (backtracked, false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryMetrics {
    pub episodes: usize,
    /// Mean navigation error in meters.
    pub ne: f64,
    /// Percentages in [0, 100].
    pub osr: f64,
    pub sr: f64,
    pub spl: f64,
    /// Share of episodes with at least one revisit.
    pub backtrack_ratio: f64,
    /// Share of backtracking episodes that corrected course; `None` when no
    /// episode backtracked.
    pub correction_ratio: Option<f64>,
}

pub fn aggregate(metrics: &[EpisodeMetrics]) -> Result<SummaryMetrics, EvalError> {
    if metrics.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let n = metrics.len() as f64;
    let pct = |f: &dyn Fn(&EpisodeMetrics) -> bool| {
        100.0 * metrics.iter().filter(|m| f(m)).count() as f64 / n
    };
    let backtracked: Vec<&EpisodeMetrics> = metrics.iter().filter(|m| m.backtracked).collect();
    let correction_ratio = (!backtracked.is_empty()).then(|| {
        100.0 * backtracked.iter().filter(|m| m.corrected_after_backtrack).count() as f64
            / backtracked.len() as f64
    });
    Ok(SummaryMetrics {
        episodes: metrics.len(),
        ne: metrics.iter().map(|m| m.ne).sum::<f64>() / n,
        osr: pct(&|m| m.oracle_success),
        sr: pct(&|m| m.success),
        spl: 100.0 * metrics.iter().map(|m| m.spl).sum::<f64>() / n,
        backtrack_ratio: pct(&|m| m.backtracked),
        correction_ratio,
    })
}

/// Aligned plain-text table, one row per group, in the usual
/// NE / OSR / SR / SPL column order.
pub fn format_table(rows: &[(String, SummaryMetrics)]) -> String {
    let header = ["Group", "Episodes", "NE↓", "OSR↑", "SR↑", "SPL↑", "Backtrack", "Corrected"];
    let body: Vec<[String; 8]> = rows
        .iter()
        .map(|(name, m)| {
            [
                name.clone(),
                m.episodes.to_string(),
                format!("{:.2}", m.ne),
                format!("{:.1}", m.osr),
                format!("{:.1}", m.sr),
                format!("{:.1}", m.spl),
                format!("{:.1}", m.backtrack_ratio),
                m.correction_ratio.map_or("-".into(), |c| format!("{c:.1}")),
            ]
        })
        .collect();
    let mut widths = header.map(|h| h.chars().count());
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |cells: &[&str]| {
        let mut l = String::new();
        for (i, (cell, w)) in cells.iter().zip(widths).enumerate() {
            let pad = w - cell.chars().count();
            if i == 0 {
                let _ = write!(l, "{cell}{:pad$}", "");
            } else {
                let _ = write!(l, "  {:pad$}{cell}", "");
            }
        }
        out.push_str(l.trim_end());
        out.push('\n');
    };
    line(&header);
    for row in &body {
        let cells: Vec<&str> = row.iter().map(String::as_str).collect();
        line(&cells);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::StopReason;
    use crate::env::fixtures;
    use crate::prompts::Dataset;
    use crate::topomap::TopoMap;
    use alloc::vec;

    /// a-b-c-d-e along +y, 2 m segments.
    fn chain2() -> WorldGraph {
        fixtures::world(
            &[
                ("a", [0.0, 0.0, 0.0]),
                ("b", [0.0, 2.0, 0.0]),
                ("c", [0.0, 4.0, 0.0]),
                ("d", [0.0, 6.0, 0.0]),
                ("e", [0.0, 8.0, 0.0]),
            ],
            &[("a", "b"), ("b", "c"), ("c", "d"), ("d", "e")],
        )
    }

    fn ep(start: &str, goal: &str) -> EpisodeSpec {
        EpisodeSpec {
            episode_id: "ep".into(),
            world_id: "w".into(),
            instruction: String::new(),
            start_node: start.into(),
            start_heading: 0.0,
            style: Dataset::R2R,
            goal_nodes: vec![goal.into()],
            target_object: None,
        }
    }

    fn log(path: &[&str]) -> TrajectoryLog {
        TrajectoryLog {
            episode_id: "ep".into(),
            world_id: "w".into(),
            visited_env_nodes: path.iter().map(|s| s.to_string()).collect(),
            steps: vec![],
            stop_reason: StopReason::AgentStop,
            final_node: path.last().unwrap().to_string(),
            final_map: TopoMap::new(path[0]),
        }
    }

    #[test]
    fn optimal_walk() {
        let w = chain2();
        let m = score(&w, &ep("a", "e"), &log(&["a", "b", "c", "d", "e"]), 3.0).unwrap();
        assert_eq!(m.ne, 0.0);
        assert!(m.success && m.oracle_success);
        assert_eq!(m.spl, 1.0);
        assert_eq!((m.path_length, m.shortest_length), (8.0, 8.0));
    }

    #[test]
    fn stop_one_hop_short_still_succeeds() {
        let w = chain2();
        let m = score(&w, &ep("a", "e"), &log(&["a", "b", "c", "d"]), 3.0).unwrap();
        assert_eq!(m.ne, 2.0);
        assert!(m.success);
        // 8 / max(6, 8)
        assert_eq!(m.spl, 1.0);
        assert_eq!(m.path_length, 6.0);
    }

    #[test]
    fn overshoot_is_oracle_success_only() {
        let w = chain2();
        // Goal c; walk through it to e, 4 m past.
        let m = score(&w, &ep("a", "c"), &log(&["a", "b", "c", "d", "e"]), 3.0).unwrap();
        assert_eq!(m.ne, 4.0);
        assert!(m.oracle_success);
        assert!(!m.success);
        assert_eq!(m.spl, 0.0);
    }

    #[test]
    fn start_in_goal_region() {
        let w = chain2();
        let m = score(&w, &ep("a", "a"), &log(&["a"]), 3.0).unwrap();
        assert_eq!((m.ne, m.spl, m.success), (0.0, 1.0, true));
        let m = score(&w, &ep("b", "a"), &log(&["b"]), 3.0).unwrap();
        assert_eq!((m.ne, m.spl, m.success), (2.0, 1.0, true));
    }

    #[test]
    fn invalid_trajectories() {
        let w = chain2();
        assert!(matches!(score(&w, &ep("a", "e"), &log(&["a", "c"]), 3.0), Err(EvalError::InvalidTrajectory(..))));
        assert!(matches!(score(&w, &ep("b", "e"), &log(&["a"]), 3.0), Err(EvalError::InvalidTrajectory(..))));
        assert!(matches!(score(&w, &ep("a", "e"), &log(&["a", "zz"]), 3.0), Err(EvalError::InvalidTrajectory(..))));
    }

    #[test]
    fn backtracking_cases() {
        // Star around a: b west (farther from goal), c east towards goal g.
        let w = fixtures::world(
            &[
                ("a", [0.0, 0.0, 0.0]),
                ("b", [-2.0, 0.0, 0.0]),
                ("c", [2.0, 0.0, 0.0]),
                ("g", [4.0, 0.0, 0.0]),
            ],
            &[("a", "b"), ("a", "c"), ("c", "g")],
        );
        let e = ep("a", "g");
        assert_eq!(backtrack_stats(&w, &e, &log(&["a", "c", "g"])), (false, false));
        // Goal distances: a 4, b 6, c 2.
        assert_eq!(backtrack_stats(&w, &e, &log(&["a", "b", "a", "c"])), (true, true));
        assert_eq!(backtrack_stats(&w, &e, &log(&["a", "b", "a", "b"])), (true, false));
    }

    #[test]
    fn appending_a_stop_keeps_ne() {
        let w = chain2();
        let mut l = log(&["a", "b"]);
        let before = score(&w, &ep("a", "e"), &l, 3.0).unwrap();
        l.steps.push(crate::agent::StepRecord {
            step_index: 1,
            prompt: Default::default(),
            raw_response: Some("Action: A".into()),
            parsed: None,
            failed_attempts: vec![],
            executed_action: crate::agent::ExecutedAction::Stop,
            env_node_after: "b".into(),
        });
        assert_eq!(score(&w, &ep("a", "e"), &l, 3.0).unwrap(), before);
    }

    #[test]
    fn aggregates() {
        let w = chain2();
        let ok = score(&w, &ep("a", "e"), &log(&["a", "b", "c", "d", "e"]), 3.0).unwrap();
        let bad = score(&w, &ep("a", "e"), &log(&["a"]), 3.0).unwrap();
        assert_eq!(aggregate(core::slice::from_ref(&ok)).unwrap().sr, 100.0);
        let s = aggregate(&[ok, bad]).unwrap();
        assert_eq!((s.sr, s.osr, s.spl, s.ne), (50.0, 50.0, 50.0, 4.0));
        assert_eq!(s.correction_ratio, None);
        assert_eq!(aggregate(&[]), Err(EvalError::EmptyInput));
    }

    #[test]
    fn correction_ratio_is_conditional() {
        let base = EpisodeMetrics {
            ne: 0.0,
            success: true,
            oracle_success: true,
            spl: 1.0,
            path_length: 0.0,
            shortest_length: 0.0,
            backtracked: false,
            corrected_after_backtrack: false,
        };
        let bt_yes = EpisodeMetrics { backtracked: true, corrected_after_backtrack: true, ..base.clone() };
        let bt_no = EpisodeMetrics { backtracked: true, ..base.clone() };
        let s = aggregate(&[base.clone(), base, bt_yes.clone(), bt_yes, bt_no]).unwrap();
        assert_eq!(s.backtrack_ratio, 60.0);
        assert!((s.correction_ratio.unwrap() - 200.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn table_layout() {
        let s = SummaryMetrics {
            episodes: 2,
            ne: 1.234,
            osr: 100.0,
            sr: 50.0,
            spl: 47.26,
            backtrack_ratio: 0.0,
            correction_ratio: None,
        };
        let t = format_table(&[("R2R".into(), s)]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("Group"));
        let cols: Vec<&str> = lines[0].split_whitespace().collect();
        assert_eq!(&cols[2..6], &["NE↓", "OSR↑", "SR↑", "SPL↑"]);
        assert!(lines[1].contains("1.23") && lines[1].contains("47.3") && lines[1].ends_with('-'));
    }
}
