//! Scores trajectory logs and summarizes them per dataset style.

use std::collections::BTreeMap;

use mapnav_core::agent::{EpisodeSpec, TrajectoryLog};
use mapnav_core::env::WorldGraph;
use mapnav_core::eval::{aggregate, format_table, score, EpisodeMetrics, EvalError, SummaryMetrics};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("log for unknown episode `{0}`")]
    UnknownEpisode(String),
    #[error("episode {0}: unknown world `{1}`")]
    UnknownWorld(String, String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub episode_id: String,
    pub style: String,
    #[serde(flatten)]
    pub metrics: EpisodeMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub success_threshold: f64,
    /// Keyed by dataset style.
    pub groups: BTreeMap<String, SummaryMetrics>,
    pub overall: SummaryMetrics,
    pub episodes: Vec<EpisodeRow>,
}

impl Report {
    /// One row per style, plus an `all` row when styles are mixed.
    pub fn table(&self) -> String {
        let mut rows: Vec<(String, SummaryMetrics)> =
            self.groups.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        if rows.len() > 1 {
            rows.push(("all".into(), self.overall.clone()));
        }
        format_table(&rows)
    }
}

pub fn evaluate(
    worlds: &BTreeMap<String, WorldGraph>,
    episodes: &[EpisodeSpec],
    logs: &[TrajectoryLog],
    threshold: f64,
) -> Result<Report, ReportError> {
    let by_id: BTreeMap<&str, &EpisodeSpec> = episodes.iter().map(|e| (e.episode_id.as_str(), e)).collect();
    let mut rows = Vec::with_capacity(logs.len());
    for log in logs {
        let ep = by_id.get(log.episode_id.as_str()).ok_or_else(|| ReportError::UnknownEpisode(log.episode_id.clone()))?;
        let world = worlds
            .get(&ep.world_id)
            .ok_or_else(|| ReportError::UnknownWorld(ep.episode_id.clone(), ep.world_id.clone()))?;
        rows.push(EpisodeRow {
            episode_id: ep.episode_id.clone(),
            style: ep.style.as_str().into(),
            metrics: score(world, ep, log, threshold)?,
        });
    }
    let all: Vec<EpisodeMetrics> = rows.iter().map(|r| r.metrics.clone()).collect();
    let overall = aggregate(&all)?;
    let mut grouped: BTreeMap<String, Vec<EpisodeMetrics>> = BTreeMap::new();
    for r in &rows {
        grouped.entry(r.style.clone()).or_default().push(r.metrics.clone());
    }
    let groups = grouped
        .into_iter()
        .map(|(k, v)| aggregate(&v).map(|s| (k, s)))
        .collect::<Result<_, _>>()?;
    Ok(Report { success_threshold: threshold, groups, overall, episodes: rows })
}
