//! World, episode and trajectory-log files.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use mapnav_core::agent::{EpisodeSpec, TrajectoryLog};
use mapnav_core::env::{WorldError, WorldFile, WorldGraph};
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    InvalidWorld {
        path: PathBuf,
        #[source]
        source: WorldError,
    },
    #[error("duplicate world id `{0}` in {1}")]
    DuplicateWorld(String, PathBuf),
}

impl IoError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io { path: path.to_path_buf(), source }
    }
}

/// Reads and validates one world JSON file.
pub fn load_world(path: &Path) -> Result<WorldGraph, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    let file: WorldFile = serde_json::from_str(&text).map_err(|e| IoError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        source: e,
    })?;
    WorldGraph::from_file(file).map_err(|source| IoError::InvalidWorld { path: path.to_path_buf(), source })
}

/// Loads every `*.json` world in `dir`, keyed by world id.
pub fn load_worlds(dir: &Path) -> Result<BTreeMap<String, WorldGraph>, IoError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| IoError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut worlds = BTreeMap::new();
    for p in paths {
        let w = load_world(&p)?;
        let id = w.world_id().to_string();
        if worlds.insert(id.clone(), w).is_some() {
            return Err(IoError::DuplicateWorld(id, p));
        }
    }
    Ok(worlds)
}

pub fn write_world(path: &Path, world: &WorldGraph) -> Result<(), IoError> {
    let text = serde_json::to_string_pretty(&world.to_file()).expect("world serializes");
    fs::write(path, text + "\n").map_err(|e| IoError::io(path, e))
}

/// Parses a JSON-lines file, skipping blank lines.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    let f = File::open(path).map_err(|e| IoError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| IoError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|source| IoError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        out.push(v);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), IoError> {
    let f = File::create(path).map_err(|e| IoError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for item in items {
        let line = serde_json::to_string(item).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| IoError::io(path, e))?;
    }
    w.flush().map_err(|e| IoError::io(path, e))
}

pub fn read_episodes(path: &Path) -> Result<Vec<EpisodeSpec>, IoError> {
    read_jsonl(path)
}

pub fn read_logs(path: &Path) -> Result<Vec<TrajectoryLog>, IoError> {
    read_jsonl(path)
}
