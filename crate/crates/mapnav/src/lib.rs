//! Std companion to `mapnav-core`: world/episode/log files, LLM backends,
//! the batch runner and evaluation reports behind the `mapnav` CLI.

pub mod backends;
pub mod io;
pub mod synth;
pub mod config;
pub mod runner;
pub mod report;
