//! Map-guided LLM navigation agent core.
//!
//! Everything here is pure and allocation-only: graph worlds ([`env`]), the
//! agent's online topological map ([`topomap`]), prompt compilation
//! ([`prompts`]), the backend abstraction and reply parser ([`llm`]), the
//! episode loop ([`agent`]) and trajectory metrics ([`eval`]). File formats,
//! remote backends and the CLI live in the `mapnav` crate.

#![no_std]

extern crate alloc;

pub mod env;
pub mod topomap;
pub mod prompts;
pub mod llm;
pub mod agent;
pub mod eval;
