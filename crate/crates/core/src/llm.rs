//! Backend abstraction, request digests and the reply parser.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Where a request comes from. Backends may key on it (the scripted oracle
/// does); it is not part of the request digest.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestContext {
    pub episode_id: String,
    pub step_index: usize,
    pub attempt: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub model_id: String,
    pub system_text: String,
    pub user_text: String,
    pub image_refs: Vec<String>,
    #[serde(default)]
    pub context: RequestContext,
}

impl LlmRequest {
    /// Hex SHA-256 over model id, both messages and the image references.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"mapnav-llm-request-v1");
        let mut field = |bytes: &[u8]| {
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(bytes);
        };
        field(self.model_id.as_bytes());
        field(self.system_text.as_bytes());
        field(self.user_text.as_bytes());
        field(&(self.image_refs.len() as u64).to_le_bytes());
        for r in &self.image_refs {
            field(r.as_bytes());
        }
        let out = h.finalize();
        let mut s = String::with_capacity(64);
        for b in out.iter() {
            let _ = write!(s, "{b:02x}");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    /// Network or server failure; worth retrying.
    #[error("transport error: {0}")]
    Transport(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("no cached response for digest {0}")]
    CacheMiss(String),
    #[error("backend misconfigured: {0}")]
    Config(String),
    #[error("script exhausted: {0}")]
    Script(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

pub trait Backend {
    fn complete(&self, req: &LlmRequest) -> Result<String, BackendError>;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn complete(&self, req: &LlmRequest) -> Result<String, BackendError> {
        (**self).complete(req)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn complete(&self, req: &LlmRequest) -> Result<String, BackendError> {
        (**self).complete(req)
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn complete(&self, req: &LlmRequest) -> Result<String, BackendError> {
        (**self).complete(req)
    }
}

/// Backend answering from a closure.
pub struct FnBackend<F>(pub F);

impl<F> Backend for FnBackend<F>
where
    F: Fn(&LlmRequest) -> Result<String, BackendError>,
{
    fn complete(&self, req: &LlmRequest) -> Result<String, BackendError> {
        (self.0)(req)
    }
}

/// Fixed replies keyed by (episode, step). Retries within a step take the
/// next scripted reply, repeating the last one once exhausted.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScriptedBackend {
    replies: BTreeMap<(String, usize), Vec<String>>,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, episode_id: &str, step: usize, reply: impl Into<String>) {
        self.replies
            .entry((episode_id.to_string(), step))
            .or_default()
            .push(reply.into());
    }

    /// One `Action: X` reply per step.
    pub fn from_labels(episode_id: &str, labels: &[char]) -> Self {
        let mut s = Self::new();
        s.push_labels(episode_id, labels);
        s
    }

    /// Appends one reply per label, step `i` choosing `labels[i]`.
    pub fn push_labels(&mut self, episode_id: &str, labels: &[char]) {
        for (i, l) in labels.iter().enumerate() {
            let step = ParsedStep {
                thought: format!("step {i}"),
                planning: format!("plan {i}"),
                action_label: *l,
            };
            self.push(episode_id, i, render_response(&step));
        }
    }

    pub fn len(&self) -> usize {
        self.replies.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.replies.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize, &[String])> {
        self.replies.iter().map(|((e, s), r)| (e.as_str(), *s, r.as_slice()))
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, req: &LlmRequest) -> Result<String, BackendError> {
        let ctx = &req.context;
        let replies = self
            .replies
            .get(&(ctx.episode_id.clone(), ctx.step_index))
            .filter(|r| !r.is_empty())
            .ok_or_else(|| {
                BackendError::Script(format!("episode {} step {}", ctx.episode_id, ctx.step_index))
            })?;
        Ok(replies[ctx.attempt.min(replies.len() - 1)].clone())
    }
}

/// Thought, updated plan and chosen option label extracted from a reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedStep {
    pub thought: String,
    pub planning: String,
    pub action_label: char,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("reply has no `Action:` tag")]
    MissingActionTag,
    #[error("no option letter after the last `Action:` tag")]
    MissingActionLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tag {
    Thought,
    Planning,
    Action,
}

const TAGS: [(&str, Tag); 3] = [
    ("thought:", Tag::Thought),
    ("new planning:", Tag::Planning),
    ("action:", Tag::Action),
];

/// (start, end, tag) for every tag occurrence, ordered by position.
fn tag_spans(lower: &str) -> Vec<(usize, usize, Tag)> {
    let mut spans: Vec<(usize, usize, Tag)> = TAGS
        .iter()
        .flat_map(|(pat, tag)| lower.match_indices(pat).map(move |(i, m)| (i, i + m.len(), *tag)))
        .collect();
    spans.sort_unstable_by_key(|s| s.0);
    spans
}

fn section<'t>(text: &'t str, spans: &[(usize, usize, Tag)], tag: Tag) -> Option<&'t str> {
    let idx = spans.iter().rposition(|s| s.2 == tag)?;
    let start = spans[idx].1;
    let end = spans.get(idx + 1).map_or(text.len(), |s| s.0);
    Some(text[start..end].trim())
}

/// Splits a reply into thought, plan and action label.
///
/// Tags are case-insensitive and the last occurrence of each wins. The label
/// is the single letter following the last `Action:`, optionally wrapped in
/// quotes, brackets or markdown emphasis and followed by punctuation. An
/// absent or empty `New Planning:` falls back to `previous_plan`.
pub fn parse_response(text: &str, previous_plan: &str) -> Result<ParsedStep, ParseError> {
    let lower = text.to_ascii_lowercase();
    let spans = tag_spans(&lower);
    let last_action = spans
        .iter()
        .rev()
        .find(|s| s.2 == Tag::Action)
        .ok_or(ParseError::MissingActionTag)?;

    let mut rest = text[last_action.1..]
        .chars()
        .skip_while(|c| c.is_whitespace() || matches!(c, '*' | '_' | '"' | '\'' | '(' | '[' | '`'));
    let label = match rest.next() {
        Some(c) if c.is_ascii_alphabetic() => c.to_ascii_uppercase(),
        _ => return Err(ParseError::MissingActionLabel),
    };
    if rest.next().is_some_and(|c| c.is_alphanumeric()) {
        return Err(ParseError::MissingActionLabel);
    }

    let thought = section(text, &spans, Tag::Thought).unwrap_or("").to_string();
    let planning = match section(text, &spans, Tag::Planning) {
        Some(p) if !p.is_empty() => p.to_string(),
        _ => previous_plan.to_string(),
    };
    Ok(ParsedStep { thought, planning, action_label: label })
}

/// Canonical reply text for a parsed step.
pub fn render_response(step: &ParsedStep) -> String {
    format!(
        "Thought: {}\nNew Planning: {}\nAction: {}",
        step.thought, step.planning, step.action_label
    )
}
