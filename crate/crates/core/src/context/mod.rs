//! Two-stage context selection for one checklist item.
//!
//! Stage one keeps utterances strictly inside the anchoring event window
//! widened by the pre/post buffers. Stage two keeps the candidates whose
//! embedding cosine similarity to the item text is strictly above `tau`.

pub mod embed;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ChecklistItem, EventWindow, Session, Transcript, Utterance};
pub use embed::{
    CachedEmbedder, EmbedError, EmbeddingConfig, EmbeddingProvider, EmbeddingVector,
    HashingEmbedder, ProviderKind, RemoteEmbedder,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContextError {
    #[error("vector dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero-norm vector")]
    ZeroVector,
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("item {0} references an event missing from the session")]
    MissingEvent(String),
    #[error("invalid context config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyFallback {
    AutoFalse,
    TopK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextConfig {
    pub delta_pre_s: f64,
    pub delta_post_s: f64,
    pub tau: f64,
    pub empty_fallback: EmptyFallback,
    pub top_k: usize,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self {
            delta_pre_s: 30.0,
            delta_post_s: 60.0,
            tau: 0.7,
            empty_fallback: EmptyFallback::AutoFalse,
            top_k: 3,
        }
    }
}

impl ContextConfig {
    pub fn validate(&self) -> Result<(), ContextError> {
        if !(-1.0..=1.0).contains(&self.tau) {
            return Err(ContextError::InvalidConfig(format!("tau {} outside [-1, 1]", self.tau)));
        }
        if !(self.delta_pre_s >= 0.0 && self.delta_post_s >= 0.0) {
            return Err(ContextError::InvalidConfig("buffers must be non-negative".into()));
        }
        if self.top_k == 0 {
            return Err(ContextError::InvalidConfig("top_k must be positive".into()));
        }
        Ok(())
    }
}

/// Which selection stages run. The default pipeline is
/// `TemporalThenSemantic`; the others exist for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    None,
    TemporalOnly,
    SemanticOnly,
    TemporalThenSemantic,
}

impl ContextMode {
    pub const ALL: [ContextMode; 4] = [
        ContextMode::None,
        ContextMode::TemporalOnly,
        ContextMode::SemanticOnly,
        ContextMode::TemporalThenSemantic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::TemporalOnly => "temporal_only",
            Self::SemanticOnly => "semantic_only",
            Self::TemporalThenSemantic => "temporal_then_semantic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

impl std::fmt::Display for ContextMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredUtterance {
    pub utterance: Utterance,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextSelection {
    pub item_id: String,
    pub temporal_candidates: Vec<Utterance>,
    pub selected: Vec<Utterance>,
    pub fallback_used: bool,
}

pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, ContextError> {
    if a.dim() != b.dim() {
        return Err(ContextError::DimensionMismatch(a.dim(), b.dim()));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(ContextError::ZeroVector);
    }
    let dot: f64 = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Utterances with `start - delta_pre < t < end + delta_post`, in order.
pub fn temporal_extract(
    transcript: &Transcript,
    window: &EventWindow,
    cfg: &ContextConfig,
) -> Vec<Utterance> {
    let lo = window.start_s - cfg.delta_pre_s;
    let hi = window.end_s + cfg.delta_post_s;
    transcript
        .utterances()
        .iter()
        .filter(|u| lo < u.timestamp_s && u.timestamp_s < hi)
        .cloned()
        .collect()
}

fn score_all(
    candidates: &[Utterance],
    item: &ChecklistItem,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<ScoredUtterance>, ContextError> {
    let anchor = provider.embed(&item.text)?;
    candidates
        .iter()
        .map(|u| {
            let v = provider.embed(&u.text)?;
            Ok(ScoredUtterance {
                utterance: u.clone(),
                similarity: cosine_similarity(&v, &anchor)?,
            })
        })
        .collect()
}

/// Keeps candidates whose similarity to the item is strictly above `tau`.
pub fn semantic_refine(
    candidates: &[Utterance],
    item: &ChecklistItem,
    cfg: &ContextConfig,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<ScoredUtterance>, ContextError> {
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    let scored = score_all(candidates, item, provider)?;
    Ok(scored.into_iter().filter(|s| s.similarity > cfg.tau).collect())
}

/// Top `k` by similarity, ties toward the earlier timestamp, returned in
/// transcript order.
fn top_k(mut scored: Vec<ScoredUtterance>, k: usize) -> Vec<Utterance> {
    scored.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then(a.utterance.timestamp_s.total_cmp(&b.utterance.timestamp_s))
            .then(a.utterance.ordinal.cmp(&b.utterance.ordinal))
    });
    scored.truncate(k);
    let mut picked: Vec<Utterance> = scored.into_iter().map(|s| s.utterance).collect();
    picked.sort_by_key(|u| u.ordinal);
    picked
}

pub fn select_context(
    session: &Session,
    item: &ChecklistItem,
    cfg: &ContextConfig,
    provider: &dyn EmbeddingProvider,
) -> Result<ContextSelection, ContextError> {
    select_context_with_mode(session, item, cfg, provider, ContextMode::TemporalThenSemantic)
}

pub fn select_context_with_mode(
    session: &Session,
    item: &ChecklistItem,
    cfg: &ContextConfig,
    provider: &dyn EmbeddingProvider,
    mode: ContextMode,
) -> Result<ContextSelection, ContextError> {
    let full = || session.transcript.utterances().to_vec();
    let temporal = || -> Result<Vec<Utterance>, ContextError> {
        let window = session
            .event(&item.event_id)
            .ok_or_else(|| ContextError::MissingEvent(item.item_id.clone()))?;
        Ok(temporal_extract(&session.transcript, window, cfg))
    };
    let (candidates, selected) = match mode {
        ContextMode::None => {
            let all = full();
            (all.clone(), all)
        }
        ContextMode::TemporalOnly => {
            let t = temporal()?;
            (t.clone(), t)
        }
        ContextMode::SemanticOnly => {
            let all = full();
            let kept = semantic_refine(&all, item, cfg, provider)?;
            (all, kept.into_iter().map(|s| s.utterance).collect())
        }
        ContextMode::TemporalThenSemantic => {
            let t = temporal()?;
            let kept = semantic_refine(&t, item, cfg, provider)?;
            (t, kept.into_iter().map(|s| s.utterance).collect())
        }
    };
    if !selected.is_empty() {
        return Ok(ContextSelection {
            item_id: item.item_id.clone(),
            temporal_candidates: candidates,
            selected,
            fallback_used: false,
        });
    }
    let selected = match cfg.empty_fallback {
        EmptyFallback::AutoFalse => Vec::new(),
        EmptyFallback::TopK => top_k(score_all(&candidates, item, provider)?, cfg.top_k),
    };
    Ok(ContextSelection {
        item_id: item.item_id.clone(),
        temporal_candidates: candidates,
        selected,
        fallback_used: true,
    })
}
