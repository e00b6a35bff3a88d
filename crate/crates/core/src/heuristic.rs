//! Deterministic rule engine assigning one foraging label per event.
//!
//! Rules are evaluated in a fixed order for each event; the first that
//! matches wins:
//!
//! 1. `CLICK` is `ApproachingSource`.
//! 2. A zero-click query whose results carried a direct answer is
//!    `ForagingSuccess`.
//! 3. The final query of a session, zero-click, with no earlier successful
//!    interaction and at least `leave_patch_min_queries` queries in the
//!    session, is `LeavingPatch`.
//! 4. Any other zero-click query is `PoorScent`.
//! 5. A clicked query that narrows or broadens the previous query is
//!    `DietEnrichment`.
//! 6. Remaining queries are `FollowingScent`.
//! 7. `RATE` and other actions map through a configurable table.

use crate::model::{
    ActionType, AnnotationSource, CognitiveAnnotation, CognitiveLabel, Session,
};
use crate::text::{default_stopwords, token_set};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReformulationKind {
    Identical,
    Narrowing,
    Broadening,
    Drift,
    NewTopic,
    First,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelerConfig {
    pub leave_patch_min_queries: usize,
    pub drift_jaccard_threshold: f64,
    pub stopwords: BTreeSet<String>,
    pub long_click_ms: u64,
    /// Label for non-query, non-click actions, keyed by the action's name
    /// (`RATE` or the lowercase tag). Unlisted actions get `default_other_label`.
    pub action_labels: BTreeMap<String, CognitiveLabel>,
    pub default_other_label: CognitiveLabel,
}

impl Default for LabelerConfig {
    fn default() -> Self {
        Self {
            leave_patch_min_queries: 3,
            drift_jaccard_threshold: 0.5,
            stopwords: default_stopwords(),
            long_click_ms: 30_000,
            action_labels: BTreeMap::new(),
            default_other_label: CognitiveLabel::FollowingScent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LabelerError {
    #[error("query text is empty")]
    EmptyQuery,
    #[error("session has no events")]
    EmptySession,
    #[error("invalid labeler config: {0}")]
    InvalidConfig(String),
}

impl LabelerConfig {
    pub fn validate(&self) -> Result<(), LabelerError> {
        if self.leave_patch_min_queries == 0 {
            return Err(LabelerError::InvalidConfig(
                "leave_patch_min_queries must be positive".into(),
            ));
        }
        if !(self.drift_jaccard_threshold > 0.0 && self.drift_jaccard_threshold <= 1.0) {
            return Err(LabelerError::InvalidConfig(
                "drift_jaccard_threshold must lie in (0, 1]".into(),
            ));
        }
        if self.long_click_ms == 0 {
            return Err(LabelerError::InvalidConfig("long_click_ms must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(raw: &str) -> Result<Self, LabelerError> {
        let cfg: Self =
            serde_json::from_str(raw).map_err(|e| LabelerError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn classify_reformulation(
    prev_query: &str,
    new_query: &str,
    cfg: &LabelerConfig,
) -> Result<ReformulationKind, LabelerError> {
    if prev_query.trim().is_empty() || new_query.trim().is_empty() {
        return Err(LabelerError::EmptyQuery);
    }
    let prev = token_set(prev_query, &cfg.stopwords);
    let new = token_set(new_query, &cfg.stopwords);
    if prev == new {
        return Ok(ReformulationKind::Identical);
    }
    // A query of only stopwords shares no content terms with anything.
    if prev.is_empty() || new.is_empty() {
        return Ok(ReformulationKind::NewTopic);
    }
    if prev.is_subset(&new) {
        return Ok(ReformulationKind::Narrowing);
    }
    if new.is_subset(&prev) {
        return Ok(ReformulationKind::Broadening);
    }
    let inter = prev.intersection(&new).count() as f64;
    let union = prev.union(&new).count() as f64;
    if inter / union >= cfg.drift_jaccard_threshold {
        Ok(ReformulationKind::Drift)
    } else {
        Ok(ReformulationKind::NewTopic)
    }
}

/// Rule that produced a heuristic label; used as the annotation's justification.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleName {
    Click,
    AnswerPresent,
    LeavingPatch,
    ZeroClick,
    Reformulation,
    TargetedQuery,
    ActionMap,
}

impl RuleName {
    pub fn as_str(self) -> &'static str {
        match self {
            RuleName::Click => "rule:click",
            RuleName::AnswerPresent => "rule:answer-present",
            RuleName::LeavingPatch => "rule:leaving-patch",
            RuleName::ZeroClick => "rule:zero-click",
            RuleName::Reformulation => "rule:reformulation",
            RuleName::TargetedQuery => "rule:targeted-query",
            RuleName::ActionMap => "rule:action-map",
        }
    }
}

/// Label plus the rule that fired, per event.
pub fn label_events(
    session: &Session,
    cfg: &LabelerConfig,
) -> Result<Vec<(CognitiveLabel, RuleName)>, LabelerError> {
    let events = &session.events;
    if events.is_empty() {
        return Err(LabelerError::EmptySession);
    }
    let query_positions: Vec<usize> = events
        .iter()
        .enumerate()
        .filter(|(_, e)| e.action.is_query())
        .map(|(i, _)| i)
        .collect();
    let final_query = query_positions.last().copied();

    // Clicks between each query and the next query (or session end).
    let mut clicks_after = vec![0usize; events.len()];
    for (k, &q) in query_positions.iter().enumerate() {
        let end = query_positions.get(k + 1).copied().unwrap_or(events.len());
        clicks_after[q] = events[q + 1..end].iter().filter(|e| e.action.is_click()).count();
    }

    let mut out: Vec<(CognitiveLabel, RuleName)> = Vec::with_capacity(events.len());
    let mut prior_success = false;
    let mut prev_query: Option<&str> = None;
    for (i, event) in events.iter().enumerate() {
        let assigned = match &event.action {
            ActionType::Click => (CognitiveLabel::ApproachingSource, RuleName::Click),
            ActionType::Query => {
                let zero_click = clicks_after[i] == 0;
                if zero_click && event.answer_present {
                    (CognitiveLabel::ForagingSuccess, RuleName::AnswerPresent)
                } else if zero_click
                    && Some(i) == final_query
                    && !prior_success
                    && query_positions.len() >= cfg.leave_patch_min_queries
                {
                    (CognitiveLabel::LeavingPatch, RuleName::LeavingPatch)
                } else if zero_click {
                    (CognitiveLabel::PoorScent, RuleName::ZeroClick)
                } else {
                    let kind = match prev_query {
                        Some(prev) if !prev.trim().is_empty() && !event.content.trim().is_empty() => {
                            classify_reformulation(prev, &event.content, cfg)?
                        }
                        _ => ReformulationKind::First,
                    };
                    if matches!(kind, ReformulationKind::Narrowing | ReformulationKind::Broadening) {
                        (CognitiveLabel::DietEnrichment, RuleName::Reformulation)
                    } else {
                        (CognitiveLabel::FollowingScent, RuleName::TargetedQuery)
                    }
                }
            }
            other => {
                let label = cfg
                    .action_labels
                    .get(other.as_str())
                    .copied()
                    .unwrap_or(cfg.default_other_label);
                (label, RuleName::ActionMap)
            }
        };
        if is_success_interaction(event.action.is_click(), event.dwell_ms, assigned.0, cfg) {
            prior_success = true;
        }
        if event.action.is_query() {
            prev_query = Some(&event.content);
        }
        out.push(assigned);
    }
    Ok(out)
}

// A click counts as successful when it was long enough, or when no dwell
// time was recorded at all.
fn is_success_interaction(
    is_click: bool,
    dwell_ms: Option<u64>,
    label: CognitiveLabel,
    cfg: &LabelerConfig,
) -> bool {
    match label {
        CognitiveLabel::ForagingSuccess => true,
        CognitiveLabel::ApproachingSource if is_click => {
            dwell_ms.is_none_or(|d| d >= cfg.long_click_ms)
        }
        _ => false,
    }
}

pub fn label_session(
    session: &Session,
    cfg: &LabelerConfig,
) -> Result<Vec<CognitiveAnnotation>, LabelerError> {
    Ok(label_events(session, cfg)?
        .into_iter()
        .zip(&session.events)
        .map(|((label, rule), event)| CognitiveAnnotation {
            session_id: session.id.clone(),
            event_index: event.index,
            label,
            justification: rule.as_str().to_string(),
            source: AnnotationSource::Heuristic,
            confidence: 1.0,
            flagged: false,
        })
        .collect())
}

/// Labels only the first `prefix_len` events, as if the session ended there.
pub fn label_prefix(
    session: &Session,
    prefix_len: usize,
    cfg: &LabelerConfig,
) -> Result<Vec<CognitiveLabel>, LabelerError> {
    let truncated = Session {
        id: session.id.clone(),
        user_id: session.user_id.clone(),
        events: session.events[..prefix_len.min(session.events.len())].to_vec(),
    };
    Ok(label_events(&truncated, cfg)?.into_iter().map(|(l, _)| l).collect())
}
