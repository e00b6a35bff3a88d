//! Shared domain types: events, sessions, cognitive labels and annotations.

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

/// Kind of user action recorded in a log.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ActionType {
    Query,
    Click,
    Rate,
    /// Dataset-specific action, identified by a non-empty lowercase tag.
    Other(String),
}

impl ActionType {
    pub fn as_str(&self) -> &str {
        match self {
            ActionType::Query => "QUERY",
            ActionType::Click => "CLICK",
            ActionType::Rate => "RATE",
            ActionType::Other(tag) => tag,
        }
    }

    pub fn is_query(&self) -> bool {
        matches!(self, ActionType::Query)
    }

    pub fn is_click(&self) -> bool {
        matches!(self, ActionType::Click)
    }

    fn other_tag_is_valid(tag: &str) -> bool {
        !tag.is_empty()
            && tag == tag.to_lowercase()
            && !["query", "click", "rate"].contains(&tag)
    }
}

impl fmt::Display for ActionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid action type {0:?}")]
pub struct ParseActionError(pub String);

impl FromStr for ActionType {
    type Err = ParseActionError;

    /// The three standard names match case-insensitively; anything else
    /// becomes an `Other` tag in lowercase.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let trimmed = s.trim();
        match trimmed.to_ascii_uppercase().as_str() {
            "QUERY" => Ok(ActionType::Query),
            "CLICK" => Ok(ActionType::Click),
            "RATE" => Ok(ActionType::Rate),
            "" => Err(ParseActionError(s.to_string())),
            _ => Ok(ActionType::Other(trimmed.to_lowercase())),
        }
    }
}

impl Serialize for ActionType {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for ActionType {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

/// The six Information Foraging labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CognitiveLabel {
    FollowingScent,
    ApproachingSource,
    DietEnrichment,
    PoorScent,
    LeavingPatch,
    ForagingSuccess,
}

impl CognitiveLabel {
    pub const ALL: [CognitiveLabel; 6] = [
        CognitiveLabel::FollowingScent,
        CognitiveLabel::ApproachingSource,
        CognitiveLabel::DietEnrichment,
        CognitiveLabel::PoorScent,
        CognitiveLabel::LeavingPatch,
        CognitiveLabel::ForagingSuccess,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CognitiveLabel::FollowingScent => "FollowingScent",
            CognitiveLabel::ApproachingSource => "ApproachingSource",
            CognitiveLabel::DietEnrichment => "DietEnrichment",
            CognitiveLabel::PoorScent => "PoorScent",
            CognitiveLabel::LeavingPatch => "LeavingPatch",
            CognitiveLabel::ForagingSuccess => "ForagingSuccess",
        }
    }

    /// Position in [`CognitiveLabel::ALL`]; used for matrix and feature slots.
    pub fn index(self) -> usize {
        self as usize
    }

    /// Operational definition shown to annotators and agents.
    pub fn definition(self) -> &'static str {
        match self {
            CognitiveLabel::FollowingScent => {
                "The user initiates or continues a search with a targeted query. Ex: \"best espresso machine under $500\"."
            }
            CognitiveLabel::ApproachingSource => {
                "A result is clicked, indicating that the snippet or title provided a sufficiently strong scent for further investigation."
            }
            CognitiveLabel::DietEnrichment => {
                "The query is modified to broaden or narrow scope, reflecting refinement of the information need. Ex: from \"laptops\" to \"lightweight laptops for travel\"."
            }
            CognitiveLabel::PoorScent => {
                "A new query is issued without any organic clicks, implying the patch offered no promising scent."
            }
            CognitiveLabel::LeavingPatch => {
                "The session ends after multiple reformulations without a successful interaction (e.g., a long click)."
            }
            CognitiveLabel::ForagingSuccess => {
                "A query with no clicks where the SERP contains a direct answer (e.g., featured snippet or knowledge panel)."
            }
        }
    }
}

impl fmt::Display for CognitiveLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown label {0:?}")]
pub struct UnknownLabel(pub String);

impl FromStr for CognitiveLabel {
    type Err = UnknownLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CognitiveLabel::ALL
            .into_iter()
            .find(|label| label.as_str() == s)
            .ok_or_else(|| UnknownLabel(s.to_string()))
    }
}

impl Serialize for CognitiveLabel {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for CognitiveLabel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

/// One timestamped user action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub session_id: String,
    pub index: usize,
    /// UTC epoch milliseconds.
    pub timestamp: i64,
    pub action: ActionType,
    pub content: String,
    #[serde(default)]
    pub content_id: String,
    #[serde(default)]
    pub answer_present: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dwell_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub user_id: String,
    pub events: Vec<Event>,
}

impl Session {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn query_count(&self) -> usize {
        self.events.iter().filter(|e| e.action.is_query()).count()
    }
}

/// Who produced an annotation. Ordering is precedence: later variants win.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationSource {
    Heuristic,
    Agents,
    Human,
}

impl AnnotationSource {
    pub fn as_str(self) -> &'static str {
        match self {
            AnnotationSource::Heuristic => "heuristic",
            AnnotationSource::Agents => "agents",
            AnnotationSource::Human => "human",
        }
    }
}

impl fmt::Display for AnnotationSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CognitiveAnnotation {
    pub session_id: String,
    pub event_index: usize,
    pub label: CognitiveLabel,
    pub justification: String,
    pub source: AnnotationSource,
    pub confidence: f64,
    #[serde(default)]
    pub flagged: bool,
}

impl CognitiveAnnotation {
    pub fn key(&self) -> (String, usize) {
        (self.session_id.clone(), self.event_index)
    }

    /// Checks the per-record invariants (confidence range, agent justification).
    pub fn check(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(format!("confidence {} outside [0, 1]", self.confidence));
        }
        if self.source == AnnotationSource::Agents && self.justification.trim().is_empty() {
            return Err("agent annotation without justification".to_string());
        }
        Ok(())
    }
}

/// Picks the highest-precedence annotation for every (session, event) key.
/// Among records with the same key and source, the last one wins.
pub fn effective_annotations(
    annotations: &[CognitiveAnnotation],
) -> BTreeMap<(String, usize), &CognitiveAnnotation> {
    let mut out: BTreeMap<(String, usize), &CognitiveAnnotation> = BTreeMap::new();
    for ann in annotations {
        match out.get(&(ann.session_id.clone(), ann.event_index)) {
            Some(current) if current.source > ann.source => {}
            _ => {
                out.insert(ann.key(), ann);
            }
        }
    }
    out
}

/// A session together with the annotations recorded for its events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedSession {
    pub session: Session,
    pub annotations: Vec<CognitiveAnnotation>,
}

impl AnnotatedSession {
    /// Effective annotation per event, in event order. `Err(i)` names the
    /// first event without any annotation.
    pub fn effective(&self) -> Result<Vec<&CognitiveAnnotation>, usize> {
        let resolved = effective_annotations(&self.annotations);
        self.session
            .events
            .iter()
            .map(|e| {
                resolved
                    .get(&(self.session.id.clone(), e.index))
                    .copied()
                    .ok_or(e.index)
            })
            .collect()
    }

    pub fn effective_labels(&self) -> Result<Vec<CognitiveLabel>, usize> {
        Ok(self.effective()?.into_iter().map(|a| a.label).collect())
    }
}

/// Which session rule an event (or the session itself) breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    EmptySession,
    SessionIdMismatch,
    NonContiguousIndex,
    NonMonotonicTimestamp,
    EmptyQueryContent,
    InvalidOtherTag,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub event_index: Option<usize>,
    pub rule: Rule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let what = match self.rule {
            Rule::EmptySession => "empty session",
            Rule::SessionIdMismatch => "session id mismatch",
            Rule::NonContiguousIndex => "non-contiguous index",
            Rule::NonMonotonicTimestamp => "non-monotonic timestamp",
            Rule::EmptyQueryContent => "empty query content",
            Rule::InvalidOtherTag => "invalid action tag",
        };
        match self.event_index {
            Some(i) => write!(f, "{what} at index {i}"),
            None => f.write_str(what),
        }
    }
}

pub fn validate_session(session: &Session) -> Vec<Violation> {
    let mut out = Vec::new();
    if session.events.is_empty() {
        out.push(Violation { event_index: None, rule: Rule::EmptySession });
        return out;
    }
    let mut prev_ts: Option<i64> = None;
    for (pos, event) in session.events.iter().enumerate() {
        let at = Some(pos);
        if event.session_id != session.id {
            out.push(Violation { event_index: at, rule: Rule::SessionIdMismatch });
        }
        if event.index != pos {
            out.push(Violation { event_index: at, rule: Rule::NonContiguousIndex });
        }
        if prev_ts.is_some_and(|p| event.timestamp < p) {
            out.push(Violation { event_index: at, rule: Rule::NonMonotonicTimestamp });
        }
        prev_ts = Some(event.timestamp);
        match &event.action {
            ActionType::Query if event.content.trim().is_empty() => {
                out.push(Violation { event_index: at, rule: Rule::EmptyQueryContent });
            }
            ActionType::Other(tag) if !ActionType::other_tag_is_valid(tag) => {
                out.push(Violation { event_index: at, rule: Rule::InvalidOtherTag });
            }
            _ => {}
        }
    }
    out
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_decreasing_timestamps() {
        let s = session(
            "s",
            vec![
                event("s", 0, 10, ActionType::Query, "a"),
                event("s", 1, 5, ActionType::Click, "d"),
            ],
        );
        let v = validate_session(&s);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].to_string(), "non-monotonic timestamp at index 1");
    }

    #[test]
    fn accepts_well_formed_session() {
        let s = session(
            "s",
            vec![
                event("s", 0, 5, ActionType::Query, "a"),
                event("s", 1, 10, ActionType::Click, "d"),
            ],
        );
        assert!(validate_session(&s).is_empty());
    }

    #[test]
    fn rejects_blank_query() {
        let s = session("s", vec![event("s", 0, 5, ActionType::Query, "   ")]);
        let v = validate_session(&s);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, Rule::EmptyQueryContent);
        assert!(v[0].to_string().starts_with("empty query content"));
    }

    #[test]
    fn flags_structural_problems() {
        let mut s = session(
            "s",
            vec![
                event("s", 0, 5, ActionType::Query, "a"),
                event("t", 2, 6, ActionType::Other("Vote".into()), ""),
            ],
        );
        let rules: Vec<Rule> = validate_session(&s).into_iter().map(|v| v.rule).collect();
        assert_eq!(
            rules,
            vec![Rule::SessionIdMismatch, Rule::NonContiguousIndex, Rule::InvalidOtherTag]
        );
        s.events.clear();
        assert_eq!(validate_session(&s)[0].rule, Rule::EmptySession);
    }

    #[test]
    fn label_names_round_trip() {
        for label in CognitiveLabel::ALL {
            assert_eq!(label.as_str().parse::<CognitiveLabel>().unwrap(), label);
            let json = serde_json::to_string(&label).unwrap();
            assert_eq!(json, format!("\"{}\"", label.as_str()));
            assert_eq!(serde_json::from_str::<CognitiveLabel>(&json).unwrap(), label);
        }
        assert!("Confused".parse::<CognitiveLabel>().is_err());
        assert!("poorscent".parse::<CognitiveLabel>().is_err());
    }

    #[test]
    fn action_type_parsing() {
        assert_eq!("query".parse::<ActionType>().unwrap(), ActionType::Query);
        assert_eq!("CLICK".parse::<ActionType>().unwrap(), ActionType::Click);
        assert_eq!("Vote".parse::<ActionType>().unwrap(), ActionType::Other("vote".into()));
        assert!(" ".parse::<ActionType>().is_err());
    }

    #[test]
    fn effective_prefers_human_then_agents() {
        let mk = |source, label| CognitiveAnnotation {
            session_id: "s".into(),
            event_index: 0,
            label,
            justification: "x".into(),
            source,
            confidence: 1.0,
            flagged: false,
        };
        let anns = vec![
            mk(AnnotationSource::Agents, CognitiveLabel::PoorScent),
            mk(AnnotationSource::Human, CognitiveLabel::LeavingPatch),
            mk(AnnotationSource::Heuristic, CognitiveLabel::FollowingScent),
        ];
        let eff = effective_annotations(&anns);
        assert_eq!(eff[&("s".to_string(), 0)].label, CognitiveLabel::LeavingPatch);
        let eff = effective_annotations(&anns[..1]);
        assert_eq!(eff[&("s".to_string(), 0)].label, CognitiveLabel::PoorScent);
    }

    fn arb_action() -> impl Strategy<Value = ActionType> {
        prop_oneof![
            Just(ActionType::Query),
            Just(ActionType::Click),
            Just(ActionType::Rate),
            "[a-z]{1,8}"
                .prop_filter("reserved", |t| !["query", "click", "rate"].contains(&t.as_str()))
                .prop_map(ActionType::Other),
        ]
    }

    fn arb_event() -> impl Strategy<Value = Event> {
        (
            "[a-z0-9]{1,6}",
            0usize..50,
            any::<i64>(),
            arb_action(),
            ".{0,20}",
            any::<bool>(),
            proptest::option::of(any::<u64>()),
        )
            .prop_map(|(sid, index, timestamp, action, content, answer_present, dwell_ms)| Event {
                session_id: sid,
                index,
                timestamp,
                action,
                content_id: content.chars().rev().collect(),
                content,
                answer_present,
                dwell_ms,
            })
    }

    proptest! {
        #[test]
        fn event_record_round_trip(event in arb_event()) {
            let json = serde_json::to_string(&event).unwrap();
            prop_assert_eq!(serde_json::from_str::<Event>(&json).unwrap(), event);
        }

        #[test]
        fn annotation_record_round_trip(
            label_idx in 0usize..6,
            src in 0usize..3,
            confidence in 0.0f64..=1.0,
            flagged in any::<bool>(),
            justification in ".{1,30}",
        ) {
            let ann = CognitiveAnnotation {
                session_id: "s1".into(),
                event_index: 3,
                label: CognitiveLabel::ALL[label_idx],
                justification,
                source: [AnnotationSource::Heuristic, AnnotationSource::Agents, AnnotationSource::Human][src],
                confidence,
                flagged,
            };
            let json = serde_json::to_string(&ann).unwrap();
            prop_assert_eq!(serde_json::from_str::<CognitiveAnnotation>(&json).unwrap(), ann);
        }

        #[test]
        fn unknown_label_strings_rejected(s in "[A-Za-z]{0,20}") {
            let known = CognitiveLabel::ALL.iter().any(|l| l.as_str() == s);
            prop_assert_eq!(s.parse::<CognitiveLabel>().is_ok(), known);
        }
    }
}
