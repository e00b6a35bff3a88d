//! Analyst → Critic → Judge annotation workflow over a chat-completion
//! backend, with disagreement scoring and top-fraction flagging.

use crate::model::{
    ActionType, AnnotationSource, CognitiveAnnotation, CognitiveLabel, Event, Session,
};
use crate::text::{default_stopwords, tf_cosine};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Duration;

pub const PERSONA: &str = "You are an expert in Human-Computer Interaction specializing in Information Foraging Theory.";

/// Maximum number of few-shot exemplar sessions in one prompt.
pub const MAX_FEW_SHOTS: usize = 5;

/// Confidence recorded when the Judge does not report a usable one.
pub const DEFAULT_AGENT_CONFIDENCE: f64 = 0.5;

pub(crate) const SESSION_MARKER: &str = "Session:";
pub(crate) const ANALYST_MARKER: &str = "Analyst proposals:";
pub(crate) const CRITIC_MARKER: &str = "Critic proposals:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentRole {
    Analyst,
    Critic,
    Judge,
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AgentRole::Analyst => "Analyst",
            AgentRole::Critic => "Critic",
            AgentRole::Judge => "Judge",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct BackendError(pub String);

/// Chat-completion backend. Implementations must be shareable across the
/// worker pool.
pub trait CompletionBackend: Send + Sync {
    fn complete(&self, role: AgentRole, prompt: &str) -> Result<String, BackendError>;
}

/// One per-action item of an agent reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentItem {
    pub label: CognitiveLabel,
    pub justification: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl AgentItem {
    pub fn new(label: CognitiveLabel, justification: impl Into<String>) -> Self {
        Self { label, justification: justification.into(), confidence: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTranscript {
    pub session_id: String,
    pub event_index: usize,
    pub analyst_label: CognitiveLabel,
    pub analyst_justification: String,
    pub critic_agrees: bool,
    #[serde(default)]
    pub critic_label: Option<CognitiveLabel>,
    pub critic_justification: String,
    pub judge_label: CognitiveLabel,
    pub judge_justification: String,
    pub disagreement: f64,
}

impl AgentTranscript {
    pub fn key(&self) -> (String, usize) {
        (self.session_id.clone(), self.event_index)
    }

    /// Checks the Critic/Judge consistency rules.
    pub fn check(&self) -> Result<(), String> {
        if self.critic_agrees {
            if self.judge_label != self.analyst_label {
                return Err("judge overrode an undisputed analyst label".into());
            }
        } else {
            let critic = self.critic_label.ok_or("disagreeing critic without label")?;
            if critic == self.analyst_label {
                return Err("disagreeing critic repeated the analyst label".into());
            }
            if self.judge_label != critic && self.judge_label != self.analyst_label {
                return Err("judge chose a label neither agent proposed".into());
            }
        }
        if !(0.0..=1.0).contains(&self.disagreement) {
            return Err("disagreement outside [0, 1]".into());
        }
        Ok(())
    }
}

/// A labeled exemplar session shown to the agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShot {
    pub session: Session,
    pub labels: Vec<AgentItem>,
}

/// Earlier-stage output included in Critic and Judge prompts.
#[derive(Debug, Clone, Copy, Default)]
pub struct PriorProposals<'a> {
    pub analyst: Option<&'a [AgentItem]>,
    pub critic: Option<&'a [AgentItem]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct PromptAction {
    pub index: usize,
    pub timestamp: i64,
    pub action: ActionType,
    pub content: String,
    pub content_id: String,
    pub answer_present: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dwell_ms: Option<u64>,
}

/// Session as presented to the agents: its action sequence with query text
/// and click data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct PromptSession {
    pub session_id: String,
    pub actions: Vec<PromptAction>,
}

impl PromptSession {
    pub fn from_session(s: &Session) -> Self {
        PromptSession {
            session_id: s.id.clone(),
            actions: s
                .events
                .iter()
                .map(|e| PromptAction {
                    index: e.index,
                    timestamp: e.timestamp,
                    action: e.action.clone(),
                    content: e.content.clone(),
                    content_id: e.content_id.clone(),
                    answer_present: e.answer_present,
                    dwell_ms: e.dwell_ms,
                })
                .collect(),
        }
    }

    pub fn into_session(self) -> Session {
        let events = self
            .actions
            .into_iter()
            .map(|a| Event {
                session_id: self.session_id.clone(),
                index: a.index,
                timestamp: a.timestamp,
                action: a.action,
                content: a.content,
                content_id: a.content_id,
                answer_present: a.answer_present,
                dwell_ms: a.dwell_ms,
            })
            .collect();
        Session { id: self.session_id, user_id: String::new(), events }
    }
}

fn json_block(value: &impl Serialize) -> String {
    // Serialization of these plain structs cannot fail.
    let body = serde_json::to_string_pretty(value).expect("serializable prompt block");
    format!("```json\n{body}\n```")
}

fn task_instruction(role: AgentRole) -> &'static str {
    match role {
        AgentRole::Analyst => {
            "Task: Apply a cognitive label from the provided schema to each user action in the search session. Reason step by step from the evidence in the data."
        }
        AgentRole::Critic => {
            "Task: Review the Analyst's labels for each user action in the search session. Look for inconsistencies or alternative explanations of the user's behavior. For each action, repeat the Analyst's label if you agree; if you disagree you must propose a different label from the schema and give your own counter-argument."
        }
        AgentRole::Judge => {
            "Task: For each user action, weigh the Analyst's proposal against the Critic's challenge and make the final choice. The final label must be either the Analyst's label or the Critic's label, and the justification must summarize why."
        }
    }
}

fn output_instruction(role: AgentRole, n: usize) -> String {
    let mut out = format!(
        "Output Format: Output a JSON list with exactly {n} items, where each item corresponds to a user action (in order) and contains two keys:\n  - \"label\": the assigned label, one of the six schema names\n  - \"justification\": a 1-2 sentence explanation citing evidence from the input."
    );
    if role == AgentRole::Judge {
        out.push_str(
            "\nEach item may also contain \"confidence\": a number between 0 and 1 for the final label.",
        );
    }
    out
}

/// Assembles the prompt for one role over one session.
///
/// Layout: persona, task, label schema, few-shot examples, the session as
/// JSON, earlier proposals (Critic/Judge only), output format.
pub fn build_prompt(
    role: AgentRole,
    session: &Session,
    prior: PriorProposals<'_>,
    few_shots: &[FewShot],
) -> Result<String, AgentError> {
    if few_shots.len() > MAX_FEW_SHOTS {
        return Err(AgentError::TooManyFewShots(few_shots.len()));
    }
    let mut p = String::new();
    p.push_str(&format!("Persona: {PERSONA}\n\n"));
    p.push_str(task_instruction(role));
    p.push_str("\n\nSchema:\n");
    for label in CognitiveLabel::ALL {
        p.push_str(&format!("- {}: {}\n", label.as_str(), label.definition()));
    }
    for (i, shot) in few_shots.iter().enumerate() {
        p.push_str(&format!(
            "\nExample {} input:\n{}\nExample {} output:\n{}\n",
            i + 1,
            json_block(&PromptSession::from_session(&shot.session)),
            i + 1,
            json_block(&shot.labels),
        ));
    }
    p.push_str("\nInput: A JSON object containing the session's query sequence and click data.\n");
    p.push_str(SESSION_MARKER);
    p.push('\n');
    p.push_str(&json_block(&PromptSession::from_session(session)));
    p.push('\n');
    if matches!(role, AgentRole::Critic | AgentRole::Judge) {
        if let Some(analyst) = prior.analyst {
            p.push_str(&format!("\n{ANALYST_MARKER}\n{}\n", json_block(&analyst)));
        }
    }
    if role == AgentRole::Judge {
        if let Some(critic) = prior.critic {
            p.push_str(&format!("\n{CRITIC_MARKER}\n{}\n", json_block(&critic)));
        }
    }
    p.push('\n');
    p.push_str(&output_instruction(role, session.len()));
    p.push('\n');
    Ok(p)
}

/// Returns the parsed JSON block that follows a marker line, if present.
pub(crate) fn extract_marked_block<T: serde::de::DeserializeOwned>(
    prompt: &str,
    marker: &str,
) -> Option<T> {
    let mut lines = prompt.lines();
    lines.find(|l| l.trim_end() == marker)?;
    let rest: Vec<&str> = lines.collect();
    let start = rest.iter().position(|l| l.trim_start().starts_with("```"))?;
    let end = rest[start + 1..].iter().position(|l| l.trim_start().starts_with("```"))? + start + 1;
    serde_json::from_str(&rest[start + 1..end].join("\n")).ok()
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseFailure {
    #[error("no JSON array found in agent output")]
    NoArray,
    #[error("expected {expected} items, got {got}")]
    WrongLength { expected: usize, got: usize },
    #[error("item {index}: {reason}")]
    BadItem { index: usize, reason: String },
}

/// Extracts the first JSON array from free-form agent output and validates
/// it against the schema.
pub fn parse_agent_output(raw: &str, expected_len: usize) -> Result<Vec<AgentItem>, ParseFailure> {
    let array = raw
        .char_indices()
        .filter(|(_, c)| *c == '[')
        .find_map(|(i, _)| {
            let mut stream = serde_json::Deserializer::from_str(&raw[i..]).into_iter::<Value>();
            match stream.next() {
                Some(Ok(Value::Array(items))) => Some(items),
                _ => None,
            }
        })
        .ok_or(ParseFailure::NoArray)?;
    if array.len() != expected_len {
        return Err(ParseFailure::WrongLength { expected: expected_len, got: array.len() });
    }
    array
        .into_iter()
        .enumerate()
        .map(|(index, item)| {
            let bad = |reason: String| ParseFailure::BadItem { index, reason };
            let obj = item.as_object().ok_or_else(|| bad("not an object".into()))?;
            let label = obj
                .get("label")
                .and_then(Value::as_str)
                .ok_or_else(|| bad("missing \"label\"".into()))?;
            let label = label.trim().parse::<CognitiveLabel>().map_err(|e| bad(e.to_string()))?;
            let justification = obj
                .get("justification")
                .and_then(Value::as_str)
                .unwrap_or_default()
                .trim()
                .to_string();
            let confidence = obj
                .get("confidence")
                .and_then(Value::as_f64)
                .filter(|c| (0.0..=1.0).contains(c));
            Ok(AgentItem { label, justification, confidence })
        })
        .collect()
}

/// The Critic's stance on one action.
#[derive(Debug, Clone, Copy)]
pub struct CriticView<'a> {
    pub agrees: bool,
    pub label: Option<CognitiveLabel>,
    pub justification: &'a str,
}

/// 0 when the Critic agrees; otherwise one minus the term-frequency cosine
/// similarity of the two justifications.
pub fn disagreement_score(analyst: &AgentItem, critic: &CriticView<'_>) -> f64 {
    if critic.agrees {
        return 0.0;
    }
    let sw = default_stopwords();
    1.0 - tf_cosine(&analyst.justification, critic.justification, &sw)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    /// Backend attempts per call, including the first.
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
    /// Extra attempts after unparseable output.
    pub parse_retries: u32,
    pub max_concurrency: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self { max_attempts: 3, backoff_base_ms: 250, parse_retries: 1, max_concurrency: 4 }
    }
}

/// Annotations and transcripts for the events of one session that completed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionAnnotation {
    pub annotations: Vec<CognitiveAnnotation>,
    pub transcripts: Vec<AgentTranscript>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AgentError {
    #[error("{0} few-shot examples given, at most {MAX_FEW_SHOTS} allowed")]
    TooManyFewShots(usize),
    #[error("session {0} is empty")]
    EmptySession(String),
    #[error("{role} backend unavailable: {message}")]
    BackendUnavailable { role: AgentRole, message: String },
    #[error("session {session_id}: {} event(s) escalated for human review ({reason})", escalated.len())]
    PartialFailure {
        session_id: String,
        completed: SessionAnnotation,
        escalated: Vec<usize>,
        reason: String,
    },
}

fn call_with_backoff(
    backend: &dyn CompletionBackend,
    role: AgentRole,
    prompt: &str,
    cfg: &AgentConfig,
) -> Result<String, AgentError> {
    let attempts = cfg.max_attempts.max(1);
    let mut last = String::new();
    for attempt in 0..attempts {
        match backend.complete(role, prompt) {
            Ok(text) => return Ok(text),
            Err(e) => last = e.0,
        }
        if attempt + 1 < attempts && cfg.backoff_base_ms > 0 {
            std::thread::sleep(Duration::from_millis(cfg.backoff_base_ms << attempt.min(16)));
        }
    }
    Err(AgentError::BackendUnavailable { role, message: last })
}

fn correction_suffix(reason: &str, n: usize) -> String {
    let names: Vec<&str> = CognitiveLabel::ALL.iter().map(|l| l.as_str()).collect();
    format!(
        "\n\nYour previous reply could not be used ({reason}). Reply with only a JSON list of exactly {n} objects with keys \"label\" and \"justification\". Every label must be one of: {}.\n",
        names.join(", ")
    )
}

/// Reply that never passed validation, with the last one that at least parsed.
struct Unusable {
    reason: String,
    last_parsed: Option<Vec<AgentItem>>,
}

/// Calls the backend and parses its reply, retrying with a correction note
/// on unusable output. `accept` adds role-specific validation.
fn ask(
    backend: &dyn CompletionBackend,
    role: AgentRole,
    prompt: &str,
    n: usize,
    cfg: &AgentConfig,
    accept: impl Fn(&[AgentItem]) -> Result<(), String>,
) -> Result<Result<Vec<AgentItem>, Unusable>, AgentError> {
    let mut current = prompt.to_string();
    let mut reason = String::new();
    let mut last_parsed = None;
    for _ in 0..=cfg.parse_retries {
        let raw = call_with_backoff(backend, role, &current, cfg)?;
        match parse_agent_output(&raw, n) {
            Ok(items) => match accept(&items) {
                Ok(()) => return Ok(Ok(items)),
                Err(e) => {
                    reason = e;
                    last_parsed = Some(items);
                }
            },
            Err(e) => reason = e.to_string(),
        }
        current = format!("{prompt}{}", correction_suffix(&reason, n));
    }
    Ok(Err(Unusable { reason: format!("{role} output unusable: {reason}"), last_parsed }))
}

fn judge_choice_ok(analyst: &AgentItem, critic: &AgentItem, judge: &AgentItem) -> bool {
    if critic.label == analyst.label {
        judge.label == analyst.label
    } else {
        judge.label == analyst.label || judge.label == critic.label
    }
}

/// Runs the three-agent workflow over one session.
pub fn annotate_with_agents(
    session: &Session,
    backend: &dyn CompletionBackend,
    few_shots: &[FewShot],
    cfg: &AgentConfig,
) -> Result<SessionAnnotation, AgentError> {
    let n = session.len();
    if n == 0 {
        return Err(AgentError::EmptySession(session.id.clone()));
    }
    let escalate_all = |reason: String| AgentError::PartialFailure {
        session_id: session.id.clone(),
        completed: SessionAnnotation::default(),
        escalated: session.events.iter().map(|e| e.index).collect(),
        reason,
    };

    let prompt = build_prompt(AgentRole::Analyst, session, PriorProposals::default(), few_shots)?;
    let analyst = match ask(backend, AgentRole::Analyst, &prompt, n, cfg, |_| Ok(()))? {
        Ok(items) => items,
        Err(u) => return Err(escalate_all(u.reason)),
    };

    let prior = PriorProposals { analyst: Some(&analyst), critic: None };
    let prompt = build_prompt(AgentRole::Critic, session, prior, few_shots)?;
    let critic = match ask(backend, AgentRole::Critic, &prompt, n, cfg, |_| Ok(()))? {
        Ok(items) => items,
        Err(u) => return Err(escalate_all(u.reason)),
    };

    let prior = PriorProposals { analyst: Some(&analyst), critic: Some(&critic) };
    let prompt = build_prompt(AgentRole::Judge, session, prior, few_shots)?;
    // The Judge may only pick between the two proposals. Events with an
    // out-of-range verdict are escalated individually.
    let verdict = ask(backend, AgentRole::Judge, &prompt, n, cfg, |items| {
        match (0..n).find(|&i| !judge_choice_ok(&analyst[i], &critic[i], &items[i])) {
            Some(i) => Err(format!("item {i}: verdict is neither proposal")),
            None => Ok(()),
        }
    })?;
    let judge = match verdict {
        Ok(items) => items,
        Err(Unusable { reason, last_parsed: None }) => return Err(escalate_all(reason)),
        Err(Unusable { reason, last_parsed: Some(items) }) => {
            let mut completed = SessionAnnotation::default();
            let mut escalated = Vec::new();
            for (i, event) in session.events.iter().enumerate() {
                if judge_choice_ok(&analyst[i], &critic[i], &items[i]) {
                    let (ann, tr) = assemble(session, event.index, &analyst[i], &critic[i], &items[i]);
                    completed.annotations.push(ann);
                    completed.transcripts.push(tr);
                } else {
                    escalated.push(event.index);
                }
            }
            return Err(AgentError::PartialFailure {
                session_id: session.id.clone(),
                completed,
                escalated,
                reason,
            });
        }
    };

    let mut out = SessionAnnotation::default();
    for (i, event) in session.events.iter().enumerate() {
        let (ann, tr) = assemble(session, event.index, &analyst[i], &critic[i], &judge[i]);
        out.annotations.push(ann);
        out.transcripts.push(tr);
    }
    Ok(out)
}

fn assemble(
    session: &Session,
    event_index: usize,
    analyst: &AgentItem,
    critic: &AgentItem,
    judge: &AgentItem,
) -> (CognitiveAnnotation, AgentTranscript) {
    let agrees = critic.label == analyst.label;
    let view = CriticView {
        agrees,
        label: (!agrees).then_some(critic.label),
        justification: &critic.justification,
    };
    let disagreement = disagreement_score(analyst, &view);
    let judge_justification = if judge.justification.trim().is_empty() {
        format!("Judge selected {} without further comment.", judge.label)
    } else {
        judge.justification.clone()
    };
    let annotation = CognitiveAnnotation {
        session_id: session.id.clone(),
        event_index,
        label: judge.label,
        justification: judge_justification.clone(),
        source: AnnotationSource::Agents,
        confidence: judge.confidence.unwrap_or(DEFAULT_AGENT_CONFIDENCE),
        flagged: false,
    };
    let transcript = AgentTranscript {
        session_id: session.id.clone(),
        event_index,
        analyst_label: analyst.label,
        analyst_justification: analyst.justification.clone(),
        critic_agrees: agrees,
        critic_label: view.label,
        critic_justification: critic.justification.clone(),
        judge_label: judge.label,
        judge_justification,
        disagreement,
    };
    (annotation, transcript)
}

/// Keys of the `ceil(rate * N)` most disputed transcripts. Ties are broken
/// by ascending (session id, event index).
pub fn flag_top_fraction(transcripts: &[AgentTranscript], rate: f64) -> BTreeSet<(String, usize)> {
    if transcripts.is_empty() || !(rate > 0.0) {
        return BTreeSet::new();
    }
    let rate = rate.min(1.0);
    let n = transcripts.len();
    // Guard against 0.01 * 300 = 3.0000000000000004 style products.
    let k = ((rate * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    let mut order: Vec<&AgentTranscript> = transcripts.iter().collect();
    order.sort_by(|a, b| {
        b.disagreement
            .total_cmp(&a.disagreement)
            .then_with(|| a.session_id.cmp(&b.session_id))
            .then_with(|| a.event_index.cmp(&b.event_index))
    });
    order.into_iter().take(k).map(AgentTranscript::key).collect()
}

/// Outcome of the pool run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelineSummary {
    pub processed: usize,
    pub cancelled: bool,
}

/// Annotates sessions on a bounded worker pool. Results reach `sink` one at
/// a time and in input order, so sinks need no synchronization and their
/// output is deterministic. Setting `cancel` stops work between sessions;
/// sessions already started are finished and delivered.
pub fn annotate_sessions(
    sessions: &[Session],
    backend: &dyn CompletionBackend,
    few_shots: &[FewShot],
    cfg: &AgentConfig,
    cancel: &AtomicBool,
    mut sink: impl FnMut(usize, Result<SessionAnnotation, AgentError>),
) -> PipelineSummary {
    let workers = cfg.max_concurrency.clamp(1, sessions.len().max(1));
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, Result<SessionAnnotation, AgentError>)>();
    let mut processed = 0;
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            scope.spawn(move || loop {
                if cancel.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= sessions.len() {
                    break;
                }
                let result = annotate_with_agents(&sessions[i], backend, few_shots, cfg);
                if tx.send((i, result)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut pending = BTreeMap::new();
        for (i, result) in rx {
            pending.insert(i, result);
            while let Some(result) = pending.remove(&processed) {
                sink(processed, result);
                processed += 1;
            }
        }
    });
    PipelineSummary { processed, cancelled: processed < sessions.len() }
}
