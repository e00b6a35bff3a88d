//! Completion backends: a scripted deterministic mock and an HTTP
//! chat-completion client.

use crate::agents::{
    extract_marked_block, AgentItem, AgentRole, BackendError, CompletionBackend, PromptSession,
    ANALYST_MARKER, CRITIC_MARKER, SESSION_MARKER,
};
use crate::heuristic::{label_events, LabelerConfig, RuleName};
use crate::model::{ActionType, CognitiveLabel, Session};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::time::Duration;

/// Which proposal the mock Judge keeps when the agents disagree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JudgeSide {
    #[default]
    Analyst,
    Critic,
}

/// Conditions on one event; every present field must hold.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EventPredicate {
    pub action: Option<ActionType>,
    pub analyst_label: Option<CognitiveLabel>,
    pub final_query: Option<bool>,
    pub last_event: Option<bool>,
    pub zero_click: Option<bool>,
    pub answer_present: Option<bool>,
    pub index: Option<usize>,
    pub content_contains: Option<String>,
}

/// Scripted Critic objection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticRule {
    pub when: EventPredicate,
    pub label: CognitiveLabel,
    pub justification: String,
    /// Overrides the policy-wide Judge side for events this rule matched.
    #[serde(default)]
    pub judge_side: Option<JudgeSide>,
}

/// Mock backend policy, loadable from JSON.
///
/// The Analyst answers with the heuristic labeler. The Critic objects
/// wherever a rule matches and proposes a different label. The Judge sides
/// with `judge_side` (or the matched rule's override).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockPolicy {
    pub labeler: LabelerConfig,
    pub critic_rules: Vec<CriticRule>,
    pub judge_side: JudgeSide,
    pub judge_confidence: f64,
    pub disputed_confidence: f64,
    /// Roles that reply with unparseable text.
    pub malformed: Vec<AgentRole>,
}

impl Default for MockPolicy {
    /// Critic disputes terminal zero-click queries (PoorScent vs LeavingPatch).
    fn default() -> Self {
        let terminal = |label| EventPredicate {
            action: Some(ActionType::Query),
            analyst_label: Some(label),
            final_query: Some(true),
            zero_click: Some(true),
            ..EventPredicate::default()
        };
        MockPolicy {
            labeler: LabelerConfig::default(),
            critic_rules: vec![
                CriticRule {
                    when: terminal(CognitiveLabel::PoorScent),
                    label: CognitiveLabel::LeavingPatch,
                    justification: "Final query of the session and nothing was opened afterwards; the user gave up on this patch.".into(),
                    judge_side: None,
                },
                CriticRule {
                    when: terminal(CognitiveLabel::LeavingPatch),
                    label: CognitiveLabel::PoorScent,
                    justification: "Too few reformulations to call it abandonment; the results simply lacked promising scent.".into(),
                    judge_side: None,
                },
            ],
            judge_side: JudgeSide::Analyst,
            judge_confidence: 0.9,
            disputed_confidence: 0.6,
            malformed: Vec::new(),
        }
    }
}

impl MockPolicy {
    pub fn from_json(raw: &str) -> Result<Self, String> {
        let policy: Self = serde_json::from_str(raw).map_err(|e| e.to_string())?;
        policy.labeler.validate().map_err(|e| e.to_string())?;
        Ok(policy)
    }
}

#[derive(Debug, Clone)]
struct EventFacts {
    action: ActionType,
    index: usize,
    final_query: bool,
    last_event: bool,
    zero_click: bool,
    answer_present: bool,
    content: String,
}

fn event_facts(session: &Session) -> Vec<EventFacts> {
    let last_query = session.events.iter().rposition(|e| e.action.is_query());
    let n = session.events.len();
    session
        .events
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let zero_click = e.action.is_query()
                && session.events[i + 1..]
                    .iter()
                    .take_while(|x| !x.action.is_query())
                    .all(|x| !x.action.is_click());
            EventFacts {
                action: e.action.clone(),
                index: e.index,
                final_query: Some(i) == last_query,
                last_event: i + 1 == n,
                zero_click,
                answer_present: e.answer_present,
                content: e.content.clone(),
            }
        })
        .collect()
}

impl EventPredicate {
    fn matches(&self, facts: &EventFacts, analyst: CognitiveLabel) -> bool {
        self.action.as_ref().is_none_or(|a| *a == facts.action)
            && self.analyst_label.is_none_or(|l| l == analyst)
            && self.final_query.is_none_or(|b| b == facts.final_query)
            && self.last_event.is_none_or(|b| b == facts.last_event)
            && self.zero_click.is_none_or(|b| b == facts.zero_click)
            && self.answer_present.is_none_or(|b| b == facts.answer_present)
            && self.index.is_none_or(|i| i == facts.index)
            && self
                .content_contains
                .as_ref()
                .is_none_or(|needle| facts.content.to_lowercase().contains(&needle.to_lowercase()))
    }
}

fn analyst_text(rule: RuleName, label: CognitiveLabel) -> String {
    match rule {
        RuleName::Click => "The user opened a result, so its title or snippet carried enough scent to investigate.".into(),
        RuleName::AnswerPresent => "No click was needed because the results page itself showed a direct answer.".into(),
        RuleName::LeavingPatch => "After several reformulations without a successful click the session ends here.".into(),
        RuleName::ZeroClick => "A further query followed without any click on these results, so the patch offered poor scent.".into(),
        RuleName::Reformulation => "The query narrows or broadens the previous one while results still got clicked.".into(),
        RuleName::TargetedQuery => "A targeted query that starts or continues the search.".into(),
        RuleName::ActionMap => format!("Non-search action mapped to {label}."),
    }
}

const MALFORMED_REPLY: &str = "I'm sorry, I can't label this session right now.";

/// Deterministic backend driven by a [`MockPolicy`]. Replies are a pure
/// function of (role, prompt).
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    pub policy: MockPolicy,
}

impl MockBackend {
    pub fn new(policy: MockPolicy) -> Self {
        Self { policy }
    }

    fn analyst_items(&self, session: &Session) -> Result<Vec<AgentItem>, BackendError> {
        let labeled = label_events(session, &self.policy.labeler)
            .map_err(|e| BackendError(format!("mock analyst: {e}")))?;
        Ok(labeled
            .into_iter()
            .map(|(label, rule)| AgentItem::new(label, analyst_text(rule, label)))
            .collect())
    }

    fn matching_rule(&self, facts: &EventFacts, analyst: CognitiveLabel) -> Option<&CriticRule> {
        self.policy
            .critic_rules
            .iter()
            .find(|r| r.label != analyst && r.when.matches(facts, analyst))
    }

    fn reply(&self, role: AgentRole, prompt: &str) -> Result<Vec<AgentItem>, BackendError> {
        let session: PromptSession = extract_marked_block(prompt, SESSION_MARKER)
            .ok_or_else(|| BackendError("mock: prompt carries no session block".into()))?;
        let session = session.into_session();
        match role {
            AgentRole::Analyst => self.analyst_items(&session),
            AgentRole::Critic => {
                let analyst: Vec<AgentItem> = extract_marked_block(prompt, ANALYST_MARKER)
                    .ok_or_else(|| BackendError("mock: critic prompt lacks analyst block".into()))?;
                let facts = event_facts(&session);
                Ok(facts
                    .iter()
                    .zip(&analyst)
                    .map(|(f, a)| match self.matching_rule(f, a.label) {
                        Some(rule) => AgentItem::new(rule.label, rule.justification.clone()),
                        None => AgentItem::new(a.label, format!("Agree with {}: the evidence supports it.", a.label)),
                    })
                    .collect())
            }
            AgentRole::Judge => {
                let analyst: Vec<AgentItem> = extract_marked_block(prompt, ANALYST_MARKER)
                    .ok_or_else(|| BackendError("mock: judge prompt lacks analyst block".into()))?;
                let critic: Vec<AgentItem> = extract_marked_block(prompt, CRITIC_MARKER)
                    .ok_or_else(|| BackendError("mock: judge prompt lacks critic block".into()))?;
                let facts = event_facts(&session);
                Ok(facts
                    .iter()
                    .zip(analyst.iter().zip(&critic))
                    .map(|(f, (a, c))| {
                        if a.label == c.label {
                            let mut item = AgentItem::new(
                                a.label,
                                format!("Both agents agree on {}. {}", a.label, a.justification),
                            );
                            item.confidence = Some(self.policy.judge_confidence);
                            return item;
                        }
                        let side = self
                            .matching_rule(f, a.label)
                            .and_then(|r| r.judge_side)
                            .unwrap_or(self.policy.judge_side);
                        let (winner, loser) = match side {
                            JudgeSide::Analyst => (a, c),
                            JudgeSide::Critic => (c, a),
                        };
                        let mut item = AgentItem::new(
                            winner.label,
                            format!(
                                "{} is better supported than {}: {}",
                                winner.label, loser.label, winner.justification
                            ),
                        );
                        item.confidence = Some(self.policy.disputed_confidence);
                        item
                    })
                    .collect())
            }
        }
    }
}

impl CompletionBackend for MockBackend {
    fn complete(&self, role: AgentRole, prompt: &str) -> Result<String, BackendError> {
        if self.policy.malformed.contains(&role) {
            return Ok(MALFORMED_REPLY.to_string());
        }
        let items = self.reply(role, prompt)?;
        let body = serde_json::to_string(&items).map_err(|e| BackendError(e.to_string()))?;
        Ok(format!("```json\n{body}\n```"))
    }
}

/// Model name per agent role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleModels {
    pub analyst: String,
    pub critic: String,
    pub judge: String,
}

impl Default for RoleModels {
    fn default() -> Self {
        Self {
            analyst: "claude-3-5-sonnet".into(),
            critic: "gpt-4o".into(),
            judge: "gpt-4o".into(),
        }
    }
}

impl RoleModels {
    pub fn for_role(&self, role: AgentRole) -> &str {
        match role {
            AgentRole::Analyst => &self.analyst,
            AgentRole::Critic => &self.critic,
            AgentRole::Judge => &self.judge,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpBackendConfig {
    /// Chat-completion URL, e.g. `https://host/v1/chat/completions`.
    pub endpoint: String,
    pub models: RoleModels,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub temperature: f64,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            models: RoleModels::default(),
            api_key_env: "COGTRACE_API_KEY".into(),
            timeout_secs: 120,
            temperature: 0.0,
        }
    }
}

/// OpenAI-style chat-completion client. The API key is read from the
/// environment at construction; it is never stored in config files.
pub struct HttpBackend {
    config: HttpBackendConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Self {
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .new_agent();
        Self { config, api_key, agent }
    }

    pub fn request_body(&self, role: AgentRole, prompt: &str) -> serde_json::Value {
        json!({
            "model": self.config.models.for_role(role),
            "temperature": self.config.temperature,
            "messages": [{"role": "user", "content": prompt}],
        })
    }
}

impl CompletionBackend for HttpBackend {
    fn complete(&self, role: AgentRole, prompt: &str) -> Result<String, BackendError> {
        let mut req = self
            .agent
            .post(&self.config.endpoint)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let body = serde_json::to_vec(&self.request_body(role, prompt))
            .map_err(|e| BackendError(format!("request encoding failed: {e}")))?;
        let mut resp = req
            .send(&body[..])
            .map_err(|e| BackendError(format!("request failed: {e}")))?;
        let status = resp.status().as_u16();
        let body: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| BackendError(format!("HTTP {status}: unreadable body: {e}")))?;
        if !(200..300).contains(&status) {
            return Err(BackendError(format!("HTTP {status}: {body}")));
        }
        body.pointer("/choices/0/message/content")
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or_else(|| BackendError("response lacks choices[0].message.content".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{annotate_with_agents, AgentConfig};
    use crate::model::fixtures::{event, session};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    fn three_queries() -> Session {
        session(
            "s",
            vec![
                event("s", 0, 0, ActionType::Query, "q1"),
                event("s", 1, 1, ActionType::Query, "q2"),
                event("s", 2, 2, ActionType::Query, "q3"),
            ],
        )
    }

    fn quick() -> AgentConfig {
        AgentConfig { backoff_base_ms: 0, ..AgentConfig::default() }
    }

    #[test]
    fn agreeing_mock_keeps_analyst_labels() {
        let policy = MockPolicy { critic_rules: vec![], ..MockPolicy::default() };
        let s = session(
            "s",
            vec![event("s", 0, 0, ActionType::Query, "espresso"), event("s", 1, 1, ActionType::Click, "d")],
        );
        let out = annotate_with_agents(&s, &MockBackend::new(policy), &[], &quick()).unwrap();
        let labels: Vec<_> = out.annotations.iter().map(|a| a.label).collect();
        assert_eq!(labels, vec![CognitiveLabel::FollowingScent, CognitiveLabel::ApproachingSource]);
        assert!(out.transcripts.iter().all(|t| t.disagreement == 0.0 && t.critic_agrees));
        assert!(out.annotations.iter().all(|a| a.confidence == 0.9));
    }

    #[test]
    fn default_mock_disputes_terminal_zero_click() {
        let out = annotate_with_agents(&three_queries(), &MockBackend::default(), &[], &quick()).unwrap();
        let last = &out.transcripts[2];
        assert!(!last.critic_agrees);
        assert_eq!(last.analyst_label, CognitiveLabel::LeavingPatch);
        assert_eq!(last.critic_label, Some(CognitiveLabel::PoorScent));
        assert!(matches!(last.judge_label, CognitiveLabel::PoorScent | CognitiveLabel::LeavingPatch));
        assert!(last.disagreement > 0.0);
        for t in &out.transcripts {
            t.check().unwrap();
        }
        assert!(out.transcripts[..2].iter().all(|t| t.critic_agrees));
    }

    #[test]
    fn judge_side_override() {
        let mut policy = MockPolicy::default();
        policy.judge_side = JudgeSide::Critic;
        let out = annotate_with_agents(&three_queries(), &MockBackend::new(policy), &[], &quick()).unwrap();
        assert_eq!(out.annotations[2].label, CognitiveLabel::PoorScent);
        assert_eq!(out.annotations[2].confidence, 0.6);
    }

    #[test]
    fn mock_is_pure() {
        let b = MockBackend::default();
        let prompt = crate::agents::build_prompt(
            AgentRole::Analyst,
            &three_queries(),
            Default::default(),
            &[],
        )
        .unwrap();
        assert_eq!(b.complete(AgentRole::Analyst, &prompt), b.complete(AgentRole::Analyst, &prompt));
        assert!(b.complete(AgentRole::Analyst, "no session").is_err());
    }

    #[test]
    fn policy_from_json() {
        let p = MockPolicy::from_json(
            r#"{"critic_rules":[{"when":{"action":"CLICK"},"label":"PoorScent","justification":"bounce","judge_side":"critic"}],
                "malformed":["judge"]}"#,
        )
        .unwrap();
        assert_eq!(p.critic_rules.len(), 1);
        assert_eq!(p.malformed, vec![AgentRole::Judge]);
        assert!(MockPolicy::from_json(r#"{"critic_rules":[{"when":{"bogus":1},"label":"PoorScent","justification":""}]}"#).is_err());
    }

    /// Serves one canned HTTP response per connection and records request bodies.
    fn serve(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                let mut auth = String::new();
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if lower.starts_with("authorization:") {
                        auth = line.trim().to_string();
                    }
                }
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).unwrap();
                bodies.push(format!("{auth}\n{}", String::from_utf8(buf).unwrap()));
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
            bodies
        });
        (url, handle)
    }

    #[test]
    fn http_backend_wire_format() {
        let content = r#"[{\"label\":\"PoorScent\",\"justification\":\"none\"}]"#;
        let ok = format!(r#"{{"choices":[{{"message":{{"role":"assistant","content":"{content}"}}}}]}}"#);
        let (url, handle) = serve(vec![(200, ok), (503, r#"{"error":"busy"}"#.into())]);
        let env_var = "COGTRACE_TEST_KEY_WIRE";
        std::env::set_var(env_var, "secret-token");
        let backend = HttpBackend::new(HttpBackendConfig {
            endpoint: url,
            api_key_env: env_var.into(),
            timeout_secs: 5,
            ..HttpBackendConfig::default()
        });
        let reply = backend.complete(AgentRole::Critic, "PROMPT TEXT").unwrap();
        assert_eq!(crate::agents::parse_agent_output(&reply, 1).unwrap()[0].label, CognitiveLabel::PoorScent);
        let err = backend.complete(AgentRole::Analyst, "again").unwrap_err();
        assert!(err.0.contains("503"));
        let bodies = handle.join().unwrap();
        assert!(bodies[0].to_ascii_lowercase().starts_with("authorization: bearer secret-token"), "{}", bodies[0]);
        let json: serde_json::Value = serde_json::from_str(bodies[0].lines().nth(1).unwrap()).unwrap();
        assert_eq!(json["model"], "gpt-4o");
        assert_eq!(json["messages"][0]["content"], "PROMPT TEXT");
        let json: serde_json::Value = serde_json::from_str(bodies[1].lines().nth(1).unwrap()).unwrap();
        assert_eq!(json["model"], "claude-3-5-sonnet");
    }

    #[test]
    fn http_backend_unreachable() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/x", listener.local_addr().unwrap());
        drop(listener);
        let backend = HttpBackend::new(HttpBackendConfig { endpoint: url, timeout_secs: 2, ..Default::default() });
        assert!(backend.complete(AgentRole::Judge, "p").is_err());
    }
}
