//! Log parsing with user-supplied column mappings, and session segmentation.

use crate::model::{
    ActionType, AnnotationSource, CognitiveAnnotation, CognitiveLabel, Event, Session,
};
use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::{BTreeMap, HashMap};

/// Maximum number of individual rejects kept in a [`RejectReport`].
pub const MAX_REPORTED_REJECTS: usize = 1_000;

/// Default inactivity gap for session segmentation (30 minutes).
pub const DEFAULT_GAP_MS: u64 = 30 * 60 * 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestampFormat {
    EpochS,
    EpochMs,
    Iso8601,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogFormat {
    Csv,
    Json,
}

impl std::str::FromStr for LogFormat {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(LogFormat::Csv),
            "json" => Ok(LogFormat::Json),
            other => Err(IngestError::MalformedInput(format!("unknown log format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMapping {
    #[serde(default)]
    pub session_id_col: Option<String>,
    pub user_id_col: String,
    pub timestamp_col: String,
    pub timestamp_format: TimestampFormat,
    #[serde(default)]
    pub action_col: Option<String>,
    #[serde(default)]
    pub action_value_map: BTreeMap<String, ActionType>,
    pub content_col: String,
    #[serde(default)]
    pub content_id_col: Option<String>,
    #[serde(default)]
    pub answer_present_col: Option<String>,
    #[serde(default)]
    pub dwell_ms_col: Option<String>,
    /// Pre-assigned label column, used when re-importing exported annotations.
    #[serde(default)]
    pub label_col: Option<String>,
    #[serde(default)]
    pub justification_col: Option<String>,
}

impl ColumnMapping {
    pub fn from_json(raw: &str) -> Result<Self, IngestError> {
        serde_json::from_str(raw)
            .map_err(|e| IngestError::MalformedInput(format!("column mapping: {e}")))
    }

    /// Mapping that reads the six-column annotation export back in.
    pub fn for_export() -> Self {
        ColumnMapping {
            session_id_col: Some("session_id".into()),
            user_id_col: "session_id".into(),
            timestamp_col: "event_timestamp".into(),
            timestamp_format: TimestampFormat::EpochMs,
            action_col: Some("action_type".into()),
            action_value_map: BTreeMap::new(),
            content_col: "content_id".into(),
            content_id_col: Some("content_id".into()),
            answer_present_col: None,
            dwell_ms_col: None,
            label_col: Some("cognitive_label".into()),
            justification_col: Some("judge_justification".into()),
        }
    }

    fn required_columns(&self) -> Vec<&str> {
        let mut cols = vec![
            self.user_id_col.as_str(),
            self.timestamp_col.as_str(),
            self.content_col.as_str(),
        ];
        cols.extend(
            [
                &self.session_id_col,
                &self.action_col,
                &self.content_id_col,
                &self.answer_present_col,
                &self.dwell_ms_col,
                &self.label_col,
                &self.justification_col,
            ]
            .into_iter()
            .flatten()
            .map(String::as_str),
        );
        cols
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentationMode {
    BySessionId,
    ByInactivity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationPolicy {
    pub mode: SegmentationMode,
    #[serde(default = "default_gap")]
    pub gap_ms: u64,
}

fn default_gap() -> u64 {
    DEFAULT_GAP_MS
}

impl Default for SegmentationPolicy {
    fn default() -> Self {
        Self { mode: SegmentationMode::ByInactivity, gap_ms: DEFAULT_GAP_MS }
    }
}

impl SegmentationPolicy {
    pub fn by_session_id() -> Self {
        Self { mode: SegmentationMode::BySessionId, gap_ms: DEFAULT_GAP_MS }
    }

    pub fn by_inactivity(gap_ms: u64) -> Self {
        Self { mode: SegmentationMode::ByInactivity, gap_ms }
    }

    pub fn check(&self, mapping: &ColumnMapping) -> Result<(), IngestError> {
        if self.gap_ms == 0 {
            return Err(IngestError::InvalidPolicy("gap_ms must be positive".into()));
        }
        if self.mode == SegmentationMode::BySessionId && mapping.session_id_col.is_none() {
            return Err(IngestError::InvalidPolicy(
                "by_session_id segmentation needs session_id_col in the mapping".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum IngestError {
    #[error("malformed input: {0}")]
    MalformedInput(String),
    #[error("invalid segmentation policy: {0}")]
    InvalidPolicy(String),
}

/// One mapped row, before segmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawEventRecord {
    /// 1-based data row (header excluded) or array position + 1.
    pub row: usize,
    pub session_id: Option<String>,
    pub user_id: String,
    pub timestamp: i64,
    pub action: ActionType,
    pub content: String,
    pub content_id: String,
    pub answer_present: bool,
    pub dwell_ms: Option<u64>,
    pub label: Option<CognitiveLabel>,
    pub justification: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub row: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectReport {
    pub total: usize,
    /// First [`MAX_REPORTED_REJECTS`] rejects.
    pub rows: Vec<Reject>,
}

impl RejectReport {
    fn push(&mut self, row: usize, reason: String) {
        self.total += 1;
        if self.rows.len() < MAX_REPORTED_REJECTS {
            self.rows.push(Reject { row, reason });
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParsedLog {
    pub records: Vec<RawEventRecord>,
    pub rejects: RejectReport,
}

pub fn parse_log(
    bytes: &[u8],
    format: LogFormat,
    mapping: &ColumnMapping,
) -> Result<ParsedLog, IngestError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| IngestError::MalformedInput(format!("input is not UTF-8: {e}")))?;
    match format {
        LogFormat::Csv => parse_csv(text, mapping),
        LogFormat::Json => parse_json(text, mapping),
    }
}

fn parse_csv(text: &str, mapping: &ColumnMapping) -> Result<ParsedLog, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| IngestError::MalformedInput(format!("CSV header: {e}")))?
        .clone();
    let positions: HashMap<&str, usize> =
        headers.iter().enumerate().map(|(i, h)| (h.trim(), i)).collect();
    for col in mapping.required_columns() {
        if !positions.contains_key(col) {
            return Err(IngestError::MalformedInput(format!("column {col:?} not in header")));
        }
    }
    let mut out = ParsedLog::default();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                out.rejects.push(row_no, format!("unreadable row: {e}"));
                continue;
            }
        };
        let get = |col: &str| -> Option<String> {
            positions.get(col).and_then(|&p| row.get(p)).map(str::to_string)
        };
        match map_row(row_no, mapping, get) {
            Ok(rec) => out.records.push(rec),
            Err(reason) => out.rejects.push(row_no, reason),
        }
    }
    Ok(out)
}

fn parse_json(text: &str, mapping: &ColumnMapping) -> Result<ParsedLog, IngestError> {
    let value: Value = serde_json::from_str(text)
        .map_err(|e| IngestError::MalformedInput(format!("JSON: {e}")))?;
    let Value::Array(items) = value else {
        return Err(IngestError::MalformedInput("JSON input must be an array of objects".into()));
    };
    // A mapped column must exist in at least one object; otherwise the
    // mapping is wrong for this file, not the rows.
    for col in mapping.required_columns() {
        let seen = items
            .iter()
            .any(|it| it.as_object().is_some_and(|o| o.contains_key(col)));
        if !items.is_empty() && !seen {
            return Err(IngestError::MalformedInput(format!("field {col:?} not present in input")));
        }
    }
    let mut out = ParsedLog::default();
    for (i, item) in items.iter().enumerate() {
        let row_no = i + 1;
        let Some(obj) = item.as_object() else {
            out.rejects.push(row_no, "array element is not an object".into());
            continue;
        };
        let get = |col: &str| -> Option<String> {
            obj.get(col).and_then(|v| match v {
                Value::String(s) => Some(s.clone()),
                Value::Number(n) => Some(n.to_string()),
                Value::Bool(b) => Some(b.to_string()),
                Value::Null => None,
                other => Some(other.to_string()),
            })
        };
        match map_row(row_no, mapping, get) {
            Ok(rec) => out.records.push(rec),
            Err(reason) => out.rejects.push(row_no, reason),
        }
    }
    Ok(out)
}

fn map_row(
    row: usize,
    mapping: &ColumnMapping,
    get: impl Fn(&str) -> Option<String>,
) -> Result<RawEventRecord, String> {
    let user_id = get(&mapping.user_id_col)
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .ok_or("missing user id")?;
    let session_id = match &mapping.session_id_col {
        Some(col) => Some(
            get(col)
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .ok_or("missing session id")?,
        ),
        None => None,
    };
    let raw_ts = get(&mapping.timestamp_col).ok_or("missing timestamp")?;
    let timestamp = parse_timestamp(&raw_ts, mapping.timestamp_format)?;
    let action = match &mapping.action_col {
        None => ActionType::Query,
        Some(col) => {
            let raw = get(col).unwrap_or_default();
            match mapping.action_value_map.get(&raw) {
                Some(a) => a.clone(),
                None => raw
                    .parse::<ActionType>()
                    .map_err(|_| format!("empty action value in {col:?}"))?,
            }
        }
    };
    let content = get(&mapping.content_col).unwrap_or_default();
    if action.is_query() && content.trim().is_empty() {
        return Err("empty query content".into());
    }
    let content_id = mapping
        .content_id_col
        .as_ref()
        .and_then(|c| get(c))
        .unwrap_or_default();
    let answer_present = match mapping.answer_present_col.as_ref().and_then(|c| get(c)) {
        None => false,
        Some(raw) => parse_bool(&raw)?,
    };
    let dwell_ms = match mapping.dwell_ms_col.as_ref().and_then(|c| get(c)) {
        Some(raw) if !raw.trim().is_empty() => Some(
            raw.trim()
                .parse::<u64>()
                .map_err(|_| format!("dwell {raw:?} is not a non-negative integer"))?,
        ),
        _ => None,
    };
    let label = match mapping.label_col.as_ref().and_then(|c| get(c)) {
        Some(raw) if !raw.trim().is_empty() => {
            Some(raw.trim().parse::<CognitiveLabel>().map_err(|e| e.to_string())?)
        }
        _ => None,
    };
    let justification = mapping.justification_col.as_ref().and_then(|c| get(c));
    Ok(RawEventRecord {
        row,
        session_id,
        user_id,
        timestamp,
        action,
        content,
        content_id,
        answer_present,
        dwell_ms,
        label,
        justification,
    })
}

fn parse_bool(raw: &str) -> Result<bool, String> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "" | "false" | "0" | "no" => Ok(false),
        "true" | "1" | "yes" => Ok(true),
        _ => Err(format!("answer flag {raw:?} is not a boolean")),
    }
}

/// Converts a raw timestamp to UTC epoch milliseconds.
pub fn parse_timestamp(raw: &str, format: TimestampFormat) -> Result<i64, String> {
    let raw = raw.trim();
    let bad = || format!("timestamp {raw:?} does not match {format:?}");
    match format {
        TimestampFormat::EpochS => {
            if let Ok(s) = raw.parse::<i64>() {
                return s.checked_mul(1000).ok_or_else(bad);
            }
            let s: f64 = raw.parse().map_err(|_| bad())?;
            if !s.is_finite() {
                return Err(bad());
            }
            Ok((s * 1000.0).round() as i64)
        }
        TimestampFormat::EpochMs => raw.parse::<i64>().map_err(|_| bad()),
        TimestampFormat::Iso8601 => {
            if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
                return Ok(dt.timestamp_millis());
            }
            // Zone-less timestamps (e.g. "2006-03-01 07:17:12") are taken as UTC.
            for fmt in ["%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M:%S%.f"] {
                if let Ok(naive) = NaiveDateTime::parse_from_str(raw, fmt) {
                    return Ok(naive.and_utc().timestamp_millis());
                }
            }
            Err(bad())
        }
    }
}

fn to_event(session_id: &str, index: usize, rec: &RawEventRecord) -> Event {
    Event {
        session_id: session_id.to_string(),
        index,
        timestamp: rec.timestamp,
        action: rec.action.clone(),
        content: rec.content.clone(),
        content_id: rec.content_id.clone(),
        answer_present: rec.answer_present,
        dwell_ms: rec.dwell_ms,
    }
}

/// Groups records into sessions. Output sessions are ordered by id
/// (by-id mode) or by user then start time (inactivity mode).
pub fn segment_sessions(records: &[RawEventRecord], policy: &SegmentationPolicy) -> Vec<Session> {
    segment_with_records(records, policy)
        .into_iter()
        .map(|(session, _)| session)
        .collect()
}

/// Like [`segment_sessions`], also returning the source record behind each event.
pub fn segment_with_records<'a>(
    records: &'a [RawEventRecord],
    policy: &SegmentationPolicy,
) -> Vec<(Session, Vec<&'a RawEventRecord>)> {
    let mut out = Vec::new();
    match policy.mode {
        SegmentationMode::BySessionId => {
            let mut groups: BTreeMap<&str, Vec<&RawEventRecord>> = BTreeMap::new();
            for rec in records {
                let key = rec.session_id.as_deref().unwrap_or(rec.user_id.as_str());
                groups.entry(key).or_default().push(rec);
            }
            for (id, mut recs) in groups {
                recs.sort_by_key(|r| r.timestamp);
                out.push(build_session(id.to_string(), recs));
            }
        }
        SegmentationMode::ByInactivity => {
            let mut by_user: BTreeMap<&str, Vec<&RawEventRecord>> = BTreeMap::new();
            for rec in records {
                by_user.entry(rec.user_id.as_str()).or_default().push(rec);
            }
            for (user, mut recs) in by_user {
                recs.sort_by_key(|r| r.timestamp);
                let mut k = 0usize;
                let mut current: Vec<&RawEventRecord> = Vec::new();
                for rec in recs {
                    if let Some(last) = current.last() {
                        let gap = rec.timestamp.saturating_sub(last.timestamp);
                        if gap > 0 && gap as u64 > policy.gap_ms {
                            out.push(build_session(format!("{user}#{k}"), std::mem::take(&mut current)));
                            k += 1;
                        }
                    }
                    current.push(rec);
                }
                if !current.is_empty() {
                    out.push(build_session(format!("{user}#{k}"), current));
                }
            }
        }
    }
    out
}

fn build_session(id: String, recs: Vec<&RawEventRecord>) -> (Session, Vec<&RawEventRecord>) {
    let events = recs.iter().enumerate().map(|(i, r)| to_event(&id, i, r)).collect();
    let user_id = recs.first().map(|r| r.user_id.clone()).unwrap_or_default();
    (Session { id, user_id, events }, recs)
}

/// Sessions plus annotations for every record that carried a label column.
/// Imported labels are treated as human-provided.
pub fn segment_annotated(
    records: &[RawEventRecord],
    policy: &SegmentationPolicy,
) -> (Vec<Session>, Vec<CognitiveAnnotation>) {
    let mut sessions = Vec::new();
    let mut annotations = Vec::new();
    for (session, recs) in segment_with_records(records, policy) {
        for (event, rec) in session.events.iter().zip(recs) {
            if let Some(label) = rec.label {
                annotations.push(CognitiveAnnotation {
                    session_id: session.id.clone(),
                    event_index: event.index,
                    label,
                    justification: rec.justification.clone().unwrap_or_default(),
                    source: AnnotationSource::Human,
                    confidence: 1.0,
                    flagged: false,
                });
            }
        }
        sessions.push(session);
    }
    (sessions, annotations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_session;
    use proptest::prelude::*;

    fn simple_mapping(content: &str) -> ColumnMapping {
        ColumnMapping {
            session_id_col: None,
            user_id_col: "uid".into(),
            timestamp_col: "ts".into(),
            timestamp_format: TimestampFormat::EpochS,
            action_col: None,
            action_value_map: BTreeMap::new(),
            content_col: content.into(),
            content_id_col: None,
            answer_present_col: None,
            dwell_ms_col: None,
            label_col: None,
            justification_col: None,
        }
    }

    fn record(user: &str, session: Option<&str>, ts: i64) -> RawEventRecord {
        RawEventRecord {
            row: 0,
            session_id: session.map(str::to_string),
            user_id: user.into(),
            timestamp: ts,
            action: ActionType::Query,
            content: format!("q{ts}"),
            content_id: String::new(),
            answer_present: false,
            dwell_ms: None,
            label: None,
            justification: None,
        }
    }

    #[test]
    fn csv_single_row() {
        let parsed =
            parse_log(b"uid,ts,q\nu1,1136073600,laptops\n", LogFormat::Csv, &simple_mapping("q"))
                .unwrap();
        assert_eq!(parsed.records.len(), 1);
        assert_eq!(parsed.rejects.total, 0);
        let rec = &parsed.records[0];
        assert_eq!(rec.action, ActionType::Query);
        assert_eq!(rec.timestamp, 1_136_073_600_000);
        assert_eq!(rec.content, "laptops");
    }

    #[test]
    fn csv_missing_column() {
        let err = parse_log(b"uid,ts,q\nu1,1136073600,laptops\n", LogFormat::Csv, &simple_mapping("query"))
            .unwrap_err();
        assert!(matches!(err, IngestError::MalformedInput(_)));
    }

    #[test]
    fn csv_quoted_fields() {
        let parsed = parse_log(
            b"uid,ts,q\nu1,1,\"laptops, cheap \"\"new\"\"\"\n",
            LogFormat::Csv,
            &simple_mapping("q"),
        )
        .unwrap();
        assert_eq!(parsed.records[0].content, "laptops, cheap \"new\"");
    }

    #[test]
    fn json_with_one_bad_timestamp() {
        let input = br#"[
            {"uid": "u1", "ts": 1136073600, "q": "a"},
            {"uid": "u1", "ts": "yesterday", "q": "b"},
            {"uid": "u2", "ts": "1136073700", "q": "c"}
        ]"#;
        let parsed = parse_log(input, LogFormat::Json, &simple_mapping("q")).unwrap();
        assert_eq!(parsed.records.len(), 2);
        assert_eq!(parsed.rejects.total, 1);
        assert_eq!(parsed.rejects.rows[0].row, 2);
    }

    #[test]
    fn rejects_bad_encoding_and_shape() {
        assert!(parse_log(&[0xff, 0xfe], LogFormat::Csv, &simple_mapping("q")).is_err());
        assert!(parse_log(b"{\"a\":1}", LogFormat::Json, &simple_mapping("q")).is_err());
    }

    #[test]
    fn action_mapping_and_flags() {
        let mut m = simple_mapping("q");
        m.action_col = Some("kind".into());
        m.action_value_map.insert("s".into(), ActionType::Query);
        m.action_value_map.insert("c".into(), ActionType::Click);
        m.answer_present_col = Some("ans".into());
        m.dwell_ms_col = Some("dwell".into());
        let input = b"uid,ts,q,kind,ans,dwell\nu1,1,a,s,true,\nu1,2,doc,c,,40000\nu1,3,,s,,\nu1,4,x,s,maybe,\n";
        let parsed = parse_log(input, LogFormat::Csv, &m).unwrap();
        assert_eq!(parsed.records.len(), 2);
        assert!(parsed.records[0].answer_present);
        assert_eq!(parsed.records[1].action, ActionType::Click);
        assert_eq!(parsed.records[1].dwell_ms, Some(40_000));
        assert_eq!(parsed.rejects.total, 2);
    }

    #[test]
    fn reject_report_is_capped() {
        let mut input = String::from("uid,ts,q\n");
        for _ in 0..1_500 {
            input.push_str("u1,notanumber,a\n");
        }
        let parsed = parse_log(input.as_bytes(), LogFormat::Csv, &simple_mapping("q")).unwrap();
        assert_eq!(parsed.rejects.total, 1_500);
        assert_eq!(parsed.rejects.rows.len(), MAX_REPORTED_REJECTS);
    }

    #[test]
    fn timestamp_formats() {
        assert_eq!(parse_timestamp("1.5", TimestampFormat::EpochS), Ok(1500));
        assert_eq!(parse_timestamp("42", TimestampFormat::EpochMs), Ok(42));
        assert_eq!(
            parse_timestamp("2006-01-01T00:00:00Z", TimestampFormat::Iso8601),
            Ok(1_136_073_600_000)
        );
        assert_eq!(
            parse_timestamp("2006-01-01T01:00:00+01:00", TimestampFormat::Iso8601),
            Ok(1_136_073_600_000)
        );
        assert_eq!(
            parse_timestamp("2006-01-01 00:00:00", TimestampFormat::Iso8601),
            Ok(1_136_073_600_000)
        );
        assert!(parse_timestamp("x", TimestampFormat::Iso8601).is_err());
    }

    #[test]
    fn inactivity_split() {
        let m = 60 * 1000;
        let recs = vec![record("u1", None, 0), record("u1", None, 10 * m), record("u1", None, 50 * m)];
        let sessions = segment_sessions(&recs, &SegmentationPolicy::by_inactivity(30 * m as u64));
        assert_eq!(sessions.len(), 2);
        assert_eq!(sessions[0].id, "u1#0");
        assert_eq!(sessions[0].len(), 2);
        assert_eq!(sessions[1].id, "u1#1");
        assert_eq!(sessions[1].len(), 1);
        assert_eq!(sessions[1].events[0].index, 0);
    }

    #[test]
    fn grouping_by_session_id() {
        let recs = vec![record("u1", Some("s1"), 0), record("u1", Some("s1"), 5), record("u2", Some("s2"), 1)];
        let sessions = segment_sessions(&recs, &SegmentationPolicy::by_session_id());
        let sizes: Vec<_> = sessions.iter().map(|s| (s.id.as_str(), s.len())).collect();
        assert_eq!(sizes, vec![("s1", 2), ("s2", 1)]);
    }

    #[test]
    fn single_record() {
        let sessions = segment_sessions(&[record("u9", None, 7)], &SegmentationPolicy::default());
        assert_eq!(sessions.len(), 1);
        assert_eq!(sessions[0].len(), 1);
    }

    #[test]
    fn policy_needs_session_column() {
        assert!(SegmentationPolicy::by_session_id().check(&simple_mapping("q")).is_err());
        assert!(SegmentationPolicy::by_inactivity(0).check(&simple_mapping("q")).is_err());
        assert!(SegmentationPolicy::default().check(&simple_mapping("q")).is_ok());
    }

    #[test]
    fn mapping_json_uses_field_names() {
        let m = ColumnMapping::from_json(
            r#"{"user_id_col":"uid","timestamp_col":"ts","timestamp_format":"epoch_ms",
                "content_col":"q","action_col":"a","action_value_map":{"clk":"CLICK"}}"#,
        )
        .unwrap();
        assert_eq!(m.action_value_map["clk"], ActionType::Click);
        assert_eq!(m.timestamp_format, TimestampFormat::EpochMs);
    }

    fn arb_records() -> impl Strategy<Value = Vec<RawEventRecord>> {
        // Timestamps are distinct per user so the sorted order is unique.
        proptest::collection::vec((0usize..4, 0i64..10_000), 1..40).prop_map(|raw| {
            let mut seen = std::collections::HashSet::new();
            raw.into_iter()
                .filter(|(u, t)| seen.insert((*u, *t)))
                .map(|(u, t)| record(&format!("u{u}"), Some(&format!("s{}", t % 3)), t * 60_000))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn segmentation_is_partition(recs in arb_records(), gap_min in 1u64..200, by_id in any::<bool>()) {
            let policy = if by_id {
                SegmentationPolicy::by_session_id()
            } else {
                SegmentationPolicy::by_inactivity(gap_min * 60_000)
            };
            let sessions = segment_sessions(&recs, &policy);
            let total: usize = sessions.iter().map(Session::len).sum();
            prop_assert_eq!(total, recs.len());
            for s in &sessions {
                prop_assert!(validate_session(s).is_empty());
            }
        }

        #[test]
        fn inactivity_ignores_input_order(recs in arb_records(), gap_min in 1u64..200, seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let policy = SegmentationPolicy::by_inactivity(gap_min * 60_000);
            let mut shuffled = recs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(segment_sessions(&recs, &policy), segment_sessions(&shuffled, &policy));
        }
    }
}
