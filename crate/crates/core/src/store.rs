//! Workspace persistence: a manifest plus append-only JSON-lines record
//! files per dataset.
//!
//! ```text
//! <root>/manifest.json
//! <root>/datasets/<id>/sessions.jsonl
//! <root>/datasets/<id>/annotations.jsonl
//! <root>/datasets/<id>/transcripts.jsonl
//! <root>/datasets/<id>/decisions.jsonl
//! <root>/datasets/<id>/flags.jsonl
//! <root>/datasets/<id>/gold.jsonl
//! ```
//!
//! Every record is written with a single append of `json + "\n"`. A file
//! whose last line lacks the newline was interrupted mid-append; on open the
//! fragment is moved to `<file>.quarantine` and the file is truncated.

use crate::agents::{
    annotate_sessions, flag_top_fraction, AgentConfig, AgentError, AgentTranscript, CompletionBackend, FewShot,
};
use crate::heuristic::{label_session, LabelerConfig};
use crate::ingest::{parse_log, segment_annotated, ColumnMapping, IngestError, LogFormat, SegmentationPolicy};
use crate::metrics::{agreement_report, AgreementReport, GoldRating};
use crate::model::{
    effective_annotations, AnnotatedSession, AnnotationSource, CognitiveAnnotation, CognitiveLabel, Event, Session,
};
use crate::text::fnv1a;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::{Arc, Mutex, MutexGuard};

pub const EXPORT_HEADER: &str = "session_id,event_timestamp,action_type,content_id,cognitive_label,judge_justification";
pub const DEFAULT_PAGE_SIZE: usize = 50;

const SESSIONS: &str = "sessions.jsonl";
const ANNOTATIONS: &str = "annotations.jsonl";
const TRANSCRIPTS: &str = "transcripts.jsonl";
const DECISIONS: &str = "decisions.jsonl";
const FLAGS: &str = "flags.jsonl";
const GOLD: &str = "gold.jsonl";
const RECORD_FILES: [&str; 6] = [SESSIONS, ANNOTATIONS, TRANSCRIPTS, DECISIONS, FLAGS, GOLD];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StoreError {
    #[error("unknown dataset {0}")]
    UnknownDataset(String),
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("unknown event {1} in session {0}")]
    UnknownEvent(String, usize),
    #[error("{0} event(s) have no label; use force to export anyway")]
    UnlabeledEvents(usize),
    #[error("invalid decision: {0}")]
    InvalidDecision(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("corrupt record in {file} line {line}: {message}")]
    Corrupt { file: String, line: usize, message: String },
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        StoreError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Accepted,
    Corrected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanDecision {
    pub session_id: String,
    pub event_index: usize,
    pub label: CognitiveLabel,
    pub verdict: Verdict,
    /// UTC epoch milliseconds.
    pub decided_at: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl HumanDecision {
    fn as_annotation(&self) -> CognitiveAnnotation {
        CognitiveAnnotation {
            session_id: self.session_id.clone(),
            event_index: self.event_index,
            label: self.label,
            justification: self.note.clone().unwrap_or_default(),
            source: AnnotationSource::Human,
            confidence: 1.0,
            flagged: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
struct FlagRecord {
    session_id: String,
    event_index: usize,
}

/// How a dataset was ingested. Two ingests with an equal source resolve
/// to the same dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSource {
    pub format: String,
    pub mapping: Option<ColumnMapping>,
    pub policy: Option<SegmentationPolicy>,
    /// FNV-1a of the ingested bytes, hex.
    #[serde(default)]
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: String,
    pub name: String,
    pub created_at: i64,
    pub source: DatasetSource,
    pub sessions: usize,
    pub events: usize,
    pub rejected_rows: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub next_id: u64,
    pub datasets: BTreeMap<String, DatasetEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quarantined {
    pub file: PathBuf,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateOutcome {
    pub dataset_id: String,
    pub sessions: usize,
    pub events: usize,
    pub imported_labels: usize,
    pub rejects: crate::ingest::RejectReport,
}

pub struct Workspace {
    root: PathBuf,
    manifest: Mutex<Manifest>,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    quarantined: Vec<Quarantined>,
}

fn now_ms() -> i64 {
    chrono::Utc::now().timestamp_millis()
}

/// Moves an unterminated trailing fragment aside. Returns its length.
fn quarantine_tail(path: &Path) -> Result<usize, StoreError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.is_empty() || bytes.ends_with(b"\n") {
        return Ok(0);
    }
    let keep = bytes.iter().rposition(|b| *b == b'\n').map(|i| i + 1).unwrap_or(0);
    let mut q = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path.with_extension("jsonl.quarantine"))?;
    q.write_all(&bytes[keep..])?;
    q.write_all(b"\n")?;
    q.sync_all()?;
    let f = OpenOptions::new().write(true).open(path)?;
    f.set_len(keep as u64)?;
    f.sync_all()?;
    Ok(bytes.len() - keep)
}

fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut out = Vec::new();
    // An unterminated tail is an append still in flight; skip it.
    let complete = bytes.iter().rposition(|b| *b == b'\n').map(|i| i + 1).unwrap_or(0);
    for (i, line) in bytes[..complete].split(|b| *b == b'\n').enumerate() {
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        out.push(serde_json::from_slice(line).map_err(|e| StoreError::Corrupt {
            file: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn append_records<T: Serialize>(path: &Path, records: &[T]) -> Result<(), StoreError> {
    if records.is_empty() {
        return Ok(());
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    for r in records {
        let mut line = serde_json::to_vec(r).map_err(|e| StoreError::Io(e.to_string()))?;
        line.push(b'\n');
        f.write_all(&line)?;
    }
    f.sync_data()?;
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn rewrite_records<T: Serialize>(path: &Path, records: &[T]) -> Result<(), StoreError> {
    let mut buf = Vec::new();
    for r in records {
        buf.extend(serde_json::to_vec(r).map_err(|e| StoreError::Io(e.to_string()))?);
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

/// Everything stored for one dataset, loaded into memory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetState {
    pub sessions: Vec<Session>,
    pub annotations: Vec<CognitiveAnnotation>,
    pub transcripts: Vec<AgentTranscript>,
    pub decisions: Vec<HumanDecision>,
    pub flags: BTreeSet<(String, usize)>,
    pub gold: Vec<GoldRating>,
}

impl DatasetState {
    /// Stored annotations followed by decisions, so that a decision wins
    /// over any earlier human-sourced record for the same event.
    pub fn all_annotations(&self) -> Vec<CognitiveAnnotation> {
        self.annotations
            .iter()
            .cloned()
            .chain(self.decisions.iter().map(HumanDecision::as_annotation))
            .collect()
    }

    /// Effective annotation per event under human > agents > heuristic.
    pub fn effective(&self) -> BTreeMap<(String, usize), CognitiveAnnotation> {
        let all = self.all_annotations();
        effective_annotations(&all).into_iter().map(|(k, a)| (k, a.clone())).collect()
    }

    /// Best non-human annotation per event.
    pub fn machine(&self) -> BTreeMap<(String, usize), CognitiveAnnotation> {
        let machine: Vec<CognitiveAnnotation> =
            self.annotations.iter().filter(|a| a.source != AnnotationSource::Human).cloned().collect();
        effective_annotations(&machine).into_iter().map(|(k, a)| (k, a.clone())).collect()
    }

    /// Latest transcript per event.
    pub fn latest_transcripts(&self) -> Vec<AgentTranscript> {
        let mut m: BTreeMap<(String, usize), &AgentTranscript> = BTreeMap::new();
        for t in &self.transcripts {
            m.insert(t.key(), t);
        }
        m.into_values().cloned().collect()
    }

    pub fn decided(&self) -> BTreeSet<(String, usize)> {
        self.decisions.iter().map(|d| (d.session_id.clone(), d.event_index)).collect()
    }

    /// Events awaiting review: flagged by disagreement or escalation and not
    /// yet decided by a human.
    pub fn flagged(&self) -> BTreeSet<(String, usize)> {
        let decided = self.decided();
        let effective = self.effective();
        let mut out: BTreeSet<(String, usize)> = self.flags.clone();
        out.extend(effective.iter().filter(|(_, a)| a.flagged).map(|(k, _)| k.clone()));
        out.retain(|k| !decided.contains(k));
        out
    }

    pub fn annotated_sessions(&self) -> Vec<AnnotatedSession> {
        let mut by_session: HashMap<&str, Vec<CognitiveAnnotation>> = HashMap::new();
        let all = self.all_annotations();
        for a in &all {
            by_session.entry(a.session_id.as_str()).or_default().push(a.clone());
        }
        self.sessions
            .iter()
            .map(|s| AnnotatedSession {
                session: s.clone(),
                annotations: by_session.remove(s.id.as_str()).unwrap_or_default(),
            })
            .collect()
    }

    pub fn session(&self, id: &str) -> Option<&Session> {
        self.sessions.iter().find(|s| s.id == id)
    }

    pub fn event_count(&self) -> usize {
        self.sessions.iter().map(Session::len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionFilter {
    #[default]
    All,
    Flagged,
    Undecided,
}

impl std::str::FromStr for SessionFilter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all" => Ok(Self::All),
            "flagged" => Ok(Self::Flagged),
            "undecided" => Ok(Self::Undecided),
            other => Err(format!("unknown filter {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub user_id: String,
    pub events: usize,
    pub labeled: usize,
    pub flagged: usize,
    pub decided: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionPage {
    pub page: usize,
    pub page_size: usize,
    pub total: usize,
    pub sessions: Vec<SessionSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineEvent {
    #[serde(flatten)]
    pub event: Event,
    pub label: Option<CognitiveLabel>,
    pub source: Option<AnnotationSource>,
    pub confidence: Option<f64>,
    pub justification: Option<String>,
    pub flagged: bool,
    pub decision: Option<HumanDecision>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionTimeline {
    pub dataset_id: String,
    pub session_id: String,
    pub user_id: String,
    pub events: Vec<TimelineEvent>,
    pub transcripts: Vec<AgentTranscript>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub dataset_id: String,
    pub sessions: usize,
    pub events: usize,
    pub labeled: usize,
    pub decisions: usize,
    pub flagged: usize,
    pub label_histogram: BTreeMap<CognitiveLabel, usize>,
    pub source_histogram: BTreeMap<AnnotationSource, usize>,
    pub agreement: Option<AgreementReport>,
    pub agreement_error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ExportOptions {
    /// Adds source, confidence and flagged columns.
    pub extended: bool,
    /// Exports unlabeled events with empty label fields instead of failing.
    pub force: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlagOutcome {
    pub transcripts: usize,
    pub flagged: usize,
    pub newly_flagged: usize,
}

/// Labeling engine for a job.
pub enum Engine {
    Heuristic(LabelerConfig),
    Agents {
        backend: Arc<dyn CompletionBackend>,
        config: AgentConfig,
        few_shots: Vec<FewShot>,
        /// Used for fallback labels on escalated events.
        labeler: LabelerConfig,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JobReport {
    pub sessions: usize,
    pub labeled_events: usize,
    pub escalated_events: usize,
    pub failed_sessions: Vec<(String, String)>,
    pub cancelled: bool,
}

impl Workspace {
    /// Opens or creates a workspace, quarantining interrupted appends.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(root.join("datasets"))?;
        let manifest_path = root.join("manifest.json");
        let manifest: Manifest = match fs::read(&manifest_path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt {
                file: manifest_path.display().to_string(),
                line: 1,
                message: e.to_string(),
            })?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Manifest::default(),
            Err(e) => return Err(e.into()),
        };
        let mut quarantined = Vec::new();
        for id in manifest.datasets.keys() {
            for name in RECORD_FILES {
                let path = root.join("datasets").join(id).join(name);
                if path.exists() {
                    let bytes = quarantine_tail(&path)?;
                    if bytes > 0 {
                        quarantined.push(Quarantined { file: path, bytes });
                    }
                }
            }
        }
        Ok(Workspace { root, manifest: Mutex::new(manifest), locks: Mutex::new(HashMap::new()), quarantined })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Fragments moved aside when the workspace was opened.
    pub fn quarantined(&self) -> &[Quarantined] {
        &self.quarantined
    }

    fn manifest(&self) -> MutexGuard<'_, Manifest> {
        self.manifest.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn datasets(&self) -> Vec<DatasetEntry> {
        self.manifest().datasets.values().cloned().collect()
    }

    pub fn dataset(&self, id: &str) -> Result<DatasetEntry, StoreError> {
        self.manifest().datasets.get(id).cloned().ok_or_else(|| StoreError::UnknownDataset(id.to_string()))
    }

    /// Most recently created dataset.
    pub fn latest_dataset(&self) -> Option<String> {
        self.manifest().datasets.keys().next_back().cloned()
    }

    fn dir(&self, id: &str) -> PathBuf {
        self.root.join("datasets").join(id)
    }

    fn file(&self, id: &str, name: &str) -> PathBuf {
        self.dir(id).join(name)
    }

    fn write_lock(&self, id: &str) -> Arc<Mutex<()>> {
        let mut locks = self.locks.lock().unwrap_or_else(|p| p.into_inner());
        locks.entry(id.to_string()).or_default().clone()
    }

    fn save_manifest(&self, manifest: &Manifest) -> Result<(), StoreError> {
        let bytes = serde_json::to_vec_pretty(manifest).map_err(|e| StoreError::Io(e.to_string()))?;
        write_atomic(&self.root.join("manifest.json"), &bytes)
    }

    fn register(
        &self,
        name: &str,
        source: DatasetSource,
        sessions: &[Session],
        annotations: &[CognitiveAnnotation],
        rejected_rows: usize,
    ) -> Result<String, StoreError> {
        let mut manifest = self.manifest();
        if let Some(existing) = manifest.datasets.values().find(|d| d.source == source) {
            return Ok(existing.id.clone());
        }
        manifest.next_id += 1;
        let id = format!("ds-{:04}", manifest.next_id);
        let dir = self.dir(&id);
        fs::create_dir_all(&dir)?;
        for file in RECORD_FILES {
            File::create(dir.join(file))?;
        }
        append_records(&dir.join(SESSIONS), sessions)?;
        append_records(&dir.join(ANNOTATIONS), annotations)?;
        manifest.datasets.insert(
            id.clone(),
            DatasetEntry {
                id: id.clone(),
                name: name.to_string(),
                created_at: now_ms(),
                source,
                sessions: sessions.len(),
                events: sessions.iter().map(Session::len).sum(),
                rejected_rows,
            },
        );
        let snapshot = manifest.clone();
        self.save_manifest(&snapshot)?;
        Ok(id)
    }

    /// Parses and segments a raw log into a new dataset, or returns the
    /// existing dataset ingested from the same bytes, format, mapping and
    /// policy. Labels present in the log (see [`ColumnMapping::label_col`])
    /// are stored as human labels.
    pub fn create_dataset(
        &self,
        name: &str,
        bytes: &[u8],
        format: LogFormat,
        mapping: &ColumnMapping,
        policy: &SegmentationPolicy,
    ) -> Result<CreateOutcome, StoreError> {
        policy.check(mapping)?;
        let parsed = parse_log(bytes, format, mapping)?;
        if parsed.records.is_empty() && parsed.rejects.total > 0 {
            return Err(IngestError::MalformedInput(format!(
                "all {} rows rejected; first: row {}: {}",
                parsed.rejects.total, parsed.rejects.rows[0].row, parsed.rejects.rows[0].reason
            ))
            .into());
        }
        let (sessions, annotations) = segment_annotated(&parsed.records, policy);
        let source = DatasetSource {
            format: match format {
                LogFormat::Csv => "csv".into(),
                LogFormat::Json => "json".into(),
            },
            mapping: Some(mapping.clone()),
            policy: Some(policy.clone()),
            content_hash: format!("{:016x}", fnv1a(bytes)),
        };
        let id = self.register(name, source, &sessions, &annotations, parsed.rejects.total)?;
        Ok(CreateOutcome {
            dataset_id: id,
            sessions: sessions.len(),
            events: sessions.iter().map(Session::len).sum(),
            imported_labels: annotations.len(),
            rejects: parsed.rejects,
        })
    }

    /// Stores already-annotated sessions (e.g. a synthetic corpus).
    pub fn create_annotated(&self, name: &str, data: &[AnnotatedSession]) -> Result<String, StoreError> {
        let sessions: Vec<Session> = data.iter().map(|a| a.session.clone()).collect();
        let annotations: Vec<CognitiveAnnotation> = data.iter().flat_map(|a| a.annotations.iter().cloned()).collect();
        let encoded = serde_json::to_vec(data).map_err(|e| StoreError::Io(e.to_string()))?;
        let source = DatasetSource {
            format: "annotated".into(),
            mapping: None,
            policy: None,
            content_hash: format!("{:016x}", fnv1a(&encoded)),
        };
        self.register(name, source, &sessions, &annotations, 0)
    }

    pub fn load(&self, id: &str) -> Result<DatasetState, StoreError> {
        self.dataset(id)?;
        let flags: Vec<FlagRecord> = read_records(&self.file(id, FLAGS))?;
        Ok(DatasetState {
            sessions: read_records(&self.file(id, SESSIONS))?,
            annotations: read_records(&self.file(id, ANNOTATIONS))?,
            transcripts: read_records(&self.file(id, TRANSCRIPTS))?,
            decisions: read_records(&self.file(id, DECISIONS))?,
            flags: flags.into_iter().map(|f| (f.session_id, f.event_index)).collect(),
            gold: read_records(&self.file(id, GOLD))?,
        })
    }

    /// Finds the dataset holding a session, searching in id order.
    pub fn find_session(&self, session_id: &str) -> Result<(String, DatasetState), StoreError> {
        let ids: Vec<String> = self.manifest().datasets.keys().cloned().collect();
        for id in ids {
            let state = self.load(&id)?;
            if state.session(session_id).is_some() {
                return Ok((id, state));
            }
        }
        Err(StoreError::UnknownSession(session_id.to_string()))
    }

    /// Appends annotations and transcripts, skipping records identical to
    /// the latest stored one for the same key so re-runs add nothing.
    fn append_labels(
        &self,
        id: &str,
        state: &mut DatasetState,
        annotations: Vec<CognitiveAnnotation>,
        transcripts: Vec<AgentTranscript>,
    ) -> Result<(), StoreError> {
        let mut latest_ann: HashMap<(String, usize, AnnotationSource), &CognitiveAnnotation> = HashMap::new();
        for a in &state.annotations {
            latest_ann.insert((a.session_id.clone(), a.event_index, a.source), a);
        }
        let new_ann: Vec<CognitiveAnnotation> = annotations
            .into_iter()
            .filter(|a| latest_ann.get(&(a.session_id.clone(), a.event_index, a.source)) != Some(&a))
            .collect();
        let mut latest_tr: HashMap<(String, usize), &AgentTranscript> = HashMap::new();
        for t in &state.transcripts {
            latest_tr.insert(t.key(), t);
        }
        let new_tr: Vec<AgentTranscript> =
            transcripts.into_iter().filter(|t| latest_tr.get(&t.key()) != Some(&t)).collect();
        append_records(&self.file(id, ANNOTATIONS), &new_ann)?;
        append_records(&self.file(id, TRANSCRIPTS), &new_tr)?;
        state.annotations.extend(new_ann);
        state.transcripts.extend(new_tr);
        Ok(())
    }

    /// Runs a labeling job over every session of a dataset while holding the
    /// dataset's write lock. `progress` receives (done, total).
    pub fn run_labeling(
        &self,
        id: &str,
        engine: &Engine,
        cancel: &AtomicBool,
        mut progress: impl FnMut(usize, usize),
    ) -> Result<JobReport, StoreError> {
        let lock = self.write_lock(id);
        let _guard = lock.lock().unwrap_or_else(|p| p.into_inner());
        let mut state = self.load(id)?;
        let sessions = state.sessions.clone();
        let total = sessions.len();
        let mut report = JobReport { sessions: total, ..Default::default() };
        progress(0, total);
        match engine {
            Engine::Heuristic(cfg) => {
                cfg.validate().map_err(|e| StoreError::InvalidDecision(e.to_string()))?;
                for (done, s) in sessions.iter().enumerate() {
                    if cancel.load(std::sync::atomic::Ordering::SeqCst) {
                        report.cancelled = true;
                        break;
                    }
                    match label_session(s, cfg) {
                        Ok(anns) => {
                            report.labeled_events += anns.len();
                            self.append_labels(id, &mut state, anns, Vec::new())?;
                        }
                        Err(e) => report.failed_sessions.push((s.id.clone(), e.to_string())),
                    }
                    progress(done + 1, total);
                }
            }
            Engine::Agents { backend, config, few_shots, labeler } => {
                let mut failure: Option<StoreError> = None;
                let summary = annotate_sessions(&sessions, backend.as_ref(), few_shots, config, cancel, |i, result| {
                    if failure.is_some() {
                        return;
                    }
                    let session = &sessions[i];
                    let (anns, trs) = match result {
                        Ok(done) => (done.annotations, done.transcripts),
                        Err(AgentError::PartialFailure { completed, escalated, reason, .. }) => {
                            report.escalated_events += escalated.len();
                            report.failed_sessions.push((session.id.clone(), reason));
                            let mut anns = completed.annotations;
                            anns.extend(escalation_fallback(session, &escalated, labeler));
                            (anns, completed.transcripts)
                        }
                        Err(e) => {
                            report.failed_sessions.push((session.id.clone(), e.to_string()));
                            (Vec::new(), Vec::new())
                        }
                    };
                    report.labeled_events += anns.len();
                    if let Err(e) = self.append_labels(id, &mut state, anns, trs) {
                        failure = Some(e);
                    }
                    progress(i + 1, total);
                });
                if let Some(e) = failure {
                    return Err(e);
                }
                report.cancelled = summary.cancelled;
            }
        }
        Ok(report)
    }

    /// Flags the top `rate` fraction of disputed events. Re-running with the
    /// same rate and transcripts flags nothing new.
    pub fn flag(&self, id: &str, rate: f64) -> Result<FlagOutcome, StoreError> {
        let lock = self.write_lock(id);
        let _guard = lock.lock().unwrap_or_else(|p| p.into_inner());
        let state = self.load(id)?;
        let transcripts = state.latest_transcripts();
        let chosen = flag_top_fraction(&transcripts, rate);
        let new: Vec<FlagRecord> = chosen
            .iter()
            .filter(|k| !state.flags.contains(*k))
            .map(|(s, i)| FlagRecord { session_id: s.clone(), event_index: *i })
            .collect();
        append_records(&self.file(id, FLAGS), &new)?;
        Ok(FlagOutcome { transcripts: transcripts.len(), flagged: chosen.len(), newly_flagged: new.len() })
    }

    /// Validates and stores a reviewer decision.
    pub fn record_decision(
        &self,
        session_id: &str,
        event_index: usize,
        label: CognitiveLabel,
        verdict: Verdict,
        note: Option<String>,
    ) -> Result<(String, HumanDecision), StoreError> {
        let (id, _) = self.find_session(session_id)?;
        let lock = self.write_lock(&id);
        let _guard = lock.lock().unwrap_or_else(|p| p.into_inner());
        let state = self.load(&id)?;
        let session = state.session(session_id).ok_or_else(|| StoreError::UnknownSession(session_id.to_string()))?;
        if event_index >= session.len() {
            return Err(StoreError::UnknownEvent(session_id.to_string(), event_index));
        }
        let machine = state.machine().remove(&(session_id.to_string(), event_index));
        match (verdict, machine) {
            (Verdict::Corrected, Some(m)) if m.label == label => {
                return Err(StoreError::InvalidDecision(format!(
                    "correction repeats the machine label {label}"
                )))
            }
            (Verdict::Accepted, Some(m)) if m.label != label => {
                return Err(StoreError::InvalidDecision(format!(
                    "accepted label {label} differs from the machine label {}",
                    m.label
                )))
            }
            (Verdict::Accepted, None) => {
                return Err(StoreError::InvalidDecision("no machine label to accept".into()))
            }
            _ => {}
        }
        let decision = HumanDecision {
            session_id: session_id.to_string(),
            event_index,
            label,
            verdict,
            decided_at: now_ms(),
            note,
        };
        append_records(&self.file(&id, DECISIONS), std::slice::from_ref(&decision))?;
        Ok((id, decision))
    }

    pub fn add_gold(&self, id: &str, ratings: &[GoldRating]) -> Result<usize, StoreError> {
        let lock = self.write_lock(id);
        let _guard = lock.lock().unwrap_or_else(|p| p.into_inner());
        self.dataset(id)?;
        append_records(&self.file(id, GOLD), ratings)?;
        Ok(ratings.len())
    }

    pub fn timeline(&self, session_id: &str) -> Result<SessionTimeline, StoreError> {
        let (id, state) = self.find_session(session_id)?;
        timeline_of(&id, &state, session_id)
    }

    pub fn timeline_in(&self, id: &str, session_id: &str) -> Result<SessionTimeline, StoreError> {
        let state = self.load(id)?;
        timeline_of(id, &state, session_id)
    }

    pub fn sessions_page(
        &self,
        id: &str,
        filter: SessionFilter,
        page: usize,
        page_size: usize,
    ) -> Result<SessionPage, StoreError> {
        let state = self.load(id)?;
        let effective = state.effective();
        let flagged = state.flagged();
        let decided = state.decided();
        let mut rows = Vec::new();
        for s in &state.sessions {
            let keys: Vec<(String, usize)> = s.events.iter().map(|e| (s.id.clone(), e.index)).collect();
            let summary = SessionSummary {
                session_id: s.id.clone(),
                user_id: s.user_id.clone(),
                events: s.len(),
                labeled: keys.iter().filter(|k| effective.contains_key(*k)).count(),
                flagged: keys.iter().filter(|k| flagged.contains(*k)).count(),
                decided: keys.iter().filter(|k| decided.contains(*k)).count(),
            };
            let keep = match filter {
                SessionFilter::All => true,
                SessionFilter::Flagged => summary.flagged > 0,
                SessionFilter::Undecided => summary.decided < summary.events,
            };
            if keep {
                rows.push(summary);
            }
        }
        let page_size = page_size.max(1);
        let total = rows.len();
        let sessions = rows.into_iter().skip(page.saturating_mul(page_size)).take(page_size).collect();
        Ok(SessionPage { page, page_size, total, sessions })
    }

    pub fn stats(&self, id: &str) -> Result<DatasetStats, StoreError> {
        let state = self.load(id)?;
        let effective = state.effective();
        let mut label_histogram = BTreeMap::new();
        let mut source_histogram = BTreeMap::new();
        for a in effective.values() {
            *label_histogram.entry(a.label).or_insert(0) += 1;
            *source_histogram.entry(a.source).or_insert(0) += 1;
        }
        let (agreement, agreement_error) = if state.gold.is_empty() {
            (None, None)
        } else {
            let pred: Vec<CognitiveAnnotation> = effective.values().cloned().collect();
            match agreement_report(&pred, &state.gold) {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            }
        };
        Ok(DatasetStats {
            dataset_id: id.to_string(),
            sessions: state.sessions.len(),
            events: state.event_count(),
            labeled: effective.len(),
            decisions: state.decisions.len(),
            flagged: state.flagged().len(),
            label_histogram,
            source_histogram,
            agreement,
            agreement_error,
        })
    }

    pub fn export_csv(&self, id: &str, opts: ExportOptions) -> Result<Vec<u8>, StoreError> {
        let state = self.load(id)?;
        export_state(&state, opts)
    }

    /// Rewrites record files keeping only the latest record per key.
    pub fn compact(&self, id: &str) -> Result<(), StoreError> {
        let lock = self.write_lock(id);
        let _guard = lock.lock().unwrap_or_else(|p| p.into_inner());
        let state = self.load(id)?;
        let transcripts = state.latest_transcripts();
        let mut anns: BTreeMap<(String, usize, AnnotationSource), CognitiveAnnotation> = BTreeMap::new();
        for a in state.annotations {
            anns.insert((a.session_id.clone(), a.event_index, a.source), a);
        }
        let mut decisions: BTreeMap<(String, usize), HumanDecision> = BTreeMap::new();
        for d in state.decisions {
            decisions.insert((d.session_id.clone(), d.event_index), d);
        }
        let flags: Vec<FlagRecord> =
            state.flags.into_iter().map(|(session_id, event_index)| FlagRecord { session_id, event_index }).collect();
        rewrite_records(&self.file(id, ANNOTATIONS), &anns.into_values().collect::<Vec<_>>())?;
        rewrite_records(&self.file(id, TRANSCRIPTS), &transcripts)?;
        rewrite_records(&self.file(id, DECISIONS), &decisions.into_values().collect::<Vec<_>>())?;
        rewrite_records(&self.file(id, FLAGS), &flags)?;
        Ok(())
    }
}

/// Heuristic labels for events the agents could not settle, flagged for review.
fn escalation_fallback(session: &Session, escalated: &[usize], labeler: &LabelerConfig) -> Vec<CognitiveAnnotation> {
    let Ok(all) = label_session(session, labeler) else {
        return Vec::new();
    };
    all.into_iter()
        .filter(|a| escalated.contains(&a.event_index))
        .map(|mut a| {
            a.flagged = true;
            a
        })
        .collect()
}

fn timeline_of(id: &str, state: &DatasetState, session_id: &str) -> Result<SessionTimeline, StoreError> {
    let session = state.session(session_id).ok_or_else(|| StoreError::UnknownSession(session_id.to_string()))?;
    let effective = state.effective();
    let flagged = state.flagged();
    let mut decisions: BTreeMap<usize, &HumanDecision> = BTreeMap::new();
    for d in state.decisions.iter().filter(|d| d.session_id == session_id) {
        decisions.insert(d.event_index, d);
    }
    let events = session
        .events
        .iter()
        .map(|e| {
            let key = (session_id.to_string(), e.index);
            let a = effective.get(&key);
            TimelineEvent {
                event: e.clone(),
                label: a.map(|a| a.label),
                source: a.map(|a| a.source),
                confidence: a.map(|a| a.confidence),
                justification: a.map(|a| a.justification.clone()),
                flagged: flagged.contains(&key),
                decision: decisions.get(&e.index).map(|d| (*d).clone()),
            }
        })
        .collect();
    let transcripts = state.latest_transcripts().into_iter().filter(|t| t.session_id == session_id).collect();
    Ok(SessionTimeline {
        dataset_id: id.to_string(),
        session_id: session_id.to_string(),
        user_id: session.user_id.clone(),
        events,
        transcripts,
    })
}

/// Six-column CSV (plus extras when extended). Query events without a
/// document id carry their query text in `content_id` so the export
/// re-ingests as a valid log.
pub fn export_state(state: &DatasetState, opts: ExportOptions) -> Result<Vec<u8>, StoreError> {
    let effective = state.effective();
    let flagged = state.flagged();
    let unlabeled = state
        .sessions
        .iter()
        .flat_map(|s| s.events.iter().map(move |e| (s.id.clone(), e.index)))
        .filter(|k| !effective.contains_key(k))
        .count();
    if unlabeled > 0 && !opts.force {
        return Err(StoreError::UnlabeledEvents(unlabeled));
    }
    let mut rows: Vec<(&Session, &Event)> =
        state.sessions.iter().flat_map(|s| s.events.iter().map(move |e| (s, e))).collect();
    rows.sort_by(|(sa, ea), (sb, eb)| {
        sa.id.cmp(&sb.id).then(ea.timestamp.cmp(&eb.timestamp)).then(ea.index.cmp(&eb.index))
    });
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(Vec::new());
    let mut header: Vec<&str> = EXPORT_HEADER.split(',').collect();
    if opts.extended {
        header.extend(["source", "confidence", "flagged"]);
    }
    let io = |e: csv::Error| StoreError::Io(e.to_string());
    w.write_record(&header).map_err(io)?;
    for (s, e) in rows {
        let key = (s.id.clone(), e.index);
        let a = effective.get(&key);
        let content_id = if e.content_id.is_empty() { e.content.as_str() } else { e.content_id.as_str() };
        let mut record = vec![
            s.id.clone(),
            e.timestamp.to_string(),
            e.action.as_str().to_string(),
            content_id.to_string(),
            a.map(|a| a.label.as_str().to_string()).unwrap_or_default(),
            a.map(|a| a.justification.clone()).unwrap_or_default(),
        ];
        if opts.extended {
            record.push(a.map(|a| a.source.as_str().to_string()).unwrap_or_default());
            record.push(a.map(|a| a.confidence.to_string()).unwrap_or_default());
            record.push(flagged.contains(&key).to_string());
        }
        w.write_record(&record).map_err(io)?;
    }
    w.into_inner().map_err(|e| StoreError::Io(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineKind {
    #[default]
    Heuristic,
    Agents,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

impl std::str::FromStr for EngineKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown engine {s:?}"))
    }
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown backend {s:?}"))
    }
}

/// JSON labeling configuration shared by the CLI and the HTTP API. Every
/// section is optional. Credentials are not accepted here; the HTTP backend
/// reads its key from the environment variable named in `http.api_key_env`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelingConfig {
    pub labeler: LabelerConfig,
    pub agent: AgentConfig,
    pub mock: Option<crate::backend::MockPolicy>,
    pub http: Option<crate::backend::HttpBackendConfig>,
    pub few_shots: Vec<FewShot>,
}

impl LabelingConfig {
    pub fn from_json(raw: &str) -> Result<Self, String> {
        let cfg: Self = serde_json::from_str(raw).map_err(|e| format!("labeling config: {e}"))?;
        cfg.labeler.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn engine(&self, kind: EngineKind, backend: BackendKind) -> Result<Engine, String> {
        self.labeler.validate().map_err(|e| e.to_string())?;
        Ok(match kind {
            EngineKind::Heuristic => Engine::Heuristic(self.labeler.clone()),
            EngineKind::Agents => {
                if self.few_shots.len() > crate::agents::MAX_FEW_SHOTS {
                    return Err(format!("at most {} few-shot examples allowed", crate::agents::MAX_FEW_SHOTS));
                }
                let backend: Arc<dyn CompletionBackend> = match backend {
                    BackendKind::Mock => {
                        let mut policy = self.mock.clone().unwrap_or_default();
                        if self.mock.is_none() {
                            policy.labeler = self.labeler.clone();
                        }
                        Arc::new(crate::backend::MockBackend::new(policy))
                    }
                    BackendKind::Http => {
                        Arc::new(crate::backend::HttpBackend::new(self.http.clone().unwrap_or_default()))
                    }
                };
                Engine::Agents {
                    backend,
                    config: self.agent.clone(),
                    few_shots: self.few_shots.clone(),
                    labeler: self.labeler.clone(),
                }
            }
        })
    }
}
