//! Session-outcome and struggle-recovery forecasting from session prefixes.
//!
//! Examples are built from annotated sessions, split by user, featurized
//! from prefix text (hashed) and/or the prefix label trajectory, and scored
//! with a full-batch logistic regression.

use crate::heuristic::{label_prefix, LabelerConfig};
use crate::metrics::{prf1, roc_auc};
use crate::model::{
    ActionType, AnnotatedSession, AnnotationSource, CognitiveAnnotation, CognitiveLabel, Event,
    Session,
};
use crate::text::{default_stopwords, fnv1a, normalize_tokens};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

/// Label-family width: unigrams (6) + bigrams (36) + last label (6) + length (1).
pub const LABEL_FEATURE_DIMS: usize = 49;

/// Labels that indicate the user is struggling.
pub const STRUGGLE_LABELS: [CognitiveLabel; 2] = [CognitiveLabel::PoorScent, CognitiveLabel::LeavingPatch];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Outcome,
    Recovery,
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "outcome" => Ok(Task::Outcome),
            "recovery" => Ok(Task::Recovery),
            other => Err(format!("unknown task {other:?}")),
        }
    }
}

/// How the outcome task decides success.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeRule {
    /// Success iff the final event's label is a success label; sessions
    /// ending in neither set are dropped.
    #[default]
    FinalLabel,
    /// Success iff any label after the prefix is a success label.
    AnySuccessAfterPrefix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: Task,
    pub prefix_fraction: f64,
    pub min_events: usize,
    pub success_labels: BTreeSet<CognitiveLabel>,
    pub failure_labels: BTreeSet<CognitiveLabel>,
    pub balance_training: bool,
    #[serde(default)]
    pub outcome_rule: OutcomeRule,
    /// Used to re-derive heuristic labels from prefix-local context.
    #[serde(default)]
    pub labeler: LabelerConfig,
}

impl TaskSpec {
    pub fn outcome() -> Self {
        Self::new(Task::Outcome)
    }

    pub fn recovery() -> Self {
        Self::new(Task::Recovery)
    }

    pub fn new(task: Task) -> Self {
        use CognitiveLabel::*;
        TaskSpec {
            task,
            prefix_fraction: match task {
                Task::Outcome => 0.5,
                Task::Recovery => 0.4,
            },
            min_events: 4,
            success_labels: [ApproachingSource, ForagingSuccess, DietEnrichment].into_iter().collect(),
            failure_labels: [PoorScent, LeavingPatch].into_iter().collect(),
            balance_training: true,
            outcome_rule: OutcomeRule::FinalLabel,
            labeler: LabelerConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ForecastError> {
        if !(self.prefix_fraction > 0.0 && self.prefix_fraction < 1.0) {
            return Err(ForecastError::InvalidSpec("prefix_fraction must lie in (0, 1)".into()));
        }
        if self.min_events == 0 {
            return Err(ForecastError::InvalidSpec("min_events must be positive".into()));
        }
        if !self.success_labels.is_disjoint(&self.failure_labels) {
            return Err(ForecastError::InvalidSpec("success and failure labels overlap".into()));
        }
        Ok(())
    }

    /// `max(1, floor(f * n))`.
    pub fn prefix_len(&self, n: usize) -> usize {
        ((self.prefix_fraction * n as f64 + 1e-9).floor() as usize).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ForecastError {
    #[error("session {0} event {1} has no annotation")]
    UnannotatedEvent(String, usize),
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastExample {
    pub session_id: String,
    pub prefix_events: Vec<(Event, CognitiveLabel)>,
    /// true = success.
    pub outcome: bool,
}

pub fn build_examples(sessions: &[AnnotatedSession], spec: &TaskSpec) -> Result<Vec<ForecastExample>, ForecastError> {
    spec.validate()?;
    let mut out = Vec::new();
    for annotated in sessions {
        let session = &annotated.session;
        let effective = annotated
            .effective()
            .map_err(|i| ForecastError::UnannotatedEvent(session.id.clone(), i))?;
        let n = session.len();
        if n < spec.min_events {
            continue;
        }
        let k = spec.prefix_len(n);
        if k >= n {
            continue;
        }
        let full: Vec<CognitiveLabel> = effective.iter().map(|a| a.label).collect();

        // Heuristic labels may depend on later events; recompute them from
        // the prefix alone. Agent and human labels are kept as recorded.
        let mut prefix_labels = full[..k].to_vec();
        if effective[..k].iter().any(|a| a.source == AnnotationSource::Heuristic) {
            let local = label_prefix(session, k, &spec.labeler)
                .map_err(|e| ForecastError::InvalidSpec(e.to_string()))?;
            for (i, ann) in effective[..k].iter().enumerate() {
                if ann.source == AnnotationSource::Heuristic {
                    prefix_labels[i] = local[i];
                }
            }
        }

        let outcome = match spec.task {
            Task::Outcome => match spec.outcome_rule {
                OutcomeRule::FinalLabel => {
                    let last = full[n - 1];
                    if spec.success_labels.contains(&last) {
                        true
                    } else if spec.failure_labels.contains(&last) {
                        false
                    } else {
                        continue;
                    }
                }
                OutcomeRule::AnySuccessAfterPrefix => full[k..].iter().any(|l| spec.success_labels.contains(l)),
            },
            Task::Recovery => {
                if !prefix_labels.iter().any(|l| STRUGGLE_LABELS.contains(l)) {
                    continue;
                }
                full[k..].iter().any(|l| spec.success_labels.contains(l))
            }
        };
        out.push(ForecastExample {
            session_id: session.id.clone(),
            prefix_events: session.events[..k].iter().cloned().zip(prefix_labels).collect(),
            outcome,
        });
    }
    Ok(out)
}

/// Splits examples so that every user lands entirely on one side. With
/// `balance`, the training majority class is down-sampled to the minority
/// count.
pub fn split_by_user(
    examples: &[ForecastExample],
    sessions: &[AnnotatedSession],
    ratio: f64,
    seed: u64,
    balance: bool,
) -> (Vec<ForecastExample>, Vec<ForecastExample>) {
    let user_of: HashMap<&str, &str> = sessions
        .iter()
        .map(|s| (s.session.id.as_str(), s.session.user_id.as_str()))
        .collect();
    let user = |e: &ForecastExample| -> String {
        user_of.get(e.session_id.as_str()).copied().unwrap_or(e.session_id.as_str()).to_string()
    };
    let mut users: Vec<String> = examples.iter().map(&user).collect::<BTreeSet<_>>().into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    users.shuffle(&mut rng);
    let n_train = if users.len() < 2 {
        users.len()
    } else {
        ((ratio * users.len() as f64).round() as usize).clamp(1, users.len() - 1)
    };
    let train_users: BTreeSet<&String> = users[..n_train].iter().collect();
    let (mut train, test): (Vec<_>, Vec<_>) =
        examples.iter().cloned().partition(|e| train_users.contains(&user(e)));
    if balance {
        train = downsample(train, &mut rng);
    }
    (train, test)
}

fn downsample(train: Vec<ForecastExample>, rng: &mut ChaCha8Rng) -> Vec<ForecastExample> {
    let pos: Vec<usize> = (0..train.len()).filter(|&i| train[i].outcome).collect();
    let neg: Vec<usize> = (0..train.len()).filter(|&i| !train[i].outcome).collect();
    let (mut major, minor) = if pos.len() >= neg.len() { (pos, neg) } else { (neg, pos) };
    major.shuffle(rng);
    major.truncate(minor.len());
    let keep: BTreeSet<usize> = major.into_iter().chain(minor).collect();
    train.into_iter().enumerate().filter(|(i, _)| keep.contains(i)).map(|(_, e)| e).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub name: String,
    pub use_text: bool,
    pub use_labels: bool,
    pub text_hash_dims: usize,
}

impl FeatureConfig {
    pub fn text_only() -> Self {
        Self { name: "text-only".into(), use_text: true, use_labels: false, text_hash_dims: 256 }
    }

    pub fn labels_only() -> Self {
        Self { name: "labels-only".into(), use_text: false, use_labels: true, text_hash_dims: 256 }
    }

    pub fn text_and_labels() -> Self {
        Self { name: "text+labels".into(), use_text: true, use_labels: true, text_hash_dims: 256 }
    }

    pub fn validate(&self) -> Result<(), ForecastError> {
        if !(self.use_text || self.use_labels) {
            return Err(ForecastError::InvalidSpec(format!("{}: no feature family enabled", self.name)));
        }
        if self.use_text && self.text_hash_dims == 0 {
            return Err(ForecastError::InvalidSpec(format!("{}: text_hash_dims must be positive", self.name)));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        let text = if self.use_text { self.text_hash_dims } else { 0 };
        let labels = if self.use_labels { LABEL_FEATURE_DIMS } else { 0 };
        text + labels
    }
}

/// Text family first (if enabled), then the label family.
pub fn featurize(example: &ForecastExample, cfg: &FeatureConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.dim());
    if cfg.use_text {
        out.extend(text_features(example, cfg.text_hash_dims));
    }
    if cfg.use_labels {
        out.extend(label_features(example));
    }
    out
}

fn text_features(example: &ForecastExample, dims: usize) -> Vec<f64> {
    let stopwords = default_stopwords();
    let mut v = vec![0.0; dims];
    for (event, _) in &example.prefix_events {
        for token in normalize_tokens(&event.content, &stopwords) {
            let h = fnv1a(token.as_bytes());
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            v[(h % dims as u64) as usize] += sign;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

fn label_features(example: &ForecastExample) -> Vec<f64> {
    let labels: Vec<usize> = example.prefix_events.iter().map(|(_, l)| l.index()).collect();
    let len = labels.len();
    let mut v = vec![0.0; LABEL_FEATURE_DIMS];
    if len == 0 {
        return v;
    }
    for &l in &labels {
        v[l] += 1.0 / len as f64;
    }
    let bigram_norm = (len.saturating_sub(1)).max(1) as f64;
    for w in labels.windows(2) {
        v[6 + w[0] * 6 + w[1]] += 1.0 / bigram_norm;
    }
    v[42 + labels[len - 1]] = 1.0;
    v[48] = len as f64 / 32.0;
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

// log(1 + e^z) without overflow
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl LogisticModel {
    pub fn zeros(dim: usize) -> Self {
        Self { weights: vec![0.0; dim], bias: 0.0 }
    }

    fn logit(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + self.bias
    }

    /// Probability of the positive class.
    pub fn predict(&self, x: &[f64]) -> f64 {
        sigmoid(self.logit(x))
    }
}

/// Mean logistic loss plus `l2 / 2 * |w|^2` (bias unregularized), and its
/// gradient as (dw, db).
pub fn loss_and_gradient(model: &LogisticModel, data: &[(Vec<f64>, bool)], l2: f64) -> (f64, Vec<f64>, f64) {
    let n = data.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; model.weights.len()];
    let mut grad_b = 0.0;
    for (x, y) in data {
        let z = model.logit(x);
        let y = if *y { 1.0 } else { 0.0 };
        loss += softplus(z) - y * z;
        let r = sigmoid(z) - y;
        for (g, xi) in grad.iter_mut().zip(x) {
            *g += r * xi;
        }
        grad_b += r;
    }
    loss /= n;
    grad_b /= n;
    let reg: f64 = model.weights.iter().map(|w| w * w).sum::<f64>() * l2 / 2.0;
    for (g, w) in grad.iter_mut().zip(&model.weights) {
        *g = *g / n + l2 * w;
    }
    (loss + reg, grad, grad_b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self { epochs: 300, lr: 0.5, l2: 1e-3, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub model: LogisticModel,
    /// Training loss before each update, then after the last one.
    pub loss_trace: Vec<f64>,
}

/// Full-batch gradient descent on the regularized logistic loss. Weights
/// start from small seeded uniform noise.
pub fn train_logistic(train: &[(Vec<f64>, bool)], params: &TrainParams) -> Result<TrainedModel, ForecastError> {
    let dim = train.first().map(|(x, _)| x.len()).unwrap_or(0);
    if let Some((x, _)) = train.iter().find(|(x, _)| x.len() != dim) {
        return Err(ForecastError::DimensionMismatch { expected: dim, got: x.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut model = LogisticModel {
        weights: (0..dim).map(|_| rng.random_range(-0.01..0.01)).collect(),
        bias: 0.0,
    };
    let mut loss_trace = Vec::with_capacity(params.epochs + 1);
    for _ in 0..params.epochs {
        let (loss, grad, grad_b) = loss_and_gradient(&model, train, params.l2);
        loss_trace.push(loss);
        for (w, g) in model.weights.iter_mut().zip(&grad) {
            *w -= params.lr * g;
        }
        model.bias -= params.lr * grad_b;
    }
    loss_trace.push(loss_and_gradient(&model, train, params.l2).0);
    Ok(TrainedModel { model, loss_trace })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigResult {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
}

/// `to` minus `from` for each metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub from: String,
    pub to: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub task: Task,
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    pub configs: Vec<ConfigResult>,
    pub deltas: Vec<MetricDelta>,
}

impl ExperimentReport {
    pub fn config(&self, name: &str) -> Option<&ConfigResult> {
        self.configs.iter().find(|c| c.name == name)
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "task: {:?}  seed: {}  train: {}  test: {}", self.task, self.seed, self.train_size, self.test_size);
        let _ = writeln!(out, "{:<16}{:>10}{:>10}{:>10}{:>10}", "Model", "Precision", "Recall", "F1", "AUC");
        for c in &self.configs {
            let _ = writeln!(out, "{:<16}{:>10.2}{:>10.2}{:>10.2}{:>10.2}", c.name, c.precision, c.recall, c.f1, c.auc);
        }
        out
    }
}

/// Builds, splits (80/20 by user), trains and evaluates each feature
/// configuration on the same split.
pub fn run_experiment(
    sessions: &[AnnotatedSession],
    spec: &TaskSpec,
    cfgs: &[FeatureConfig],
    seed: u64,
    params: &TrainParams,
) -> Result<ExperimentReport, ForecastError> {
    for cfg in cfgs {
        cfg.validate()?;
    }
    let examples = build_examples(sessions, spec)?;
    let (train, test) = split_by_user(&examples, sessions, 0.8, seed, spec.balance_training);
    for (name, side) in [("train", &train), ("test", &test)] {
        let pos = side.iter().filter(|e| e.outcome).count();
        if pos == 0 || pos == side.len() {
            return Err(ForecastError::InsufficientData(format!(
                "{name} split has {pos} positive of {} examples",
                side.len()
            )));
        }
    }
    let mut configs = Vec::with_capacity(cfgs.len());
    for cfg in cfgs {
        let xs: Vec<(Vec<f64>, bool)> = train.iter().map(|e| (featurize(e, cfg), e.outcome)).collect();
        let trained = train_logistic(&xs, &TrainParams { seed, ..*params })?;
        let scored: Vec<(f64, bool)> = test
            .iter()
            .map(|e| (trained.model.predict(&featurize(e, cfg)), e.outcome))
            .collect();
        let m = prf1(&scored, 0.5);
        let auc = roc_auc(&scored).map_err(|e| ForecastError::InsufficientData(e.to_string()))?;
        configs.push(ConfigResult { name: cfg.name.clone(), precision: m.precision, recall: m.recall, f1: m.f1, auc });
    }
    let mut deltas = Vec::new();
    for i in 0..configs.len() {
        for j in i + 1..configs.len() {
            let (a, b) = (&configs[i], &configs[j]);
            deltas.push(MetricDelta {
                from: a.name.clone(),
                to: b.name.clone(),
                precision: b.precision - a.precision,
                recall: b.recall - a.recall,
                f1: b.f1 - a.f1,
                auc: b.auc - a.auc,
            });
        }
    }
    Ok(ExperimentReport {
        task: spec.task,
        seed,
        train_size: train.len(),
        test_size: test.len(),
        configs,
        deltas,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticParams {
    pub min_len: usize,
    pub max_len: usize,
    pub success_rate: f64,
    pub sessions_per_user: usize,
    pub vocab_size: usize,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self { min_len: 4, max_len: 12, success_rate: 0.5, sessions_per_user: 5, vocab_size: 80 }
    }
}

// Mid-session states. Query-with-click states (FollowingScent,
// DietEnrichment) are always followed by a click; PoorScent never is.
const MID: [CognitiveLabel; 4] = [
    CognitiveLabel::FollowingScent,
    CognitiveLabel::ApproachingSource,
    CognitiveLabel::DietEnrichment,
    CognitiveLabel::PoorScent,
];

/// Weights over MID for the next state, given the previous one.
fn transition(success: bool, prev: Option<CognitiveLabel>) -> [f64; 4] {
    use CognitiveLabel::*;
    match (success, prev) {
        (_, Some(FollowingScent | DietEnrichment)) => [0.0, 1.0, 0.0, 0.0],
        (true, None) => [0.7, 0.0, 0.0, 0.3],
        (false, None) => [0.4, 0.0, 0.0, 0.6],
        (true, Some(ApproachingSource)) => [0.3, 0.3, 0.3, 0.1],
        (false, Some(ApproachingSource)) => [0.2, 0.15, 0.1, 0.55],
        (true, Some(_)) => [0.45, 0.0, 0.35, 0.2],
        (false, Some(_)) => [0.25, 0.0, 0.1, 0.65],
    }
}

fn draw(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

fn label_trajectory(rng: &mut ChaCha8Rng, success: bool, len: usize) -> Vec<CognitiveLabel> {
    use CognitiveLabel::*;
    let mut labels: Vec<CognitiveLabel> = Vec::with_capacity(len);
    for pos in 0..len - 1 {
        let mut w = transition(success, labels.last().copied());
        // A failing session ends on a query, so its second-to-last state
        // cannot be one that demands a following click.
        if !success && pos == len - 2 {
            w[0] = 0.0;
            w[2] = 0.0;
            if w.iter().sum::<f64>() == 0.0 {
                w = [0.0, 1.0, 0.0, 0.0];
            }
        }
        labels.push(MID[draw(rng, &w)]);
    }
    let prev = labels.last().copied();
    let last = if success {
        match prev {
            Some(FollowingScent | DietEnrichment) => ApproachingSource,
            Some(PoorScent) | None => ForagingSuccess,
            _ => {
                if rng.random::<f64>() < 0.6 {
                    ApproachingSource
                } else {
                    ForagingSuccess
                }
            }
        }
    } else {
        let clicked = labels.contains(&ApproachingSource);
        let queries = labels.iter().filter(|l| **l != ApproachingSource).count() + 1;
        if !clicked && queries >= 3 {
            LeavingPatch
        } else {
            PoorScent
        }
    };
    labels.push(last);
    labels
}

/// Synthetic annotated corpus in which outcome depends on the label
/// trajectory while query and click text come from one shared vocabulary.
pub fn generate_synthetic(n_sessions: usize, seed: u64, params: &SyntheticParams) -> Vec<AnnotatedSession> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab: Vec<String> = (0..params.vocab_size.max(1)).map(|i| format!("term{i:03}")).collect();
    let per_user = params.sessions_per_user.max(1);
    let n_users = n_sessions.div_ceil(per_user).max(2);
    let min_len = params.min_len.max(2);
    let max_len = params.max_len.max(min_len);
    let mut out = Vec::with_capacity(n_sessions);
    for s in 0..n_sessions {
        let success = rng.random::<f64>() < params.success_rate;
        let len = rng.random_range(min_len..=max_len);
        let labels = label_trajectory(&mut rng, success, len);
        let id = format!("syn{s:05}");
        let user = format!("user{:04}", rng.random_range(0..n_users));
        let mut ts: i64 = 1_136_073_600_000 + rng.random_range(0..86_400_000i64) * 30;
        let mut events = Vec::with_capacity(len);
        let mut annotations = Vec::with_capacity(len);
        for (i, label) in labels.iter().enumerate() {
            let n_tokens = rng.random_range(1..=4);
            let content: Vec<&str> = (0..n_tokens).map(|_| vocab[rng.random_range(0..vocab.len())].as_str()).collect();
            let is_click = *label == CognitiveLabel::ApproachingSource;
            events.push(Event {
                session_id: id.clone(),
                index: i,
                timestamp: ts,
                action: if is_click { ActionType::Click } else { ActionType::Query },
                content: content.join(" "),
                content_id: if is_click { format!("doc{}", rng.random_range(0..10_000)) } else { String::new() },
                answer_present: *label == CognitiveLabel::ForagingSuccess,
                dwell_ms: None,
            });
            annotations.push(CognitiveAnnotation {
                session_id: id.clone(),
                event_index: i,
                label: *label,
                justification: "synthetic trajectory".into(),
                source: AnnotationSource::Agents,
                confidence: 1.0,
                flagged: false,
            });
            ts += rng.random_range(5_000..60_000);
        }
        out.push(AnnotatedSession { session: Session { id, user_id: user, events }, annotations });
    }
    out
}

/// Distinct users in a corpus; handy for split diagnostics.
pub fn users(sessions: &[AnnotatedSession]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for s in sessions {
        *m.entry(s.session.user_id.clone()).or_insert(0) += 1;
    }
    m
}
