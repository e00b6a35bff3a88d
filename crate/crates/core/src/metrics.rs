//! Agreement and classification metrics.

use crate::model::{effective_annotations, CognitiveAnnotation, CognitiveLabel};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error("no prediction for gold item ({0}, {1})")]
    MissingPrediction(String, usize),
}

/// Ratings per item: annotator id → value. Annotators may skip items.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityData<L: Ord = CognitiveLabel> {
    pub items: Vec<(String, BTreeMap<String, L>)>,
}

impl<L: Ord + Clone> ReliabilityData<L> {
    pub fn new() -> Self {
        Self { items: Vec::new() }
    }

    pub fn push(&mut self, item_id: impl Into<String>, ratings: impl IntoIterator<Item = (String, L)>) {
        self.items.push((item_id.into(), ratings.into_iter().collect()));
    }
}

/// Krippendorff's alpha for nominal data, from the coincidence matrix.
///
/// Items with fewer than two ratings are not pairable and are ignored.
/// When all pairable values are identical the expected disagreement is
/// zero and alpha is reported as undefined.
pub fn krippendorff_alpha_nominal<L: Ord + Clone>(data: &ReliabilityData<L>) -> Result<f64, MetricError> {
    // coincidences[c][k], with values indexed in sorted order
    let values: BTreeSet<&L> = data
        .items
        .iter()
        .filter(|(_, r)| r.len() >= 2)
        .flat_map(|(_, r)| r.values())
        .collect();
    if values.is_empty() {
        return Err(MetricError::Undefined("no item has two or more ratings".into()));
    }
    let index: BTreeMap<&L, usize> = values.iter().enumerate().map(|(i, v)| (*v, i)).collect();
    let v = index.len();
    let mut coincidence = vec![vec![0.0f64; v]; v];
    for (_, ratings) in &data.items {
        let m = ratings.len();
        if m < 2 {
            continue;
        }
        let mut counts = vec![0.0f64; v];
        for value in ratings.values() {
            counts[index[value]] += 1.0;
        }
        let w = 1.0 / (m as f64 - 1.0);
        for c in 0..v {
            for k in 0..v {
                let pairs = if c == k { counts[c] * (counts[c] - 1.0) } else { counts[c] * counts[k] };
                coincidence[c][k] += pairs * w;
            }
        }
    }
    let marginals: Vec<f64> = coincidence.iter().map(|row| row.iter().sum()).collect();
    let n: f64 = marginals.iter().sum();
    let mut observed = 0.0;
    let mut expected = 0.0;
    for c in 0..v {
        for k in 0..v {
            if c != k {
                observed += coincidence[c][k];
                expected += marginals[c] * marginals[k];
            }
        }
    }
    if expected == 0.0 {
        return Err(MetricError::Undefined("all ratings identical; expected disagreement is zero".into()));
    }
    Ok(1.0 - (n - 1.0) * observed / expected)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1 with predictions `score >= threshold`.
/// Zero denominators give 0 for the affected metric.
pub fn prf1(pairs: &[(f64, bool)], threshold: f64) -> Prf1 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for &(score, truth) in pairs {
        match (score >= threshold, truth) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Prf1 { precision, recall, f1 }
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from midranks in O(n log n).
pub fn roc_auc(pairs: &[(f64, bool)]) -> Result<f64, MetricError> {
    let positives = pairs.iter().filter(|(_, t)| *t).count();
    let negatives = pairs.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricError::Undefined("ROC-AUC needs both classes".into()));
    }
    let mut sorted: Vec<(f64, bool)> = pairs.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Sum of (doubled) midranks of positives keeps everything integral.
    let mut rank_sum_x2: u128 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].0.total_cmp(&sorted[i].0).is_eq() {
            j += 1;
        }
        // ranks i+1..=j+1, midrank*2 = i + j + 2
        let mid_x2 = (i + j + 2) as u128;
        let pos_in_group = sorted[i..=j].iter().filter(|(_, t)| *t).count() as u128;
        rank_sum_x2 += mid_x2 * pos_in_group;
        i = j + 1;
    }
    let p = positives as u128;
    let u_x2 = rank_sum_x2 - p * (p + 1);
    Ok(u_x2 as f64 / (2.0 * positives as f64 * negatives as f64))
}

/// 6×6 confusion counts; rows are gold labels, columns predictions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix(pub [[u64; 6]; 6]);

impl ConfusionMatrix {
    pub fn add(&mut self, gold: CognitiveLabel, predicted: CognitiveLabel) {
        self.0[gold.index()][predicted.index()] += 1;
    }

    pub fn get(&self, gold: CognitiveLabel, predicted: CognitiveLabel) -> u64 {
        self.0[gold.index()][predicted.index()]
    }

    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..6).map(|i| self.0[i][i]).sum()
    }

    pub fn render(&self) -> String {
        let abbrev = ["FS", "AS", "DE", "PS", "LP", "FSu"];
        let mut out = format!("{:>18}", "gold \\ pred");
        for a in abbrev {
            let _ = write!(out, "{a:>6}");
        }
        out.push('\n');
        for label in CognitiveLabel::ALL {
            let _ = write!(out, "{:>18}", label.as_str());
            for count in self.0[label.index()] {
                let _ = write!(out, "{count:>6}");
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldLabel {
    pub session_id: String,
    pub event_index: usize,
    pub label: CognitiveLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldAccuracy {
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

/// Exact-match accuracy of the effective predicted labels over gold keys.
pub fn accuracy_vs_gold(pred: &[CognitiveAnnotation], gold: &[GoldLabel]) -> Result<GoldAccuracy, MetricError> {
    if gold.is_empty() {
        return Err(MetricError::Undefined("empty gold set".into()));
    }
    let resolved = effective_annotations(pred);
    let mut confusion = ConfusionMatrix::default();
    for g in gold {
        let p = resolved
            .get(&(g.session_id.clone(), g.event_index))
            .ok_or_else(|| MetricError::MissingPrediction(g.session_id.clone(), g.event_index))?;
        confusion.add(g.label, p.label);
    }
    Ok(GoldAccuracy { accuracy: confusion.trace() as f64 / gold.len() as f64, confusion })
}

/// Agreement report printed by `agree` and the stats endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    /// Alpha among the gold annotators, when at least two rated an item.
    pub gold_alpha: Option<f64>,
    pub gold_alpha_error: Option<String>,
    /// Alpha between the pipeline's effective labels and the gold consensus.
    pub machine_alpha: Option<f64>,
    pub machine_alpha_error: Option<String>,
    pub accuracy: f64,
    pub gold_items: usize,
    pub confusion: ConfusionMatrix,
}

impl AgreementReport {
    pub fn render_table(&self) -> String {
        let fmt = |v: Option<f64>, e: &Option<String>| match (v, e) {
            (Some(v), _) => format!("{v:.4}"),
            (None, Some(e)) => format!("undefined ({e})"),
            (None, None) => "n/a".into(),
        };
        let mut out = String::new();
        let _ = writeln!(out, "{:<28}{}", "gold items", self.gold_items);
        let _ = writeln!(out, "{:<28}{}", "alpha (gold annotators)", fmt(self.gold_alpha, &self.gold_alpha_error));
        let _ = writeln!(out, "{:<28}{}", "alpha (pipeline vs gold)", fmt(self.machine_alpha, &self.machine_alpha_error));
        let _ = writeln!(out, "{:<28}{:.4}", "accuracy vs gold", self.accuracy);
        out.push('\n');
        out.push_str(&self.confusion.render());
        out
    }
}

/// One gold rating; several annotators may rate the same event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldRating {
    pub session_id: String,
    pub event_index: usize,
    #[serde(default = "default_annotator")]
    pub annotator: String,
    pub label: CognitiveLabel,
}

fn default_annotator() -> String {
    "gold".into()
}

/// Majority label per event; ties go to the label listed first in the schema.
pub fn gold_consensus(ratings: &[GoldRating]) -> Vec<GoldLabel> {
    let mut votes: BTreeMap<(String, usize), [usize; 6]> = BTreeMap::new();
    for r in ratings {
        votes.entry((r.session_id.clone(), r.event_index)).or_insert([0; 6])[r.label.index()] += 1;
    }
    votes
        .into_iter()
        .map(|((session_id, event_index), counts)| {
            let best = (0..6).max_by_key(|&i| (counts[i], std::cmp::Reverse(i))).unwrap_or(0);
            GoldLabel { session_id, event_index, label: CognitiveLabel::ALL[best] }
        })
        .collect()
}

pub fn agreement_report(pred: &[CognitiveAnnotation], ratings: &[GoldRating]) -> Result<AgreementReport, MetricError> {
    let mut per_item: BTreeMap<(String, usize), BTreeMap<String, CognitiveLabel>> = BTreeMap::new();
    for r in ratings {
        per_item.entry((r.session_id.clone(), r.event_index)).or_default().insert(r.annotator.clone(), r.label);
    }
    let gold_data = ReliabilityData {
        items: per_item.iter().map(|((s, i), m)| (format!("{s}/{i}"), m.clone())).collect(),
    };
    let (gold_alpha, gold_alpha_error) = split(krippendorff_alpha_nominal(&gold_data));
    let consensus = gold_consensus(ratings);
    let acc = accuracy_vs_gold(pred, &consensus)?;
    let resolved = effective_annotations(pred);
    let pair_data = ReliabilityData {
        items: consensus
            .iter()
            .filter_map(|g| {
                resolved.get(&(g.session_id.clone(), g.event_index)).map(|p| {
                    let ratings: BTreeMap<String, CognitiveLabel> =
                        [("gold".to_string(), g.label), ("pipeline".to_string(), p.label)].into_iter().collect();
                    (format!("{}/{}", g.session_id, g.event_index), ratings)
                })
            })
            .collect(),
    };
    let (machine_alpha, machine_alpha_error) = split(krippendorff_alpha_nominal(&pair_data));
    Ok(AgreementReport {
        gold_alpha,
        gold_alpha_error,
        machine_alpha,
        machine_alpha_error,
        accuracy: acc.accuracy,
        gold_items: consensus.len(),
        confusion: acc.confusion,
    })
}

fn split(r: Result<f64, MetricError>) -> (Option<f64>, Option<String>) {
    match r {
        Ok(v) => (Some(v), None),
        Err(e) => (None, Some(e.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AnnotationSource;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn two_raters(pairs: &[(&str, &str)]) -> ReliabilityData<String> {
        let mut d = ReliabilityData::new();
        for (i, (a, b)) in pairs.iter().enumerate() {
            d.push(format!("i{i}"), [("A".to_string(), a.to_string()), ("B".to_string(), b.to_string())]);
        }
        d
    }

    /// Textbook route: D_o and D_e from the coincidence matrix built by
    /// explicitly enumerating ordered pairs.
    fn alpha_oracle(items: &[Vec<u8>]) -> Option<f64> {
        let mut o = BTreeMap::<(u8, u8), f64>::new();
        for vals in items.iter().filter(|v| v.len() >= 2) {
            let m = vals.len() as f64;
            for i in 0..vals.len() {
                for j in 0..vals.len() {
                    if i != j {
                        *o.entry((vals[i], vals[j])).or_default() += 1.0 / (m - 1.0);
                    }
                }
            }
        }
        let mut nc = BTreeMap::<u8, f64>::new();
        for ((c, _), w) in &o {
            *nc.entry(*c).or_default() += w;
        }
        let n: f64 = nc.values().sum();
        let d_o: f64 = o.iter().filter(|((c, k), _)| c != k).map(|(_, w)| w).sum::<f64>() / n;
        let mut d_e = 0.0;
        for (c, a) in &nc {
            for (k, b) in &nc {
                if c != k {
                    d_e += a * b;
                }
            }
        }
        d_e /= n * (n - 1.0);
        (d_e > 0.0).then(|| 1.0 - d_o / d_e)
    }

    #[test]
    fn alpha_perfect_agreement() {
        let d = two_raters(&[("x", "x"), ("y", "y"), ("x", "x"), ("y", "y")]);
        assert_eq!(krippendorff_alpha_nominal(&d).unwrap(), 1.0);
    }

    #[test]
    fn alpha_hand_computed() {
        let d = two_raters(&[("x", "x"), ("y", "y"), ("x", "y"), ("y", "y")]);
        let alpha = krippendorff_alpha_nominal(&d).unwrap();
        assert!((alpha - 8.0 / 15.0).abs() < 1e-12, "{alpha}");
    }

    #[test]
    fn alpha_undefined_cases() {
        let d = two_raters(&[("x", "x"), ("x", "x")]);
        assert!(matches!(krippendorff_alpha_nominal(&d), Err(MetricError::Undefined(_))));
        let mut single = ReliabilityData::<String>::new();
        single.push("i0", [("A".to_string(), "x".to_string())]);
        assert!(krippendorff_alpha_nominal(&single).is_err());
    }

    #[test]
    fn alpha_skips_unpairable_items() {
        let mut d = two_raters(&[("x", "x"), ("y", "y"), ("x", "y"), ("y", "y")]);
        d.push("lonely", [("A".to_string(), "z".to_string())]);
        assert!((krippendorff_alpha_nominal(&d).unwrap() - 8.0 / 15.0).abs() < 1e-12);
    }

    #[test]
    fn alpha_chance_level() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut d = ReliabilityData::<bool>::new();
        for i in 0..10_000 {
            d.push(format!("{i}"), [("A".to_string(), rng.random::<bool>()), ("B".to_string(), rng.random::<bool>())]);
        }
        assert!(krippendorff_alpha_nominal(&d).unwrap().abs() < 0.05);
    }

    #[test]
    fn prf1_examples() {
        let balanced: Vec<(f64, bool)> = (0..10).map(|i| (1.0, i % 2 == 0)).collect();
        let m = prf1(&balanced, 0.5);
        assert_eq!(m.precision, 0.5);
        assert_eq!(m.recall, 1.0);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);

        let perfect = [(1.0, true), (0.0, false), (1.0, true), (0.0, false)];
        assert_eq!(prf1(&perfect, 0.5), Prf1 { precision: 1.0, recall: 1.0, f1: 1.0 });

        let none = [(0.1, true), (0.2, false)];
        assert_eq!(prf1(&none, 0.5), Prf1 { precision: 0.0, recall: 0.0, f1: 0.0 });
    }

    #[test]
    fn auc_examples() {
        let pairs = [(0.9, true), (0.4, true), (0.6, false), (0.2, false)];
        assert_eq!(roc_auc(&pairs).unwrap(), 0.75);
        assert_eq!(roc_auc(&[(0.9, true), (0.8, true), (0.1, false)]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[(0.3, true), (0.3, false), (0.3, true)]).unwrap(), 0.5);
        assert!(roc_auc(&[(0.3, true)]).is_err());
    }

    fn ann(sid: &str, idx: usize, label: CognitiveLabel) -> CognitiveAnnotation {
        CognitiveAnnotation {
            session_id: sid.into(),
            event_index: idx,
            label,
            justification: "j".into(),
            source: AnnotationSource::Agents,
            confidence: 1.0,
            flagged: false,
        }
    }

    #[test]
    fn gold_accuracy() {
        let pred: Vec<_> = (0..10).map(|i| ann("s", i, CognitiveLabel::ALL[i % 6])).collect();
        let mut gold: Vec<_> = (0..10)
            .map(|i| GoldLabel { session_id: "s".into(), event_index: i, label: CognitiveLabel::ALL[i % 6] })
            .collect();
        let r = accuracy_vs_gold(&pred, &gold).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.confusion.trace(), 10);
        gold[3].label = CognitiveLabel::ForagingSuccess;
        let r = accuracy_vs_gold(&pred, &gold).unwrap();
        assert!((r.accuracy - 0.9).abs() < 1e-12);
        assert_eq!(r.confusion.get(CognitiveLabel::ForagingSuccess, CognitiveLabel::PoorScent), 1);
        gold.push(GoldLabel { session_id: "t".into(), event_index: 0, label: CognitiveLabel::PoorScent });
        assert_eq!(accuracy_vs_gold(&pred, &gold), Err(MetricError::MissingPrediction("t".into(), 0)));
    }

    #[test]
    fn consensus_and_report() {
        let r = |s: &str, a: &str, l| GoldRating { session_id: s.into(), event_index: 0, annotator: a.into(), label: l };
        let ratings = vec![
            r("s1", "A", CognitiveLabel::PoorScent),
            r("s1", "B", CognitiveLabel::PoorScent),
            r("s1", "C", CognitiveLabel::LeavingPatch),
            r("s2", "A", CognitiveLabel::FollowingScent),
            r("s2", "B", CognitiveLabel::FollowingScent),
        ];
        let consensus = gold_consensus(&ratings);
        assert_eq!(consensus[0].label, CognitiveLabel::PoorScent);
        let pred = vec![ann("s1", 0, CognitiveLabel::PoorScent), ann("s2", 0, CognitiveLabel::FollowingScent)];
        let report = agreement_report(&pred, &ratings).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.machine_alpha, Some(1.0));
        assert!(report.gold_alpha.unwrap() < 1.0);
        assert!(report.render_table().contains("accuracy vs gold"));
    }

    fn brute_auc(pairs: &[(f64, bool)]) -> f64 {
        let mut wins = 0.0;
        let mut total = 0.0;
        for p in pairs.iter().filter(|x| x.1) {
            for n in pairs.iter().filter(|x| !x.1) {
                total += 1.0;
                if p.0 > n.0 {
                    wins += 1.0;
                } else if p.0 == n.0 {
                    wins += 0.5;
                }
            }
        }
        wins / total
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise(pairs in proptest::collection::vec((0u8..6, any::<bool>()), 2..12)) {
            let pairs: Vec<(f64, bool)> = pairs.into_iter().map(|(s, t)| (s as f64 / 5.0, t)).collect();
            prop_assume!(pairs.iter().any(|p| p.1) && pairs.iter().any(|p| !p.1));
            prop_assert_eq!(roc_auc(&pairs).unwrap(), brute_auc(&pairs));
        }

        #[test]
        fn auc_monotone_invariance_and_complement(pairs in proptest::collection::vec((-5.0f64..5.0, any::<bool>()), 2..30)) {
            prop_assume!(pairs.iter().any(|p| p.1) && pairs.iter().any(|p| !p.1));
            let base = roc_auc(&pairs).unwrap();
            let transformed: Vec<_> = pairs.iter().map(|(s, t)| (s.exp() * 3.0 + 1.0, *t)).collect();
            prop_assert!((roc_auc(&transformed).unwrap() - base).abs() < 1e-12);
            let flipped: Vec<_> = pairs.iter().map(|(s, t)| (*s, !*t)).collect();
            prop_assert!((roc_auc(&flipped).unwrap() - (1.0 - base)).abs() < 1e-12);
        }

        #[test]
        fn recall_is_one_at_lowest_threshold(pairs in proptest::collection::vec((-5.0f64..5.0, any::<bool>()), 1..30)) {
            prop_assume!(pairs.iter().any(|p| p.1));
            prop_assert_eq!(prf1(&pairs, f64::NEG_INFINITY).recall, 1.0);
        }

        #[test]
        fn alpha_matches_oracle_and_ignores_order(
            items in proptest::collection::vec(proptest::collection::vec(0u8..3, 0..4), 1..25),
            seed in any::<u64>(),
        ) {
            let mut d = ReliabilityData::<u8>::new();
            for (i, vals) in items.iter().enumerate() {
                d.push(format!("{i}"), vals.iter().enumerate().map(|(a, v)| (format!("r{a}"), *v)));
            }
            let got = krippendorff_alpha_nominal(&d).ok();
            let want = alpha_oracle(&items);
            match (got, want) {
                (Some(g), Some(w)) => prop_assert!((g - w).abs() < 1e-9),
                (None, None) => {}
                other => prop_assert!(false, "mismatch {other:?}"),
            }
            // permuting items and renaming annotators leaves alpha unchanged
            use rand::seq::SliceRandom;
            let mut shuffled = d.clone();
            shuffled.items.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            for (_, r) in shuffled.items.iter_mut() {
                *r = r.iter().map(|(k, v)| (format!("z{k}"), *v)).collect();
            }
            prop_assert_eq!(krippendorff_alpha_nominal(&shuffled).ok().map(|a| (a * 1e9).round()), got.map(|a| (a * 1e9).round()));
        }

        #[test]
        fn duplicated_annotator_keeps_perfect_alpha(vals in proptest::collection::vec(0u8..3, 2..20)) {
            prop_assume!(vals.iter().collect::<BTreeSet<_>>().len() >= 2);
            let mut d = ReliabilityData::<u8>::new();
            let mut dup = ReliabilityData::<u8>::new();
            for (i, v) in vals.iter().enumerate() {
                d.push(format!("{i}"), [("A".to_string(), *v), ("B".to_string(), *v)]);
                dup.push(format!("{i}"), [("A".to_string(), *v), ("B".to_string(), *v), ("C".to_string(), *v)]);
            }
            prop_assert_eq!(krippendorff_alpha_nominal(&d).unwrap(), 1.0);
            prop_assert!(krippendorff_alpha_nominal(&dup).unwrap() >= krippendorff_alpha_nominal(&d).unwrap());
        }
    }
}
