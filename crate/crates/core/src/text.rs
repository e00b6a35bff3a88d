//! Token normalization shared by reformulation analysis, disagreement
//! scoring and text features.

use std::collections::{BTreeMap, BTreeSet};

/// Default stopword list (25 English function words).
pub const DEFAULT_STOPWORDS: [&str; 25] = [
    "a", "an", "and", "are", "as", "at", "be", "by", "for", "from", "how", "in", "is", "it", "of",
    "on", "or", "that", "the", "to", "was", "what", "where", "who", "with",
];

pub fn default_stopwords() -> BTreeSet<String> {
    DEFAULT_STOPWORDS.iter().map(|s| s.to_string()).collect()
}

/// Lowercases, replaces punctuation with spaces, splits on whitespace and
/// drops stopwords. Token order is preserved.
pub fn normalize_tokens(text: &str, stopwords: &BTreeSet<String>) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .to_lowercase();
    cleaned
        .split_whitespace()
        .filter(|t| !stopwords.contains(*t))
        .map(str::to_string)
        .collect()
}

pub fn token_set(text: &str, stopwords: &BTreeSet<String>) -> BTreeSet<String> {
    normalize_tokens(text, stopwords).into_iter().collect()
}

fn term_frequencies(tokens: Vec<String>) -> BTreeMap<String, f64> {
    let mut tf = BTreeMap::new();
    for t in tokens {
        *tf.entry(t).or_insert(0.0) += 1.0;
    }
    tf
}

/// Cosine similarity of term-frequency vectors. Zero when either side has
/// no tokens.
pub fn tf_cosine(a: &str, b: &str, stopwords: &BTreeSet<String>) -> f64 {
    let ta = term_frequencies(normalize_tokens(a, stopwords));
    let tb = term_frequencies(normalize_tokens(b, stopwords));
    if ta.is_empty() || tb.is_empty() {
        return 0.0;
    }
    let dot: f64 = ta
        .iter()
        .filter_map(|(t, x)| tb.get(t).map(|y| x * y))
        .sum();
    let na: f64 = ta.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = tb.values().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(0.0, 1.0)
}

/// 64-bit FNV-1a; stable across platforms and releases.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strips_punctuation_and_stopwords() {
        let sw = default_stopwords();
        assert_eq!(
            normalize_tokens("Best espresso machine under $500!", &sw),
            vec!["best", "espresso", "machine", "under", "500"]
        );
        assert_eq!(normalize_tokens("lightweight laptops for travel", &sw).len(), 3);
    }

    #[test]
    fn cosine_examples() {
        let sw = default_stopwords();
        assert_eq!(tf_cosine("no clicks issued", "snippet answered query", &sw), 0.0);
        let c = tf_cosine("user clicked result", "user clicked nothing", &sw);
        assert!((c - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(tf_cosine("the", "the", &sw), 0.0);
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }
}
