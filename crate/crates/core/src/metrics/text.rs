//! Character-level string similarity scores.

use serde::{Deserialize, Serialize};

/// A predicted transcription `s` and its target `t`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPair {
    pub predicted: String,
    pub target: String,
}

impl TextPair {
    pub fn new(predicted: impl Into<String>, target: impl Into<String>) -> Self {
        Self {
            predicted: predicted.into(),
            target: target.into(),
        }
    }

    pub fn lcs_score(&self) -> f64 {
        lcs_score(&self.predicted, &self.target)
    }

    pub fn levenshtein_score(&self) -> f64 {
        levenshtein_score(&self.predicted, &self.target)
    }
}

pub fn lcs_length(s: &str, t: &str) -> usize {
    let a: Vec<char> = s.chars().collect();
    let b: Vec<char> = t.chars().collect();
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for ca in &a {
        for (j, cb) in b.iter().enumerate() {
            cur[j + 1] = if ca == cb { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Unit-cost insert/delete/substitute edit distance over characters.
pub fn levenshtein_distance(s: &str, t: &str) -> usize {
    let a: Vec<char> = s.chars().collect();
    let b: Vec<char> = t.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn maxlen(s: &str, t: &str) -> usize {
    s.chars().count().max(t.chars().count())
}

/// `LCS(s, t) / max(|s|, |t|)`; two empty strings score 1.
pub fn lcs_score(s: &str, t: &str) -> f64 {
    match maxlen(s, t) {
        0 => 1.0,
        m => lcs_length(s, t) as f64 / m as f64,
    }
}

/// `1 − Levenshtein(s, t) / max(|s|, |t|)`; two empty strings score 1.
pub fn levenshtein_score(s: &str, t: &str) -> f64 {
    match maxlen(s, t) {
        0 => 1.0,
        m => 1.0 - levenshtein_distance(s, t) as f64 / m as f64,
    }
}

/// Trims and collapses whitespace runs to single spaces.
pub fn normalize_ocr_text(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
