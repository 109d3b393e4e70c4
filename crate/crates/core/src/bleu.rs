//! Sentence-level BLEU-4 over JSON-aware tokens.

use std::collections::HashMap;

/// Substitute for a zero n-gram precision inside the logarithm, so a single
/// empty order does not zero out the others.
pub const ZERO_PRECISION_EPSILON: f64 = 1e-9;

const MAX_ORDER: usize = 4;
const PUNCT: &[char] = &['{', '}', '[', ']', ',', ':', '"'];

/// Splits on whitespace and emits each of `{}[],:"` as its own token.
pub fn tokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut start = 0;
        for (i, c) in chunk.char_indices() {
            if PUNCT.contains(&c) {
                if start < i {
                    out.push(&chunk[start..i]);
                }
                out.push(&chunk[i..i + c.len_utf8()]);
                start = i + c.len_utf8();
            }
        }
        if start < chunk.len() {
            out.push(&chunk[start..]);
        }
    }
    out
}

fn ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped precision numerator and denominator for order `n`.
pub fn modified_precision(candidate: &[&str], reference: &[&str], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refc = ngram_counts(reference, n);
    let matched = cand
        .iter()
        .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

pub fn brevity_penalty(candidate_len: usize, reference_len: usize) -> f64 {
    if candidate_len == 0 {
        0.0
    } else if candidate_len > reference_len {
        1.0
    } else {
        (1.0 - reference_len as f64 / candidate_len as f64).exp()
    }
}

pub fn bleu4(candidate: &str, reference: &str) -> f64 {
    bleu4_tokens(&tokenize(candidate), &tokenize(reference))
}

pub fn bleu4_tokens(candidate: &[&str], reference: &[&str]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    // Orders longer than the candidate have no n-grams at all and are left
    // out of the geometric mean.
    let orders = candidate.len().min(MAX_ORDER);
    let mut log_sum = 0.0;
    for n in 1..=orders {
        let (matched, total) = modified_precision(candidate, reference, n);
        if n == 1 && matched == 0 {
            return 0.0;
        }
        let p = matched as f64 / total as f64;
        log_sum += if p > 0.0 { p.ln() } else { ZERO_PRECISION_EPSILON.ln() };
    }
    let score = brevity_penalty(candidate.len(), reference.len()) * (log_sum / orders as f64).exp();
    score.clamp(0.0, 1.0)
}
