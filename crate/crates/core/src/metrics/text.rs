//! Text-generation metrics: corpus BLEU, per-sample BLEU-1, and ROUGE-L.
//!
//! All functions share one tokenization rule: lowercase, punctuation split
//! into single-character tokens, whitespace separated.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Lowercases, splits alphanumeric runs, and emits every other
/// non-whitespace character as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.to_lowercase().chars() {
        if ch.is_alphanumeric() {
            current.push(ch);
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            if !ch.is_whitespace() {
                tokens.push(ch.to_string());
            }
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for i in 0..=tokens.len() - n {
        *counts.entry(&tokens[i..i + n]).or_insert(0) += 1;
    }
    counts
}

/// Corpus BLEU over candidate/reference pairs: clipped n-gram counts are
/// pooled across the corpus, combined as a geometric mean over orders
/// `1..=max_n` without smoothing, then scaled by the brevity penalty. Any
/// zero pooled precision yields 0.
pub fn corpus_bleu(pairs: &[(String, String)], max_n: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::BadMetricInput("empty corpus".into()));
    }
    if max_n == 0 {
        return Err(Error::BadMetricInput("max_n must be at least 1".into()));
    }
    let tokenized: Vec<(Vec<String>, Vec<String>)> = pairs
        .iter()
        .map(|(c, r)| (tokenize(c), tokenize(r)))
        .collect();
    let candidate_len: u64 = tokenized.iter().map(|(c, _)| c.len() as u64).sum();
    let reference_len: u64 = tokenized.iter().map(|(_, r)| r.len() as u64).sum();
    if candidate_len == 0 {
        return Ok(0.0);
    }
    let mut log_precision_sum = 0.0;
    for n in 1..=max_n {
        let mut clipped = 0u64;
        let mut total = 0u64;
        for (cand, reference) in &tokenized {
            let cand_counts = ngram_counts(cand, n);
            let ref_counts = ngram_counts(reference, n);
            for (gram, &count) in &cand_counts {
                total += count;
                clipped += count.min(ref_counts.get(gram).copied().unwrap_or(0));
            }
        }
        if clipped == 0 || total == 0 {
            return Ok(0.0);
        }
        log_precision_sum += (clipped as f64 / total as f64).ln();
    }
    let brevity = if candidate_len >= reference_len {
        1.0
    } else {
        (1.0 - reference_len as f64 / candidate_len as f64).exp()
    };
    Ok(brevity * (log_precision_sum / max_n as f64).exp())
}

/// Per-sample BLEU-1 (clipped unigram precision times the sample brevity
/// penalty), averaged over the corpus.
pub fn mean_sentence_bleu1(pairs: &[(String, String)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::BadMetricInput("empty corpus".into()));
    }
    let total: f64 = pairs
        .iter()
        .map(|(c, r)| sentence_bleu1(&tokenize(c), &tokenize(r)))
        .sum();
    Ok(total / pairs.len() as f64)
}

fn sentence_bleu1(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let cand_counts = ngram_counts(candidate, 1);
    let ref_counts = ngram_counts(reference, 1);
    let clipped: u64 = cand_counts
        .iter()
        .map(|(gram, &count)| count.min(ref_counts.get(gram).copied().unwrap_or(0)))
        .sum();
    let precision = clipped as f64 / candidate.len() as f64;
    let brevity = if candidate.len() >= reference.len() {
        1.0
    } else {
        (1.0 - reference.len() as f64 / candidate.len() as f64).exp()
    };
    precision * brevity
}

/// Recall weight in the ROUGE-L F-measure.
const ROUGE_BETA: f64 = 1.2;

/// LCS-based F-measure with beta = 1.2. Zero when either side is empty.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let cand = tokenize(candidate);
    let reference = tokenize(reference);
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_length(&cand, &reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let recall = lcs / reference.len() as f64;
    let precision = lcs / cand.len() as f64;
    let beta2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + beta2) * recall * precision / (recall + beta2 * precision)
}

/// Mean per-sample ROUGE-L across the corpus.
pub fn mean_rouge_l(pairs: &[(String, String)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::BadMetricInput("empty corpus".into()));
    }
    Ok(pairs.iter().map(|(c, r)| rouge_l(c, r)).sum::<f64>() / pairs.len() as f64)
}

fn lcs_length(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut row = vec![0usize; b.len() + 1];
    for item_a in a {
        for (j, item_b) in b.iter().enumerate() {
            row[j + 1] = if item_a == item_b {
                prev[j] + 1
            } else {
                prev[j + 1].max(row[j])
            };
        }
        std::mem::swap(&mut prev, &mut row);
    }
    prev[b.len()]
}
