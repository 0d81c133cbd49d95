//! Automatic evaluation: perplexity, corpus-level BLEU, sentence-level
//! ROUGE F1, Distinct-n, and emotion accuracy.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Result};

/// The full metric report; `bleu[i]` is BLEU-(i+1), Distinct values are
/// ratios (the CLI renders them as percentages).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ppl: f64,
    pub bleu: [f64; 4],
    pub rouge1_f: f64,
    pub rouge2_f: f64,
    pub dist1: f64,
    pub dist2: f64,
    pub emo_accuracy: f64,
    pub counts: EvalCounts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub examples: usize,
    pub tokens: usize,
}

/// `exp(mean per-token negative log-likelihood)`.
pub fn perplexity(token_nlls: &[f64]) -> Result<f64> {
    if token_nlls.is_empty() {
        return Err(contract_err("perplexity over zero tokens"));
    }
    if token_nlls.iter().any(|v| !v.is_finite()) {
        return Err(contract_err("non-finite token negative log-likelihood"));
    }
    let mean = token_nlls.iter().sum::<f64>() / token_nlls.len() as f64;
    Ok(mean.exp())
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

const BLEU_FLOOR: f64 = 1e-9;

/// Corpus-level BLEU-n: clipped n-gram counts are summed over the corpus
/// before dividing, precisions get an epsilon numerator floor, and the
/// brevity penalty uses total lengths.
pub fn bleu(hyps: &[Vec<String>], refs: &[Vec<String>], n: usize) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(contract_err(format!(
            "{} hypotheses vs {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if n == 0 || n > 4 {
        return Err(contract_err("BLEU order must be 1..=4"));
    }
    if hyps.is_empty() {
        return Err(contract_err("BLEU over an empty corpus"));
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let mut matched = 0usize;
        let mut total = 0usize;
        for (hyp, reference) in hyps.iter().zip(refs) {
            let hyp_counts = ngram_counts(hyp, k);
            let ref_counts = ngram_counts(reference, k);
            for (gram, &count) in &hyp_counts {
                let clip = ref_counts.get(gram).copied().unwrap_or(0);
                matched += count.min(clip);
            }
            total += hyp.len().saturating_sub(k - 1);
        }
        let precision = (matched as f64).max(BLEU_FLOOR) / (total as f64).max(1.0);
        log_sum += precision.ln();
    }
    let geo_mean = (log_sum / n as f64).exp();
    let hyp_len: usize = hyps.iter().map(Vec::len).sum();
    let ref_len: usize = refs.iter().map(Vec::len).sum();
    let bp = if hyp_len >= ref_len || hyp_len == 0 {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(bp * geo_mean)
}

/// Sentence-level ROUGE-n F1 from clipped n-gram overlap.
pub fn rouge_n(hyp: &[String], reference: &[String], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(contract_err("ROUGE order must be at least 1"));
    }
    let hyp_counts = ngram_counts(hyp, n);
    let ref_counts = ngram_counts(reference, n);
    let hyp_total: usize = hyp_counts.values().sum();
    let ref_total: usize = ref_counts.values().sum();
    if hyp_total == 0 && ref_total == 0 {
        return Ok(0.0);
    }
    let mut overlap = 0usize;
    for (gram, &count) in &hyp_counts {
        overlap += count.min(ref_counts.get(gram).copied().unwrap_or(0));
    }
    if overlap == 0 {
        return Ok(0.0);
    }
    let p = overlap as f64 / hyp_total as f64;
    let r = overlap as f64 / ref_total as f64;
    Ok(2.0 * p * r / (p + r))
}

/// Mean sentence-level ROUGE-n over a corpus.
pub fn rouge_n_corpus(hyps: &[Vec<String>], refs: &[Vec<String>], n: usize) -> Result<f64> {
    if hyps.len() != refs.len() || hyps.is_empty() {
        return Err(contract_err("ROUGE needs parallel non-empty corpora"));
    }
    let mut total = 0.0;
    for (h, r) in hyps.iter().zip(refs) {
        total += rouge_n(h, r, n)?;
    }
    Ok(total / hyps.len() as f64)
}

/// Distinct n-grams over total n-grams across all hypotheses.
pub fn distinct_n(hyps: &[Vec<String>], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(contract_err("Distinct order must be at least 1"));
    }
    let mut seen: HashMap<&[String], ()> = HashMap::new();
    let mut total = 0usize;
    for hyp in hyps {
        if hyp.len() >= n {
            for window in hyp.windows(n) {
                seen.entry(window).or_insert(());
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(contract_err("no n-grams to measure"));
    }
    Ok(seen.len() as f64 / total as f64)
}

/// Fraction of matching predictions.
pub fn emotion_accuracy(preds: &[usize], golds: &[usize]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(contract_err(format!(
            "{} predictions vs {} golds",
            preds.len(),
            golds.len()
        )));
    }
    if preds.is_empty() {
        return Err(contract_err("accuracy over zero examples"));
    }
    let matches = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(matches as f64 / preds.len() as f64)
}
