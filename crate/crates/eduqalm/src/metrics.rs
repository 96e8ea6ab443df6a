//! QA scoring: exact match, token-level F1, ROUGE, and BLEU.
//!
//! All metrics run on [`normalize`]d token lists: Unicode NFC, lowercase,
//! punctuation stripped, whitespace split. Exact match compares whole
//! normalized strings; F1 counts matched tokens as a multiset intersection,
//! so repeated tokens match at most their repetition count.
//!
//! Conventions for empty sides: if both texts normalize to nothing the
//! score is perfect, if exactly one does it is zero. A negative question
//! (empty gold) therefore scores EM 1 only for an empty prediction.

use std::collections::HashMap;

use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::pipeline::QaExample;

/// Non-ASCII punctuation also stripped by [`normalize`].
const PUNCT_EXTRA: &[char] = &['«', '»', '“', '”', '‘', '’', '–', '—', '…', '·'];

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || PUNCT_EXTRA.contains(&c)
}

/// Canonical token list: NFC, lowercase, punctuation removed, whitespace
/// split. Stripping can bring a combining mark next to a new base
/// character, so NFC runs again afterwards to keep the result canonical.
pub fn normalize(text: &str) -> Vec<String> {
    let nfc: String = text.nfc().collect();
    let lowered = nfc.to_lowercase();
    let stripped: String = lowered
        .chars()
        .filter(|&c| !is_punct(c))
        .nfc()
        .collect();
    stripped.split_whitespace().map(str::to_string).collect()
}

/// 1 iff the normalized prediction equals one of the normalized golds.
/// An empty gold is a negative question: any non-empty prediction scores 0
/// and an empty prediction scores 1.
pub fn exact_match(pred: &str, golds: &[&str]) -> bool {
    let p = normalize(pred);
    golds.iter().any(|g| normalize(g) == p)
}

fn counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut map = HashMap::new();
    for t in tokens {
        *map.entry(t.as_str()).or_insert(0) += 1;
    }
    map
}

/// Token-overlap precision/recall/F1 between prediction and gold.
pub fn token_f1(pred: &str, gold: &str) -> (f64, f64, f64) {
    let p = normalize(pred);
    let g = normalize(gold);
    if p.is_empty() && g.is_empty() {
        return (1.0, 1.0, 1.0);
    }
    if p.is_empty() || g.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let gc = counts(&g);
    let pc = counts(&p);
    let matched: usize = pc
        .iter()
        .map(|(tok, &n)| n.min(gc.get(tok).copied().unwrap_or(0)))
        .sum();
    let precision = matched as f64 / p.len() as f64;
    let recall = matched as f64 / g.len() as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut map = HashMap::new();
    if tokens.len() >= n && n > 0 {
        for w in tokens.windows(n) {
            *map.entry(w).or_insert(0) += 1;
        }
    }
    map
}

/// Smoothing floor for zero clipped n-gram counts.
const BLEU_EPS: f64 = 1e-9;

/// BLEU with clipped n-gram precision, brevity penalty, and add-epsilon
/// smoothing. The geometric mean runs over the effective orders
/// `1..=min(max_n, candidate length)`, so a short candidate identical to
/// its reference still scores 1.0.
pub fn bleu(candidate: &str, references: &[&str], max_n: usize) -> Result<f64> {
    if max_n < 1 {
        return Err(Error::Config("bleu max_n must be >= 1".into()));
    }
    let cand = normalize(candidate);
    if cand.is_empty() {
        return Ok(0.0);
    }
    let refs: Vec<Vec<String>> = references.iter().map(|r| normalize(r)).collect();
    let effective = max_n.min(cand.len());
    let mut log_sum = 0.0;
    for n in 1..=effective {
        let cand_ngrams = ngram_counts(&cand, n);
        let total: usize = cand_ngrams.values().sum();
        let mut clipped = 0usize;
        for (gram, &count) in &cand_ngrams {
            let best_ref = refs
                .iter()
                .map(|r| ngram_counts(r, n).get(gram).copied().unwrap_or(0))
                .max()
                .unwrap_or(0);
            clipped += count.min(best_ref);
        }
        let p = if clipped == 0 {
            BLEU_EPS
        } else {
            clipped as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let geo = (log_sum / effective as f64).exp();
    // closest reference length; ties pick the shorter
    let c = cand.len();
    let r = refs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| ((len as i64 - c as i64).abs(), len))
        .unwrap_or(0);
    let bp = if c >= r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    Ok(geo * bp)
}

fn prf(overlap: f64, cand_total: f64, ref_total: f64) -> (f64, f64, f64) {
    let p = if cand_total > 0.0 { overlap / cand_total } else { 0.0 };
    let r = if ref_total > 0.0 { overlap / ref_total } else { 0.0 };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

/// ROUGE-N: clipped n-gram overlap precision/recall/F1.
pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> Result<(f64, f64, f64)> {
    if n < 1 {
        return Err(Error::Config("rouge_n needs n >= 1".into()));
    }
    let cand = normalize(candidate);
    let refr = normalize(reference);
    if cand.is_empty() && refr.is_empty() {
        return Ok((1.0, 1.0, 1.0));
    }
    let cn = ngram_counts(&cand, n);
    let rn = ngram_counts(&refr, n);
    let overlap: usize = cn
        .iter()
        .map(|(gram, &count)| count.min(rn.get(gram).copied().unwrap_or(0)))
        .sum();
    let cand_total: usize = cn.values().sum();
    let ref_total: usize = rn.values().sum();
    Ok(prf(overlap as f64, cand_total as f64, ref_total as f64))
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L: longest-common-subsequence precision/recall/F1.
pub fn rouge_l(candidate: &str, reference: &str) -> (f64, f64, f64) {
    let cand = normalize(candidate);
    let refr = normalize(reference);
    if cand.is_empty() && refr.is_empty() {
        return (1.0, 1.0, 1.0);
    }
    let lcs = lcs_len(&cand, &refr) as f64;
    prf(lcs, cand.len() as f64, refr.len() as f64)
}

/// Per-example scores within a corpus report.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PerExampleScore {
    pub id: String,
    pub em: bool,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Corpus-level EM and token F1, reported as percentages.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub exact: f64,
    pub f1: f64,
    pub n: usize,
    pub per_example: Vec<PerExampleScore>,
}

/// Score predictions against gold examples. Missing predictions count as
/// empty; with several golds per example the best score wins.
pub fn score_corpus(predictions: &[(String, String)], gold: &[QaExample]) -> Result<MetricReport> {
    if gold.is_empty() {
        return Err(Error::Contract("score_corpus on an empty gold set".into()));
    }
    let mut by_id: HashMap<&str, &str> = HashMap::new();
    for (id, text) in predictions {
        if by_id.insert(id.as_str(), text.as_str()).is_some() {
            return Err(Error::Input(format!("duplicate prediction id {id}")));
        }
    }
    for id in by_id.keys() {
        if !gold.iter().any(|g| g.id == **id) {
            return Err(Error::Input(format!(
                "prediction id {id} has no gold example"
            )));
        }
    }
    let mut per_example = Vec::with_capacity(gold.len());
    for ex in gold {
        let pred = by_id.get(ex.id.as_str()).copied().unwrap_or("");
        let golds = [ex.answer.as_str()];
        let em = exact_match(pred, &golds);
        let (precision, recall, f1) = golds
            .iter()
            .map(|g| token_f1(pred, g))
            .max_by(|a, b| a.2.total_cmp(&b.2))
            .expect("at least one gold");
        per_example.push(PerExampleScore {
            id: ex.id.clone(),
            em,
            precision,
            recall,
            f1,
        });
    }
    let n = per_example.len();
    let exact = 100.0 * per_example.iter().filter(|e| e.em).count() as f64 / n as f64;
    let f1 = 100.0 * per_example.iter().map(|e| e.f1).sum::<f64>() / n as f64;
    Ok(MetricReport {
        exact,
        f1,
        n,
        per_example,
    })
}
