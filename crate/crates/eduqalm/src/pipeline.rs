//! Synthetic QA dataset construction.
//!
//! The stages mirror how a regulation document becomes a training corpus:
//! clean the raw text, segment it at article headings ("Điều N."), rewrite
//! plain-text math into KaTeX-style markup, expand instruction templates
//! into generation prompts, send them through a completion client (a
//! scriptable mock in tests), score the returned pairs against their source
//! context with ROUGE-L/BLEU, and aggregate corpus statistics.
//!
//! Corpus files are UTF-8 JSONL, one record per line, stored NFC.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::metrics;

/// Five-level quality grade for a generated question/answer pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityLabel {
    VeryGood,
    Good,
    Medium,
    Bad,
    VeryBad,
}

impl QualityLabel {
    pub const ALL: [QualityLabel; 5] = [
        QualityLabel::VeryGood,
        QualityLabel::Good,
        QualityLabel::Medium,
        QualityLabel::Bad,
        QualityLabel::VeryBad,
    ];
}

impl fmt::Display for QualityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            QualityLabel::VeryGood => "very_good",
            QualityLabel::Good => "good",
            QualityLabel::Medium => "medium",
            QualityLabel::Bad => "bad",
            QualityLabel::VeryBad => "very_bad",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Generated,
    HumanLabeled,
    HumanCorrected,
}

/// One dataset record: a context span, a question about it, and the answer.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaExample {
    pub id: String,
    pub context: String,
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<QualityLabel>,
    pub provenance: Provenance,
}

impl QaExample {
    pub fn generated(
        id: impl Into<String>,
        context: impl Into<String>,
        question: impl Into<String>,
        answer: impl Into<String>,
    ) -> Self {
        QaExample {
            id: id.into(),
            context: context.into(),
            question: question.into(),
            answer: answer.into(),
            quality: None,
            provenance: Provenance::Generated,
        }
    }

    fn nfc(mut self) -> Self {
        self.id = self.id.nfc().collect();
        self.context = self.context.nfc().collect();
        self.question = self.question.nfc().collect();
        self.answer = self.answer.nfc().collect();
        self
    }
}

/// A segmented context span, the unit prompts are generated from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextRecord {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateStyle {
    Plain,
    ChainOfThought,
    SelfConsistencyCot,
    TreeOfThought,
}

/// Prompt scaffold with `{context}` / `{question}` / `{answer}` slots.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstructionTemplate {
    pub name: String,
    pub style: TemplateStyle,
    pub body: String,
}

impl InstructionTemplate {
    /// Built-in template for each prompting style. Generation templates
    /// instruct the model to produce one `Q:`/`A:` pair from the context.
    pub fn builtin(style: TemplateStyle) -> Self {
        let (name, body) = match style {
            TemplateStyle::Plain => (
                "plain",
                "Read the regulation excerpt and write one question a student \
                 might ask, with its answer taken from the excerpt.\n\
                 Context:\n{context}\n\
                 Reply in exactly this form:\nQ: <question>\nA: <answer>\n",
            ),
            TemplateStyle::ChainOfThought => (
                "chain_of_thought",
                "Read the regulation excerpt. Think step by step: list the \
                 obligations or rules it states, pick the most important one, \
                 then write a question and answer about it.\n\
                 Context:\n{context}\n\
                 After reasoning, reply with:\nQ: <question>\nA: <answer>\n",
            ),
            TemplateStyle::SelfConsistencyCot => (
                "self_consistency_cot",
                "Read the regulation excerpt. Reason through it three separate \
                 times, each time drafting a candidate question and answer. \
                 Keep only the pair your drafts agree on.\n\
                 Context:\n{context}\n\
                 Reply with the agreed pair only:\nQ: <question>\nA: <answer>\n",
            ),
            TemplateStyle::TreeOfThought => (
                "tree_of_thought",
                "Read the regulation excerpt. Explore a tree of possibilities: \
                 branch 1 covers duties, branch 2 covers rights, branch 3 covers \
                 procedures. Expand each branch one step, prune the branches the \
                 excerpt does not support, and continue on the strongest branch \
                 until you reach one well-grounded question.\n\
                 Context:\n{context}\n\
                 Reply from the surviving branch only:\nQ: <question>\nA: <answer>\n",
            ),
        };
        InstructionTemplate {
            name: name.to_string(),
            style,
            body: body.to_string(),
        }
    }

    /// Built-in training template for each style: the same instruction
    /// register as [`builtin`](Self::builtin), with question and answer
    /// slots for supervised formatting.
    pub fn builtin_training(style: TemplateStyle) -> Self {
        let (name, scaffold) = match style {
            TemplateStyle::Plain => ("plain_train", ""),
            TemplateStyle::ChainOfThought => ("chain_of_thought_train", "Think step by step. "),
            TemplateStyle::SelfConsistencyCot => (
                "self_consistency_cot_train",
                "Reason through the excerpt more than once and answer with the consistent result. ",
            ),
            TemplateStyle::TreeOfThought => (
                "tree_of_thought_train",
                "Consider the possible readings of the excerpt, discard the unsupported ones, and answer from the strongest. ",
            ),
        };
        InstructionTemplate {
            name: name.to_string(),
            style,
            body: format!(
                "Use the regulation excerpt to answer the question.\n\
                 Context:\n{{context}}\nQ: {{question}}\n{scaffold}A: {{answer}}"
            ),
        }
    }

    fn count(&self, placeholder: &str) -> usize {
        self.body.matches(placeholder).count()
    }

    /// Generation templates carry `{context}` exactly once and no other
    /// placeholders.
    pub fn validate_for_generation(&self) -> Result<()> {
        if self.count("{context}") != 1 {
            return Err(Error::Config(format!(
                "template {} must contain {{context}} exactly once",
                self.name
            )));
        }
        for p in ["{question}", "{answer}"] {
            if self.count(p) != 0 {
                return Err(Error::Config(format!(
                    "generation template {} must not contain {p}",
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// Training templates carry all three placeholders exactly once.
    pub fn validate_for_training(&self) -> Result<()> {
        for p in ["{context}", "{question}", "{answer}"] {
            if self.count(p) != 1 {
                return Err(Error::Config(format!(
                    "training template {} must contain {p} exactly once",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// Remove control characters and collapse whitespace: runs containing a
/// newline become one `\n` (paragraph boundary), other runs one space.
/// Applies NFC first; idempotent.
pub fn clean_text(raw: &str) -> String {
    let nfc: String = raw.nfc().collect();
    let mut out = String::with_capacity(nfc.len());
    let mut run_has_newline = false;
    let mut in_run = false;
    for c in nfc.chars() {
        if c.is_whitespace() {
            in_run = true;
            run_has_newline |= c == '\n' || c == '\r';
        } else if c.is_control() {
            // stray control character: drop it entirely
        } else {
            if in_run && !out.is_empty() {
                out.push(if run_has_newline { '\n' } else { ' ' });
            }
            in_run = false;
            run_has_newline = false;
            out.push(c);
        }
    }
    out
}

fn heading_regex() -> Regex {
    Regex::new(r"Điều\s+\d+\s*\.").expect("valid heading pattern")
}

/// Split a cleaned document at regulation article headings ("Điều N.").
/// Segments longer than `max_chars` split again at paragraph boundaries,
/// then at spaces. Concatenating the segments reproduces the document up
/// to boundary whitespace.
pub fn segment(document: &str, max_chars: usize) -> Result<Vec<String>> {
    if max_chars < 200 {
        return Err(Error::Config(format!(
            "max_chars must be >= 200, got {max_chars}"
        )));
    }
    if document.trim().is_empty() {
        return Ok(Vec::new());
    }
    let re = heading_regex();
    let starts: Vec<usize> = re.find_iter(document).map(|m| m.start()).collect();
    let mut articles: Vec<&str> = Vec::new();
    if starts.is_empty() {
        articles.push(document);
    } else {
        if starts[0] > 0 {
            articles.push(&document[..starts[0]]);
        }
        for (i, &s) in starts.iter().enumerate() {
            let end = starts.get(i + 1).copied().unwrap_or(document.len());
            articles.push(&document[s..end]);
        }
    }
    let mut out = Vec::new();
    for article in articles {
        let article = article.trim();
        if article.is_empty() {
            continue;
        }
        if article.chars().count() <= max_chars {
            out.push(article.to_string());
        } else {
            split_oversized(article, max_chars, &mut out);
        }
    }
    Ok(out)
}

fn split_oversized(text: &str, max_chars: usize, out: &mut Vec<String>) {
    let mut rest = text;
    while rest.chars().count() > max_chars {
        let limit: usize = rest.char_indices().nth(max_chars).map_or(rest.len(), |(i, _)| i);
        let head = &rest[..limit];
        let cut = head
            .rfind('\n')
            .or_else(|| head.rfind(' '))
            .filter(|&c| c > 0)
            .unwrap_or(limit);
        let piece = rest[..cut].trim();
        if !piece.is_empty() {
            out.push(piece.to_string());
        }
        rest = rest[cut..].trim_start();
    }
    let tail = rest.trim();
    if !tail.is_empty() {
        out.push(tail.to_string());
    }
}

/// Rewrite a small fixed set of plain-text math patterns into `$...$`
/// KaTeX-style markup; everything else passes through. Patterns, applied
/// to whitespace-delimited tokens outside existing `$` spans:
///
/// * `a/b` with 1-letter or 1-3 digit sides -> `$\frac{a}{b}$`
/// * `x^n` with the same side rule -> `$x^{n}$`
/// * the characters `×`, `≤`, `≥` -> `$\times$`, `$\le$`, `$\ge$`
///
/// Idempotent: rewritten spans are `$`-delimited and skipped on re-entry.
pub fn normalize_formula(text: &str) -> String {
    let frac = Regex::new(r"^([(\[]?)(\d{1,3}|[[:alpha:]])/(\d{1,3}|[[:alpha:]])([)\].,;:]?)$")
        .expect("valid fraction pattern");
    let sup = Regex::new(r"^([(\[]?)(\d{1,3}|[[:alpha:]])\^(\d{1,3}|[[:alpha:]])([)\].,;:]?)$")
        .expect("valid superscript pattern");
    let rewrite_piece = |piece: &str, out: &mut String| {
        if let Some(c) = frac.captures(piece) {
            out.push_str(&format!(
                "{}$\\frac{{{}}}{{{}}}${}",
                &c[1], &c[2], &c[3], &c[4]
            ));
        } else if let Some(c) = sup.captures(piece) {
            out.push_str(&format!("{}${}^{{{}}}${}", &c[1], &c[2], &c[3], &c[4]));
        } else {
            out.push_str(piece);
        }
    };
    // a token may mix symbol characters with a fraction/superscript
    // ("×a^2"), so symbols split the token before pattern matching
    let rewrite_token = |token: &str, out: &mut String| {
        let mut piece = String::new();
        for ch in token.chars() {
            let symbol = match ch {
                '×' => Some("$\\times$"),
                '≤' => Some("$\\le$"),
                '≥' => Some("$\\ge$"),
                _ => None,
            };
            match symbol {
                Some(s) => {
                    rewrite_piece(&piece, out);
                    piece.clear();
                    out.push_str(s);
                }
                None => piece.push(ch),
            }
        }
        rewrite_piece(&piece, out);
    };
    let mut out = String::with_capacity(text.len());
    for (i, span) in text.split('$').enumerate() {
        if i > 0 {
            out.push('$');
        }
        if i % 2 == 1 {
            // inside an existing math span: untouched
            out.push_str(span);
            continue;
        }
        let mut rest = span;
        while !rest.is_empty() {
            match rest.find(char::is_whitespace) {
                Some(0) => {
                    let c = rest.chars().next().unwrap();
                    out.push(c);
                    rest = &rest[c.len_utf8()..];
                }
                Some(idx) => {
                    rewrite_token(&rest[..idx], &mut out);
                    rest = &rest[idx..];
                }
                None => {
                    rewrite_token(rest, &mut out);
                    rest = "";
                }
            }
        }
    }
    out
}

/// Spelling pass hook. The default does nothing; a real Vietnamese spell
/// checker can be plugged in without touching the pipeline.
pub trait SpellChecker {
    fn correct(&self, text: &str) -> String;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NoopSpellChecker;

impl SpellChecker for NoopSpellChecker {
    fn correct(&self, text: &str) -> String {
        text.to_string()
    }
}

/// Clean, spell-correct, segment, and formula-normalize one raw document
/// into context records.
pub fn preprocess_document(
    raw: &str,
    max_chars: usize,
    spell: &dyn SpellChecker,
) -> Result<Vec<ContextRecord>> {
    let cleaned = clean_text(raw);
    let corrected = spell.correct(&cleaned);
    let segments = segment(&corrected, max_chars)?;
    Ok(segments
        .into_iter()
        .enumerate()
        .map(|(i, text)| ContextRecord {
            id: format!("ctx-{i:04}"),
            text: normalize_formula(&text),
        })
        .collect())
}

/// A rendered generation prompt, traceable to its source context.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    pub context_id: String,
    pub context: String,
    pub text: String,
}

/// Expand a generation template over the contexts, `k_per_context` prompts
/// each. Deterministic; prompt ids are `<context_id>#<j>`.
pub fn craft_prompts(
    contexts: &[ContextRecord],
    template: &InstructionTemplate,
    k_per_context: usize,
) -> Result<Vec<Prompt>> {
    if k_per_context < 1 {
        return Err(Error::Config("k_per_context must be >= 1".into()));
    }
    template.validate_for_generation()?;
    let mut out = Vec::with_capacity(contexts.len() * k_per_context);
    for ctx in contexts {
        let text = template.body.replace("{context}", &ctx.text);
        for j in 0..k_per_context {
            out.push(Prompt {
                id: format!("{}#{j}", ctx.id),
                context_id: ctx.id.clone(),
                context: ctx.text.clone(),
                text: text.clone(),
            });
        }
    }
    Ok(out)
}

/// Completion-client failure taxonomy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientError {
    Timeout,
    Refusal(String),
    Malformed(String),
}

impl fmt::Display for ClientError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClientError::Timeout => write!(f, "timeout"),
            ClientError::Refusal(msg) => write!(f, "refusal: {msg}"),
            ClientError::Malformed(msg) => write!(f, "malformed: {msg}"),
        }
    }
}

/// Text-completion backend: one prompt in, one response out.
pub trait CompletionClient {
    fn send(&self, prompt: &str, timeout_ms: u64) -> std::result::Result<String, ClientError>;
}

/// Scripted responses for tests and offline runs, consumed in prompt
/// order.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScriptEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub struct MockClient {
    script: std::cell::RefCell<std::collections::VecDeque<MockScriptEntry>>,
}

impl MockClient {
    pub fn new(entries: Vec<MockScriptEntry>) -> Self {
        MockClient {
            script: std::cell::RefCell::new(entries.into()),
        }
    }

    /// Load a JSONL fixture: one `{"response": ...}` or `{"error": ...}`
    /// per line.
    pub fn from_fixture(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        let mut entries = Vec::new();
        for (i, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: MockScriptEntry =
                serde_json::from_str(line).map_err(|e| Error::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                })?;
            entries.push(entry);
        }
        Ok(MockClient::new(entries))
    }
}

impl CompletionClient for MockClient {
    fn send(&self, _prompt: &str, _timeout_ms: u64) -> std::result::Result<String, ClientError> {
        let entry = self
            .script
            .borrow_mut()
            .pop_front()
            .ok_or(ClientError::Timeout)?;
        match (entry.response, entry.error.as_deref()) {
            (Some(r), None) => Ok(r),
            (_, Some("timeout")) => Err(ClientError::Timeout),
            (_, Some(other)) if other.starts_with("refusal") => {
                Err(ClientError::Refusal(other.to_string()))
            }
            (_, Some(other)) => Err(ClientError::Malformed(other.to_string())),
            (None, None) => Err(ClientError::Malformed("empty script entry".into())),
        }
    }
}

/// A response the pipeline could not turn into an example. Kept, never
/// silently dropped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuarantineRecord {
    pub prompt_id: String,
    pub reason: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct GenerationOutcome {
    pub examples: Vec<QaExample>,
    pub quarantined: Vec<QuarantineRecord>,
}

/// Per-call settings for candidate generation.
#[derive(Debug, Clone, Copy)]
pub struct ClientPolicy {
    pub timeout_ms: u64,
    pub retries: usize,
}

impl Default for ClientPolicy {
    fn default() -> Self {
        ClientPolicy {
            timeout_ms: 30_000,
            retries: 2,
        }
    }
}

fn parse_qa_response(raw: &str) -> Option<(String, String)> {
    let q_start = raw.find("Q:")?;
    let after_q = &raw[q_start + 2..];
    let a_rel = after_q.find("A:")?;
    let question = after_q[..a_rel].trim();
    let answer = after_q[a_rel + 2..].trim();
    if question.is_empty() || answer.is_empty() {
        return None;
    }
    Some((question.to_string(), answer.to_string()))
}

/// Drive the completion client over the prompts. Timeouts are retried per
/// the policy; anything unparseable lands in the quarantine list and the
/// batch keeps going.
pub fn generate_candidates(
    client: &dyn CompletionClient,
    prompts: &[Prompt],
    policy: ClientPolicy,
) -> GenerationOutcome {
    let mut outcome = GenerationOutcome::default();
    for prompt in prompts {
        let mut attempt = 0;
        let response = loop {
            match client.send(&prompt.text, policy.timeout_ms) {
                Ok(r) => break Ok(r),
                Err(ClientError::Timeout) if attempt < policy.retries => {
                    attempt += 1;
                }
                Err(e) => break Err(e),
            }
        };
        match response {
            Ok(raw) => match parse_qa_response(&raw) {
                Some((question, answer)) => outcome.examples.push(QaExample::generated(
                    prompt.id.clone(),
                    prompt.context.clone(),
                    question,
                    answer,
                )),
                None => outcome.quarantined.push(QuarantineRecord {
                    prompt_id: prompt.id.clone(),
                    reason: "response missing Q:/A: structure".into(),
                    raw_response: Some(raw),
                }),
            },
            Err(e) => outcome.quarantined.push(QuarantineRecord {
                prompt_id: prompt.id.clone(),
                reason: e.to_string(),
                raw_response: None,
            }),
        }
    }
    outcome
}

/// ROUGE-L F1 thresholds for the provisional label, lower-inclusive:
/// `[0.9, 1.0] -> VeryGood`, `[0.75, 0.9) -> Good`, `[0.5, 0.75) -> Medium`,
/// `[0.25, 0.5) -> Bad`, else `VeryBad`. Calibration knobs, not measured
/// constants.
pub const QUALITY_THRESHOLDS: [(f64, QualityLabel); 4] = [
    (0.90, QualityLabel::VeryGood),
    (0.75, QualityLabel::Good),
    (0.50, QualityLabel::Medium),
    (0.25, QualityLabel::Bad),
];

fn label_for(rouge_l_f1: f64) -> QualityLabel {
    for (threshold, label) in QUALITY_THRESHOLDS {
        if rouge_l_f1 >= threshold {
            return label;
        }
    }
    QualityLabel::VeryBad
}

/// Score a generated answer against its reference (the source context
/// span): ROUGE-L F1, BLEU, and the provisional label from the threshold
/// table.
pub fn score_quality(ex: &QaExample, reference: &str) -> Result<(f64, f64, QualityLabel)> {
    if reference.trim().is_empty() {
        return Err(Error::Contract("quality reference must be non-empty".into()));
    }
    let (_, _, rouge) = metrics::rouge_l(&ex.answer, reference);
    let bleu = metrics::bleu(&ex.answer, &[reference], 4)?;
    Ok((rouge, bleu, label_for(rouge)))
}

/// Apply a provisional label unless a human already graded the example.
pub fn label_quality(ex: &mut QaExample, reference: &str) -> Result<()> {
    let human = matches!(
        ex.provenance,
        Provenance::HumanLabeled | Provenance::HumanCorrected
    );
    if human && ex.quality.is_some() {
        return Ok(());
    }
    let (_, _, label) = score_quality(ex, reference)?;
    ex.quality = Some(label);
    Ok(())
}

/// Character-length aggregates for one field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldStats {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

/// Length statistics over context/question/answer, in characters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub context: FieldStats,
    pub question: FieldStats,
    pub answer: FieldStats,
}

fn field_stats(lengths: &mut [f64]) -> FieldStats {
    lengths.sort_by(f64::total_cmp);
    let n = lengths.len();
    let mean = lengths.iter().sum::<f64>() / n as f64;
    // sample standard deviation; a single observation has none
    let std = if n > 1 {
        (lengths.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    // linear interpolation between order statistics
    let quantile = |q: f64| -> f64 {
        let pos = q * (n - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        lengths[lo] + (lengths[hi] - lengths[lo]) * frac
    };
    FieldStats {
        count: n,
        mean,
        std,
        min: lengths[0],
        q25: quantile(0.25),
        median: quantile(0.5),
        q75: quantile(0.75),
        max: lengths[n - 1],
    }
}

/// Character-length aggregates per field; quartiles by linear
/// interpolation, std with the n-1 denominator.
pub fn compute_stats(corpus: &[QaExample]) -> Result<CorpusStats> {
    if corpus.is_empty() {
        return Err(Error::Contract("compute_stats on an empty corpus".into()));
    }
    let mut ctx: Vec<f64> = corpus.iter().map(|e| e.context.chars().count() as f64).collect();
    let mut q: Vec<f64> = corpus.iter().map(|e| e.question.chars().count() as f64).collect();
    let mut a: Vec<f64> = corpus.iter().map(|e| e.answer.chars().count() as f64).collect();
    Ok(CorpusStats {
        context: field_stats(&mut ctx),
        question: field_stats(&mut q),
        answer: field_stats(&mut a),
    })
}

/// Counts and percentages per quality level, ordered best to worst.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QualityReport {
    pub total: usize,
    pub levels: Vec<(QualityLabel, usize, f64)>,
}

/// Per-level counts with percentages rounded to two decimals.
pub fn quality_report(corpus: &[QaExample]) -> Result<QualityReport> {
    let unlabeled: Vec<&str> = corpus
        .iter()
        .filter(|e| e.quality.is_none())
        .map(|e| e.id.as_str())
        .collect();
    if !unlabeled.is_empty() {
        return Err(Error::Input(format!(
            "unlabeled examples: {}",
            unlabeled.join(", ")
        )));
    }
    let total = corpus.len();
    let mut counts: BTreeMap<QualityLabel, usize> = BTreeMap::new();
    for e in corpus {
        *counts.entry(e.quality.expect("checked above")).or_insert(0) += 1;
    }
    let levels = QualityLabel::ALL
        .iter()
        .map(|&label| {
            let count = counts.get(&label).copied().unwrap_or(0);
            let pct = if total == 0 {
                0.0
            } else {
                (10_000.0 * count as f64 / total as f64).round() / 100.0
            };
            (label, count, pct)
        })
        .collect();
    Ok(QualityReport { total, levels })
}

/// Read a JSONL corpus. Malformed lines fail with their line number;
/// duplicate ids are rejected. Blank lines are skipped.
pub fn read_corpus(path: &Path) -> Result<Vec<QaExample>> {
    let raw = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: QaExample = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let ex = ex.nfc();
        if !seen.insert(ex.id.clone()) {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("duplicate example id {}", ex.id),
            });
        }
        out.push(ex);
    }
    Ok(out)
}

/// Write a JSONL corpus atomically, NFC-normalized. Reading it back and
/// writing again is byte-identical.
pub fn write_corpus(corpus: &[QaExample], path: &Path) -> Result<()> {
    let mut out = String::new();
    for ex in corpus {
        let canonical = ex.clone().nfc();
        out.push_str(&serde_json::to_string(&canonical).map_err(|e| Error::Input(e.to_string()))?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())?;
    Ok(())
}

/// Reject examples that may not enter a training set: empty context,
/// question, or answer.
pub fn validate_for_training(corpus: &[QaExample]) -> Result<()> {
    let offenders: Vec<&str> = corpus
        .iter()
        .filter(|e| {
            e.context.trim().is_empty()
                || e.question.trim().is_empty()
                || e.answer.trim().is_empty()
        })
        .map(|e| e.id.as_str())
        .collect();
    if offenders.is_empty() {
        Ok(())
    } else {
        Err(Error::Input(format!(
            "examples with empty fields may not enter a training set: {}",
            offenders.join(", ")
        )))
    }
}
