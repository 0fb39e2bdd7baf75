//! Benchmark loaders, per-benchmark answer schemas and answer normalization.
//!
//! Supported inputs:
//! - MuSR: JSON (array or `{"examples": [...]}`) or JSONL records carrying
//!   `narrative`, `question`, `choices` and an answer index or answer text.
//!   The nested `{context, questions: [...]}` layout of the original release
//!   is accepted too.
//! - MuSiQue-Ans: JSONL with `paragraphs`, `question`, `answer` and
//!   optional `answer_aliases`.
//! - SQuAD 2.0: the official nested JSON with `is_impossible`.
//! - Synthetic: JSON or JSONL records in the crate's own `Example` shape.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::domain::{Benchmark, Example};

/// Lowercase, strip ASCII punctuation, drop the articles a/an/the, split on
/// whitespace. This is the normalization of the official SQuAD scorer.
pub fn normalize_answer(text: &str) -> Vec<String> {
    let lowered: String = text
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    drop_articles(&lowered)
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Blanks every maximal word run equal to an article, which is what
/// `\b(a|an|the)\b` does.
fn drop_articles(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut String| {
        if matches!(word.as_str(), "a" | "an" | "the") {
            out.push(' ');
        } else {
            out.push_str(word);
        }
        word.clear();
    };
    for c in text.chars() {
        if is_word_char(c) {
            word.push(c);
        } else {
            flush(&mut word, &mut out);
            out.push(c);
        }
    }
    flush(&mut word, &mut out);
    out
}

pub fn normalized_string(text: &str) -> String {
    normalize_answer(text).join(" ")
}

/// Normalized phrases that count as "no answer".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoAnswerSet {
    phrases: BTreeSet<String>,
}

impl NoAnswerSet {
    pub fn new<I, S>(phrases: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self {
            phrases: phrases
                .into_iter()
                .map(|p| normalized_string(p.as_ref()))
                .collect(),
        }
    }

    pub fn contains(&self, text: &str) -> bool {
        self.phrases.contains(&normalized_string(text))
    }

    pub fn phrases(&self) -> impl Iterator<Item = &str> {
        self.phrases.iter().map(String::as_str)
    }
}

impl Default for NoAnswerSet {
    fn default() -> Self {
        Self::new([
            "",
            "unanswerable",
            "no answer",
            "none",
            "n/a",
            "not answerable",
        ])
    }
}

/// Membership in the default no-answer set.
pub fn is_no_answer(text: &str) -> bool {
    NoAnswerSet::default().contains(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SchemaKind {
    ChoiceLabel,
    FreeSpan,
    SpanOrNoanswer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSchema {
    pub kind: SchemaKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
}

impl AnswerSchema {
    pub fn for_example(example: &Example) -> Self {
        match (example.benchmark, &example.choices) {
            (Benchmark::Musr, choices) | (Benchmark::Synthetic, choices @ Some(_)) => Self {
                kind: SchemaKind::ChoiceLabel,
                choices: choices.clone(),
            },
            (Benchmark::Musique, _) => Self {
                kind: SchemaKind::FreeSpan,
                choices: None,
            },
            (Benchmark::Squad2, _) | (Benchmark::Synthetic, None) => Self {
                kind: SchemaKind::SpanOrNoanswer,
                choices: None,
            },
        }
    }

    /// Plain-language format requirements handed to the CSO and CCO.
    pub fn describe(&self) -> String {
        match self.kind {
            SchemaKind::ChoiceLabel => {
                let listed = self
                    .choices
                    .as_deref()
                    .unwrap_or_default()
                    .iter()
                    .enumerate()
                    .map(|(i, c)| format!("{}) {}", choice_label(i), c))
                    .collect::<Vec<_>>()
                    .join("; ");
                format!(
                    "The answer must be exactly one of the listed choices, given as the choice text or its letter: {listed}. Abstaining is not allowed."
                )
            }
            SchemaKind::FreeSpan => {
                "The answer must be a short, non-empty text span. Abstaining is not allowed."
                    .to_string()
            }
            SchemaKind::SpanOrNoanswer => "The answer must be a short text span taken from the context, or set abstain to true when the context does not contain the answer.".to_string(),
        }
    }
}

/// Letter label for the choice at `index`: A, B, ..., Z, AA, AB, ...
pub fn choice_label(index: usize) -> String {
    let mut n = index;
    let mut label = Vec::new();
    loop {
        label.push(b'A' + (n % 26) as u8);
        if n < 26 {
            break;
        }
        n = n / 26 - 1;
    }
    label.reverse();
    String::from_utf8(label).expect("ascii")
}

/// Index of the choice an answer names, by case-insensitive text or by its
/// letter label ("B", "(B)", "B)", "B.").
pub fn resolve_choice(answer: &str, choices: &[String]) -> Option<usize> {
    let trimmed = answer.trim();
    if let Some(i) = choices
        .iter()
        .position(|c| c.trim().to_lowercase() == trimmed.to_lowercase())
    {
        return Some(i);
    }
    let label = trimmed
        .trim_start_matches('(')
        .trim_end_matches(['.', ')'])
        .trim();
    if label.is_empty() || !label.chars().all(|c| c.is_ascii_alphabetic()) {
        return None;
    }
    let label = label.to_ascii_uppercase();
    (0..choices.len()).find(|&i| choice_label(i) == label)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemaViolation {
    #[error("empty span")]
    EmptySpan,
    #[error("answer `{0}` is not one of the choices")]
    NotAChoice(String),
    #[error("abstaining is not allowed for this benchmark")]
    AbstainNotAllowed,
    #[error("schema has no choices")]
    MissingChoices,
}

pub fn validate_against_schema(
    answer: &str,
    abstain: bool,
    schema: &AnswerSchema,
) -> Result<(), SchemaViolation> {
    match schema.kind {
        SchemaKind::ChoiceLabel => {
            if abstain {
                return Err(SchemaViolation::AbstainNotAllowed);
            }
            let choices = schema
                .choices
                .as_deref()
                .ok_or(SchemaViolation::MissingChoices)?;
            resolve_choice(answer, choices)
                .map(|_| ())
                .ok_or_else(|| SchemaViolation::NotAChoice(answer.to_string()))
        }
        SchemaKind::FreeSpan => {
            if abstain {
                return Err(SchemaViolation::AbstainNotAllowed);
            }
            if normalize_answer(answer).is_empty() {
                Err(SchemaViolation::EmptySpan)
            } else {
                Ok(())
            }
        }
        SchemaKind::SpanOrNoanswer => {
            if abstain || !normalize_answer(answer).is_empty() {
                Ok(())
            } else {
                Err(SchemaViolation::EmptySpan)
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error at record {index}: {reason}")]
    Format { index: usize, reason: String },
}

fn format_err(index: usize, reason: impl Into<String>) -> LoadError {
    LoadError::Format {
        index,
        reason: reason.into(),
    }
}

/// Loads a whole benchmark file. Any malformed record fails the load.
pub fn load_benchmark(kind: Benchmark, path: &Path) -> Result<Vec<Example>, LoadError> {
    let text = fs::read_to_string(path).map_err(|source| LoadError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_benchmark(kind, &text)
}

pub fn parse_benchmark(kind: Benchmark, text: &str) -> Result<Vec<Example>, LoadError> {
    if text.trim().is_empty() {
        return Err(format_err(0, "empty input"));
    }
    let examples = match kind {
        Benchmark::Squad2 => parse_squad(text)?,
        Benchmark::Musique => parse_records(text)?
            .iter()
            .enumerate()
            .map(|(i, r)| musique_record(i, r))
            .collect::<Result<_, _>>()?,
        Benchmark::Musr => parse_musr(text)?,
        Benchmark::Synthetic => parse_records(text)?
            .into_iter()
            .enumerate()
            .map(|(i, r)| synthetic_record(i, r))
            .collect::<Result<_, _>>()?,
    };
    if examples.is_empty() {
        return Err(format_err(0, "no records"));
    }
    for (i, ex) in examples.iter().enumerate() {
        ex.validate().map_err(|e| format_err(i, e.to_string()))?;
    }
    Ok(examples)
}

/// A JSON array, an object wrapping one (`data`/`examples`), or JSONL.
fn parse_records(text: &str) -> Result<Vec<Value>, LoadError> {
    if let Ok(value) = serde_json::from_str::<Value>(text) {
        return match value {
            Value::Array(items) => Ok(items),
            Value::Object(mut map) => {
                for key in ["examples", "data"] {
                    if let Some(Value::Array(items)) = map.remove(key) {
                        return Ok(items);
                    }
                }
                Ok(vec![Value::Object(map)])
            }
            _ => Err(format_err(0, "expected a JSON array or object")),
        };
    }
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| serde_json::from_str(line).map_err(|e| format_err(i, e.to_string())))
        .collect()
}

fn str_field<'a>(record: &'a Value, keys: &[&str]) -> Option<&'a str> {
    keys.iter().find_map(|k| record.get(*k).and_then(Value::as_str))
}

fn require_str<'a>(record: &'a Value, index: usize, keys: &[&str]) -> Result<&'a str, LoadError> {
    str_field(record, keys).ok_or_else(|| format_err(index, format!("missing `{}`", keys[0])))
}

fn musique_record(index: usize, record: &Value) -> Result<Example, LoadError> {
    let id = require_str(record, index, &["id"])?;
    let question = require_str(record, index, &["question"])?;
    if record.get("answerable").and_then(Value::as_bool) == Some(false) {
        return Err(format_err(
            index,
            "unanswerable MuSiQue-Full record; only MuSiQue-Ans is supported",
        ));
    }
    let paragraphs = record
        .get("paragraphs")
        .and_then(Value::as_array)
        .ok_or_else(|| format_err(index, "missing `paragraphs`"))?;
    let context = paragraphs
        .iter()
        .map(|p| {
            let title = str_field(p, &["title"]).unwrap_or_default();
            let body = str_field(p, &["paragraph_text", "text"]).unwrap_or_default();
            if title.is_empty() {
                body.to_string()
            } else {
                format!("{title}: {body}")
            }
        })
        .collect::<Vec<_>>()
        .join("\n\n");
    let mut gold = vec![require_str(record, index, &["answer"])?.to_string()];
    if let Some(aliases) = record.get("answer_aliases").and_then(Value::as_array) {
        for alias in aliases.iter().filter_map(Value::as_str) {
            if !gold.iter().any(|g| g == alias) {
                gold.push(alias.to_string());
            }
        }
    }
    Ok(Example {
        id: id.to_string(),
        benchmark: Benchmark::Musique,
        context,
        question: question.to_string(),
        choices: None,
        gold_answers: gold,
        answerable: true,
    })
}

fn parse_squad(text: &str) -> Result<Vec<Example>, LoadError> {
    let root: Value = serde_json::from_str(text).map_err(|e| format_err(0, e.to_string()))?;
    let articles = root
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| format_err(0, "missing `data` array"))?;
    let mut examples = Vec::new();
    for article in articles {
        let paragraphs = article
            .get("paragraphs")
            .and_then(Value::as_array)
            .ok_or_else(|| format_err(examples.len(), "article without `paragraphs`"))?;
        for paragraph in paragraphs {
            let context = require_str(paragraph, examples.len(), &["context"])?;
            let qas = paragraph
                .get("qas")
                .and_then(Value::as_array)
                .ok_or_else(|| format_err(examples.len(), "paragraph without `qas`"))?;
            for qa in qas {
                let index = examples.len();
                let id = require_str(qa, index, &["id"])?;
                let question = require_str(qa, index, &["question"])?;
                let impossible = qa
                    .get("is_impossible")
                    .and_then(Value::as_bool)
                    .unwrap_or(false);
                let mut gold: Vec<String> = Vec::new();
                if !impossible {
                    let answers = qa
                        .get("answers")
                        .and_then(Value::as_array)
                        .ok_or_else(|| format_err(index, "answerable question without `answers`"))?;
                    for a in answers {
                        let t = require_str(a, index, &["text"])?;
                        if !gold.iter().any(|g| g == t) {
                            gold.push(t.to_string());
                        }
                    }
                }
                examples.push(Example {
                    id: id.to_string(),
                    benchmark: Benchmark::Squad2,
                    context: context.to_string(),
                    question: question.to_string(),
                    choices: None,
                    gold_answers: gold,
                    answerable: !impossible,
                });
            }
        }
    }
    Ok(examples)
}

fn parse_musr(text: &str) -> Result<Vec<Example>, LoadError> {
    let mut examples = Vec::new();
    for (i, record) in parse_records(text)?.iter().enumerate() {
        if let Some(questions) = record.get("questions").and_then(Value::as_array) {
            let context = require_str(record, i, &["context", "narrative"])?;
            for (j, q) in questions.iter().enumerate() {
                let fallback_id = format!("musr-{i}-{j}");
                examples.push(musr_question(examples.len(), q, context, fallback_id)?);
            }
        } else {
            let context = require_str(record, i, &["narrative", "context"])?;
            let fallback_id = format!("musr-{i}");
            examples.push(musr_question(examples.len(), record, context, fallback_id)?);
        }
    }
    Ok(examples)
}

fn musr_question(
    index: usize,
    record: &Value,
    context: &str,
    fallback_id: String,
) -> Result<Example, LoadError> {
    let question = require_str(record, index, &["question"])?;
    let choices = match record.get("choices") {
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| {
                v.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| format_err(index, "non-string choice"))
            })
            .collect::<Result<Vec<_>, _>>()?,
        Some(Value::String(repr)) => {
            parse_list_literal(repr).ok_or_else(|| format_err(index, "unreadable `choices`"))?
        }
        _ => return Err(format_err(index, "missing `choices`")),
    };
    let answer_index = ["answer_index", "answer"]
        .iter()
        .find_map(|k| record.get(*k).and_then(Value::as_u64));
    let gold = match answer_index {
        Some(i) => choices
            .get(i as usize)
            .cloned()
            .ok_or_else(|| format_err(index, format!("answer index {i} out of range")))?,
        None => require_str(record, index, &["answer_choice", "answer"])?.to_string(),
    };
    let id = str_field(record, &["id"])
        .map(str::to_string)
        .unwrap_or(fallback_id);
    Ok(Example {
        id,
        benchmark: Benchmark::Musr,
        context: context.to_string(),
        question: question.to_string(),
        choices: Some(choices),
        gold_answers: vec![gold],
        answerable: true,
    })
}

/// Reads a Python list-of-strings literal such as `['a', "b's"]`.
fn parse_list_literal(repr: &str) -> Option<Vec<String>> {
    let inner = repr.trim().strip_prefix('[')?.strip_suffix(']')?;
    let mut items = Vec::new();
    let mut chars = inner.chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace() || *c == ',') {
            chars.next();
        }
        let Some(quote) = chars.next() else {
            return Some(items);
        };
        if quote != '\'' && quote != '"' {
            return None;
        }
        let mut item = String::new();
        loop {
            match chars.next()? {
                '\\' => item.push(chars.next()?),
                c if c == quote => break,
                c => item.push(c),
            }
        }
        items.push(item);
    }
}

fn synthetic_record(index: usize, mut record: Value) -> Result<Example, LoadError> {
    if let Value::Object(map) = &mut record {
        map.entry("benchmark")
            .or_insert_with(|| Value::String("SYNTHETIC".into()));
    }
    serde_json::from_value(record).map_err(|e| format_err(index, e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub total: usize,
    pub answerable: usize,
    pub unanswerable: usize,
}

pub fn summarize(examples: &[Example]) -> DatasetSummary {
    let answerable = examples.iter().filter(|e| e.answerable).count();
    DatasetSummary {
        total: examples.len(),
        answerable,
        unanswerable: examples.len() - answerable,
    }
}

/// Seeded uniform sample without replacement; keeps dataset order. `None`
/// or a limit at least the dataset size returns everything.
pub fn sample(examples: &[Example], limit: Option<usize>, seed: u64) -> Vec<Example> {
    match limit {
        Some(limit) if limit < examples.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = rand::seq::index::sample(&mut rng, examples.len(), limit).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| examples[i].clone()).collect()
        }
        _ => examples.to_vec(),
    }
}
