//! Evaluation formulas for per-example scores and run-level aggregates.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::{normalize_answer, resolve_choice, NoAnswerSet};
use crate::domain::{ExecutionConfig, Example, SkillProfile, TokenLedger};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("metric over an empty set")]
    EmptySet,
    #[error("division by zero")]
    DivisionByZero,
}

/// Run scores `s_1..s_K`, K >= 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries(Vec<f64>);

impl ScoreSeries {
    pub fn new(values: Vec<f64>) -> Result<Self, MetricsError> {
        if values.is_empty() {
            return Err(MetricsError::EmptySet);
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Whether `answer` names the gold choice (case-insensitive text or letter).
pub fn choice_match(answer: &str, example: &Example) -> bool {
    let predicted = match &example.choices {
        Some(choices) => match resolve_choice(answer, choices) {
            Some(i) => choices[i].as_str(),
            None => return false,
        },
        None => answer,
    };
    let predicted = predicted.trim().to_lowercase();
    example
        .gold_answers
        .iter()
        .any(|g| g.trim().to_lowercase() == predicted)
}

/// Fraction of exact (case-insensitive label) matches.
pub fn accuracy<'a, I>(predictions: I) -> Result<f64, MetricsError>
where
    I: IntoIterator<Item = (&'a str, &'a Example)>,
{
    let (mut hits, mut n) = (0usize, 0usize);
    for (answer, example) in predictions {
        n += 1;
        if choice_match(answer, example) {
            hits += 1;
        }
    }
    if n == 0 {
        return Err(MetricsError::EmptySet);
    }
    Ok(hits as f64 / n as f64)
}

fn token_f1(prediction: &[String], gold: &[String]) -> f64 {
    if prediction.is_empty() || gold.is_empty() {
        return if prediction == gold { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in prediction {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / prediction.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Token-level F1 with multiset overlap, maximised over gold references.
/// Unanswerable examples score 1 exactly when the system abstained.
pub fn f1_example(prediction: &str, abstained: bool, golds: &[String], answerable: bool) -> f64 {
    f1_example_with(prediction, abstained, golds, answerable, &NoAnswerSet::default())
}

pub fn f1_example_with(
    prediction: &str,
    abstained: bool,
    golds: &[String],
    answerable: bool,
    no_answer: &NoAnswerSet,
) -> f64 {
    if !answerable {
        return if abstained || no_answer.contains(prediction) {
            1.0
        } else {
            0.0
        };
    }
    let predicted = if abstained {
        Vec::new()
    } else {
        normalize_answer(prediction)
    };
    golds
        .iter()
        .map(|g| token_f1(&predicted, &normalize_answer(g)))
        .fold(0.0, f64::max)
}

/// Per-example score in [0, 1]: label match for multiple-choice examples,
/// token F1 otherwise.
pub fn score_example(example: &Example, answer: &str, abstained: bool) -> f64 {
    if example.choices.is_some() {
        if abstained || !choice_match(answer, example) {
            0.0
        } else {
            1.0
        }
    } else {
        f1_example(answer, abstained, &example.gold_answers, example.answerable)
    }
}

pub fn avg_token(ledger: &TokenLedger) -> Result<f64, MetricsError> {
    if ledger.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    Ok(ledger.total() as f64 / ledger.len() as f64)
}

/// `(s_hier - s_flat) / s_flat * 100`.
pub fn improvement_pct(s_hier: f64, s_flat: f64) -> Result<f64, MetricsError> {
    if s_flat == 0.0 {
        return Err(MetricsError::DivisionByZero);
    }
    Ok((s_hier - s_flat) / s_flat * 100.0)
}

/// `(t_flat - t_hier) / t_flat * 100`.
pub fn token_reduction_pct(t_flat: f64, t_hier: f64) -> Result<f64, MetricsError> {
    if t_flat == 0.0 {
        return Err(MetricsError::DivisionByZero);
    }
    Ok((t_flat - t_hier) / t_flat * 100.0)
}

/// Mean and sample standard deviation (K - 1 denominator). The deviation
/// is `None` for a single run.
pub fn mean_std(series: &ScoreSeries) -> (f64, Option<f64>) {
    let values = series.values();
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    if values.len() < 2 {
        return (mean, None);
    }
    let ss: f64 = values.iter().map(|s| (s - mean).powi(2)).sum();
    (mean, Some((ss / (k - 1.0)).sqrt()))
}

/// Percentage of unanswerable-example outputs that fall in the no-answer set.
pub fn abs_rate<'a, I>(outputs: I, no_answer: &NoAnswerSet) -> Result<f64, MetricsError>
where
    I: IntoIterator<Item = &'a str>,
{
    let (mut abstained, mut n) = (0usize, 0usize);
    for output in outputs {
        n += 1;
        if no_answer.contains(output) {
            abstained += 1;
        }
    }
    if n == 0 {
        return Err(MetricsError::EmptySet);
    }
    Ok(abstained as f64 / n as f64 * 100.0)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SkillDistribution {
    pub drafter_counts: BTreeMap<SkillProfile, usize>,
    pub specialist_counts: BTreeMap<SkillProfile, usize>,
    /// Shares in percent.
    pub drafter_share: BTreeMap<SkillProfile, f64>,
    pub specialist_share: BTreeMap<SkillProfile, f64>,
    /// No config assigned a specialist.
    pub specialist_absent: bool,
}

fn shares(counts: &BTreeMap<SkillProfile, usize>) -> BTreeMap<SkillProfile, f64> {
    let total: usize = counts.values().sum();
    counts
        .iter()
        .map(|(skill, c)| (*skill, *c as f64 / total as f64 * 100.0))
        .collect()
}

/// Skill selection shares over enforced configs.
pub fn skill_distribution<'a, I>(configs: I) -> Result<SkillDistribution, MetricsError>
where
    I: IntoIterator<Item = &'a ExecutionConfig>,
{
    let mut drafter_counts = BTreeMap::new();
    let mut specialist_counts = BTreeMap::new();
    for config in configs {
        *drafter_counts.entry(config.drafter_skill).or_insert(0) += 1;
        if let Some(skill) = config.specialist_skill {
            *specialist_counts.entry(skill).or_insert(0) += 1;
        }
    }
    skill_distribution_from_counts(drafter_counts, specialist_counts)
}

pub fn skill_distribution_from_counts(
    drafter_counts: BTreeMap<SkillProfile, usize>,
    specialist_counts: BTreeMap<SkillProfile, usize>,
) -> Result<SkillDistribution, MetricsError> {
    if drafter_counts.values().sum::<usize>() == 0 {
        return Err(MetricsError::EmptySet);
    }
    Ok(SkillDistribution {
        drafter_share: shares(&drafter_counts),
        specialist_share: shares(&specialist_counts),
        specialist_absent: specialist_counts.is_empty(),
        drafter_counts,
        specialist_counts,
    })
}

/// Formats with `places` decimals, rounding half away from zero on the
/// shortest decimal representation of `x` (so 2.675 becomes "2.68").
pub fn format_half_up(x: f64, places: usize) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let repr = format!("{}", x.abs());
    let (int_part, frac_part) = repr.split_once('.').unwrap_or((&repr, ""));
    let mut digits: Vec<u8> = int_part
        .bytes()
        .chain(frac_part.bytes().chain(std::iter::repeat(b'0')).take(places))
        .map(|b| b - b'0')
        .collect();
    if frac_part.as_bytes().get(places).is_some_and(|d| *d >= b'5') {
        let mut i = digits.len();
        loop {
            if i == 0 {
                digits.insert(0, 1);
                break;
            }
            i -= 1;
            if digits[i] == 9 {
                digits[i] = 0;
            } else {
                digits[i] += 1;
                break;
            }
        }
    }
    let split = digits.len() - places;
    let int_str: String = digits[..split].iter().map(|d| (d + b'0') as char).collect();
    let frac_str: String = digits[split..].iter().map(|d| (d + b'0') as char).collect();
    let negative = x < 0.0 && digits.iter().any(|d| *d != 0);
    let sign = if negative { "-" } else { "" };
    if places == 0 {
        format!("{sign}{int_str}")
    } else {
        format!("{sign}{int_str}.{frac_str}")
    }
}

/// Display rounding: two decimals, half up.
pub fn round2(x: f64) -> f64 {
    format_half_up(x, 2).parse().unwrap_or(x)
}
