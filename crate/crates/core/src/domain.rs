//! Value types shared by every other module.
//!
//! Everything here is a plain value object. Behaviour is limited to
//! validation and a few accessors.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::PolicyTable;

/// Upper-cases and maps spaces/hyphens to underscores so that "light mas",
/// "Light-MAS" and "LIGHT_MAS" all compare equal.
fn canonical_token(s: &str) -> String {
    s.trim()
        .chars()
        .map(|c| match c {
            ' ' | '-' => '_',
            c => c.to_ascii_uppercase(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown {kind} `{value}`")]
pub struct ParseEnumError {
    pub kind: &'static str,
    pub value: String,
}

macro_rules! token_enum {
    ($ty:ident, $kind:literal, { $($variant:ident => $name:literal $(| $alias:literal)*),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self {
                    $($ty::$variant => $name),+
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = ParseEnumError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match canonical_token(s).as_str() {
                    $($name $(| $alias)* => Ok($ty::$variant),)+
                    _ => Err(ParseEnumError { kind: $kind, value: s.to_string() }),
                }
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Benchmark {
    Musr,
    Musique,
    Squad2,
    /// Hand-built data with known gold behaviour, used for hermetic runs.
    Synthetic,
}

token_enum!(Benchmark, "benchmark", {
    Musr => "MUSR",
    Musique => "MUSIQUE" | "MUSIQUE_ANS",
    Squad2 => "SQUAD2" | "SQUAD_2" | "SQUAD_2.0" | "SQUAD2.0" | "SQUAD_V2",
    Synthetic => "SYNTHETIC",
});

/// One benchmark instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub benchmark: Benchmark,
    pub context: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
    #[serde(default)]
    pub gold_answers: Vec<String>,
    pub answerable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExampleError {
    #[error("example id is empty")]
    EmptyId,
    #[error("{0} example needs at least two choices")]
    TooFewChoices(Benchmark),
    #[error("gold answer `{0}` is not one of the choices")]
    GoldNotInChoices(String),
    #[error("{0} examples do not carry answer choices")]
    UnexpectedChoices(Benchmark),
    #[error("answerable example has no gold answer")]
    MissingGold,
    #[error("unanswerable example must have no gold answers")]
    UnanswerableWithGold,
    #[error("{0} examples must be answerable")]
    MustBeAnswerable(Benchmark),
}

impl Example {
    pub fn validate(&self) -> Result<(), ExampleError> {
        if self.id.is_empty() {
            return Err(ExampleError::EmptyId);
        }
        match self.benchmark {
            Benchmark::Musr => {
                if !self.answerable {
                    return Err(ExampleError::MustBeAnswerable(self.benchmark));
                }
                self.check_choices(true)?;
            }
            Benchmark::Musique => {
                if !self.answerable {
                    return Err(ExampleError::MustBeAnswerable(self.benchmark));
                }
                if self.choices.is_some() {
                    return Err(ExampleError::UnexpectedChoices(self.benchmark));
                }
            }
            Benchmark::Squad2 => {
                if self.choices.is_some() {
                    return Err(ExampleError::UnexpectedChoices(self.benchmark));
                }
            }
            Benchmark::Synthetic => self.check_choices(false)?,
        }
        match (self.answerable, self.gold_answers.is_empty()) {
            (true, true) => Err(ExampleError::MissingGold),
            (false, false) => Err(ExampleError::UnanswerableWithGold),
            _ => Ok(()),
        }
    }

    fn check_choices(&self, required: bool) -> Result<(), ExampleError> {
        let Some(choices) = &self.choices else {
            return if required {
                Err(ExampleError::TooFewChoices(self.benchmark))
            } else {
                Ok(())
            };
        };
        if choices.len() < 2 {
            return Err(ExampleError::TooFewChoices(self.benchmark));
        }
        for gold in &self.gold_answers {
            if !choices.iter().any(|c| c == gold) {
                return Err(ExampleError::GoldNotInChoices(gold.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AgentRole {
    Ceo,
    Cto,
    Coo,
    Drafter,
    Reviewer,
    Specialist,
    Cso,
    /// Validates output structure only; never contributes task content.
    Cco,
}

token_enum!(AgentRole, "agent role", {
    Ceo => "CEO",
    Cto => "CTO",
    Coo => "COO",
    Drafter => "DRAFTER",
    Reviewer => "REVIEWER",
    Specialist => "SPECIALIST",
    Cso => "CSO",
    Cco => "CCO",
});

impl AgentRole {
    pub const ALL: [AgentRole; 8] = [
        AgentRole::Ceo,
        AgentRole::Cto,
        AgentRole::Coo,
        AgentRole::Drafter,
        AgentRole::Reviewer,
        AgentRole::Specialist,
        AgentRole::Cso,
        AgentRole::Cco,
    ];

    /// Roles that are instantiated from the skill-based worker pool.
    pub fn is_worker(self) -> bool {
        matches!(self, AgentRole::Drafter | AgentRole::Specialist)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SkillProfile {
    Technical,
    Quantitative,
    Reasoning,
    Domain,
    Communications,
    Data,
}

token_enum!(SkillProfile, "skill profile", {
    Technical => "TECHNICAL",
    Quantitative => "QUANTITATIVE",
    Reasoning => "REASONING",
    Domain => "DOMAIN",
    Communications => "COMMUNICATIONS" | "COMMUNICATION",
    Data => "DATA",
});

impl SkillProfile {
    pub const ALL: [SkillProfile; 6] = [
        SkillProfile::Technical,
        SkillProfile::Quantitative,
        SkillProfile::Reasoning,
        SkillProfile::Domain,
        SkillProfile::Communications,
        SkillProfile::Data,
    ];
}

/// Coordination depth of the execution layer. Ordered shallow to deep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExecutionMode {
    Direct,
    LightMas,
    FullMas,
}

token_enum!(ExecutionMode, "execution mode", {
    Direct => "DIRECT",
    LightMas => "LIGHT_MAS" | "LIGHTMAS" | "LIGHT",
    FullMas => "FULL_MAS" | "FULLMAS" | "FULL",
});

impl ExecutionMode {
    pub const ALL: [ExecutionMode; 3] = [
        ExecutionMode::Direct,
        ExecutionMode::LightMas,
        ExecutionMode::FullMas,
    ];

    pub fn max_rounds(self) -> u32 {
        match self {
            ExecutionMode::Direct => 1,
            ExecutionMode::LightMas => 3,
            ExecutionMode::FullMas => 5,
        }
    }
}

/// Round cap of the flat framework.
pub const FLAT_MAX_ROUNDS: u32 = 3;
/// Round cap of the governance layer.
pub const GOVERNANCE_MAX_ROUNDS: u32 = 3;
/// CSO attempts in the compliance layer (first answer plus one repair).
pub const COMPLIANCE_MAX_ATTEMPTS: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExecutionPolicy {
    Strict,
    Balance,
    Nocap,
    Auto,
}

token_enum!(ExecutionPolicy, "execution policy", {
    Strict => "STRICT",
    Balance => "BALANCE" | "BALANCED",
    Nocap => "NOCAP" | "NO_CAP",
    Auto => "AUTO",
});

impl ExecutionPolicy {
    pub const ALL: [ExecutionPolicy; 4] = [
        ExecutionPolicy::Strict,
        ExecutionPolicy::Balance,
        ExecutionPolicy::Nocap,
        ExecutionPolicy::Auto,
    ];
    /// Profiles AUTO may delegate to.
    pub const CONCRETE: [ExecutionPolicy; 3] = [
        ExecutionPolicy::Strict,
        ExecutionPolicy::Balance,
        ExecutionPolicy::Nocap,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Structure {
    Baseline,
    Flat,
    Hierarchical,
}

token_enum!(Structure, "structure", {
    Baseline => "BASELINE" | "SINGLE",
    Flat => "FLAT",
    Hierarchical => "HIERARCHICAL" | "HIER",
});

/// The governance layer's decision for one example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionConfig {
    pub mode: ExecutionMode,
    pub drafter_skill: SkillProfile,
    #[serde(default)]
    pub specialist_skill: Option<SkillProfile>,
    pub round_cap: u32,
    #[serde(default)]
    pub token_budget: Option<u64>,
    #[serde(default)]
    pub rationale: String,
    /// Concrete policy profile the config was clamped under. Under AUTO this
    /// is the delegate the governance layer picked.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<ExecutionPolicy>,
}

impl ExecutionConfig {
    /// Config with the mode's table round cap and no specialist or budget.
    pub fn new(mode: ExecutionMode, drafter_skill: SkillProfile) -> Self {
        Self {
            mode,
            drafter_skill,
            specialist_skill: None,
            round_cap: mode.max_rounds(),
            token_budget: None,
            rationale: String::new(),
            profile: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigViolation {
    #[error("round_cap must be positive")]
    ZeroRoundCap,
    #[error("round_cap exceeds max_rounds({mode})={max}")]
    RoundCapExceedsMode { mode: ExecutionMode, cap: u32, max: u32 },
    #[error("specialist requires FULL_MAS")]
    SpecialistRequiresFullMas,
    #[error("mode {mode} not allowed under {policy}")]
    ModeNotAllowed { mode: ExecutionMode, policy: ExecutionPolicy },
    #[error("token_budget required under {0}")]
    MissingBudget(ExecutionPolicy),
    #[error("token_budget must be absent under {0}")]
    UnexpectedBudget(ExecutionPolicy),
    #[error("token_budget must be positive")]
    ZeroBudget,
}

/// Checks `config` against its own invariants and the default policy table.
/// An empty list means the config is valid.
pub fn validate_execution_config(
    config: &ExecutionConfig,
    policy: ExecutionPolicy,
) -> Vec<ConfigViolation> {
    validate_execution_config_with(config, policy, &PolicyTable::default())
}

pub fn validate_execution_config_with(
    config: &ExecutionConfig,
    policy: ExecutionPolicy,
    table: &PolicyTable,
) -> Vec<ConfigViolation> {
    let mut violations = Vec::new();
    if config.round_cap == 0 {
        violations.push(ConfigViolation::ZeroRoundCap);
    }
    let max = config.mode.max_rounds();
    if config.round_cap > max {
        violations.push(ConfigViolation::RoundCapExceedsMode {
            mode: config.mode,
            cap: config.round_cap,
            max,
        });
    }
    if config.specialist_skill.is_some() && config.mode != ExecutionMode::FullMas {
        violations.push(ConfigViolation::SpecialistRequiresFullMas);
    }
    if !table.resolve(policy).allowed_modes.contains(&config.mode) {
        violations.push(ConfigViolation::ModeNotAllowed {
            mode: config.mode,
            policy,
        });
    }
    // Under AUTO the budget rule follows whichever profile was delegated to.
    let effective = match policy {
        ExecutionPolicy::Auto => config.profile.filter(|p| *p != ExecutionPolicy::Auto),
        p => Some(p),
    };
    if let Some(effective) = effective {
        let expects_budget = table.resolve(effective).token_budget.is_some();
        match (expects_budget, config.token_budget) {
            (true, None) => violations.push(ConfigViolation::MissingBudget(effective)),
            (false, Some(_)) => violations.push(ConfigViolation::UnexpectedBudget(effective)),
            _ => {}
        }
    }
    if config.token_budget == Some(0) {
        violations.push(ConfigViolation::ZeroBudget);
    }
    violations
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Layer {
    A,
    B,
    C,
    #[serde(rename = "FLAT")]
    Flat,
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layer::A => "A",
            Layer::B => "B",
            Layer::C => "C",
            Layer::Flat => "FLAT",
        })
    }
}

/// Where a message's token counts came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum UsageSource {
    /// Reported by the provider (or fixed by a scripted scenario).
    #[default]
    Provider,
    /// Whitespace-token fallback count.
    Estimated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: AgentRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skill: Option<SkillProfile>,
    pub layer: Layer,
    pub round: u32,
    pub content: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    #[serde(default)]
    pub usage_source: UsageSource,
}

impl Message {
    pub fn total_tokens(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TranscriptError {
    #[error("message {index}: round {round} precedes round {previous} in layer {layer}")]
    RoundRegressed {
        index: usize,
        layer: Layer,
        round: u32,
        previous: u32,
    },
    #[error("message {index}: layer {layer} appears after layer {after}")]
    LayerOrder { index: usize, layer: Layer, after: Layer },
    #[error("message {index}: round must be at least 1")]
    ZeroRound { index: usize },
}

/// Ordered agent messages for one example; the unit of audit.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub example_id: String,
    pub messages: Vec<Message>,
}

impl Transcript {
    pub fn new(example_id: impl Into<String>) -> Self {
        Self {
            example_id: example_id.into(),
            messages: Vec::new(),
        }
    }

    pub fn push(&mut self, message: Message) {
        self.messages.push(message);
    }

    pub fn extend(&mut self, other: Transcript) {
        self.messages.extend(other.messages);
    }

    pub fn ledger_total(&self) -> u64 {
        ledger_total(self)
    }

    pub fn layer_total(&self, layer: Layer) -> u64 {
        self.messages
            .iter()
            .filter(|m| m.layer == layer)
            .map(Message::total_tokens)
            .sum()
    }

    /// Highest round number seen in `layer`, 0 if the layer is absent.
    pub fn rounds(&self, layer: Layer) -> u32 {
        self.messages
            .iter()
            .filter(|m| m.layer == layer)
            .map(|m| m.round)
            .max()
            .unwrap_or(0)
    }

    pub fn calls(&self, layer: Layer) -> usize {
        self.messages.iter().filter(|m| m.layer == layer).count()
    }

    pub fn calls_by(&self, role: AgentRole) -> usize {
        self.messages.iter().filter(|m| m.role == role).count()
    }

    /// Rounds never decrease within a layer, and layers appear in the order
    /// A, B, C (flat messages are unconstrained relative to each other).
    pub fn check_order(&self) -> Result<(), TranscriptError> {
        let mut last_round: BTreeMap<Layer, u32> = BTreeMap::new();
        let mut closed: BTreeSet<Layer> = BTreeSet::new();
        let mut current: Option<Layer> = None;
        for (index, m) in self.messages.iter().enumerate() {
            if m.round == 0 {
                return Err(TranscriptError::ZeroRound { index });
            }
            if current != Some(m.layer) {
                if let Some(prev) = current {
                    closed.insert(prev);
                    if prev != Layer::Flat && m.layer != Layer::Flat && m.layer < prev {
                        return Err(TranscriptError::LayerOrder {
                            index,
                            layer: m.layer,
                            after: prev,
                        });
                    }
                }
                if closed.contains(&m.layer) {
                    return Err(TranscriptError::LayerOrder {
                        index,
                        layer: m.layer,
                        after: current.unwrap_or(m.layer),
                    });
                }
                current = Some(m.layer);
            }
            let previous = last_round.entry(m.layer).or_insert(m.round);
            if m.round < *previous {
                return Err(TranscriptError::RoundRegressed {
                    index,
                    layer: m.layer,
                    round: m.round,
                    previous: *previous,
                });
            }
            *previous = m.round;
        }
        Ok(())
    }
}

/// Sum of prompt and completion tokens over every message.
pub fn ledger_total(transcript: &Transcript) -> u64 {
    transcript.messages.iter().map(Message::total_tokens).sum()
}

/// Per-example token totals `t_i`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLedger {
    pub per_example: BTreeMap<String, u64>,
}

impl TokenLedger {
    pub fn record(&mut self, transcript: &Transcript) {
        self.per_example
            .insert(transcript.example_id.clone(), ledger_total(transcript));
    }

    pub fn insert(&mut self, example_id: impl Into<String>, tokens: u64) {
        self.per_example.insert(example_id.into(), tokens);
    }

    pub fn total(&self) -> u64 {
        self.per_example.values().sum()
    }

    pub fn len(&self) -> usize {
        self.per_example.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_example.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FailureKind {
    /// The CSO never produced a parseable final answer.
    EmptyAnswer,
    /// The first Drafter call failed or was refused by the budget gate.
    NoDraft,
    BackendFailure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub kind: FailureKind,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleResult {
    pub example_id: String,
    pub final_answer: String,
    pub abstained: bool,
    pub compliant: bool,
    /// Enforced (post-clamp) config; absent for flat and baseline runs.
    #[serde(default)]
    pub execution_config: Option<ExecutionConfig>,
    #[serde(default)]
    pub governance_fallback: bool,
    pub tokens: u64,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<Failure>,
}

/// Aggregate over K repeats of one setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub benchmark: Benchmark,
    pub model: String,
    pub structure: Structure,
    #[serde(default)]
    pub policy: Option<ExecutionPolicy>,
    /// N, examples per repeat.
    pub examples: usize,
    /// Per-repeat score `s_k`, in percent.
    pub run_scores: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; absent when K = 1.
    pub std: Option<f64>,
    /// Per-repeat integer token totals.
    pub run_token_totals: Vec<u64>,
    pub avg_token: f64,
    #[serde(default)]
    pub abs_rate: Option<f64>,
    #[serde(default)]
    pub drafter_skill_counts: BTreeMap<SkillProfile, usize>,
    #[serde(default)]
    pub specialist_skill_counts: BTreeMap<SkillProfile, usize>,
    #[serde(default)]
    pub failures: usize,
    #[serde(default)]
    pub non_compliant: usize,
    #[serde(default)]
    pub aborted_repeats: usize,
}

impl RunReport {
    pub fn repeats(&self) -> usize {
        self.run_scores.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonDelta {
    pub s_hier: f64,
    pub s_flat: f64,
    pub t_hier: f64,
    pub t_flat: f64,
    pub improvement_pct: f64,
    pub token_reduction_pct: f64,
}
