//! Prompt construction and structured-output parsing.
//!
//! Role duties, skill blurbs and per-role message bodies live in a JSON
//! prompt pack. The built-in pack is compiled in; another can be loaded from
//! disk. Agents report decisions in fenced JSON blocks and the last block in
//! a reply wins.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::bench::choice_label;
use crate::domain::{
    AgentRole, Benchmark, Example, ExecutionConfig, ExecutionMode, ExecutionPolicy, Message,
    SkillProfile,
};

const BUILTIN_PACK: &str = include_str!("../prompts/default_pack.json");

/// Rounds of history kept in a transcript digest.
pub const DIGEST_ROUNDS: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Placeholder {
    Task,
    Context,
    SkillBlurb,
    TranscriptDigest,
    Schema,
}

impl Placeholder {
    pub const ALL: [Placeholder; 5] = [
        Placeholder::Task,
        Placeholder::Context,
        Placeholder::SkillBlurb,
        Placeholder::TranscriptDigest,
        Placeholder::Schema,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Placeholder::Task => "task",
            Placeholder::Context => "context",
            Placeholder::SkillBlurb => "skill_blurb",
            Placeholder::TranscriptDigest => "transcript_digest",
            Placeholder::Schema => "schema",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }
}

/// Which family of templates a prompt is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PromptSet {
    Hierarchical,
    Flat,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("unknown placeholder `{{{0}}}`")]
    UnknownPlaceholder(String),
    #[error("placeholder `{{{0}}}` has no binding")]
    MissingBinding(&'static str),
    #[error("unbalanced brace at byte {0}")]
    StrayBrace(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AgentError {
    #[error("invalid combination: {role} does not take a skill (got {skill})")]
    InvalidCombination { role: AgentRole, skill: SkillProfile },
    #[error("{role} requires a skill")]
    MissingSkill { role: AgentRole },
    #[error("prompt pack has no template for {role} in the {set:?} set")]
    MissingTemplate { set: PromptSet, role: AgentRole },
    #[error("prompt pack has no blurb for {0}")]
    MissingSkillBlurb(SkillProfile),
    #[error("prompt pack has no note for {0}")]
    MissingBenchmarkNote(Benchmark),
    #[error("template for {role} in the {set:?} set: {error}")]
    Template {
        set: PromptSet,
        role: AgentRole,
        error: PromptError,
    },
    #[error("template for {role} in the {set:?} set must reference `{{{placeholder}}}`")]
    MissingPlaceholder {
        set: PromptSet,
        role: AgentRole,
        placeholder: &'static str,
    },
    #[error("template for {role} in the {set:?} set may not reference `{{{placeholder}}}`")]
    ForbiddenPlaceholder {
        set: PromptSet,
        role: AgentRole,
        placeholder: &'static str,
    },
    #[error("prompt pack: {0}")]
    Pack(String),
}

/// Values bound to placeholders. Unbound placeholders fail rendering.
#[derive(Debug, Clone, Copy, Default)]
pub struct Bindings<'a> {
    pub task: Option<&'a str>,
    pub context: Option<&'a str>,
    pub skill_blurb: Option<&'a str>,
    pub transcript_digest: Option<&'a str>,
    pub schema: Option<&'a str>,
}

impl Bindings<'_> {
    fn get(&self, p: Placeholder) -> Option<&str> {
        match p {
            Placeholder::Task => self.task,
            Placeholder::Context => self.context,
            Placeholder::SkillBlurb => self.skill_blurb,
            Placeholder::TranscriptDigest => self.transcript_digest,
            Placeholder::Schema => self.schema,
        }
    }
}

enum Piece<'t> {
    Text(&'t str),
    Slot(Placeholder),
}

fn parse_template(body: &str) -> Result<Vec<Piece<'_>>, PromptError> {
    let mut pieces = Vec::new();
    let mut rest = body;
    let mut offset = 0;
    while let Some(i) = rest.find(['{', '}']) {
        if rest.as_bytes()[i] == b'}' {
            return Err(PromptError::StrayBrace(offset + i));
        }
        let close = rest[i + 1..]
            .find(['{', '}'])
            .filter(|j| rest.as_bytes()[i + 1 + j] == b'}')
            .ok_or(PromptError::StrayBrace(offset + i))?;
        let name = &rest[i + 1..i + 1 + close];
        let slot = Placeholder::from_name(name)
            .ok_or_else(|| PromptError::UnknownPlaceholder(name.to_string()))?;
        if i > 0 {
            pieces.push(Piece::Text(&rest[..i]));
        }
        pieces.push(Piece::Slot(slot));
        let consumed = i + close + 2;
        offset += consumed;
        rest = &rest[consumed..];
    }
    if !rest.is_empty() {
        pieces.push(Piece::Text(rest));
    }
    Ok(pieces)
}

/// Placeholders referenced by a template body.
pub fn placeholders(body: &str) -> Result<BTreeSet<Placeholder>, PromptError> {
    Ok(parse_template(body)?
        .into_iter()
        .filter_map(|p| match p {
            Piece::Slot(s) => Some(s),
            Piece::Text(_) => None,
        })
        .collect())
}

/// Substitutes every placeholder in one pass. Bound values are copied as-is,
/// so braces inside them are not re-expanded.
pub fn render(body: &str, bindings: &Bindings<'_>) -> Result<String, PromptError> {
    let mut out = String::with_capacity(body.len());
    for piece in parse_template(body)? {
        match piece {
            Piece::Text(t) => out.push_str(t),
            Piece::Slot(s) => out.push_str(bindings.get(s).ok_or(PromptError::MissingBinding(s.name()))?),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleTemplate {
    pub title: String,
    pub duty: String,
    pub instructions: String,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPack {
    pub version: String,
    pub preamble: String,
    pub skills: BTreeMap<SkillProfile, String>,
    pub benchmarks: BTreeMap<Benchmark, String>,
    pub hierarchical: BTreeMap<AgentRole, RoleTemplate>,
    pub flat: BTreeMap<AgentRole, RoleTemplate>,
    pub baseline: RoleTemplate,
}

/// Placeholders the engine binds for a role. A template must use all of
/// them except the skill blurb, and nothing else.
fn engine_placeholders(set: PromptSet, role: AgentRole) -> BTreeSet<Placeholder> {
    use Placeholder::*;
    let mut out = BTreeSet::new();
    match (set, role) {
        (PromptSet::Baseline, _) => out.extend([Task, Context, Schema]),
        (_, AgentRole::Cco) | (PromptSet::Hierarchical, AgentRole::Cso) => {
            out.extend([TranscriptDigest, Schema])
        }
        (PromptSet::Flat, AgentRole::Cso) => out.extend([Task, Context, TranscriptDigest, Schema]),
        _ => out.extend([Task, Context, TranscriptDigest]),
    }
    if role.is_worker() && set != PromptSet::Baseline {
        out.insert(SkillBlurb);
    }
    out
}

/// Output block a role ends its reply with, if any.
pub fn expected_output(set: PromptSet, role: AgentRole) -> Option<StructuredKind> {
    match (set, role) {
        (PromptSet::Baseline, _) => Some(StructuredKind::FinalAnswer),
        (PromptSet::Hierarchical, AgentRole::Ceo) => Some(StructuredKind::ExecConfig),
        (PromptSet::Hierarchical, AgentRole::Cto | AgentRole::Coo) => Some(StructuredKind::Verdict),
        (_, AgentRole::Reviewer | AgentRole::Cco) => Some(StructuredKind::Verdict),
        (_, AgentRole::Cso) => Some(StructuredKind::FinalAnswer),
        _ => None,
    }
}

fn set_roles(set: PromptSet) -> &'static [AgentRole] {
    match set {
        PromptSet::Hierarchical => &AgentRole::ALL,
        PromptSet::Flat => &AgentRole::ALL,
        PromptSet::Baseline => &[AgentRole::Drafter],
    }
}

impl PromptPack {
    /// The compiled-in pack.
    pub fn builtin() -> &'static PromptPack {
        static PACK: OnceLock<PromptPack> = OnceLock::new();
        PACK.get_or_init(|| Self::from_json(BUILTIN_PACK).expect("built-in prompt pack is valid"))
    }

    pub fn from_json(text: &str) -> Result<Self, AgentError> {
        let pack: PromptPack =
            serde_json::from_str(text).map_err(|e| AgentError::Pack(e.to_string()))?;
        pack.check()?;
        Ok(pack)
    }

    pub fn load(path: &Path) -> Result<Self, AgentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AgentError::Pack(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn check(&self) -> Result<(), AgentError> {
        for skill in SkillProfile::ALL {
            if !self.skills.contains_key(&skill) {
                return Err(AgentError::MissingSkillBlurb(skill));
            }
        }
        for benchmark in [
            Benchmark::Musr,
            Benchmark::Musique,
            Benchmark::Squad2,
            Benchmark::Synthetic,
        ] {
            if !self.benchmarks.contains_key(&benchmark) {
                return Err(AgentError::MissingBenchmarkNote(benchmark));
            }
        }
        for set in [PromptSet::Hierarchical, PromptSet::Flat, PromptSet::Baseline] {
            for &role in set_roles(set) {
                let body = &self.template(set, role)?.body;
                let used = placeholders(body)
                    .map_err(|error| AgentError::Template { set, role, error })?;
                let bound = engine_placeholders(set, role);
                if let Some(p) = used.difference(&bound).next() {
                    return Err(AgentError::ForbiddenPlaceholder {
                        set,
                        role,
                        placeholder: p.name(),
                    });
                }
                if let Some(p) = bound
                    .iter()
                    .filter(|p| **p != Placeholder::SkillBlurb)
                    .find(|p| !used.contains(p))
                {
                    return Err(AgentError::MissingPlaceholder {
                        set,
                        role,
                        placeholder: p.name(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn template(&self, set: PromptSet, role: AgentRole) -> Result<&RoleTemplate, AgentError> {
        match set {
            PromptSet::Hierarchical => self.hierarchical.get(&role),
            PromptSet::Flat => self.flat.get(&role),
            PromptSet::Baseline => Some(&self.baseline),
        }
        .ok_or(AgentError::MissingTemplate { set, role })
    }

    pub fn skill_blurb(&self, skill: SkillProfile) -> Result<&str, AgentError> {
        self.skills
            .get(&skill)
            .map(String::as_str)
            .ok_or(AgentError::MissingSkillBlurb(skill))
    }

    /// System prompt for one agent. Workers need a skill; other roles must
    /// not get one.
    pub fn system_prompt(
        &self,
        set: PromptSet,
        role: AgentRole,
        skill: Option<SkillProfile>,
        benchmark: Benchmark,
    ) -> Result<String, AgentError> {
        if let (false, Some(skill)) = (role.is_worker(), skill) {
            return Err(AgentError::InvalidCombination { role, skill });
        }
        let template = self.template(set, role)?;
        let mut text = format!(
            "{}\nYou act as the {}.\n\nDuty: {}\n",
            self.preamble, template.title, template.duty
        );
        if let Some(skill) = skill {
            text.push_str(&format!(
                "Skill orientation ({skill}): you focus on {}.\n",
                self.skill_blurb(skill)?
            ));
        }
        let note = self
            .benchmarks
            .get(&benchmark)
            .ok_or(AgentError::MissingBenchmarkNote(benchmark))?;
        text.push_str(&format!("Benchmark: {note}\n\n{}\n", template.instructions));
        if let Some(kind) = expected_output(set, role) {
            text.push_str(&format!(
                "\nEnd your reply with exactly one fenced JSON block of this shape:\n{}\n{}",
                render_structured_block(&kind.example()),
                kind.field_notes()
            ));
        }
        Ok(text)
    }

    /// Renders a role's message body. The skill blurb is bound from `skill`.
    pub fn user_prompt(
        &self,
        set: PromptSet,
        role: AgentRole,
        skill: Option<SkillProfile>,
        bindings: Bindings<'_>,
    ) -> Result<String, AgentError> {
        let template = self.template(set, role)?;
        let blurb = skill.map(|s| self.skill_blurb(s)).transpose()?;
        let bindings = Bindings {
            skill_blurb: bindings.skill_blurb.or(blurb),
            ..bindings
        };
        render(&template.body, &bindings).map_err(|error| AgentError::Template { set, role, error })
    }
}

/// System prompt from the built-in pack's hierarchical set.
pub fn build_system_prompt(
    role: AgentRole,
    skill: Option<SkillProfile>,
    benchmark: Benchmark,
) -> Result<String, AgentError> {
    PromptPack::builtin().system_prompt(PromptSet::Hierarchical, role, skill, benchmark)
}

/// Question text handed to agents, with lettered choices when present.
pub fn task_text(example: &Example) -> String {
    let mut text = example.question.clone();
    if let Some(choices) = &example.choices {
        text.push_str("\nChoices:");
        for (i, c) in choices.iter().enumerate() {
            text.push_str(&format!("\n{}) {}", choice_label(i), c));
        }
    }
    text
}

/// Last `DIGEST_ROUNDS` rounds of `messages` plus the current draft.
pub fn transcript_digest(messages: &[Message], current: Option<(&str, &str)>) -> String {
    let latest = messages.iter().map(|m| m.round).max().unwrap_or(0);
    let floor = latest.saturating_sub(DIGEST_ROUNDS);
    let mut parts: Vec<String> = messages
        .iter()
        .filter(|m| m.round > floor)
        .map(|m| format!("[{} round {}]\n{}", m.role, m.round, m.content.trim()))
        .collect();
    if let Some((label, text)) = current {
        parts.push(format!("[{label}]\n{}", text.trim()));
    }
    if parts.is_empty() {
        "(nothing yet)".to_string()
    } else {
        parts.join("\n\n")
    }
}

/// Summary of an enforced config as seen by the execution layer.
pub fn config_brief(config: &ExecutionConfig) -> String {
    let mut text = format!(
        "Execution mode {} with at most {} round(s). Drafter skill: {}.",
        config.mode, config.round_cap, config.drafter_skill
    );
    if let Some(s) = config.specialist_skill {
        text.push_str(&format!(" Specialist skill: {s}."));
    }
    text
}

// ---------------------------------------------------------------------------
// Structured blocks

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StructuredKind {
    ExecConfig,
    Verdict,
    FinalAnswer,
}

impl fmt::Display for StructuredKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StructuredKind::ExecConfig => "EXEC_CONFIG",
            StructuredKind::Verdict => "VERDICT",
            StructuredKind::FinalAnswer => "FINAL_ANSWER",
        })
    }
}

impl StructuredKind {
    fn example(self) -> StructuredValue {
        match self {
            StructuredKind::ExecConfig => StructuredValue::ExecConfig(ExecutionConfig {
                rationale: "one sentence".into(),
                ..ExecutionConfig::new(ExecutionMode::LightMas, SkillProfile::Reasoning)
            }),
            StructuredKind::Verdict => StructuredValue::Verdict(ReviewVerdict::revise("what must change")),
            StructuredKind::FinalAnswer => StructuredValue::FinalAnswer(FinalAnswer {
                answer: "short answer".into(),
                abstain: false,
            }),
        }
    }

    fn field_notes(self) -> String {
        let list = |items: Vec<String>| items.join(", ");
        match self {
            StructuredKind::ExecConfig => format!(
                "mode is one of {}. drafter_skill and specialist_skill are one of {}. specialist_skill is null unless mode is FULL_MAS. round_cap may be omitted.",
                list(ExecutionMode::ALL.iter().map(|m| m.to_string()).collect()),
                list(SkillProfile::ALL.iter().map(|s| s.to_string()).collect()),
            ),
            StructuredKind::Verdict => {
                "decision is APPROVE or REVISE. feedback is required for REVISE and empty for APPROVE.".to_string()
            }
            StructuredKind::FinalAnswer => {
                "Set abstain to true only when the answer format allows it and the context has no answer.".to_string()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Decision {
    Approve,
    Revise,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewVerdict {
    pub decision: Decision,
    /// Non-empty exactly when the decision is REVISE.
    pub feedback: String,
}

impl ReviewVerdict {
    pub fn approve() -> Self {
        Self {
            decision: Decision::Approve,
            feedback: String::new(),
        }
    }

    /// Blank feedback is replaced by a generic request.
    pub fn revise(feedback: impl Into<String>) -> Self {
        let feedback = feedback.into();
        Self {
            decision: Decision::Revise,
            feedback: if feedback.trim().is_empty() {
                "revision requested".to_string()
            } else {
                feedback
            },
        }
    }

    pub fn is_approve(&self) -> bool {
        self.decision == Decision::Approve
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalAnswer {
    pub answer: String,
    pub abstain: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StructuredValue {
    ExecConfig(ExecutionConfig),
    Verdict(ReviewVerdict),
    FinalAnswer(FinalAnswer),
}

impl StructuredValue {
    pub fn kind(&self) -> StructuredKind {
        match self {
            StructuredValue::ExecConfig(_) => StructuredKind::ExecConfig,
            StructuredValue::Verdict(_) => StructuredKind::Verdict,
            StructuredValue::FinalAnswer(_) => StructuredKind::FinalAnswer,
        }
    }

    fn to_json(&self) -> Value {
        match self {
            StructuredValue::ExecConfig(c) => {
                let mut obj = Map::new();
                obj.insert("mode".into(), json!(c.mode));
                obj.insert("drafter_skill".into(), json!(c.drafter_skill));
                obj.insert("specialist_skill".into(), json!(c.specialist_skill));
                obj.insert("round_cap".into(), json!(c.round_cap));
                if let Some(b) = c.token_budget {
                    obj.insert("token_budget".into(), json!(b));
                }
                obj.insert("rationale".into(), json!(c.rationale));
                if let Some(p) = c.profile {
                    obj.insert("profile".into(), json!(p));
                }
                Value::Object(obj)
            }
            StructuredValue::Verdict(v) => json!({"decision": v.decision, "feedback": v.feedback}),
            StructuredValue::FinalAnswer(a) => json!({"answer": a.answer, "abstain": a.abstain}),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot parse {kind} at byte {offset}: {reason}")]
pub struct ParseFailure {
    pub kind: StructuredKind,
    pub offset: usize,
    pub reason: String,
}

/// Fenced JSON block as it should appear in a reply.
pub fn render_structured_block(value: &StructuredValue) -> String {
    let body = serde_json::to_string_pretty(&value.to_json()).expect("json value serializes");
    format!("```json\n{body}\n```")
}

/// Byte range of the body of the last complete fenced block.
fn last_fenced_block(text: &str) -> Option<(usize, usize)> {
    let mut open: Option<usize> = None;
    let mut last = None;
    let mut pos = 0;
    for line in text.split_inclusive('\n') {
        let is_fence = line.trim_start().starts_with("```");
        match open {
            None if is_fence => open = Some(pos + line.len()),
            Some(start) if is_fence => {
                last = Some((start, pos));
                open = None;
            }
            _ => {}
        }
        pos += line.len();
    }
    last
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

/// Parses the last fenced block of `text` as `expected`.
pub fn extract_structured_block(
    text: &str,
    expected: StructuredKind,
) -> Result<StructuredValue, ParseFailure> {
    let fail = |offset, reason: String| ParseFailure {
        kind: expected,
        offset,
        reason,
    };
    let (start, end) =
        last_fenced_block(text).ok_or_else(|| fail(text.len(), "no fenced block".into()))?;
    let body = &text[start..end];
    let value: Value = serde_json::from_str(body).map_err(|e| {
        fail(
            start + byte_offset(body, e.line(), e.column()),
            format!("invalid JSON: {e}"),
        )
    })?;
    let obj = value
        .as_object()
        .ok_or_else(|| fail(start, "block is not a JSON object".into()))?;
    let shape = |reason: String| fail(start, reason);
    match expected {
        StructuredKind::ExecConfig => parse_exec_config(obj).map(StructuredValue::ExecConfig).map_err(shape),
        StructuredKind::Verdict => parse_verdict(obj).map(StructuredValue::Verdict).map_err(shape),
        StructuredKind::FinalAnswer => parse_final_answer(obj).map(StructuredValue::FinalAnswer).map_err(shape),
    }
}

fn field<'a>(obj: &'a Map<String, Value>, names: &[&str]) -> Option<&'a Value> {
    names
        .iter()
        .find_map(|n| obj.get(*n))
        .filter(|v| !v.is_null())
}

fn token_field<T>(obj: &Map<String, Value>, names: &[&str]) -> Result<Option<T>, String>
where
    T: std::str::FromStr,
    T::Err: fmt::Display,
{
    match field(obj, names) {
        None => Ok(None),
        Some(Value::String(s)) if s.trim().is_empty() || s.eq_ignore_ascii_case("none") => Ok(None),
        Some(Value::String(s)) => s.parse::<T>().map(Some).map_err(|e| e.to_string()),
        Some(other) => Err(format!("`{}` must be a string, got {other}", names[0])),
    }
}

fn parse_exec_config(obj: &Map<String, Value>) -> Result<ExecutionConfig, String> {
    let mode: ExecutionMode =
        token_field(obj, &["mode", "execution_mode"])?.ok_or("missing `mode`")?;
    let drafter_skill: SkillProfile =
        token_field(obj, &["drafter_skill", "drafter"])?.ok_or("missing `drafter_skill`")?;
    let specialist_skill = token_field(obj, &["specialist_skill", "specialist"])?;
    let round_cap = match field(obj, &["round_cap"]) {
        None => mode.max_rounds(),
        Some(v) => v
            .as_u64()
            .and_then(|n| u32::try_from(n).ok())
            .ok_or("`round_cap` must be a non-negative integer")?,
    };
    let token_budget = match field(obj, &["token_budget"]) {
        None => None,
        Some(v) => Some(v.as_u64().ok_or("`token_budget` must be a non-negative integer")?),
    };
    let rationale = match field(obj, &["rationale"]) {
        None => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err("`rationale` must be a string".into()),
    };
    let profile: Option<ExecutionPolicy> = token_field(obj, &["profile", "policy"])?;
    Ok(ExecutionConfig {
        mode,
        drafter_skill,
        specialist_skill,
        round_cap,
        token_budget,
        rationale,
        profile,
    })
}

fn parse_verdict(obj: &Map<String, Value>) -> Result<ReviewVerdict, String> {
    let decision = match field(obj, &["decision", "verdict"]) {
        Some(Value::String(s)) => s.trim().to_ascii_uppercase(),
        Some(_) => return Err("`decision` must be a string".into()),
        None => return Err("missing `decision`".into()),
    };
    let feedback = match field(obj, &["feedback"]) {
        None => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err("`feedback` must be a string".into()),
    };
    match decision.as_str() {
        "APPROVE" | "APPROVED" => Ok(ReviewVerdict::approve()),
        "REVISE" | "REJECT" => {
            if feedback.trim().is_empty() {
                Err("REVISE needs non-empty feedback".into())
            } else {
                Ok(ReviewVerdict::revise(feedback))
            }
        }
        other => Err(format!("unknown decision `{other}`")),
    }
}

fn parse_final_answer(obj: &Map<String, Value>) -> Result<FinalAnswer, String> {
    let answer = match field(obj, &["answer", "final_answer"]) {
        None => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        Some(_) => return Err("`answer` must be a string".into()),
    };
    let abstain = match field(obj, &["abstain"]) {
        None => false,
        Some(Value::Bool(b)) => *b,
        Some(_) => return Err("`abstain` must be a boolean".into()),
    };
    if !obj.contains_key("answer") && !obj.contains_key("final_answer") && !abstain {
        return Err("missing `answer`".into());
    }
    Ok(FinalAnswer { answer, abstain })
}

pub fn parse_exec_config_block(text: &str) -> Result<ExecutionConfig, ParseFailure> {
    match extract_structured_block(text, StructuredKind::ExecConfig)? {
        StructuredValue::ExecConfig(c) => Ok(c),
        _ => unreachable!("kind checked by extract"),
    }
}

pub fn parse_verdict_block(text: &str) -> Result<ReviewVerdict, ParseFailure> {
    match extract_structured_block(text, StructuredKind::Verdict)? {
        StructuredValue::Verdict(v) => Ok(v),
        _ => unreachable!("kind checked by extract"),
    }
}

pub fn parse_final_answer_block(text: &str) -> Result<FinalAnswer, ParseFailure> {
    match extract_structured_block(text, StructuredKind::FinalAnswer)? {
        StructuredValue::FinalAnswer(a) => Ok(a),
        _ => unreachable!("kind checked by extract"),
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::domain::{Layer, UsageSource};

    #[test]
    fn builtin_pack_is_valid() {
        PromptPack::builtin().check().unwrap();
    }

    #[test]
    fn drafter_prompt_carries_skill_blurb() {
        let p = build_system_prompt(AgentRole::Drafter, Some(SkillProfile::Reasoning), Benchmark::Musique)
            .unwrap();
        assert!(p.contains("logical consistency, multi-step inference"));
        assert!(p.contains("primary writer in the problem-solving process"));
    }

    #[test]
    fn every_skill_blurb_appears_verbatim() {
        let pack = PromptPack::builtin();
        for skill in SkillProfile::ALL {
            let p = build_system_prompt(AgentRole::Specialist, Some(skill), Benchmark::Musr).unwrap();
            assert!(p.contains(pack.skill_blurb(skill).unwrap()));
        }
        let data = pack.skill_blurb(SkillProfile::Data).unwrap();
        assert_eq!(data, "evidence extraction, pattern recognition, and information organization");
    }

    #[test]
    fn cco_prompt_is_schema_only() {
        let p = build_system_prompt(AgentRole::Cco, None, Benchmark::Squad2).unwrap();
        assert!(p.contains("required schema or output format"));
        assert!(p.contains("do not perform task reasoning"));
    }

    #[test]
    fn skill_on_non_worker_rejected() {
        let err = build_system_prompt(AgentRole::Reviewer, Some(SkillProfile::Data), Benchmark::Musr)
            .unwrap_err();
        assert!(matches!(err, AgentError::InvalidCombination { .. }));
    }

    #[test]
    fn prompts_are_deterministic() {
        for role in AgentRole::ALL {
            let skill = role.is_worker().then_some(SkillProfile::Domain);
            let a = build_system_prompt(role, skill, Benchmark::Squad2).unwrap();
            let b = build_system_prompt(role, skill, Benchmark::Squad2).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn render_rules() {
        let b = Bindings {
            task: Some("Q {context}"),
            ..Default::default()
        };
        assert_eq!(render("T: {task}.", &b).unwrap(), "T: Q {context}.");
        assert_eq!(
            render("{context}", &b).unwrap_err(),
            PromptError::MissingBinding("context")
        );
        assert!(matches!(render("{nope}", &b), Err(PromptError::UnknownPlaceholder(_))));
        assert_eq!(render("a } b", &b).unwrap_err(), PromptError::StrayBrace(2));
        assert_eq!(render("a {task", &b).unwrap_err(), PromptError::StrayBrace(2));
    }

    #[test]
    fn fully_bound_templates_leave_no_braces() {
        let pack = PromptPack::builtin();
        let b = Bindings {
            task: Some("t"),
            context: Some("c"),
            skill_blurb: Some("s"),
            transcript_digest: Some("d"),
            schema: Some("f"),
        };
        for set in [PromptSet::Hierarchical, PromptSet::Flat, PromptSet::Baseline] {
            for &role in set_roles(set) {
                let out = render(&pack.template(set, role).unwrap().body, &b).unwrap();
                assert!(!out.contains('{') && !out.contains('}'), "{set:?} {role}");
            }
        }
    }

    #[test]
    fn pack_rejects_context_in_compliance_templates() {
        let mut pack = PromptPack::builtin().clone();
        pack.hierarchical.get_mut(&AgentRole::Cso).unwrap().body.push_str("{context}");
        assert!(matches!(pack.check(), Err(AgentError::ForbiddenPlaceholder { .. })));
    }

    #[test]
    fn exec_config_field_mapping() {
        let text = "Thinking...\n```json\n{\"mode\": \"LIGHT_MAS\", \"drafter\": \"DOMAIN\"}\n```\n";
        let c = parse_exec_config_block(text).unwrap();
        assert_eq!(c, ExecutionConfig::new(ExecutionMode::LightMas, SkillProfile::Domain));
        assert_eq!(c.round_cap, 3);
        assert_eq!(c.specialist_skill, None);
    }

    #[test]
    fn last_block_wins() {
        let text = "```json\n{\"mode\": \n```\nthen\n```json\n{\"decision\": \"APPROVE\"}\n```";
        assert_eq!(parse_verdict_block(text).unwrap(), ReviewVerdict::approve());
        let text = "```json\n{\"decision\": \"APPROVE\"}\n```\n```\nnot json\n```";
        assert!(parse_verdict_block(text).is_err());
    }

    #[test]
    fn prose_without_block_fails() {
        let err = parse_final_answer_block("The answer is Paris.").unwrap_err();
        assert_eq!(err.offset, "The answer is Paris.".len());
    }

    #[test]
    fn json_error_offset_points_into_block() {
        let text = "pre\n```json\n{\"answer\": oops}\n```";
        let err = parse_final_answer_block(text).unwrap_err();
        assert_eq!(&text[err.offset..err.offset + 1], "o");
    }

    #[test]
    fn revise_needs_feedback() {
        let text = "```json\n{\"decision\": \"REVISE\", \"feedback\": \"  \"}\n```";
        assert!(parse_verdict_block(text).is_err());
    }

    #[test]
    fn digest_keeps_two_rounds_and_draft() {
        let msg = |round, content: &str| Message {
            role: AgentRole::Reviewer,
            skill: None,
            layer: Layer::B,
            round,
            content: content.into(),
            prompt_tokens: 0,
            completion_tokens: 0,
            usage_source: UsageSource::Provider,
        };
        let msgs = [msg(1, "r1"), msg(2, "r2"), msg(3, "r3")];
        let d = transcript_digest(&msgs, Some(("current draft", "ans")));
        assert!(!d.contains("r1") && d.contains("r2") && d.contains("r3"));
        assert!(d.ends_with("[current draft]\nans"));
        assert_eq!(transcript_digest(&[], None), "(nothing yet)");
    }

    fn skill() -> impl Strategy<Value = SkillProfile> {
        prop::sample::select(SkillProfile::ALL.to_vec())
    }

    fn exec_config() -> impl Strategy<Value = ExecutionConfig> {
        (
            prop::sample::select(ExecutionMode::ALL.to_vec()),
            skill(),
            prop::option::of(skill()),
            1u32..=5,
            prop::option::of(1u64..100_000),
            ".*",
            prop::option::of(prop::sample::select(ExecutionPolicy::CONCRETE.to_vec())),
        )
            .prop_map(|(mode, d, s, cap, budget, rationale, profile)| ExecutionConfig {
                mode,
                drafter_skill: d,
                specialist_skill: s.filter(|_| mode == ExecutionMode::FullMas),
                round_cap: cap.min(mode.max_rounds()),
                token_budget: budget,
                rationale,
                profile,
            })
    }

    fn structured_value() -> impl Strategy<Value = StructuredValue> {
        prop_oneof![
            exec_config().prop_map(StructuredValue::ExecConfig),
            Just(StructuredValue::Verdict(ReviewVerdict::approve())),
            "[^ \t\n]{1}.*".prop_map(|f| StructuredValue::Verdict(ReviewVerdict::revise(f))),
            (".*", any::<bool>()).prop_map(|(answer, abstain)| {
                StructuredValue::FinalAnswer(FinalAnswer { answer, abstain })
            }),
        ]
    }

    proptest! {
        #[test]
        fn structured_round_trip(v in structured_value(), preamble in "[^`]*") {
            let text = format!("{preamble}\n{}", render_structured_block(&v));
            prop_assert_eq!(extract_structured_block(&text, v.kind()).unwrap(), v);
        }
    }
}
