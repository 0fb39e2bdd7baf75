//! Shared call plumbing for the orchestrators: settings, the per-example
//! session that records every call in a transcript, and answer finalization.

use std::sync::Arc;

use thiserror::Error;

use crate::agents::{
    parse_verdict_block, render_structured_block, AgentError, Bindings, FinalAnswer, PromptPack,
    PromptSet, StructuredValue,
};
use crate::backend::{CallTag, ChatBackend, ChatRequest, ChatTurn, BackendError, DEFAULT_TEMPERATURE};
use crate::bench::{is_no_answer, validate_against_schema, AnswerSchema, SchemaKind};
use crate::domain::{
    AgentRole, Example, Layer, Message, SkillProfile, Transcript, FLAT_MAX_ROUNDS,
};
use crate::metrics::score_example;
use crate::policy::PolicyTable;

#[derive(Debug, Clone)]
pub struct OrgSettings {
    pub model: String,
    pub temperature: f64,
    pub max_output_tokens: Option<u32>,
    pub pack: Arc<PromptPack>,
    pub policy_table: PolicyTable,
    pub flat_rounds: u32,
    pub flat_drafter_skill: SkillProfile,
    pub flat_specialist_skill: SkillProfile,
}

impl Default for OrgSettings {
    fn default() -> Self {
        Self {
            model: "scripted".to_string(),
            temperature: DEFAULT_TEMPERATURE,
            max_output_tokens: None,
            pack: Arc::new(PromptPack::builtin().clone()),
            policy_table: PolicyTable::default(),
            flat_rounds: FLAT_MAX_ROUNDS,
            flat_drafter_skill: SkillProfile::Reasoning,
            flat_specialist_skill: SkillProfile::Data,
        }
    }
}

#[derive(Debug, Error)]
pub enum OrgError {
    #[error("backend failure on {example_id}: {source}")]
    Backend {
        example_id: String,
        #[source]
        source: BackendError,
        /// Everything recorded before the failing call.
        transcript: Box<Transcript>,
    },
    #[error(transparent)]
    Agent(#[from] AgentError),
}

impl OrgError {
    pub fn partial_transcript(&self) -> Option<&Transcript> {
        match self {
            OrgError::Backend { transcript, .. } => Some(transcript),
            OrgError::Agent(_) => None,
        }
    }
}

/// One agent call and the turns it is shown.
pub(crate) struct Call {
    pub set: PromptSet,
    pub role: AgentRole,
    pub skill: Option<SkillProfile>,
    pub layer: Layer,
    pub round: u32,
    pub turns: Vec<ChatTurn>,
}

pub(crate) struct Session<'a> {
    backend: &'a dyn ChatBackend,
    settings: &'a OrgSettings,
    pub example: &'a Example,
    pub transcript: Transcript,
}

impl<'a> Session<'a> {
    pub fn new(backend: &'a dyn ChatBackend, settings: &'a OrgSettings, example: &'a Example) -> Self {
        Self {
            backend,
            settings,
            example,
            transcript: Transcript::new(example.id.clone()),
        }
    }

    pub fn pack(&self) -> &'a PromptPack {
        &self.settings.pack
    }

    pub fn tokens(&self) -> u64 {
        self.transcript.ledger_total()
    }

    /// Sends one request and appends the reply to the transcript.
    pub async fn call(&mut self, call: Call) -> Result<String, OrgError> {
        let system_prompt =
            self.settings
                .pack
                .system_prompt(call.set, call.role, call.skill, self.example.benchmark)?;
        let request = ChatRequest {
            model_name: self.settings.model.clone(),
            system_prompt,
            turns: call.turns,
            max_output_tokens: self.settings.max_output_tokens,
            temperature: self.settings.temperature,
            tag: CallTag {
                role: call.role,
                round: call.round,
                example_id: self.example.id.clone(),
                layer: call.layer,
            },
        };
        let response = self
            .backend
            .complete(&request)
            .await
            .map_err(|source| OrgError::Backend {
                example_id: self.example.id.clone(),
                source,
                transcript: Box::new(self.transcript.clone()),
            })?;
        self.transcript.push(Message {
            role: call.role,
            skill: call.skill,
            layer: call.layer,
            round: call.round,
            content: response.content.clone(),
            prompt_tokens: response.prompt_tokens,
            completion_tokens: response.completion_tokens,
            usage_source: response.usage_source,
        });
        Ok(response.content)
    }

    /// Messages recorded so far in `layer`.
    pub fn layer_messages(&self, layer: Layer) -> Vec<Message> {
        self.transcript
            .messages
            .iter()
            .filter(|m| m.layer == layer)
            .cloned()
            .collect()
    }
}

/// Final answer as recorded in a result, plus the abstention flag.
pub(crate) fn settle_answer(candidate: &FinalAnswer, schema: &AnswerSchema) -> (String, bool) {
    let answer = candidate.answer.trim().to_string();
    let abstained = candidate.abstain
        || (schema.kind == SchemaKind::SpanOrNoanswer && is_no_answer(&answer));
    if abstained && !is_no_answer(&answer) {
        (String::new(), true)
    } else {
        (answer, abstained)
    }
}

pub(crate) fn score(example: &Example, answer: &str, abstained: bool) -> f64 {
    score_example(example, answer, abstained)
}

/// Asks the CCO about a candidate. Returns the rejection reason, if any.
/// The schema check is authoritative; a parseable REVISE from the CCO also
/// rejects, while an unparseable reply counts as no objection.
pub(crate) async fn compliance_check(
    session: &mut Session<'_>,
    set: PromptSet,
    layer: Layer,
    round: u32,
    candidate: &FinalAnswer,
    schema: &AnswerSchema,
) -> Result<Option<String>, OrgError> {
    let rendered = render_structured_block(&StructuredValue::FinalAnswer(candidate.clone()));
    let schema_text = schema.describe();
    let body = session.pack().user_prompt(
        set,
        AgentRole::Cco,
        None,
        Bindings {
            transcript_digest: Some(&rendered),
            schema: Some(&schema_text),
            ..Default::default()
        },
    )?;
    let reply = session
        .call(Call {
            set,
            role: AgentRole::Cco,
            skill: None,
            layer,
            round,
            turns: vec![ChatTurn::new("CANDIDATE", body)],
        })
        .await?;
    if let Err(violation) = validate_against_schema(&candidate.answer, candidate.abstain, schema) {
        return Ok(Some(violation.to_string()));
    }
    Ok(match parse_verdict_block(&reply) {
        Ok(v) if !v.is_approve() => Some(v.feedback),
        _ => None,
    })
}
