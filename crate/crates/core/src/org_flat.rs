//! Flat organization: seven peers on one shared context for at most three
//! rounds, followed by a single CCO structure check. Also the single-agent
//! baseline, which is one Drafter call.

use crate::agents::{
    parse_final_answer_block, parse_verdict_block, task_text, transcript_digest, Bindings,
    FinalAnswer, PromptSet,
};
use crate::backend::{ChatBackend, ChatTurn};
use crate::bench::{validate_against_schema, AnswerSchema};
use crate::domain::{
    AgentRole, Example, ExampleResult, Failure, FailureKind, Layer, SkillProfile, Transcript,
    FLAT_MAX_ROUNDS,
};
use crate::exchange::{compliance_check, score, settle_answer, Call, OrgError, OrgSettings, Session};

/// Speaking order within a flat round.
pub const FLAT_ORDER: [AgentRole; 7] = [
    AgentRole::Ceo,
    AgentRole::Cto,
    AgentRole::Coo,
    AgentRole::Drafter,
    AgentRole::Specialist,
    AgentRole::Reviewer,
    AgentRole::Cso,
];

/// Label under which the shared context digest is handed to every peer.
pub const SHARED_TURN: &str = "SHARED";

fn flat_skill(role: AgentRole, settings: &OrgSettings) -> Option<SkillProfile> {
    match role {
        AgentRole::Drafter => Some(settings.flat_drafter_skill),
        AgentRole::Specialist => Some(settings.flat_specialist_skill),
        _ => None,
    }
}

/// Runs one example through the flat organization.
///
/// Every peer in round `r` receives the same digest of earlier rounds as its
/// first turn, followed by what the peers before it said in round `r`. The
/// loop stops after a round in which the Reviewer approves and the CSO has
/// produced a parseable final answer.
pub async fn run_flat(
    example: &Example,
    backend: &dyn ChatBackend,
    settings: &OrgSettings,
) -> Result<(ExampleResult, Transcript), OrgError> {
    let schema = AnswerSchema::for_example(example);
    let schema_text = schema.describe();
    let task = task_text(example);
    let rounds = settings.flat_rounds.clamp(1, FLAT_MAX_ROUNDS);
    let mut session = Session::new(backend, settings, example);
    let mut draft: Option<String> = None;
    let mut candidate: Option<FinalAnswer> = None;
    let mut last_round = 1;

    for round in 1..=rounds {
        last_round = round;
        let history = session.layer_messages(Layer::Flat);
        let digest = transcript_digest(&history, draft.as_deref().map(|d| ("current draft", d)));
        let mut spoken: Vec<(AgentRole, String)> = Vec::new();
        let mut approved = false;
        for role in FLAT_ORDER {
            let skill = flat_skill(role, settings);
            let body = session.pack().user_prompt(
                PromptSet::Flat,
                role,
                skill,
                Bindings {
                    task: Some(&task),
                    context: Some(&example.context),
                    transcript_digest: Some(&digest),
                    schema: (role == AgentRole::Cso).then_some(schema_text.as_str()),
                    ..Default::default()
                },
            )?;
            let mut turns = vec![ChatTurn::new(SHARED_TURN, body)];
            turns.extend(spoken.iter().map(|(r, c)| ChatTurn::new(r.as_str(), c.clone())));
            let reply = session
                .call(Call {
                    set: PromptSet::Flat,
                    role,
                    skill,
                    layer: Layer::Flat,
                    round,
                    turns,
                })
                .await?;
            match role {
                AgentRole::Drafter => draft = Some(reply.clone()),
                AgentRole::Reviewer => {
                    approved = parse_verdict_block(&reply).is_ok_and(|v| v.is_approve())
                }
                AgentRole::Cso => {
                    if let Ok(answer) = parse_final_answer_block(&reply) {
                        candidate = Some(answer);
                    }
                }
                _ => {}
            }
            spoken.push((role, reply));
        }
        if approved && candidate.is_some() {
            break;
        }
    }

    let checked = candidate.clone().unwrap_or(FinalAnswer {
        answer: String::new(),
        abstain: false,
    });
    let rejection = compliance_check(
        &mut session,
        PromptSet::Flat,
        Layer::Flat,
        last_round,
        &checked,
        &schema,
    )
    .await?;

    let result = match candidate {
        Some(answer) => {
            let (final_answer, abstained) = settle_answer(&answer, &schema);
            ExampleResult {
                example_id: example.id.clone(),
                score: score(example, &final_answer, abstained),
                final_answer,
                abstained,
                compliant: rejection.is_none(),
                execution_config: None,
                governance_fallback: false,
                tokens: session.tokens(),
                failure: None,
            }
        }
        None => ExampleResult {
            example_id: example.id.clone(),
            final_answer: String::new(),
            abstained: false,
            compliant: false,
            execution_config: None,
            governance_fallback: false,
            tokens: session.tokens(),
            score: 0.0,
            failure: Some(Failure {
                kind: FailureKind::EmptyAnswer,
                detail: format!("no parseable final answer after {last_round} round(s)"),
            }),
        },
    };
    Ok((result, session.transcript))
}

/// Single-agent baseline: one call that answers directly in the required
/// format. Replies without a parseable block are taken verbatim.
pub async fn run_baseline(
    example: &Example,
    backend: &dyn ChatBackend,
    settings: &OrgSettings,
) -> Result<(ExampleResult, Transcript), OrgError> {
    let schema = AnswerSchema::for_example(example);
    let schema_text = schema.describe();
    let task = task_text(example);
    let mut session = Session::new(backend, settings, example);
    let body = session.pack().user_prompt(
        PromptSet::Baseline,
        AgentRole::Drafter,
        None,
        Bindings {
            task: Some(&task),
            context: Some(&example.context),
            schema: Some(&schema_text),
            ..Default::default()
        },
    )?;
    let reply = session
        .call(Call {
            set: PromptSet::Baseline,
            role: AgentRole::Drafter,
            skill: None,
            layer: Layer::Flat,
            round: 1,
            turns: vec![ChatTurn::new("TASK", body)],
        })
        .await?;
    let (answer, parsed) = match parse_final_answer_block(&reply) {
        Ok(a) => (a, true),
        Err(_) => (
            FinalAnswer {
                answer: reply.trim().to_string(),
                abstain: false,
            },
            false,
        ),
    };
    let compliant = parsed && validate_against_schema(&answer.answer, answer.abstain, &schema).is_ok();
    let (final_answer, abstained) = settle_answer(&answer, &schema);
    let result = ExampleResult {
        example_id: example.id.clone(),
        score: score(example, &final_answer, abstained),
        final_answer,
        abstained,
        compliant,
        execution_config: None,
        governance_fallback: false,
        tokens: session.tokens(),
        failure: None,
    };
    Ok((result, session.transcript))
}
