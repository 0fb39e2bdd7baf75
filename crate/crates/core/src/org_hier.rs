//! Hierarchical organization: Layer A (CEO, CTO, COO) fixes an execution
//! config, Layer B (Drafter, Reviewer, Specialist) solves under it, and
//! Layer C (CSO, CCO) produces and checks the final answer.
//!
//! Information flow is one-way and narrow. Layer B sees the task plus a
//! brief of the enforced config, never Layer A's discussion. Layer C sees
//! only the final draft and the answer schema.

use crate::agents::{
    config_brief, parse_exec_config_block, parse_final_answer_block, parse_verdict_block,
    task_text, transcript_digest, Bindings, FinalAnswer, PromptSet, ReviewVerdict,
};
use crate::backend::{ChatBackend, ChatTurn};
use crate::bench::AnswerSchema;
use crate::domain::{
    AgentRole, Example, ExampleResult, ExecutionConfig, ExecutionMode, ExecutionPolicy, Failure,
    FailureKind, Layer, SkillProfile, Transcript, COMPLIANCE_MAX_ATTEMPTS, GOVERNANCE_MAX_ROUNDS,
};
use crate::exchange::{compliance_check, score, settle_answer, Call, OrgError, OrgSettings, Session};
use crate::policy::{clamp, gate_with_budget, GateVerdict, ResolvedPolicy};

#[derive(Debug, Clone, PartialEq)]
pub struct GovernanceOutcome {
    /// The enforced config, after clamping.
    pub config: ExecutionConfig,
    /// No parseable config came out of governance.
    pub fallback: bool,
    pub rounds: u32,
    pub budget_stopped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionOutcome {
    pub draft: Option<String>,
    pub verdicts: Vec<ReviewVerdict>,
    pub rounds: u32,
    pub budget_stopped: bool,
    pub failure: Option<Failure>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplianceOutcome {
    pub final_answer: String,
    pub abstained: bool,
    pub compliant: bool,
    pub attempts: u32,
    pub rejection: Option<String>,
}

/// Config used when governance never produces a parseable proposal.
pub fn fallback_config() -> ExecutionConfig {
    ExecutionConfig {
        rationale: "governance fallback".to_string(),
        ..ExecutionConfig::new(ExecutionMode::LightMas, SkillProfile::Reasoning)
    }
}

/// Text handed to the CEO describing what the policy permits.
pub fn policy_brief(resolved: &ResolvedPolicy) -> String {
    fn describe(r: &ResolvedPolicy) -> String {
        let modes = r
            .allowed_modes
            .iter()
            .map(|m| m.to_string())
            .collect::<Vec<_>>()
            .join(", ");
        let cap = r
            .round_cap_override
            .map_or("mode default".to_string(), |c| c.to_string());
        let budget = r
            .token_budget
            .map_or("none".to_string(), |b| format!("{b} tokens per example"));
        format!("{}: modes {modes}; round cap {cap}; token budget {budget}.", r.policy)
    }
    if resolved.auto_delegated {
        let options = resolved
            .delegates
            .iter()
            .map(describe)
            .collect::<Vec<_>>()
            .join("\n");
        format!(
            "Execution policy AUTO. Pick the profile that suits this task and name it in a \"profile\" field of your configuration.\n{options}"
        )
    } else {
        format!("Execution policy {}", describe(resolved))
    }
}

fn gate(session: &Session<'_>, budget: Option<u64>) -> GateVerdict {
    gate_with_budget(session.tokens(), budget)
}

async fn governance(
    session: &mut Session<'_>,
    resolved: &ResolvedPolicy,
) -> Result<GovernanceOutcome, OrgError> {
    let example = session.example;
    let task = task_text(example);
    let brief = policy_brief(resolved);
    let mut last_parsed: Option<ExecutionConfig> = None;
    let mut accepted = false;
    let mut budget_stopped = false;
    let mut rounds = 0;

    'rounds: for round in 1..=GOVERNANCE_MAX_ROUNDS {
        let mut proposal_ok = false;
        let mut approvals = 0;
        for role in [AgentRole::Ceo, AgentRole::Cto, AgentRole::Coo] {
            if gate(session, resolved.token_budget) == GateVerdict::BudgetExceeded {
                budget_stopped = true;
                break 'rounds;
            }
            rounds = round;
            let digest = transcript_digest(&session.layer_messages(Layer::A), None);
            let body = session.pack().user_prompt(
                PromptSet::Hierarchical,
                role,
                None,
                Bindings {
                    task: Some(&task),
                    context: Some(&example.context),
                    transcript_digest: Some(&digest),
                    ..Default::default()
                },
            )?;
            let mut turns = vec![ChatTurn::new("TASK", body)];
            if role == AgentRole::Ceo {
                turns.push(ChatTurn::new("POLICY", brief.clone()));
            }
            let reply = session
                .call(Call {
                    set: PromptSet::Hierarchical,
                    role,
                    skill: None,
                    layer: Layer::A,
                    round,
                    turns,
                })
                .await?;
            if role == AgentRole::Ceo {
                if let Ok(config) = parse_exec_config_block(&reply) {
                    last_parsed = Some(config);
                    proposal_ok = true;
                }
            } else if parse_verdict_block(&reply).map_or(true, |v| v.is_approve()) {
                // A critique without a readable verdict raises no objection.
                approvals += 1;
            }
        }
        if proposal_ok && approvals == 2 {
            accepted = true;
            break;
        }
    }

    let (proposal, fallback) = match last_parsed {
        Some(c) => (c, false),
        None => (fallback_config(), true),
    };
    let mut config = clamp(&proposal, resolved);
    if config.mode == ExecutionMode::FullMas && config.specialist_skill.is_none() {
        config.specialist_skill = Some(config.drafter_skill);
    }
    if resolved.auto_delegated {
        if let Some(profile) = config.profile {
            config.rationale = format!("[profile {profile}] {}", config.rationale)
                .trim_end()
                .to_string();
        }
    }
    tracing::debug!(example = %example.id, accepted, fallback, rounds, "governance finished");
    Ok(GovernanceOutcome {
        config,
        fallback,
        rounds,
        budget_stopped,
    })
}

async fn execution(
    session: &mut Session<'_>,
    config: &ExecutionConfig,
) -> Result<ExecutionOutcome, OrgError> {
    let example = session.example;
    let task = task_text(example);
    let brief = config_brief(config);
    let budget = config.token_budget;
    let mut outcome = ExecutionOutcome {
        draft: None,
        verdicts: Vec::new(),
        rounds: 0,
        budget_stopped: false,
        failure: None,
    };

    let cap = config.round_cap.clamp(1, config.mode.max_rounds());
    for round in 1..=cap {
        let steps: &[AgentRole] = match config.mode {
            ExecutionMode::Direct => &[AgentRole::Drafter],
            ExecutionMode::LightMas => &[AgentRole::Drafter, AgentRole::Reviewer],
            ExecutionMode::FullMas => &[
                AgentRole::Drafter,
                AgentRole::Reviewer,
                AgentRole::Specialist,
            ],
        };
        let mut approved = false;
        for &role in steps {
            if role == AgentRole::Specialist && approved {
                break;
            }
            if gate(session, budget) == GateVerdict::BudgetExceeded {
                outcome.budget_stopped = true;
                if outcome.draft.is_none() {
                    outcome.failure = Some(Failure {
                        kind: FailureKind::NoDraft,
                        detail: "token budget exhausted before the first draft".to_string(),
                    });
                }
                return Ok(outcome);
            }
            outcome.rounds = round;
            let skill = match role {
                AgentRole::Drafter => Some(config.drafter_skill),
                AgentRole::Specialist => Some(config.specialist_skill.unwrap_or(config.drafter_skill)),
                _ => None,
            };
            let digest = transcript_digest(
                &session.layer_messages(Layer::B),
                outcome.draft.as_deref().map(|d| ("current draft", d)),
            );
            let body = session.pack().user_prompt(
                PromptSet::Hierarchical,
                role,
                skill,
                Bindings {
                    task: Some(&task),
                    context: Some(&example.context),
                    transcript_digest: Some(&digest),
                    ..Default::default()
                },
            )?;
            let reply = session
                .call(Call {
                    set: PromptSet::Hierarchical,
                    role,
                    skill,
                    layer: Layer::B,
                    round,
                    turns: vec![ChatTurn::new("TASK", body), ChatTurn::new("CONFIG", brief.clone())],
                })
                .await;
            let reply = match reply {
                Err(OrgError::Backend { source, .. })
                    if role == AgentRole::Drafter && outcome.draft.is_none() =>
                {
                    outcome.failure = Some(Failure {
                        kind: FailureKind::NoDraft,
                        detail: source.to_string(),
                    });
                    return Ok(outcome);
                }
                other => other?,
            };
            match role {
                AgentRole::Drafter => outcome.draft = Some(reply),
                AgentRole::Reviewer => {
                    // Only an explicit APPROVE ends the loop.
                    let verdict = parse_verdict_block(&reply)
                        .unwrap_or_else(|_| ReviewVerdict::revise(reply.trim()));
                    approved = verdict.is_approve();
                    outcome.verdicts.push(verdict);
                }
                _ => {}
            }
        }
        if approved {
            break;
        }
    }
    Ok(outcome)
}

async fn compliance(session: &mut Session<'_>, draft: &str) -> Result<ComplianceOutcome, OrgError> {
    let schema = AnswerSchema::for_example(session.example);
    let schema_text = schema.describe();
    let draft_text = if draft.trim().is_empty() {
        "(empty draft)"
    } else {
        draft
    };
    let mut candidate = FinalAnswer {
        answer: String::new(),
        abstain: false,
    };
    let mut rejection: Option<String> = None;
    let mut attempts = 0;

    for attempt in 1..=COMPLIANCE_MAX_ATTEMPTS {
        attempts = attempt;
        let body = session.pack().user_prompt(
            PromptSet::Hierarchical,
            AgentRole::Cso,
            None,
            Bindings {
                transcript_digest: Some(draft_text),
                schema: Some(&schema_text),
                ..Default::default()
            },
        )?;
        let mut turns = vec![ChatTurn::new("DRAFT", body)];
        if let Some(reason) = &rejection {
            turns.push(ChatTurn::new(
                "COMPLIANCE",
                format!("Your previous final answer was rejected: {reason}. Produce a corrected final answer."),
            ));
        }
        let reply = session
            .call(Call {
                set: PromptSet::Hierarchical,
                role: AgentRole::Cso,
                skill: None,
                layer: Layer::C,
                round: attempt,
                turns,
            })
            .await?;
        let parsed = parse_final_answer_block(&reply);
        candidate = parsed.clone().unwrap_or(FinalAnswer {
            answer: String::new(),
            abstain: false,
        });
        let verdict =
            compliance_check(session, PromptSet::Hierarchical, Layer::C, attempt, &candidate, &schema)
                .await?;
        rejection = match (parsed, verdict) {
            (Err(e), _) => Some(format!("no parseable final answer block ({})", e.reason)),
            (Ok(_), v) => v,
        };
        if rejection.is_none() {
            break;
        }
    }

    let (final_answer, abstained) = settle_answer(&candidate, &schema);
    Ok(ComplianceOutcome {
        final_answer,
        abstained,
        compliant: rejection.is_none(),
        attempts,
        rejection,
    })
}

fn resolve(settings: &OrgSettings, policy: ExecutionPolicy) -> ResolvedPolicy {
    settings.policy_table.resolve(policy)
}

/// Layer A alone.
pub async fn run_governance(
    example: &Example,
    policy: ExecutionPolicy,
    backend: &dyn ChatBackend,
    settings: &OrgSettings,
) -> Result<(GovernanceOutcome, Transcript), OrgError> {
    let mut session = Session::new(backend, settings, example);
    let outcome = governance(&mut session, &resolve(settings, policy)).await?;
    Ok((outcome, session.transcript))
}

/// Layer B alone, under an already enforced config.
pub async fn run_execution(
    example: &Example,
    config: &ExecutionConfig,
    backend: &dyn ChatBackend,
    settings: &OrgSettings,
) -> Result<(ExecutionOutcome, Transcript), OrgError> {
    let mut session = Session::new(backend, settings, example);
    let outcome = execution(&mut session, config).await?;
    Ok((outcome, session.transcript))
}

/// Layer C alone.
pub async fn run_compliance(
    example: &Example,
    draft: &str,
    backend: &dyn ChatBackend,
    settings: &OrgSettings,
) -> Result<(ComplianceOutcome, Transcript), OrgError> {
    let mut session = Session::new(backend, settings, example);
    let outcome = compliance(&mut session, draft).await?;
    Ok((outcome, session.transcript))
}

/// Full pipeline: governance, then execution, then compliance.
pub async fn run_hierarchical(
    example: &Example,
    policy: ExecutionPolicy,
    backend: &dyn ChatBackend,
    settings: &OrgSettings,
) -> Result<(ExampleResult, Transcript), OrgError> {
    let mut session = Session::new(backend, settings, example);
    let gov = governance(&mut session, &resolve(settings, policy)).await?;
    let exec = execution(&mut session, &gov.config).await?;

    let mut result = ExampleResult {
        example_id: example.id.clone(),
        final_answer: String::new(),
        abstained: false,
        compliant: false,
        execution_config: Some(gov.config.clone()),
        governance_fallback: gov.fallback,
        tokens: 0,
        score: 0.0,
        failure: exec.failure.clone(),
    };
    if exec.failure.is_none() {
        let draft = exec.draft.unwrap_or_default();
        let comp = compliance(&mut session, &draft).await?;
        result.score = score(example, &comp.final_answer, comp.abstained);
        result.final_answer = comp.final_answer;
        result.abstained = comp.abstained;
        result.compliant = comp.compliant;
    }
    result.tokens = session.tokens();
    Ok((result, session.transcript))
}
