mod common;

use async_trait::async_trait;
use common::*;
use orgagent::agents::{render_structured_block, transcript_digest, StructuredValue};
use orgagent::backend::{
    BackendError, ChatBackend, ChatRequest, ChatResponse, ScriptedBackend, ScriptedEntry,
};
use orgagent::domain::{
    AgentRole, ExecutionConfig, ExecutionMode, ExecutionPolicy, FailureKind, Layer, SkillProfile,
};
use orgagent::exchange::OrgSettings;
use orgagent::org_flat::{run_baseline, run_flat, FLAT_ORDER, SHARED_TURN};
use orgagent::org_hier::{run_compliance, run_execution, run_governance, run_hierarchical};
use orgagent::policy::PolicyTable;

fn settings() -> OrgSettings {
    OrgSettings::default()
}

#[tokio::test]
async fn flat_stops_after_first_approved_round() {
    let backend = scripted(approving_scenario(ExecutionMode::LightMas, "1871"));
    let ex = squad_example("q1", true);
    let (result, transcript) = run_flat(&ex, &backend, &settings()).await.unwrap();
    assert_eq!(backend.count(), 8);
    assert_eq!(backend.count_role(AgentRole::Cco), 1);
    assert!(transcript.messages.iter().all(|m| m.round == 1));
    assert_eq!(result.final_answer, "1871");
    assert_eq!(result.score, 1.0);
    assert!(result.compliant);
    assert!(result.execution_config.is_none());
}

#[tokio::test]
async fn flat_perpetual_revision_runs_three_rounds() {
    let backend = scripted(perpetual_revise_scenario());
    let ex = squad_example("q1", true);
    let (result, transcript) = run_flat(&ex, &backend, &settings()).await.unwrap();
    assert_eq!(backend.count(), 7 * 3 + 1);
    assert_eq!(transcript.rounds(Layer::Flat), 3);
    // The CCO objected, so the answer stands but is flagged.
    assert_eq!(result.final_answer, "maybe");
    assert!(!result.compliant);
}

#[tokio::test]
async fn flat_peers_share_one_digest_per_round() {
    let backend = scripted(perpetual_revise_scenario());
    let ex = squad_example("q1", true);
    let (_, transcript) = run_flat(&ex, &backend, &settings()).await.unwrap();
    let requests = backend.requests();
    for round in 1..=3u32 {
        let history: Vec<_> = transcript
            .messages
            .iter()
            .filter(|m| m.round < round && m.layer == Layer::Flat)
            .cloned()
            .collect();
        let draft = history
            .iter()
            .rev()
            .find(|m| m.role == AgentRole::Drafter)
            .map(|m| m.content.clone());
        let digest = transcript_digest(&history, draft.as_deref().map(|d| ("current draft", d)));
        let peers: Vec<_> = requests
            .iter()
            .filter(|r| r.tag.round == round && r.tag.role != AgentRole::Cco)
            .collect();
        assert_eq!(peers.len(), 7);
        for (i, req) in peers.iter().enumerate() {
            assert_eq!(req.tag.role, FLAT_ORDER[i]);
            assert_eq!(req.turns[0].speaker, SHARED_TURN);
            assert!(req.turns[0].content.contains(&digest), "round {round} peer {i}");
            let earlier: Vec<_> = req.turns[1..].iter().map(|t| t.speaker.as_str()).collect();
            let expected: Vec<_> = FLAT_ORDER[..i].iter().map(|r| r.as_str()).collect();
            assert_eq!(earlier, expected);
        }
    }
}

#[tokio::test]
async fn flat_without_final_answer_is_an_empty_answer_failure() {
    let scenario = perpetual_revise_scenario()
        .with("CSO:*:*", ScriptedEntry::new("no idea", 50, 5))
        .unwrap();
    let backend = scripted(scenario);
    let ex = squad_example("q1", true);
    let (result, _) = run_flat(&ex, &backend, &settings()).await.unwrap();
    assert_eq!(result.failure.unwrap().kind, FailureKind::EmptyAnswer);
    assert_eq!(result.score, 0.0);
    assert!(!result.compliant);
    assert_eq!(backend.count(), 22);
}

#[tokio::test]
async fn baseline_is_one_call() {
    let scenario = approving_scenario(ExecutionMode::Direct, "1871")
        .with("DRAFTER:*:*", ScriptedEntry::new(final_answer("1871", false), 120, 8))
        .unwrap();
    let backend = scripted(scenario);
    let ex = squad_example("q1", true);
    let (result, transcript) = run_baseline(&ex, &backend, &settings()).await.unwrap();
    assert_eq!(backend.count(), 1);
    assert_eq!(result.tokens, 128);
    assert_eq!(transcript.messages.len(), 1);
    assert!(result.compliant);
    assert_eq!(result.score, 1.0);
}

#[tokio::test]
async fn baseline_takes_unstructured_reply_verbatim() {
    let scenario = approving_scenario(ExecutionMode::Direct, "x")
        .with("DRAFTER:*:*", ScriptedEntry::new("  1871 ", 10, 1))
        .unwrap();
    let backend = scripted(scenario);
    let (result, _) = run_baseline(&squad_example("q", true), &backend, &settings())
        .await
        .unwrap();
    assert_eq!(result.final_answer, "1871");
    assert!(!result.compliant);
    assert_eq!(result.score, 1.0);
}

async fn hier_counts(mode: ExecutionMode, policy: ExecutionPolicy, approve_all: bool) -> (usize, usize, usize) {
    let scenario = if approve_all {
        approving_scenario(mode, "1871")
    } else {
        perpetual_revise_scenario()
            .with("CEO:*:*", ScriptedEntry::new(exec_config(mode, SkillProfile::Reasoning), 100, 10))
            .unwrap()
    };
    let backend = scripted(scenario);
    let ex = squad_example("q1", true);
    let (_, t) = run_hierarchical(&ex, policy, &backend, &settings()).await.unwrap();
    (t.calls(Layer::A), t.calls(Layer::B), t.calls(Layer::C))
}

#[tokio::test]
async fn hierarchical_call_counts_when_everyone_approves() {
    assert_eq!(hier_counts(ExecutionMode::Direct, ExecutionPolicy::Nocap, true).await, (3, 1, 2));
    assert_eq!(hier_counts(ExecutionMode::LightMas, ExecutionPolicy::Nocap, true).await, (3, 2, 2));
    // FULL stops before the Specialist once the Reviewer approves.
    assert_eq!(hier_counts(ExecutionMode::FullMas, ExecutionPolicy::Nocap, true).await, (3, 2, 2));
}

#[tokio::test]
async fn hierarchical_round_caps_under_perpetual_revision() {
    // Governance never converges: 3 rounds of CEO, CTO, COO. Compliance
    // keeps rejecting: 2 attempts of CSO plus CCO.
    assert_eq!(hier_counts(ExecutionMode::Direct, ExecutionPolicy::Nocap, false).await, (9, 1, 4));
    assert_eq!(hier_counts(ExecutionMode::LightMas, ExecutionPolicy::Nocap, false).await, (9, 6, 4));
    assert_eq!(hier_counts(ExecutionMode::FullMas, ExecutionPolicy::Nocap, false).await, (9, 15, 4));
    // BALANCE caps FULL at 3 rounds.
    assert_eq!(hier_counts(ExecutionMode::FullMas, ExecutionPolicy::Balance, false).await, (9, 9, 4));
}

#[tokio::test]
async fn light_mas_approved_in_second_round() {
    let scenario = approving_scenario(ExecutionMode::LightMas, "1871")
        .with("REVIEWER:1:*", ScriptedEntry::new(revise("cite the year"), 300, 20))
        .unwrap();
    let backend = scripted(scenario);
    let config = ExecutionConfig::new(ExecutionMode::LightMas, SkillProfile::Domain);
    let ex = squad_example("q1", true);
    let (outcome, t) = run_execution(&ex, &config, &backend, &settings()).await.unwrap();
    assert_eq!(backend.count(), 4);
    assert_eq!(outcome.rounds, 2);
    assert_eq!(outcome.verdicts.len(), 2);
    assert!(!outcome.verdicts[0].is_approve());
    assert!(outcome.verdicts[1].is_approve());
    assert_eq!(t.rounds(Layer::B), 2);
}

#[tokio::test]
async fn governance_fallback_after_three_rounds() {
    let backend = scripted(perpetual_revise_scenario());
    let ex = squad_example("q1", true);
    let (gov, t) = run_governance(&ex, ExecutionPolicy::Nocap, &backend, &settings())
        .await
        .unwrap();
    assert_eq!(backend.count(), 9);
    assert!(gov.fallback);
    assert_eq!(gov.rounds, 3);
    assert_eq!(gov.config.mode, ExecutionMode::LightMas);
    assert_eq!(gov.config.drafter_skill, SkillProfile::Reasoning);
    assert_eq!(t.rounds(Layer::A), 3);
}

#[tokio::test]
async fn strict_clamps_full_to_light() {
    let backend = scripted(approving_scenario(ExecutionMode::FullMas, "1871"));
    let ex = squad_example("q1", true);
    let (gov, _) = run_governance(&ex, ExecutionPolicy::Strict, &backend, &settings())
        .await
        .unwrap();
    assert_eq!(gov.config.mode, ExecutionMode::LightMas);
    assert_eq!(gov.config.round_cap, 2);
    assert_eq!(gov.config.token_budget, Some(4_000));
    assert_eq!(gov.config.specialist_skill, None);
    assert_eq!(gov.config.profile, Some(ExecutionPolicy::Strict));
}

#[tokio::test]
async fn full_mas_without_specialist_reuses_drafter_skill() {
    let backend = scripted(approving_scenario(ExecutionMode::FullMas, "1871"));
    let (gov, _) = run_governance(&squad_example("q", true), ExecutionPolicy::Nocap, &backend, &settings())
        .await
        .unwrap();
    assert_eq!(gov.config.mode, ExecutionMode::FullMas);
    assert_eq!(gov.config.specialist_skill, Some(SkillProfile::Domain));
}

#[tokio::test]
async fn auto_enforces_the_named_profile() {
    let config = ExecutionConfig {
        rationale: "cheap lookup".into(),
        profile: Some(ExecutionPolicy::Strict),
        ..ExecutionConfig::new(ExecutionMode::FullMas, SkillProfile::Data)
    };
    let scenario = approving_scenario(ExecutionMode::FullMas, "1871")
        .with(
            "CEO:*:*",
            ScriptedEntry::new(render_structured_block(&StructuredValue::ExecConfig(config)), 100, 10),
        )
        .unwrap();
    let backend = scripted(scenario);
    let (gov, _) = run_governance(&squad_example("q", true), ExecutionPolicy::Auto, &backend, &settings())
        .await
        .unwrap();
    assert_eq!(gov.config.profile, Some(ExecutionPolicy::Strict));
    assert_eq!(gov.config.mode, ExecutionMode::LightMas);
    assert_eq!(gov.config.token_budget, Some(4_000));
    assert!(gov.config.rationale.starts_with("[profile STRICT]"));
    let ceo = &backend.requests()[0];
    assert!(ceo.turns.iter().any(|t| t.speaker == "POLICY" && t.content.contains("AUTO")));
}

#[tokio::test]
async fn auto_without_profile_defaults_to_balance() {
    let backend = scripted(approving_scenario(ExecutionMode::FullMas, "1871"));
    let (gov, _) = run_governance(&squad_example("q", true), ExecutionPolicy::Auto, &backend, &settings())
        .await
        .unwrap();
    assert_eq!(gov.config.profile, Some(ExecutionPolicy::Balance));
    assert_eq!(gov.config.round_cap, 3);
    assert_eq!(gov.config.token_budget, Some(16_000));
}

#[tokio::test]
async fn layers_see_only_what_they_should() {
    let marker = "GOVERNANCE-ONLY-REMARK";
    let scenario = approving_scenario(ExecutionMode::FullMas, "1871")
        .with(
            "CEO:*:*",
            ScriptedEntry::new(
                format!("{marker}\n{}", exec_config(ExecutionMode::FullMas, SkillProfile::Domain)),
                100,
                10,
            ),
        )
        .unwrap()
        .with("CTO:*:*", ScriptedEntry::new(format!("{marker}\n{}", approve()), 100, 10))
        .unwrap()
        .with("REVIEWER:1:*", ScriptedEntry::new(revise("more detail"), 100, 10))
        .unwrap();
    let backend = scripted(scenario);
    let ex = squad_example("q1", true);
    run_hierarchical(&ex, ExecutionPolicy::Nocap, &backend, &settings())
        .await
        .unwrap();
    let text = |r: &ChatRequest| {
        let mut s = r.system_prompt.clone();
        for t in &r.turns {
            s.push_str(&t.content);
        }
        s
    };
    let requests = backend.requests();
    // The COO does see governance discussion.
    assert!(requests
        .iter()
        .any(|r| r.tag.layer == Layer::A && r.tag.role == AgentRole::Coo && text(r).contains(marker)));
    for r in requests.iter().filter(|r| r.tag.layer != Layer::A) {
        assert!(!text(r).contains(marker), "{:?} saw governance text", r.tag);
    }
    for r in requests.iter().filter(|r| r.tag.layer == Layer::C) {
        assert!(!text(r).contains(&ex.context), "{:?} saw the context", r.tag);
    }
    for r in requests.iter().filter(|r| r.tag.layer == Layer::B) {
        assert!(text(r).contains(&ex.context));
        assert!(r.turns.iter().any(|t| t.speaker == "CONFIG"));
    }
}

#[tokio::test]
async fn tokens_add_up_and_runs_are_deterministic() {
    let run = || async {
        let backend = ScriptedBackend::new(approving_scenario(ExecutionMode::FullMas, "1871"));
        run_hierarchical(&squad_example("q1", true), ExecutionPolicy::Nocap, &backend, &settings())
            .await
            .unwrap()
    };
    let (r1, t1) = run().await;
    let (r2, t2) = run().await;
    assert_eq!(r1, r2);
    assert_eq!(t1, t2);
    let by_message: u64 = t1.messages.iter().map(|m| m.prompt_tokens + m.completion_tokens).sum();
    let by_layer: u64 = [Layer::A, Layer::B, Layer::C].iter().map(|l| t1.layer_total(*l)).sum();
    assert_eq!(r1.tokens, by_message);
    assert_eq!(r1.tokens, by_layer);
    // 3 governance + Drafter + Reviewer + CSO + CCO
    assert_eq!(r1.tokens, 250 + 220 + 220 + 340 + 320 + 165 + 110);
    t1.check_order().unwrap();
}

#[tokio::test]
async fn compliance_repairs_once_then_gives_up() {
    let scenario = approving_scenario(ExecutionMode::Direct, "Carol");
    let backend = scripted(scenario);
    let ex = musr_example("m1");
    let (out, _) = run_compliance(&ex, "I think it was Carol.", &backend, &settings())
        .await
        .unwrap();
    assert_eq!(backend.count_role(AgentRole::Cso), 2);
    assert_eq!(backend.count_role(AgentRole::Cco), 2);
    assert_eq!(out.attempts, 2);
    assert!(!out.compliant);
    assert!(out.rejection.unwrap().contains("Carol"));
    let second = &backend.requests()[2];
    assert_eq!(second.tag.role, AgentRole::Cso);
    assert!(second.turns.iter().any(|t| t.speaker == "COMPLIANCE"));
}

#[tokio::test]
async fn compliance_repair_can_succeed() {
    let scenario = approving_scenario(ExecutionMode::Direct, "Carol")
        .with("CSO:2:*", ScriptedEntry::new(final_answer("A", false), 100, 5))
        .unwrap();
    let backend = scripted(scenario);
    let ex = musr_example("m1");
    let (result, _) = run_hierarchical(&ex, ExecutionPolicy::Nocap, &backend, &settings())
        .await
        .unwrap();
    assert!(result.compliant);
    assert_eq!(result.final_answer, "A");
    assert_eq!(result.score, 1.0);
}

#[tokio::test]
async fn cco_revise_rejects_schema_valid_answer() {
    let scenario = approving_scenario(ExecutionMode::Direct, "1871")
        .with("CCO:*:*", ScriptedEntry::new(revise("answer must be a short span"), 10, 1))
        .unwrap();
    let backend = scripted(scenario);
    let (out, _) = run_compliance(&squad_example("q", true), "1871", &backend, &settings())
        .await
        .unwrap();
    assert!(!out.compliant);
    assert_eq!(out.attempts, 2);
    assert_eq!(out.final_answer, "1871");
}

#[tokio::test]
async fn abstention_is_settled_to_empty_answer() {
    let scenario = approving_scenario(ExecutionMode::Direct, "x")
        .with("CSO:*:*", ScriptedEntry::new(final_answer("", true), 10, 1))
        .unwrap();
    let backend = scripted(scenario);
    let ex = squad_example("u1", false);
    let (result, _) = run_hierarchical(&ex, ExecutionPolicy::Nocap, &backend, &settings())
        .await
        .unwrap();
    assert!(result.abstained);
    assert!(result.compliant);
    assert_eq!(result.final_answer, "");
    assert_eq!(result.score, 1.0);
}

struct FailingDrafter(ScriptedBackend);

#[async_trait]
impl ChatBackend for FailingDrafter {
    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        if request.tag.role == AgentRole::Drafter {
            return Err(BackendError::Transport("connection reset".into()));
        }
        self.0.complete(request).await
    }
}

#[tokio::test]
async fn failed_first_draft_skips_compliance() {
    let backend = Recorder::new(FailingDrafter(ScriptedBackend::new(approving_scenario(
        ExecutionMode::LightMas,
        "1871",
    ))));
    let (result, t) = run_hierarchical(&squad_example("q", true), ExecutionPolicy::Nocap, &backend, &settings())
        .await
        .unwrap();
    assert_eq!(result.failure.unwrap().kind, FailureKind::NoDraft);
    assert_eq!(t.calls(Layer::C), 0);
    assert_eq!(backend.count_role(AgentRole::Cso), 0);
    assert_eq!(result.score, 0.0);
}

#[tokio::test]
async fn budget_gate_refuses_before_the_first_draft() {
    let mut table = PolicyTable::default();
    table.strict.token_budget = Some(100);
    let settings = OrgSettings {
        policy_table: table,
        ..OrgSettings::default()
    };
    let backend = scripted(approving_scenario(ExecutionMode::Direct, "1871"));
    let (result, t) = run_hierarchical(&squad_example("q", true), ExecutionPolicy::Strict, &backend, &settings)
        .await
        .unwrap();
    // The CEO's 250 tokens exhaust the budget; nothing else in A or B runs.
    assert_eq!(t.calls(Layer::A), 1);
    assert_eq!(t.calls(Layer::B), 0);
    assert_eq!(t.calls(Layer::C), 0);
    assert_eq!(result.failure.unwrap().kind, FailureKind::NoDraft);
    assert_eq!(result.execution_config.unwrap().mode, ExecutionMode::Direct);
}

#[tokio::test]
async fn budget_gate_stops_execution_midway() {
    let backend = scripted(
        perpetual_revise_scenario()
            .with("CEO:*:*", ScriptedEntry::new(exec_config(ExecutionMode::LightMas, SkillProfile::Data), 600, 100))
            .unwrap()
            .with("CTO:*:*", ScriptedEntry::new(approve(), 600, 100))
            .unwrap()
            .with("COO:*:*", ScriptedEntry::new(approve(), 600, 100))
            .unwrap()
            .with("DRAFTER:*:*", ScriptedEntry::new("Draft: 1871", 600, 100))
            .unwrap()
            .with("REVIEWER:*:*", ScriptedEntry::new(revise("again"), 600, 100))
            .unwrap(),
    );
    let (result, t) = run_hierarchical(&squad_example("q", true), ExecutionPolicy::Strict, &backend, &settings())
        .await
        .unwrap();
    let gated = t.layer_total(Layer::A) + t.layer_total(Layer::B);
    // 2100 after A; D 2800, R 3500, D 4200; the next Reviewer is refused.
    assert_eq!(t.calls(Layer::B), 3);
    assert_eq!(gated, 4_200);
    assert!(gated <= 4_000 + 700);
    assert!(result.failure.is_none());
    assert_eq!(t.calls(Layer::C), 4);
}
