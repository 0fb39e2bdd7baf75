//! Execution policies, clamping of governance output to a policy, and the
//! per-call budget gate.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    validate_execution_config_with, ConfigViolation, ExecutionConfig, ExecutionMode,
    ExecutionPolicy,
};

/// Constraints of one concrete policy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyProfile {
    pub allowed_modes: BTreeSet<ExecutionMode>,
    #[serde(default)]
    pub round_cap_override: Option<u32>,
    #[serde(default)]
    pub token_budget: Option<u64>,
}

/// Concrete values behind STRICT, BALANCE and NOCAP. AUTO has no profile of
/// its own; it delegates to one of these per example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyTable {
    #[serde(rename = "STRICT")]
    pub strict: PolicyProfile,
    #[serde(rename = "BALANCE")]
    pub balance: PolicyProfile,
    #[serde(rename = "NOCAP")]
    pub nocap: PolicyProfile,
}

impl Default for PolicyTable {
    fn default() -> Self {
        let all: BTreeSet<_> = ExecutionMode::ALL.into_iter().collect();
        Self {
            strict: PolicyProfile {
                allowed_modes: [ExecutionMode::Direct, ExecutionMode::LightMas]
                    .into_iter()
                    .collect(),
                round_cap_override: Some(2),
                token_budget: Some(4_000),
            },
            balance: PolicyProfile {
                allowed_modes: all.clone(),
                round_cap_override: Some(3),
                token_budget: Some(16_000),
            },
            nocap: PolicyProfile {
                allowed_modes: all,
                round_cap_override: None,
                token_budget: None,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyTableError {
    #[error("{0} allows no execution mode")]
    NoModes(ExecutionPolicy),
    #[error("{0} has a zero round cap override")]
    ZeroRoundCap(ExecutionPolicy),
    #[error("{0} has a zero token budget")]
    ZeroBudget(ExecutionPolicy),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedPolicy {
    pub policy: ExecutionPolicy,
    pub allowed_modes: BTreeSet<ExecutionMode>,
    pub round_cap_override: Option<u32>,
    pub token_budget: Option<u64>,
    pub auto_delegated: bool,
    /// The concrete profiles AUTO may pick from; empty otherwise.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub delegates: Vec<ResolvedPolicy>,
}

impl ResolvedPolicy {
    /// The profile a config is enforced under. For AUTO this is the delegate
    /// named in `config.profile`, BALANCE when governance named none.
    pub fn effective_for(&self, config: &ExecutionConfig) -> &ResolvedPolicy {
        if !self.auto_delegated {
            return self;
        }
        let wanted = config
            .profile
            .filter(|p| *p != ExecutionPolicy::Auto)
            .unwrap_or(ExecutionPolicy::Balance);
        self.delegates
            .iter()
            .find(|d| d.policy == wanted)
            .unwrap_or(self)
    }
}

impl PolicyTable {
    pub fn check(&self) -> Result<(), PolicyTableError> {
        for policy in ExecutionPolicy::CONCRETE {
            let profile = self.profile(policy);
            if profile.allowed_modes.is_empty() {
                return Err(PolicyTableError::NoModes(policy));
            }
            if profile.round_cap_override == Some(0) {
                return Err(PolicyTableError::ZeroRoundCap(policy));
            }
            if profile.token_budget == Some(0) {
                return Err(PolicyTableError::ZeroBudget(policy));
            }
        }
        Ok(())
    }

    fn profile(&self, policy: ExecutionPolicy) -> &PolicyProfile {
        match policy {
            ExecutionPolicy::Strict => &self.strict,
            ExecutionPolicy::Balance => &self.balance,
            // AUTO never reaches here through `resolve`.
            ExecutionPolicy::Nocap | ExecutionPolicy::Auto => &self.nocap,
        }
    }

    pub fn resolve(&self, policy: ExecutionPolicy) -> ResolvedPolicy {
        match policy {
            ExecutionPolicy::Auto => ResolvedPolicy {
                policy,
                allowed_modes: ExecutionMode::ALL.into_iter().collect(),
                round_cap_override: None,
                token_budget: None,
                auto_delegated: true,
                delegates: ExecutionPolicy::CONCRETE
                    .into_iter()
                    .map(|p| self.resolve(p))
                    .collect(),
            },
            concrete => {
                let profile = self.profile(concrete);
                ResolvedPolicy {
                    policy: concrete,
                    allowed_modes: profile.allowed_modes.clone(),
                    round_cap_override: profile.round_cap_override,
                    token_budget: profile.token_budget,
                    auto_delegated: false,
                    delegates: Vec::new(),
                }
            }
        }
    }

    pub fn validate(
        &self,
        config: &ExecutionConfig,
        policy: ExecutionPolicy,
    ) -> Vec<ConfigViolation> {
        validate_execution_config_with(config, policy, self)
    }
}

/// Resolves a policy against the default table.
pub fn resolve(policy: ExecutionPolicy) -> ResolvedPolicy {
    PolicyTable::default().resolve(policy)
}

fn nearest_allowed(mode: ExecutionMode, allowed: &BTreeSet<ExecutionMode>) -> ExecutionMode {
    if allowed.contains(&mode) {
        return mode;
    }
    ExecutionMode::ALL
        .into_iter()
        .rev()
        .filter(|m| *m < mode)
        .find(|m| allowed.contains(m))
        .or_else(|| {
            ExecutionMode::ALL
                .into_iter()
                .filter(|m| *m > mode)
                .find(|m| allowed.contains(m))
        })
        .unwrap_or(mode)
}

/// Forces `config` inside the policy. A disallowed mode is demoted to the
/// nearest allowed one below it. Idempotent.
pub fn clamp(config: &ExecutionConfig, resolved: &ResolvedPolicy) -> ExecutionConfig {
    let effective = resolved.effective_for(config);
    let mode = nearest_allowed(config.mode, &effective.allowed_modes);
    let mut round_cap = config.round_cap.min(mode.max_rounds());
    if let Some(cap) = effective.round_cap_override {
        round_cap = round_cap.min(cap);
    }
    ExecutionConfig {
        mode,
        drafter_skill: config.drafter_skill,
        specialist_skill: config
            .specialist_skill
            .filter(|_| mode == ExecutionMode::FullMas),
        round_cap: round_cap.max(1),
        token_budget: effective.token_budget,
        rationale: config.rationale.clone(),
        profile: Some(effective.policy),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum GateVerdict {
    Proceed,
    BudgetExceeded,
}

pub fn budget_gate(ledger_so_far: u64, resolved: &ResolvedPolicy) -> GateVerdict {
    gate_with_budget(ledger_so_far, resolved.token_budget)
}

/// Refuses once the ledger has reached the budget. Checked before each call,
/// so the final total can overshoot by at most one call's tokens.
pub fn gate_with_budget(ledger_so_far: u64, budget: Option<u64>) -> GateVerdict {
    match budget {
        Some(budget) if ledger_so_far >= budget => GateVerdict::BudgetExceeded,
        _ => GateVerdict::Proceed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{validate_execution_config, SkillProfile};
    use proptest::prelude::*;

    #[test]
    fn strict_resolution() {
        let r = resolve(ExecutionPolicy::Strict);
        assert_eq!(
            r.allowed_modes,
            [ExecutionMode::Direct, ExecutionMode::LightMas].into_iter().collect()
        );
        assert_eq!(r.round_cap_override, Some(2));
        assert_eq!(r.token_budget, Some(4_000));
        assert!(!r.auto_delegated);
    }

    #[test]
    fn nocap_and_auto_resolution() {
        let nocap = resolve(ExecutionPolicy::Nocap);
        assert_eq!(nocap.allowed_modes.len(), 3);
        assert_eq!(nocap.round_cap_override, None);
        assert_eq!(nocap.token_budget, None);

        let auto = resolve(ExecutionPolicy::Auto);
        assert!(auto.auto_delegated);
        assert_eq!(auto.allowed_modes.len(), 3);
        assert_eq!(auto.delegates.len(), 3);
    }

    #[test]
    fn mode_sets_are_monotone() {
        let s = resolve(ExecutionPolicy::Strict).allowed_modes;
        let b = resolve(ExecutionPolicy::Balance).allowed_modes;
        let n = resolve(ExecutionPolicy::Nocap).allowed_modes;
        assert!(s.is_subset(&b) && s != b);
        assert!(b.is_subset(&n));
    }

    #[test]
    fn full_mas_under_strict_clamps_to_light() {
        let c = ExecutionConfig::new(ExecutionMode::FullMas, SkillProfile::Domain);
        let clamped = clamp(&c, &resolve(ExecutionPolicy::Strict));
        assert_eq!(clamped.mode, ExecutionMode::LightMas);
        assert_eq!(clamped.round_cap, 2);
        assert_eq!(clamped.token_budget, Some(4_000));
    }

    #[test]
    fn direct_under_nocap_is_unchanged() {
        let c = ExecutionConfig::new(ExecutionMode::Direct, SkillProfile::Reasoning);
        let clamped = clamp(&c, &resolve(ExecutionPolicy::Nocap));
        assert_eq!(clamped.mode, c.mode);
        assert_eq!(clamped.round_cap, 1);
        assert_eq!(clamped.token_budget, None);
    }

    #[test]
    fn balance_caps_full_mas_at_three() {
        let c = ExecutionConfig::new(ExecutionMode::FullMas, SkillProfile::Domain);
        let clamped = clamp(&c, &resolve(ExecutionPolicy::Balance));
        assert_eq!(clamped.mode, ExecutionMode::FullMas);
        assert_eq!(clamped.round_cap, 3);
        assert_eq!(clamped.token_budget, Some(16_000));
    }

    #[test]
    fn auto_follows_named_profile() {
        let auto = resolve(ExecutionPolicy::Auto);
        let c = ExecutionConfig {
            profile: Some(ExecutionPolicy::Strict),
            specialist_skill: Some(SkillProfile::Data),
            ..ExecutionConfig::new(ExecutionMode::FullMas, SkillProfile::Domain)
        };
        let clamped = clamp(&c, &auto);
        assert_eq!(clamped.mode, ExecutionMode::LightMas);
        assert_eq!(clamped.specialist_skill, None);
        assert_eq!(clamped.profile, Some(ExecutionPolicy::Strict));

        let unnamed = ExecutionConfig::new(ExecutionMode::FullMas, SkillProfile::Domain);
        assert_eq!(clamp(&unnamed, &auto).profile, Some(ExecutionPolicy::Balance));
    }

    #[test]
    fn gate_boundaries() {
        let strict = resolve(ExecutionPolicy::Strict);
        assert_eq!(budget_gate(3_999, &strict), GateVerdict::Proceed);
        assert_eq!(budget_gate(4_000, &strict), GateVerdict::BudgetExceeded);
        let nocap = resolve(ExecutionPolicy::Nocap);
        assert_eq!(budget_gate(u64::MAX, &nocap), GateVerdict::Proceed);
    }

    #[test]
    fn table_check_rejects_empty_modes() {
        let mut t = PolicyTable::default();
        assert!(t.check().is_ok());
        t.strict.allowed_modes.clear();
        assert_eq!(t.check(), Err(PolicyTableError::NoModes(ExecutionPolicy::Strict)));
    }

    #[test]
    fn table_partial_override_from_json() {
        let t: PolicyTable =
            serde_json::from_str(r#"{"STRICT": {"allowed_modes": ["DIRECT"], "token_budget": 1000}}"#)
                .unwrap();
        assert_eq!(t.strict.token_budget, Some(1000));
        assert_eq!(t.balance, PolicyTable::default().balance);
    }

    fn arb_mode() -> impl Strategy<Value = ExecutionMode> {
        prop::sample::select(ExecutionMode::ALL.to_vec())
    }

    fn arb_skill() -> impl Strategy<Value = SkillProfile> {
        prop::sample::select(SkillProfile::ALL.to_vec())
    }

    fn arb_policy() -> impl Strategy<Value = ExecutionPolicy> {
        prop::sample::select(ExecutionPolicy::ALL.to_vec())
    }

    fn arb_config() -> impl Strategy<Value = ExecutionConfig> {
        (
            arb_mode(),
            arb_skill(),
            prop::option::of(arb_skill()),
            0u32..8,
            prop::option::of(1u64..50_000),
            prop::option::of(arb_policy()),
        )
            .prop_map(|(mode, d, s, cap, budget, profile)| ExecutionConfig {
                mode,
                drafter_skill: d,
                specialist_skill: s,
                round_cap: cap,
                token_budget: budget,
                rationale: String::new(),
                profile,
            })
    }

    proptest! {
        #[test]
        fn clamp_is_idempotent(c in arb_config(), p in arb_policy()) {
            let r = resolve(p);
            let once = clamp(&c, &r);
            prop_assert_eq!(clamp(&once, &r), once);
        }

        #[test]
        fn clamp_output_validates(c in arb_config(), p in arb_policy()) {
            let clamped = clamp(&c, &resolve(p));
            prop_assert!(validate_execution_config(&clamped, p).is_empty());
        }
    }
}
