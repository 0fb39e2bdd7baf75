#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use async_trait::async_trait;
use orgagent::agents::{render_structured_block, FinalAnswer, ReviewVerdict, StructuredValue};
use orgagent::backend::{
    BackendError, ChatBackend, ChatRequest, ChatResponse, ScriptedBackend, ScriptedEntry,
    ScriptedScenario,
};
use orgagent::domain::{AgentRole, Benchmark, Example, ExecutionConfig, ExecutionMode, SkillProfile};

/// Wraps a backend and keeps every request plus the in-flight high-water mark.
pub struct Recorder<B> {
    inner: B,
    requests: Mutex<Vec<ChatRequest>>,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
}

impl<B: ChatBackend> Recorder<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            requests: Mutex::new(Vec::new()),
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        }
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.requests.lock().unwrap().clone()
    }

    pub fn count(&self) -> usize {
        self.requests.lock().unwrap().len()
    }

    pub fn count_role(&self, role: AgentRole) -> usize {
        self.requests
            .lock()
            .unwrap()
            .iter()
            .filter(|r| r.tag.role == role)
            .count()
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl<B: ChatBackend> ChatBackend for Recorder<B> {
    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.requests.lock().unwrap().push(request.clone());
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        let out = self.inner.complete(request).await;
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        out
    }

    fn is_deterministic(&self) -> bool {
        self.inner.is_deterministic()
    }
}

pub fn approve() -> String {
    render_structured_block(&StructuredValue::Verdict(ReviewVerdict::approve()))
}

pub fn revise(feedback: &str) -> String {
    render_structured_block(&StructuredValue::Verdict(ReviewVerdict::revise(feedback)))
}

pub fn final_answer(answer: &str, abstain: bool) -> String {
    render_structured_block(&StructuredValue::FinalAnswer(FinalAnswer {
        answer: answer.to_string(),
        abstain,
    }))
}

pub fn exec_config(mode: ExecutionMode, skill: SkillProfile) -> String {
    let config = ExecutionConfig {
        rationale: "scripted".to_string(),
        ..ExecutionConfig::new(mode, skill)
    };
    format!(
        "Plan follows.\n{}",
        render_structured_block(&StructuredValue::ExecConfig(config))
    )
}

/// Everyone approves. The CEO proposes `mode` and the CSO answers `answer`.
pub fn approving_scenario(mode: ExecutionMode, answer: &str) -> ScriptedScenario {
    let mut s = ScriptedScenario::new(ScriptedEntry::new("", 10, 1));
    let entries = [
        ("CEO:*:*", exec_config(mode, SkillProfile::Domain), 200, 50),
        ("CTO:*:*", approve(), 200, 20),
        ("COO:*:*", approve(), 200, 20),
        ("DRAFTER:*:*", "Draft: the passage says so.".to_string(), 300, 40),
        ("REVIEWER:*:*", approve(), 300, 20),
        ("SPECIALIST:*:*", "Checked the numbers.".to_string(), 300, 30),
        ("CSO:*:*", final_answer(answer, false), 150, 15),
        ("CCO:*:*", approve(), 100, 10),
    ];
    for (key, content, p, c) in entries {
        s = s.with(key, ScriptedEntry::new(content, p, c)).unwrap();
    }
    s
}

/// Nobody ever approves and the CEO never emits a parseable config.
pub fn perpetual_revise_scenario() -> ScriptedScenario {
    let mut s = ScriptedScenario::new(ScriptedEntry::new("", 10, 1));
    let entries = [
        ("CEO:*:*", "I need to think more about this.".to_string()),
        ("CTO:*:*", revise("too vague")),
        ("COO:*:*", revise("too costly")),
        ("DRAFTER:*:*", "Draft: maybe.".to_string()),
        ("REVIEWER:*:*", revise("not supported by the passage")),
        ("SPECIALIST:*:*", "Consider the second paragraph.".to_string()),
        ("CSO:*:*", final_answer("maybe", false)),
        ("CCO:*:*", revise("format")),
    ];
    for (key, content) in entries {
        s = s.with(key, ScriptedEntry::new(content, 100, 10)).unwrap();
    }
    s
}

pub fn scripted(s: ScriptedScenario) -> Recorder<ScriptedBackend> {
    Recorder::new(ScriptedBackend::new(s))
}

pub fn squad_example(id: &str, answerable: bool) -> Example {
    Example {
        id: id.to_string(),
        benchmark: Benchmark::Squad2,
        context: "The river Varn was first bridged in 1871 by the town council.".to_string(),
        question: "When was the Varn first bridged?".to_string(),
        choices: None,
        gold_answers: if answerable {
            vec!["1871".to_string()]
        } else {
            Vec::new()
        },
        answerable,
    }
}

pub fn musr_example(id: &str) -> Example {
    Example {
        id: id.to_string(),
        benchmark: Benchmark::Musr,
        context: "Mara had the key; Ben was at the market all afternoon.".to_string(),
        question: "Who opened the safe?".to_string(),
        choices: Some(vec!["Mara".to_string(), "Ben".to_string()]),
        gold_answers: vec!["Mara".to_string()],
        answerable: true,
    }
}

pub fn musique_example(id: &str) -> Example {
    Example {
        id: id.to_string(),
        benchmark: Benchmark::Musique,
        context: "Ada Byrne wrote The Salt Road. Byrne was born in Cork.".to_string(),
        question: "Where was the author of The Salt Road born?".to_string(),
        choices: None,
        gold_answers: vec!["Cork".to_string()],
        answerable: true,
    }
}

pub fn data_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}
