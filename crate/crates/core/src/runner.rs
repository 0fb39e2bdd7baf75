//! Experiment runner: loads a benchmark, runs K repeats of one setting with
//! bounded parallelism, writes a JSONL run log plus per-example transcripts,
//! and aggregates the results into a [`RunReport`].

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::task::JoinSet;

use crate::agents::{AgentError, PromptPack};
use crate::backend::{
    with_rate_limit, BackendError, ChatBackend, LiveConfig, OpenAiCompatClient, RetryPolicy,
    ScriptedBackend, ScriptedScenario, DEFAULT_TEMPERATURE,
};
use crate::bench::{load_benchmark, sample, LoadError, NoAnswerSet};
use crate::domain::{
    Benchmark, ComparisonDelta, Example, ExampleResult, ExecutionConfig, ExecutionPolicy, Failure,
    FailureKind, RunReport, Structure, Transcript,
};
use crate::exchange::{OrgError, OrgSettings};
use crate::metrics::{
    abs_rate, format_half_up, improvement_pct, mean_std, skill_distribution, token_reduction_pct,
    MetricsError, ScoreSeries,
};
use crate::org_flat::{run_baseline, run_flat};
use crate::org_hier::run_hierarchical;
use crate::policy::PolicyTable;

pub const LOG_FILE: &str = "run.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const TRANSCRIPT_DIR: &str = "transcripts";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    /// OpenAI-compatible endpoint. `base_url` falls back to
    /// `ORGAGENT_API_BASE`; the key always comes from `ORGAGENT_API_KEY`.
    Live {
        #[serde(default)]
        base_url: Option<String>,
        /// Defaults to the run's parallelism.
        #[serde(default)]
        max_in_flight: Option<usize>,
        #[serde(default)]
        min_interval_ms: u64,
        #[serde(default)]
        retry: Option<RetryPolicy>,
        #[serde(default)]
        timeout_secs: Option<u64>,
    },
    Scripted {
        scenario: PathBuf,
        #[serde(default)]
        latency_ms: Option<u64>,
    },
}

impl BackendSpec {
    /// `live`, `live:<base-url>` or `scripted:<scenario.json>`.
    pub fn parse(text: &str) -> Result<Self, RunError> {
        let live = |base_url| BackendSpec::Live {
            base_url,
            max_in_flight: None,
            min_interval_ms: 0,
            retry: None,
            timeout_secs: None,
        };
        match text.split_once(':') {
            _ if text == "live" => Ok(live(None)),
            Some(("live", url)) => Ok(live(Some(url.to_string()))),
            Some(("scripted", path)) if !path.is_empty() => Ok(BackendSpec::Scripted {
                scenario: PathBuf::from(path),
                latency_ms: None,
            }),
            _ => Err(RunError::Config(format!(
                "backend must be `live`, `live:<base-url>` or `scripted:<path>`, got `{text}`"
            ))),
        }
    }

    fn label(&self) -> &'static str {
        match self {
            BackendSpec::Live { .. } => "live",
            BackendSpec::Scripted { .. } => "scripted",
        }
    }
}

fn default_repeats() -> usize {
    1
}

fn default_parallelism() -> usize {
    4
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub benchmark: Benchmark,
    pub data: PathBuf,
    pub structure: Structure,
    #[serde(default)]
    pub policy: Option<ExecutionPolicy>,
    pub backend: BackendSpec,
    pub model: String,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub limit: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    pub out: PathBuf,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub max_output_tokens: Option<u32>,
    #[serde(default)]
    pub prompt_pack: Option<PathBuf>,
    /// Overrides for the policy table.
    #[serde(default)]
    pub policies: Option<PolicyTable>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, RunError> {
        serde_json::from_str(text).map_err(|e| RunError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let problem = match (self.structure, self.policy) {
            (Structure::Hierarchical, None) => Some("hierarchical runs need a policy".to_string()),
            (Structure::Baseline | Structure::Flat, Some(p)) => {
                Some(format!("policy {p} only applies to hierarchical runs"))
            }
            _ if self.repeats == 0 => Some("repeats must be at least 1".to_string()),
            _ if self.parallelism == 0 => Some("parallelism must be at least 1".to_string()),
            _ if !self.temperature.is_finite() || self.temperature < 0.0 => {
                Some("temperature must be a finite non-negative number".to_string())
            }
            _ if self.model.trim().is_empty() => Some("model name is empty".to_string()),
            _ => None,
        };
        if let Some(problem) = problem {
            return Err(RunError::Config(problem));
        }
        if let Some(table) = &self.policies {
            table.check().map_err(|e| RunError::Config(e.to_string()))?;
        }
        Ok(())
    }

    fn settings(&self) -> Result<OrgSettings, RunError> {
        let pack = match &self.prompt_pack {
            Some(path) => PromptPack::load(path)?,
            None => PromptPack::builtin().clone(),
        };
        Ok(OrgSettings {
            model: self.model.clone(),
            temperature: self.temperature,
            max_output_tokens: self.max_output_tokens,
            pack: Arc::new(pack),
            policy_table: self.policies.clone().unwrap_or_default(),
            ..OrgSettings::default()
        })
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] AgentError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("runs are not comparable: {0}")]
    MismatchedRuns(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("every repeat aborted")]
    NoCompletedRepeat,
}

impl RunError {
    /// Process exit status: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Load(_) | RunError::Backend(_) | RunError::Prompt(_) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Instantiates the configured backend.
pub fn build_backend(spec: &BackendSpec, parallelism: usize) -> Result<Arc<dyn ChatBackend>, RunError> {
    match spec {
        BackendSpec::Scripted {
            scenario,
            latency_ms,
        } => {
            let mut backend = ScriptedBackend::new(ScriptedScenario::load(scenario)?);
            if let Some(ms) = latency_ms {
                backend = backend.with_latency(Duration::from_millis(*ms));
            }
            Ok(Arc::new(backend))
        }
        BackendSpec::Live {
            base_url,
            max_in_flight,
            min_interval_ms,
            retry,
            timeout_secs,
        } => {
            let mut config = match base_url {
                Some(url) => LiveConfig {
                    api_key: std::env::var(crate::backend::ENV_API_KEY).ok().filter(|k| !k.is_empty()),
                    ..LiveConfig::new(url.clone())
                },
                None => LiveConfig::from_env()?,
            };
            if let Some(retry) = retry {
                config.retry = *retry;
            }
            if let Some(secs) = timeout_secs {
                config.timeout = Duration::from_secs(*secs);
            }
            let limit = NonZeroUsize::new(max_in_flight.unwrap_or(parallelism))
                .ok_or_else(|| RunError::Config("max_in_flight must be at least 1".into()))?;
            Ok(Arc::new(with_rate_limit(
                OpenAiCompatClient::new(config)?,
                limit,
                Duration::from_millis(*min_interval_ms),
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub benchmark: Benchmark,
    pub structure: Structure,
    pub policy: Option<ExecutionPolicy>,
    pub model: String,
    pub backend: String,
    pub repeats: usize,
    pub examples: usize,
    pub seed: u64,
    pub limit: Option<usize>,
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub repeat: usize,
    pub example_id: String,
    pub structure: Structure,
    pub policy: Option<ExecutionPolicy>,
    pub config: Option<ExecutionConfig>,
    pub answer: String,
    pub abstained: bool,
    pub compliant: bool,
    pub score: f64,
    pub tokens: u64,
    /// Wall-clock time; recorded only for non-deterministic backends.
    pub duration_ms: Option<u64>,
    pub transcript_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<Failure>,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: LogHeader,
}

/// Parsed run log: header plus records in file order.
pub fn read_log(path: &Path) -> Result<(LogHeader, Vec<LogRecord>), RunError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    let bad = |line: usize, e: serde_json::Error| {
        RunError::Config(format!("{}:{}: {e}", path.display(), line + 1))
    };
    let header: HeaderLine = serde_json::from_str(lines.next().unwrap_or_default()).map_err(|e| bad(0, e))?;
    let records = lines
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| bad(i + 1, e)))
        .collect::<Result<Vec<LogRecord>, _>>()?;
    Ok((header.header, records))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub report: RunReport,
    pub log_path: PathBuf,
    pub results: Vec<Vec<ExampleResult>>,
}

impl RunOutcome {
    pub fn aborted(&self) -> bool {
        self.report.aborted_repeats > 0
    }
}

/// Runs one example under `structure`. Backend failures become a scored-zero
/// result carrying whatever transcript was recorded.
pub async fn run_example(
    structure: Structure,
    policy: Option<ExecutionPolicy>,
    example: &Example,
    backend: &dyn ChatBackend,
    settings: &OrgSettings,
) -> (ExampleResult, Transcript) {
    let outcome = match structure {
        Structure::Baseline => run_baseline(example, backend, settings).await,
        Structure::Flat => run_flat(example, backend, settings).await,
        Structure::Hierarchical => {
            let policy = policy.unwrap_or(ExecutionPolicy::Balance);
            run_hierarchical(example, policy, backend, settings).await
        }
    };
    match outcome {
        Ok(done) => done,
        Err(err) => {
            let transcript = err
                .partial_transcript()
                .cloned()
                .unwrap_or_else(|| Transcript::new(example.id.clone()));
            let kind = match err {
                OrgError::Backend { .. } => FailureKind::BackendFailure,
                OrgError::Agent(_) => FailureKind::BackendFailure,
            };
            tracing::warn!(example = %example.id, error = %err, "example failed");
            let result = ExampleResult {
                example_id: example.id.clone(),
                final_answer: String::new(),
                abstained: false,
                compliant: false,
                execution_config: None,
                governance_fallback: false,
                tokens: transcript.ledger_total(),
                score: 0.0,
                failure: Some(Failure {
                    kind,
                    detail: err.to_string(),
                }),
            };
            (result, transcript)
        }
    }
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
        .collect()
}

fn transcript_rel_path(repeat: usize, index: usize, id: &str) -> String {
    format!("{TRANSCRIPT_DIR}/r{repeat}/{index:05}-{}.json", sanitize(id))
}

/// Loads data and backend from `config`, then runs.
pub async fn run(config: &RunConfig) -> Result<RunOutcome, RunError> {
    config.validate()?;
    let backend = build_backend(&config.backend, config.parallelism)?;
    run_with_backend(config, backend).await
}

/// Runs with an explicit backend. The backend spec in `config` is only used
/// for the log header.
pub async fn run_with_backend(
    config: &RunConfig,
    backend: Arc<dyn ChatBackend>,
) -> Result<RunOutcome, RunError> {
    config.validate()?;
    let settings = Arc::new(config.settings()?);
    let all = load_benchmark(config.benchmark, &config.data)?;
    let examples: Vec<Arc<Example>> = sample(&all, config.limit, config.seed)
        .into_iter()
        .map(Arc::new)
        .collect();
    if examples.is_empty() {
        return Err(RunError::Config("no examples selected".into()));
    }

    fs::create_dir_all(&config.out).map_err(io_err(&config.out))?;
    let log_path = config.out.join(LOG_FILE);
    let file = File::create(&log_path).map_err(io_err(&log_path))?;
    let mut log = BufWriter::new(file);
    let header = HeaderLine {
        header: LogHeader {
            benchmark: config.benchmark,
            structure: config.structure,
            policy: config.policy,
            model: config.model.clone(),
            backend: config.backend.label().to_string(),
            repeats: config.repeats,
            examples: examples.len(),
            seed: config.seed,
            limit: config.limit,
        },
    };
    writeln!(log, "{}", serde_json::to_string(&header).expect("header serializes"))
        .map_err(io_err(&log_path))?;

    let timed = !backend.is_deterministic();
    let mut per_repeat = Vec::with_capacity(config.repeats);
    let mut aborted = Vec::with_capacity(config.repeats);
    for repeat in 1..=config.repeats {
        let dir = config.out.join(TRANSCRIPT_DIR).join(format!("r{repeat}"));
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let results = run_repeat(
            config, repeat, &examples, &backend, &settings, timed, &mut log, &log_path,
        )
        .await?;
        let failed = results
            .iter()
            .filter(|r| matches!(&r.failure, Some(f) if f.kind == FailureKind::BackendFailure))
            .count();
        let abort = failed == results.len();
        if abort {
            tracing::error!(repeat, "every example failed; repeat aborted");
        }
        aborted.push(abort);
        per_repeat.push(results);
    }
    log.flush().map_err(io_err(&log_path))?;

    let report = aggregate(config, &examples, &per_repeat, &aborted)?;
    Ok(RunOutcome {
        report,
        log_path,
        results: per_repeat,
    })
}

#[allow(clippy::too_many_arguments)]
async fn run_repeat(
    config: &RunConfig,
    repeat: usize,
    examples: &[Arc<Example>],
    backend: &Arc<dyn ChatBackend>,
    settings: &Arc<OrgSettings>,
    timed: bool,
    log: &mut BufWriter<File>,
    log_path: &Path,
) -> Result<Vec<ExampleResult>, RunError> {
    let mut tasks = JoinSet::new();
    let mut next = 0;
    let mut pending: BTreeMap<usize, (ExampleResult, Transcript, Option<u64>)> = BTreeMap::new();
    let mut written = 0;
    let mut results = Vec::with_capacity(examples.len());

    let spawn = |tasks: &mut JoinSet<_>, index: usize| {
        let example = examples[index].clone();
        let backend = backend.clone();
        let settings = settings.clone();
        let (structure, policy) = (config.structure, config.policy);
        tasks.spawn(async move {
            let start = Instant::now();
            let (result, transcript) =
                run_example(structure, policy, &example, backend.as_ref(), &settings).await;
            let elapsed = start.elapsed().as_millis() as u64;
            (index, result, transcript, elapsed)
        });
    };
    while next < examples.len() && next < config.parallelism {
        spawn(&mut tasks, next);
        next += 1;
    }
    while let Some(joined) = tasks.join_next().await {
        let (index, result, transcript, elapsed) =
            joined.map_err(|e| RunError::Config(format!("example task panicked: {e}")))?;
        pending.insert(index, (result, transcript, timed.then_some(elapsed)));
        if next < examples.len() {
            spawn(&mut tasks, next);
            next += 1;
        }
        // Commit finished examples in order so the log is stable under any
        // completion order.
        while let Some((result, transcript, duration_ms)) = pending.remove(&written) {
            let rel = transcript_rel_path(repeat, written, &result.example_id);
            let path = config.out.join(&rel);
            let body = serde_json::to_string_pretty(&transcript).expect("transcript serializes");
            fs::write(&path, body).map_err(io_err(&path))?;
            let record = LogRecord {
                repeat,
                example_id: result.example_id.clone(),
                structure: config.structure,
                policy: config.policy,
                config: result.execution_config.clone(),
                answer: result.final_answer.clone(),
                abstained: result.abstained,
                compliant: result.compliant,
                score: result.score,
                tokens: result.tokens,
                duration_ms,
                transcript_path: rel,
                failure: result.failure.clone(),
            };
            writeln!(log, "{}", serde_json::to_string(&record).expect("record serializes"))
                .map_err(io_err(log_path))?;
            results.push(result);
            written += 1;
        }
    }
    Ok(results)
}

fn aggregate(
    config: &RunConfig,
    examples: &[Arc<Example>],
    per_repeat: &[Vec<ExampleResult>],
    aborted: &[bool],
) -> Result<RunReport, RunError> {
    let n = examples.len();
    let completed: Vec<&Vec<ExampleResult>> = per_repeat
        .iter()
        .zip(aborted)
        .filter(|(_, a)| !**a)
        .map(|(r, _)| r)
        .collect();
    if completed.is_empty() {
        return Err(RunError::NoCompletedRepeat);
    }
    let run_scores: Vec<f64> = completed
        .iter()
        .map(|rs| 100.0 * rs.iter().map(|r| r.score).sum::<f64>() / n as f64)
        .collect();
    let run_token_totals: Vec<u64> = completed
        .iter()
        .map(|rs| rs.iter().map(|r| r.tokens).sum())
        .collect();
    let (mean, std) = mean_std(&ScoreSeries::new(run_scores.clone())?);
    let avg_token = run_token_totals.iter().map(|t| *t as f64 / n as f64).sum::<f64>()
        / run_token_totals.len() as f64;

    let unanswerable: Vec<usize> = (0..n).filter(|i| !examples[*i].answerable).collect();
    let no_answer = NoAnswerSet::default();
    let abs_rate = if unanswerable.is_empty() {
        None
    } else {
        let rates = completed
            .iter()
            .map(|rs| {
                abs_rate(
                    unanswerable.iter().map(|i| rs[*i].final_answer.as_str()),
                    &no_answer,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        Some(rates.iter().sum::<f64>() / rates.len() as f64)
    };

    let configs: Vec<&ExecutionConfig> = completed
        .iter()
        .flat_map(|rs| rs.iter().filter_map(|r| r.execution_config.as_ref()))
        .collect();
    let (drafter_skill_counts, specialist_skill_counts) = if configs.is_empty() {
        (BTreeMap::new(), BTreeMap::new())
    } else {
        let d = skill_distribution(configs.iter().copied())?;
        (d.drafter_counts, d.specialist_counts)
    };

    let all = completed.iter().flat_map(|rs| rs.iter());
    Ok(RunReport {
        benchmark: config.benchmark,
        model: config.model.clone(),
        structure: config.structure,
        policy: config.policy,
        examples: n,
        run_scores,
        mean,
        std,
        run_token_totals,
        avg_token,
        abs_rate,
        drafter_skill_counts,
        specialist_skill_counts,
        failures: all.clone().filter(|r| r.failure.is_some()).count(),
        non_compliant: all.filter(|r| !r.compliant).count(),
        aborted_repeats: aborted.iter().filter(|a| **a).count(),
    })
}

/// Relative score improvement and token reduction of `hier` over `flat`.
pub fn compare(flat: &RunReport, hier: &RunReport) -> Result<ComparisonDelta, RunError> {
    if flat.benchmark != hier.benchmark {
        return Err(RunError::MismatchedRuns(format!(
            "benchmark {} vs {}",
            flat.benchmark, hier.benchmark
        )));
    }
    if flat.model != hier.model {
        return Err(RunError::MismatchedRuns(format!(
            "model {} vs {}",
            flat.model, hier.model
        )));
    }
    Ok(ComparisonDelta {
        s_hier: hier.mean,
        s_flat: flat.mean,
        t_hier: hier.avg_token,
        t_flat: flat.avg_token,
        improvement_pct: improvement_pct(hier.mean, flat.mean)?,
        token_reduction_pct: token_reduction_pct(flat.avg_token, hier.avg_token)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub reports: Vec<RunReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<ComparisonDelta>,
}

pub fn load_reports(path: &Path) -> Result<ReportFile, RunError> {
    let path = if path.is_dir() {
        path.join(REPORT_FILE)
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Emitted {
    pub files: Vec<PathBuf>,
    pub notices: Vec<String>,
}

fn fmt2(x: f64) -> String {
    format_half_up(x, 2)
}

fn opt2(x: Option<f64>) -> String {
    x.map(fmt2).unwrap_or_default()
}

fn policy_cell(p: Option<ExecutionPolicy>) -> String {
    p.map(|p| p.to_string()).unwrap_or_default()
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), RunError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| RunError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    })?;
    let csv_err = |e: csv::Error| RunError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    };
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(row).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes CSV summaries and `report.json` into `out`. Numbers in the CSVs are
/// rounded half-up to two decimals; the JSON keeps full precision.
pub fn emit_reports(
    reports: &[RunReport],
    delta: Option<&ComparisonDelta>,
    out: &Path,
) -> Result<Emitted, RunError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut emitted = Emitted::default();

    let path = out.join("scores.csv");
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.benchmark.to_string(),
                r.model.clone(),
                r.structure.to_string(),
                policy_cell(r.policy),
                r.repeats().to_string(),
                r.examples.to_string(),
                fmt2(r.mean),
                opt2(r.std),
                fmt2(r.avg_token),
                r.failures.to_string(),
                r.non_compliant.to_string(),
                r.aborted_repeats.to_string(),
            ]
        })
        .collect();
    write_csv(
        &path,
        &[
            "benchmark", "model", "structure", "policy", "repeats", "examples", "mean", "std",
            "avg_token", "failures", "non_compliant", "aborted_repeats",
        ],
        &rows,
    )?;
    emitted.files.push(path);

    let path = out.join("avg_tokens.csv");
    let rows: Vec<Vec<String>> = reports
        .iter()
        .filter(|r| r.policy.is_some())
        .map(|r| {
            vec![
                policy_cell(r.policy),
                r.benchmark.to_string(),
                r.model.clone(),
                fmt2(r.avg_token),
            ]
        })
        .collect();
    if rows.is_empty() {
        emitted
            .notices
            .push("avg_tokens.csv not written: no hierarchical policy runs".to_string());
    } else {
        write_csv(&path, &["policy", "benchmark", "model", "avg_token"], &rows)?;
        emitted.files.push(path);
    }

    let path = out.join("abstention.csv");
    let rows: Vec<Vec<String>> = reports
        .iter()
        .filter_map(|r| {
            r.abs_rate.map(|a| {
                vec![
                    r.benchmark.to_string(),
                    r.model.clone(),
                    r.structure.to_string(),
                    policy_cell(r.policy),
                    fmt2(a),
                ]
            })
        })
        .collect();
    if rows.is_empty() {
        emitted
            .notices
            .push("abstention.csv not written: no unanswerable examples".to_string());
    } else {
        write_csv(
            &path,
            &["benchmark", "model", "structure", "policy", "abs_rate"],
            &rows,
        )?;
        emitted.files.push(path);
    }

    let path = out.join("skills.csv");
    let mut rows = Vec::new();
    for r in reports {
        for (role, counts) in [
            ("DRAFTER", &r.drafter_skill_counts),
            ("SPECIALIST", &r.specialist_skill_counts),
        ] {
            let total: usize = counts.values().sum();
            for (skill, count) in counts {
                rows.push(vec![
                    r.benchmark.to_string(),
                    r.model.clone(),
                    policy_cell(r.policy),
                    role.to_string(),
                    skill.to_string(),
                    count.to_string(),
                    fmt2(100.0 * *count as f64 / total as f64),
                ]);
            }
        }
    }
    if rows.is_empty() {
        emitted
            .notices
            .push("skills.csv not written: no skill assignments recorded".to_string());
    } else {
        write_csv(
            &path,
            &["benchmark", "model", "policy", "role", "skill", "count", "share_pct"],
            &rows,
        )?;
        emitted.files.push(path);
    }

    if let Some(d) = delta {
        let path = out.join("delta.csv");
        write_csv(
            &path,
            &["s_flat", "s_hier", "t_flat", "t_hier", "improvement_pct", "token_reduction_pct"],
            &[vec![
                fmt2(d.s_flat),
                fmt2(d.s_hier),
                fmt2(d.t_flat),
                fmt2(d.t_hier),
                fmt2(d.improvement_pct),
                fmt2(d.token_reduction_pct),
            ]],
        )?;
        emitted.files.push(path);
    }

    let path = out.join(REPORT_FILE);
    let file = ReportFile {
        reports: reports.to_vec(),
        delta: delta.copied(),
    };
    let body = serde_json::to_string_pretty(&file).expect("report serializes") + "\n";
    fs::write(&path, body).map_err(io_err(&path))?;
    emitted.files.push(path);
    Ok(emitted)
}
