use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use orgagent::domain::{Benchmark, ExecutionPolicy, RunReport, Structure};
use orgagent::metrics::format_half_up;
use orgagent::runner::{self, BackendSpec, RunConfig, RunError};

#[derive(Parser)]
#[command(name = "orgagent", version, about = "Run flat and hierarchical agent organizations on QA benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one setting K times and write its outputs.
    Run(RunArgs),
    /// Relative score improvement and token reduction of a hierarchical run over a flat one.
    Compare {
        /// Flat run directory or report.json.
        #[arg(long)]
        flat: PathBuf,
        /// Hierarchical run directory or report.json.
        #[arg(long)]
        hier: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge reports from several runs into one set of tables.
    Report {
        /// Run directories or report.json files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON run config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    benchmark: Option<Benchmark>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    structure: Option<Structure>,
    #[arg(long)]
    policy: Option<ExecutionPolicy>,
    /// `live`, `live:<base-url>` or `scripted:<scenario.json>`.
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Prompt pack JSON replacing the built-in one.
    #[arg(long)]
    prompt_pack: Option<PathBuf>,
}

impl RunArgs {
    fn into_config(self) -> Result<RunConfig, RunError> {
        let mut fields = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
                match serde_json::from_str(&text) {
                    Ok(Value::Object(map)) => map,
                    Ok(_) => return Err(RunError::Config("config file must hold a JSON object".into())),
                    Err(e) => return Err(RunError::Config(format!("{}: {e}", path.display()))),
                }
            }
            None => Map::new(),
        };
        let mut set = |key: &str, value: Value| {
            fields.insert(key.to_string(), value);
        };
        if let Some(v) = self.benchmark {
            set("benchmark", json!(v));
        }
        if let Some(v) = self.data {
            set("data", json!(v));
        }
        if let Some(v) = self.structure {
            set("structure", json!(v));
        }
        if let Some(v) = self.policy {
            set("policy", json!(v));
        }
        if let Some(v) = self.backend {
            let spec = BackendSpec::parse(&v)?;
            set("backend", serde_json::to_value(spec).expect("backend spec serializes"));
        }
        if let Some(v) = self.model {
            set("model", json!(v));
        }
        if let Some(v) = self.repeats {
            set("repeats", json!(v));
        }
        if let Some(v) = self.limit {
            set("limit", json!(v));
        }
        if let Some(v) = self.seed {
            set("seed", json!(v));
        }
        if let Some(v) = self.parallelism {
            set("parallelism", json!(v));
        }
        if let Some(v) = self.out {
            set("out", json!(v));
        }
        if let Some(v) = self.temperature {
            set("temperature", json!(v));
        }
        if let Some(v) = self.prompt_pack {
            set("prompt_pack", json!(v));
        }
        let config: RunConfig =
            serde_json::from_value(Value::Object(fields)).map_err(|e| RunError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }
}

fn summary(report: &RunReport) -> String {
    let policy = report.policy.map(|p| format!(" {p}")).unwrap_or_default();
    let std = report
        .std
        .map(|s| format!(" ± {}", format_half_up(s, 2)))
        .unwrap_or_default();
    let mut line = format!(
        "{} {}{} on {} ({} examples × {} repeats): score {}{std}, avg tokens {}",
        report.structure,
        report.model,
        policy,
        report.benchmark,
        report.examples,
        report.repeats(),
        format_half_up(report.mean, 2),
        format_half_up(report.avg_token, 2),
    );
    if let Some(a) = report.abs_rate {
        line.push_str(&format!(", abstention {}%", format_half_up(a, 2)));
    }
    line
}

fn emit(reports: &[RunReport], delta: Option<&orgagent::domain::ComparisonDelta>, out: &Path) -> Result<(), RunError> {
    let emitted = runner::emit_reports(reports, delta, out)?;
    for notice in &emitted.notices {
        eprintln!("note: {notice}");
    }
    Ok(())
}

async fn execute(command: Command) -> Result<ExitCode, RunError> {
    match command {
        Command::Run(args) => {
            let config = args.into_config()?;
            let outcome = runner::run(&config).await?;
            emit(std::slice::from_ref(&outcome.report), None, &config.out)?;
            println!("{}", summary(&outcome.report));
            println!("log: {}", outcome.log_path.display());
            if outcome.aborted() {
                eprintln!("{} repeat(s) aborted", outcome.report.aborted_repeats);
                return Ok(ExitCode::from(1));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Compare { flat, hier, out } => {
            let flat = first_report(&flat)?;
            let hier = first_report(&hier)?;
            let delta = runner::compare(&flat, &hier)?;
            println!(
                "improvement {}%, token reduction {}%",
                format_half_up(delta.improvement_pct, 2),
                format_half_up(delta.token_reduction_pct, 2)
            );
            if let Some(out) = out {
                emit(&[flat, hier], Some(&delta), &out)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { inputs, out } => {
            let mut reports = Vec::new();
            for input in &inputs {
                reports.extend(runner::load_reports(input)?.reports);
            }
            emit(&reports, None, &out)?;
            for r in &reports {
                println!("{}", summary(r));
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn first_report(path: &Path) -> Result<RunReport, RunError> {
    runner::load_reports(path)?
        .reports
        .into_iter()
        .next()
        .ok_or_else(|| RunError::Config(format!("{} holds no report", path.display())))
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match execute(cli.command).await {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> RunArgs {
        let mut argv = vec!["orgagent", "run"];
        argv.extend_from_slice(args);
        match Cli::parse_from(argv).command {
            Command::Run(args) => args,
            _ => unreachable!(),
        }
    }

    #[test]
    fn flags_build_a_config() {
        let config = parse(&[
            "--benchmark", "musique", "--data", "d.jsonl", "--structure", "hier", "--policy",
            "strict", "--backend", "scripted:s.json", "--model", "m", "--out", "o", "--limit", "5",
        ])
        .into_config()
        .unwrap();
        assert_eq!(config.benchmark, Benchmark::Musique);
        assert_eq!(config.structure, Structure::Hierarchical);
        assert_eq!(config.policy, Some(ExecutionPolicy::Strict));
        assert_eq!(config.limit, Some(5));
        assert_eq!(config.repeats, 1);
        assert!(matches!(config.backend, BackendSpec::Scripted { .. }));
    }

    #[test]
    fn missing_fields_are_config_errors() {
        let err = parse(&["--model", "m"]).into_config().unwrap_err();
        assert!(matches!(err, RunError::Config(_)));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn summary_omits_std_for_one_repeat() {
        let report = RunReport {
            benchmark: Benchmark::Squad2,
            model: "m".into(),
            structure: Structure::Flat,
            policy: None,
            examples: 4,
            run_scores: vec![50.0],
            mean: 50.0,
            std: None,
            run_token_totals: vec![400],
            avg_token: 100.0,
            abs_rate: Some(12.5),
            drafter_skill_counts: Default::default(),
            specialist_skill_counts: Default::default(),
            failures: 0,
            non_compliant: 0,
            aborted_repeats: 0,
        };
        assert_eq!(
            summary(&report),
            "FLAT m on SQUAD2 (4 examples × 1 repeats): score 50.00, avg tokens 100.00, abstention 12.50%"
        );
    }
}
