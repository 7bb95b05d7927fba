//! `gg` — run test-time-scaling searches over a logprob-exposing backend,
//! re-vote stored traces, and report confidence calibration.
//!
//! Exit codes: 0 success, 1 usage/config/data error, 2 backend failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use gg_core::backend::http::{HttpBackend, HttpBackendConfig, ENV_BACKEND_URL, ENV_MODEL_ID};
use gg_core::backend::scripted::ScriptedBackend;
use gg_core::backend::GenerationBackend;
use gg_core::dataset::load_dataset;
use gg_core::grpo::GrpoConfig;
use gg_core::harness::{
    collect_trace_files, grpo_report, revote, run_benchmark, BenchmarkOptions, HarnessError,
    Weighting,
};
use gg_core::search::{SearchConfig, Strategy};

const EXIT_USAGE: u8 = 1;
const EXIT_BACKEND: u8 = 2;

#[derive(Parser)]
#[command(
    name = "gg",
    version,
    about = "Self-guided test-time scaling over OpenAI-compatible completion backends"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a benchmark dataset under the configured strategy.
    Run(RunArgs),
    /// Recompute vote winners from stored trace files.
    Revote(RevoteArgs),
    /// Summarize confidence calibration over a rollout file.
    GrpoReport(GrpoReportArgs),
    /// Load and validate scripted fixture files.
    ValidateFixtures(ValidateFixturesArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML config file; CLI flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset file (line-delimited JSON with id/question/answer).
    #[arg(long)]
    dataset: PathBuf,
    /// Search strategy.
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    /// Total path budget N.
    #[arg(long = "paths")]
    paths: Option<usize>,
    /// Beam width M (candidates per expansion); N/M subtrees.
    #[arg(long = "beam")]
    beam: Option<usize>,
    /// Comma-separated sampling seeds, one run per seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Directory for traces and summary.jsonl.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// OpenAI-compatible endpoint base URL (overrides config and GG_BACKEND_URL).
    #[arg(long)]
    backend_url: Option<String>,
    /// Model id to request (overrides config and GG_MODEL_ID).
    #[arg(long)]
    model: Option<String>,
    /// Scripted fixture file or directory; replaces the HTTP backend.
    #[arg(long)]
    fixtures: Option<PathBuf>,
    /// Concurrent subtree expansions per question.
    #[arg(long)]
    parallelism: Option<usize>,
    /// Questions processed concurrently.
    #[arg(long, default_value_t = 1)]
    question_parallelism: usize,
    /// Token budget per path.
    #[arg(long)]
    token_budget: Option<usize>,
    /// Novelty weight in the step reward.
    #[arg(long)]
    lambda_n: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    /// Self-guided subtree search with confidence-weighted voting.
    Gg,
    /// Best-of-N with plain majority voting.
    Bon,
}

impl From<StrategyArg> for Strategy {
    fn from(value: StrategyArg) -> Self {
        match value {
            StrategyArg::Gg => Strategy::SelfGuidedDvts,
            StrategyArg::Bon => Strategy::BestOfN,
        }
    }
}

#[derive(Args)]
struct RevoteArgs {
    /// Trace files or directories holding trace_*.jsonl files.
    #[arg(long = "traces", required = true, num_args = 1..)]
    traces: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "confidence")]
    weighting: WeightingArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightingArg {
    Confidence,
    Uniform,
}

#[derive(Args)]
struct GrpoReportArgs {
    /// Rollout file (line-delimited JSON).
    #[arg(long)]
    rollouts: PathBuf,
    /// TOML config file; its [grpo] section seeds the parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    chain_k: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Write the machine-readable report as JSON to this path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateFixturesArgs {
    /// Fixture file or directory of .jsonl fixtures.
    path: PathBuf,
}

/// `[search]`, `[grpo]`, and `[backend]` sections; all optional, all keys
/// defaulted.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    search: Option<SearchConfig>,
    grpo: Option<GrpoConfig>,
    backend: Option<BackendSection>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct BackendSection {
    url: Option<String>,
    model: Option<String>,
    fixtures: Option<PathBuf>,
    timeout_seconds: Option<u64>,
}

enum CliError {
    Usage(String),
    Backend(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Backend(_) => EXIT_BACKEND,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Backend(m) => m,
        }
    }
}

fn usage(err: impl std::fmt::Display) -> CliError {
    CliError::Usage(err.to_string())
}

fn from_harness(err: HarnessError) -> CliError {
    match &err {
        HarnessError::Backend(_) | HarnessError::BackendUnhealthy(_) => {
            CliError::Backend(err.to_string())
        }
        _ => CliError::Usage(err.to_string()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // --help/--version land here too; they are not usage errors.
            let code = if err.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Revote(args) => cmd_revote(args),
        Command::GrpoReport(args) => cmd_grpo_report(args),
        Command::ValidateFixtures(args) => cmd_validate_fixtures(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message());
            ExitCode::from(err.exit_code())
        }
    }
}

fn load_config_file(path: Option<&Path>) -> Result<ConfigFile, CliError> {
    let Some(path) = path else { return Ok(ConfigFile::default()) };
    let content = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("config {}: {e}", path.display())))?;
    toml::from_str(&content).map_err(|e| usage(format!("config {}: {e}", path.display())))
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let file = load_config_file(args.config.as_deref())?;
    let mut config = file.search.unwrap_or_default();
    if let Some(strategy) = args.strategy {
        config.strategy = strategy.into();
    }
    if let Some(paths) = args.paths {
        config.total_paths = paths;
    }
    if let Some(beam) = args.beam {
        config.beam_width = beam;
    }
    if let Some(parallelism) = args.parallelism {
        config.parallelism = parallelism;
    }
    if let Some(budget) = args.token_budget {
        config.token_budget = budget;
    }
    if let Some(lambda_n) = args.lambda_n {
        config.weights.lambda_n = lambda_n;
    }
    config.validate().map_err(usage)?;

    let dataset = load_dataset(&args.dataset).map_err(usage)?;
    let backend = build_backend(&args, file.backend.unwrap_or_default())?;

    let options = BenchmarkOptions {
        seeds: args.seeds.unwrap_or_else(|| vec![0]),
        out_dir: args.out_dir.clone(),
        question_parallelism: args.question_parallelism,
    };
    let report =
        run_benchmark(&dataset, &config, backend.as_ref(), &options).map_err(from_harness)?;

    for seed in &report.per_seed {
        let m = &seed.metrics;
        println!(
            "seed {}: accuracy {:.4} ({}/{}), abstentions {}, generated_tokens {}, backend_calls {}, peak_ctx_tokens {}, {:.2}s",
            seed.seed,
            m.accuracy,
            m.correct,
            m.questions,
            m.abstentions,
            m.total_generated_tokens,
            m.backend_calls,
            m.peak_concurrent_context_tokens,
            m.wall_time_seconds,
        );
    }
    println!(
        "accuracy mean {:.4} max {:.4} over {} seed(s); traces in {}",
        report.mean_accuracy,
        report.max_accuracy,
        report.per_seed.len(),
        args.out_dir.display()
    );
    Ok(())
}

fn build_backend(
    args: &RunArgs,
    section: BackendSection,
) -> Result<Box<dyn GenerationBackend>, CliError> {
    // Precedence: CLI flag, then config file, then environment.
    let fixtures = args.fixtures.clone().or(section.fixtures);
    if let Some(path) = fixtures {
        let backend = ScriptedBackend::load(&path).map_err(usage)?;
        return Ok(Box::new(backend));
    }
    let url = args
        .backend_url
        .clone()
        .or(section.url)
        .or_else(|| std::env::var(ENV_BACKEND_URL).ok());
    let Some(base_url) = url else {
        return Err(usage(format!(
            "no backend configured: pass --fixtures or --backend-url (or set {ENV_BACKEND_URL})"
        )));
    };
    let model_id = args
        .model
        .clone()
        .or(section.model)
        .or_else(|| std::env::var(ENV_MODEL_ID).ok())
        .unwrap_or_else(|| "default".to_string());
    let mut http = HttpBackendConfig {
        base_url,
        model_id,
        auth_token: std::env::var(gg_core::backend::http::ENV_BACKEND_TOKEN).ok(),
        ..HttpBackendConfig::default()
    };
    if let Some(secs) = section.timeout_seconds {
        http.timeout = std::time::Duration::from_secs(secs);
    }
    Ok(Box::new(HttpBackend::new(http)))
}

fn cmd_revote(args: RevoteArgs) -> Result<(), CliError> {
    let mut files = Vec::new();
    for path in &args.traces {
        files.extend(collect_trace_files(path).map_err(|e| usage(e.to_string()))?);
    }
    if files.is_empty() {
        return Err(usage("no trace files found"));
    }
    let weighting = match args.weighting {
        WeightingArg::Confidence => Weighting::Confidence,
        WeightingArg::Uniform => Weighting::Uniform,
    };
    let outcomes = revote(&files, weighting).map_err(|e| usage(e.to_string()))?;
    let mut changed = 0;
    for o in &outcomes {
        if o.changed {
            changed += 1;
        }
        println!(
            "{} seed {} question {}: stored {:?} recomputed {:?}{}",
            o.trace_file.display(),
            o.seed,
            o.question_id,
            o.stored,
            o.recomputed,
            if o.changed { "  [changed]" } else { "" }
        );
    }
    println!("{} trace(s), {} changed", outcomes.len(), changed);
    Ok(())
}

fn cmd_grpo_report(args: GrpoReportArgs) -> Result<(), CliError> {
    let file = load_config_file(args.config.as_deref())?;
    let mut config = file.grpo.unwrap_or_default();
    if let Some(group_size) = args.group_size {
        config.group_size = group_size;
    }
    if let Some(chain_k) = args.chain_k {
        config.chain_k = chain_k;
    }
    if let Some(epsilon) = args.epsilon {
        config.epsilon = epsilon;
    }
    if let Some(beta) = args.beta {
        config.beta = beta;
    }
    config.validate().map_err(|e| usage(e.to_string()))?;

    let report = grpo_report(&args.rollouts, &config).map_err(from_harness)?;
    print!("{}", report.render_text());
    if let Some(out) = args.out {
        let json = serde_json::to_string(&report).expect("report serializes");
        std::fs::write(&out, json + "\n")
            .map_err(|e| usage(format!("writing {}: {e}", out.display())))?;
        println!("report written to {}", out.display());
    }
    Ok(())
}

fn cmd_validate_fixtures(args: ValidateFixturesArgs) -> Result<(), CliError> {
    let backend = ScriptedBackend::load(&args.path).map_err(usage)?;
    println!("{}: {} fixture entr{} valid", args.path.display(), backend.len(), {
        if backend.len() == 1 {
            "y"
        } else {
            "ies"
        }
    });
    Ok(())
}
