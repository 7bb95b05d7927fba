//! Benchmark execution, grading, trace persistence, and offline re-voting.
//!
//! One coordinator walks the dataset (optionally with question-level
//! parallelism), runs the configured strategy per question per seed, grades
//! by canonical-answer equality, writes one trace file per (seed, question)
//! plus a `summary.jsonl`, and reports mean and max accuracy across seeds.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::aggregation::{normalize_answer, weighted_vote};
use crate::backend::{BackendError, GenerationBackend};
use crate::dataset::{BenchmarkItem, DatasetError};
use crate::grpo::{calibration_report, load_rollouts, CalibrationReport, GrpoConfig, GrpoError};
use crate::metrics::{QuestionMetrics, RunMetrics};
use crate::search::{run_strategy, SearchConfig, SearchError};
use crate::trace::{
    ballots_with, build_trace, read_trace, write_trace, QuestionTrace, SchemaVersion, TraceError,
    TraceMeta, TraceVote,
};
use crate::Scalar;

#[derive(Debug, Clone)]
pub struct BenchmarkOptions {
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Questions processed concurrently per seed.
    pub question_parallelism: usize,
}

impl BenchmarkOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self { seeds: vec![0], out_dir: out_dir.into(), question_parallelism: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub metrics: RunMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkReport {
    pub per_seed: Vec<SeedOutcome>,
    pub mean_accuracy: Scalar,
    pub max_accuracy: Scalar,
    pub trace_files: Vec<PathBuf>,
}

/// Lines of `summary.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SummaryLine {
    Seed(SeedOutcome),
    Aggregate { seeds: Vec<u64>, mean_accuracy: Scalar, max_accuracy: Scalar },
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("backend unhealthy: {0}")]
    BackendUnhealthy(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("output dir {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// File name of a question's trace within the output directory.
pub fn trace_file_name(seed: u64, question_id: &str) -> String {
    let sanitized: String = question_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '-' })
        .collect();
    format!("trace_s{seed}__{sanitized}.jsonl")
}

fn grade(final_answer: Option<&str>, gold: &str) -> bool {
    final_answer.is_some_and(|a| a == normalize_answer(gold))
}

/// Run the configured strategy over a dataset for every seed.
///
/// The backend is health-checked once up front and the run aborts if it is
/// unreachable or cannot supply logprobs. Per-question failures become
/// abstentions (graded incorrect) and the run continues.
pub fn run_benchmark(
    dataset: &[BenchmarkItem],
    config: &SearchConfig,
    backend: &dyn GenerationBackend,
    options: &BenchmarkOptions,
) -> Result<BenchmarkReport, HarnessError> {
    config.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
    if options.seeds.is_empty() {
        return Err(HarnessError::Config("at least one seed is required".into()));
    }
    let health = backend.health()?;
    if !health.reachable || !health.supports_logprobs {
        return Err(HarnessError::BackendUnhealthy(format!(
            "model {:?}: reachable={}, supports_logprobs={}",
            health.model_id, health.reachable, health.supports_logprobs
        )));
    }
    std::fs::create_dir_all(&options.out_dir)
        .map_err(|source| HarnessError::Io { path: options.out_dir.display().to_string(), source })?;

    let mut per_seed = Vec::new();
    let mut trace_files = Vec::new();
    for &seed in &options.seeds {
        let started = Instant::now();
        let mut seed_config = config.clone();
        seed_config.seed = Some(seed);

        let outcomes = run_questions(dataset, &seed_config, backend, options, seed)?;

        let mut question_metrics = Vec::new();
        let mut correct = 0;
        let mut abstentions = 0;
        for outcome in outcomes {
            question_metrics.push(outcome.metrics);
            if outcome.correct {
                correct += 1;
            }
            if outcome.abstained {
                abstentions += 1;
            }
            trace_files.push(outcome.trace_file);
        }
        let metrics = RunMetrics::aggregate(
            &question_metrics,
            correct,
            abstentions,
            started.elapsed().as_secs_f64(),
        );
        per_seed.push(SeedOutcome { seed, metrics });
    }

    let accuracies: Vec<Scalar> = per_seed.iter().map(|s| s.metrics.accuracy).collect();
    let mean_accuracy = accuracies.iter().sum::<Scalar>() / accuracies.len() as Scalar;
    let max_accuracy = accuracies.iter().cloned().fold(0.0, Scalar::max);

    write_summary(&options.out_dir, &per_seed, mean_accuracy, max_accuracy)?;
    Ok(BenchmarkReport { per_seed, mean_accuracy, max_accuracy, trace_files })
}

struct QuestionOutcome {
    metrics: QuestionMetrics,
    correct: bool,
    abstained: bool,
    trace_file: PathBuf,
}

fn run_questions(
    dataset: &[BenchmarkItem],
    config: &SearchConfig,
    backend: &dyn GenerationBackend,
    options: &BenchmarkOptions,
    seed: u64,
) -> Result<Vec<QuestionOutcome>, HarnessError> {
    let slots: Vec<Mutex<Option<Result<QuestionOutcome, HarnessError>>>> =
        dataset.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = options.question_parallelism.min(dataset.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= dataset.len() {
                    break;
                }
                let outcome = run_one_question(&dataset[i], config, backend, options, seed);
                *slots[i].lock().expect("question slot") = Some(outcome);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().expect("question slot").expect("worker filled slot"))
        .collect()
}

fn run_one_question(
    item: &BenchmarkItem,
    config: &SearchConfig,
    backend: &dyn GenerationBackend,
    options: &BenchmarkOptions,
    seed: u64,
) -> Result<QuestionOutcome, HarnessError> {
    let trace_file = options.out_dir.join(trace_file_name(seed, &item.id));
    match run_strategy(&item.id, &item.question, config, backend) {
        Ok(result) => {
            let correct = grade(result.final_answer.as_deref(), &item.gold);
            let trace = build_trace(&result, &item.question, seed, config, Some(correct));
            write_trace(&trace_file, &trace)?;
            Ok(QuestionOutcome {
                metrics: result.metrics,
                correct,
                abstained: result.final_answer.is_none(),
                trace_file,
            })
        }
        // A failed question is an abstention; the trace records the failure
        // shape (no paths, abstaining vote) and the run continues.
        Err(SearchError::Config(msg)) => Err(HarnessError::Config(msg)),
        Err(_) => {
            let trace = QuestionTrace {
                meta: TraceMeta {
                    schema_version: SchemaVersion::current(),
                    question_id: item.id.clone(),
                    question: item.question.clone(),
                    seed,
                    strategy: config.strategy,
                    config: config.clone(),
                },
                paths: Vec::new(),
                vote: TraceVote {
                    tally: None,
                    final_answer: None,
                    correct: Some(false),
                    abstained: true,
                },
            };
            write_trace(&trace_file, &trace)?;
            Ok(QuestionOutcome {
                metrics: QuestionMetrics {
                    generated_tokens: 0,
                    backend_calls: 0,
                    peak_concurrent_context_tokens: 0,
                    wall_time_seconds: 0.0,
                },
                correct: false,
                abstained: true,
                trace_file,
            })
        }
    }
}

fn write_summary(
    out_dir: &Path,
    per_seed: &[SeedOutcome],
    mean_accuracy: Scalar,
    max_accuracy: Scalar,
) -> Result<(), HarnessError> {
    let path = out_dir.join("summary.jsonl");
    let mut lines = Vec::new();
    for outcome in per_seed {
        lines.push(serde_json::to_string(&SummaryLine::Seed(outcome.clone())).expect("serializes"));
    }
    lines.push(
        serde_json::to_string(&SummaryLine::Aggregate {
            seeds: per_seed.iter().map(|s| s.seed).collect(),
            mean_accuracy,
            max_accuracy,
        })
        .expect("serializes"),
    );
    std::fs::write(&path, lines.join("\n") + "\n")
        .map_err(|source| HarnessError::Io { path: path.display().to_string(), source })?;
    Ok(())
}

/// Weighting to use when re-running a vote offline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Each answer weighted by its path's chain confidence.
    Confidence,
    /// Unit weights (plain majority).
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RevoteOutcome {
    pub trace_file: PathBuf,
    pub question_id: String,
    pub seed: u64,
    pub stored: Option<String>,
    pub recomputed: Option<String>,
    pub changed: bool,
}

/// Recompute vote winners from stored traces without touching any backend.
pub fn revote(trace_files: &[PathBuf], weighting: Weighting) -> Result<Vec<RevoteOutcome>, HarnessError> {
    let mut outcomes = Vec::new();
    for file in trace_files {
        let trace = read_trace(file)?;
        let ballots = ballots_with(&trace, weighting == Weighting::Uniform);
        let recomputed = match weighted_vote(&ballots) {
            Ok((winner, _)) => Some(winner),
            Err(_) => None,
        };
        let stored = trace.vote.final_answer.clone();
        outcomes.push(RevoteOutcome {
            trace_file: file.clone(),
            question_id: trace.meta.question_id,
            seed: trace.meta.seed,
            changed: recomputed != stored,
            stored,
            recomputed,
        });
    }
    Ok(outcomes)
}

/// Collect every trace file under a directory (or pass a file through).
pub fn collect_trace_files(path: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let entries = std::fs::read_dir(path)
        .map_err(|source| HarnessError::Io { path: path.display().to_string(), source })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|ext| ext == "jsonl")
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("trace_"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Load a rollout file and produce the calibration separation report.
pub fn grpo_report(
    rollout_path: &Path,
    config: &GrpoConfig,
) -> Result<CalibrationReport, HarnessError> {
    let rollouts = load_rollouts(rollout_path)?;
    if rollouts.is_empty() {
        return Err(HarnessError::Config(format!(
            "rollout file {} holds no rollouts",
            rollout_path.display()
        )));
    }
    Ok(calibration_report(&rollouts, config)?)
}
