//! Versioned, replayable run traces.
//!
//! One trace file per (seed, question), line-delimited JSON. The first line
//! is a `meta` record carrying the schema version and the full search
//! config; then one `path` record per subtree with every candidate set and
//! score; finally a `vote` record with the tally and the outcome. A trace is
//! self-contained: every step score and the vote can be recomputed from the
//! file alone, which [`replay_check`] verifies.
//!
//! Readers reject files whose schema major differs from
//! [`TRACE_SCHEMA_MAJOR`].

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregation::{weighted_vote, VoteTally};
use crate::backend::FinishReason;
use crate::scoring::{chain_confidence_last_k, normalize_words, score_step, StepScore, TokenLogProb};
use crate::search::{
    Expansion, FinalizationRecord, PathRecord, PathStatus, SearchConfig, SearchResult, Strategy,
};
use crate::Scalar;

pub const TRACE_SCHEMA_MAJOR: u32 = 1;
pub const TRACE_SCHEMA_MINOR: u32 = 0;

/// Scores recomputed from a trace must match stored values this closely.
pub const REPLAY_TOLERANCE: Scalar = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaVersion {
    pub major: u32,
    pub minor: u32,
}

impl SchemaVersion {
    pub fn current() -> Self {
        Self { major: TRACE_SCHEMA_MAJOR, minor: TRACE_SCHEMA_MINOR }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub schema_version: SchemaVersion,
    pub question_id: String,
    pub question: String,
    pub seed: u64,
    pub strategy: Strategy,
    pub config: SearchConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceCandidate {
    pub text: String,
    pub tokens: Vec<TokenLogProb>,
    pub finish_reason: FinishReason,
    pub score: Option<StepScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceExpansion {
    pub depth: usize,
    pub candidates: Vec<TraceCandidate>,
    pub selected: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFinalization {
    pub injected: String,
    pub completion: Option<TraceCandidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePath {
    pub subtree_id: usize,
    pub status: PathStatus,
    pub token_count: usize,
    /// Raw boxed contents of the answering step.
    pub answer: Option<String>,
    pub canonical_answer: Option<String>,
    pub chain_conf: Option<Scalar>,
    pub failure: Option<String>,
    pub expansions: Vec<TraceExpansion>,
    pub finalization: Option<TraceFinalization>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceVote {
    pub tally: Option<VoteTally>,
    pub final_answer: Option<String>,
    /// Grading against gold, when the harness knows it.
    pub correct: Option<bool>,
    pub abstained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceLine {
    Meta(TraceMeta),
    Path(Box<TracePath>),
    Vote(TraceVote),
}

/// A whole trace file in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct QuestionTrace {
    pub meta: TraceMeta,
    pub paths: Vec<TracePath>,
    pub vote: TraceVote,
}

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("trace file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("trace file {path} line {line}: {message}")]
    Malformed { path: String, line: usize, message: String },
    #[error("trace file {path} has schema major {found}, reader supports {supported}")]
    UnsupportedVersion { path: String, found: u32, supported: u32 },
    #[error("replay mismatch: {0}")]
    ReplayMismatch(String),
}

fn trace_candidate(c: &crate::search::ScoredCandidate) -> TraceCandidate {
    TraceCandidate {
        text: c.candidate.text.clone(),
        tokens: c.candidate.tokens.clone(),
        finish_reason: c.candidate.finish_reason,
        score: c.score,
    }
}

fn trace_expansion(e: &Expansion) -> TraceExpansion {
    TraceExpansion {
        depth: e.depth,
        candidates: e.candidates.iter().map(trace_candidate).collect(),
        selected: e.selected,
    }
}

fn trace_finalization(f: &FinalizationRecord) -> TraceFinalization {
    TraceFinalization {
        injected: f.injected.clone(),
        completion: f.completion.as_ref().map(trace_candidate),
    }
}

fn trace_path(record: &PathRecord) -> TracePath {
    TracePath {
        subtree_id: record.state.subtree_id,
        status: record.state.status,
        token_count: record.state.token_count,
        answer: record.state.answer.clone(),
        canonical_answer: record
            .state
            .answer
            .as_deref()
            .map(crate::aggregation::normalize_answer),
        chain_conf: record.state.chain_conf,
        failure: record.state.failure.clone(),
        expansions: record.expansions.iter().map(trace_expansion).collect(),
        finalization: record.finalization.as_ref().map(trace_finalization),
        warnings: record.warnings.clone(),
    }
}

/// Assemble the trace of one question's run.
pub fn build_trace(
    result: &SearchResult,
    question: &str,
    seed: u64,
    config: &SearchConfig,
    correct: Option<bool>,
) -> QuestionTrace {
    QuestionTrace {
        meta: TraceMeta {
            schema_version: SchemaVersion::current(),
            question_id: result.question_id.clone(),
            question: question.to_string(),
            seed,
            strategy: config.strategy,
            config: config.clone(),
        },
        paths: result.paths.iter().map(trace_path).collect(),
        vote: TraceVote {
            tally: result.tally.clone(),
            final_answer: result.final_answer.clone(),
            correct,
            abstained: result.final_answer.is_none(),
        },
    }
}

/// Write a trace as line-delimited JSON: meta, paths in subtree order, vote.
pub fn write_trace(path: &Path, trace: &QuestionTrace) -> Result<(), TraceError> {
    let display = path.display().to_string();
    let io_err = |source| TraceError::Io { path: display.clone(), source };
    let file = fs::File::create(path).map_err(io_err)?;
    let mut writer = BufWriter::new(file);
    let mut emit = |line: &TraceLine| -> Result<(), TraceError> {
        let json = serde_json::to_string(line).expect("trace line serializes");
        writeln!(writer, "{json}").map_err(io_err)
    };
    emit(&TraceLine::Meta(trace.meta.clone()))?;
    for p in &trace.paths {
        emit(&TraceLine::Path(Box::new(p.clone())))?;
    }
    emit(&TraceLine::Vote(trace.vote.clone()))?;
    writer.flush().map_err(io_err)?;
    Ok(())
}

/// Read and validate one trace file.
pub fn read_trace(path: &Path) -> Result<QuestionTrace, TraceError> {
    let display = path.display().to_string();
    let content = fs::read_to_string(path)
        .map_err(|source| TraceError::Io { path: display.clone(), source })?;
    let mut meta: Option<TraceMeta> = None;
    let mut paths = Vec::new();
    let mut vote: Option<TraceVote> = None;
    for (idx, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TraceLine = serde_json::from_str(line).map_err(|e| TraceError::Malformed {
            path: display.clone(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        match parsed {
            TraceLine::Meta(m) => {
                if m.schema_version.major != TRACE_SCHEMA_MAJOR {
                    return Err(TraceError::UnsupportedVersion {
                        path: display,
                        found: m.schema_version.major,
                        supported: TRACE_SCHEMA_MAJOR,
                    });
                }
                if meta.replace(m).is_some() {
                    return Err(TraceError::Malformed {
                        path: display,
                        line: idx + 1,
                        message: "duplicate meta line".to_string(),
                    });
                }
            }
            TraceLine::Path(p) => paths.push(*p),
            TraceLine::Vote(v) => {
                if vote.replace(v).is_some() {
                    return Err(TraceError::Malformed {
                        path: display,
                        line: idx + 1,
                        message: "duplicate vote line".to_string(),
                    });
                }
            }
        }
    }
    let meta = meta.ok_or_else(|| TraceError::Malformed {
        path: display.clone(),
        line: 0,
        message: "missing meta line".to_string(),
    })?;
    let vote = vote.ok_or_else(|| TraceError::Malformed {
        path: display.clone(),
        line: 0,
        message: "missing vote line".to_string(),
    })?;
    Ok(QuestionTrace { meta, paths, vote })
}

/// Recompute every stored step score and the vote from the trace alone and
/// compare against stored values within [`REPLAY_TOLERANCE`].
pub fn replay_check(trace: &QuestionTrace) -> Result<(), TraceError> {
    let config = &trace.meta.config;
    let mismatch = |msg: String| Err(TraceError::ReplayMismatch(msg));

    for path in &trace.paths {
        let mut explored: HashSet<String> = HashSet::new();
        let mut confidences: Vec<Scalar> = Vec::new();
        for (ei, expansion) in path.expansions.iter().enumerate() {
            for (ci, cand) in expansion.candidates.iter().enumerate() {
                let Some(stored) = cand.score else { continue };
                let words = normalize_words(&cand.text);
                let recomputed = score_step(&cand.tokens, &words, &explored, &config.weights)
                    .map_err(|e| {
                        TraceError::ReplayMismatch(format!(
                            "subtree {} expansion {ei} candidate {ci} unscorable: {e}",
                            path.subtree_id
                        ))
                    })?;
                for (name, got, want) in [
                    ("log_confidence", recomputed.log_confidence, stored.log_confidence),
                    ("confidence", recomputed.confidence, stored.confidence),
                    ("novelty", recomputed.novelty, stored.novelty),
                    ("reward", recomputed.reward, stored.reward),
                ] {
                    if (got - want).abs() > REPLAY_TOLERANCE {
                        return mismatch(format!(
                            "subtree {} expansion {ei} candidate {ci} {name}: stored {want}, recomputed {got}",
                            path.subtree_id
                        ));
                    }
                }
            }
            if let Some(sel) = expansion.selected {
                let cand = &expansion.candidates[sel];
                explored.extend(normalize_words(&cand.text));
                if let Some(score) = cand.score {
                    confidences.push(score.confidence);
                }
            }
        }
        if let Some(finalization) = &path.finalization {
            if let Some(completion) = &finalization.completion {
                if let Some(stored) = completion.score {
                    let words = normalize_words(&completion.text);
                    let recomputed =
                        score_step(&completion.tokens, &words, &explored, &config.weights)
                            .map_err(|e| {
                                TraceError::ReplayMismatch(format!(
                                    "subtree {} finalization unscorable: {e}",
                                    path.subtree_id
                                ))
                            })?;
                    if (recomputed.reward - stored.reward).abs() > REPLAY_TOLERANCE
                        || (recomputed.confidence - stored.confidence).abs() > REPLAY_TOLERANCE
                    {
                        return mismatch(format!(
                            "subtree {} finalization score: stored {stored:?}, recomputed {recomputed:?}",
                            path.subtree_id
                        ));
                    }
                    confidences.push(recomputed.confidence);
                }
            }
        }
        if let Some(stored_conf) = path.chain_conf {
            let recomputed = chain_confidence_last_k(&confidences, config.chain_k)
                .map_err(|e| TraceError::ReplayMismatch(e.to_string()))?;
            if (recomputed - stored_conf).abs() > REPLAY_TOLERANCE {
                return mismatch(format!(
                    "subtree {} chain confidence: stored {stored_conf}, recomputed {recomputed}",
                    path.subtree_id
                ));
            }
        }
    }

    // Vote replay from the stored per-path answers and weights.
    let ballots = vote_ballots(trace);
    match (&trace.vote.final_answer, ballots.is_empty()) {
        (None, true) => Ok(()),
        (None, false) => mismatch("stored abstention but answers are present".to_string()),
        (Some(stored), _) => {
            let (winner, tally) =
                weighted_vote(&ballots).map_err(|e| TraceError::ReplayMismatch(e.to_string()))?;
            if &winner != stored {
                return mismatch(format!("vote winner: stored {stored:?}, recomputed {winner:?}"));
            }
            if let Some(stored_tally) = &trace.vote.tally {
                for (answer, entry) in &tally.entries {
                    let Some(stored_entry) = stored_tally.entries.get(answer) else {
                        return mismatch(format!("tally entry {answer:?} missing from trace"));
                    };
                    if (entry.total_weight - stored_entry.total_weight).abs() > REPLAY_TOLERANCE
                        || entry.supporters != stored_entry.supporters
                    {
                        return mismatch(format!("tally entry {answer:?} differs"));
                    }
                }
            }
            Ok(())
        }
    }
}

/// The (canonical answer, weight) ballots this trace's vote was computed
/// from: chain confidence for the guided search, unit weights for best-of-N.
pub fn vote_ballots(trace: &QuestionTrace) -> Vec<(String, Scalar)> {
    ballots_with(trace, matches!(trace.meta.strategy, Strategy::BestOfN))
}

/// Ballots with an explicit weighting choice (`uniform = true` forces unit
/// weights), for offline re-aggregation.
pub fn ballots_with(trace: &QuestionTrace, uniform: bool) -> Vec<(String, Scalar)> {
    trace
        .paths
        .iter()
        .filter(|p| p.status == PathStatus::Answered)
        .filter_map(|p| {
            let answer = p.canonical_answer.clone()?;
            let weight = if uniform { 1.0 } else { p.chain_conf? };
            Some((answer, weight))
        })
        .collect()
}
