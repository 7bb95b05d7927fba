//! Search operations and the per-question driver.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Instant;

use super::{
    AnswerRecord, DegenerationConfig, Expansion, FinalizationRecord, PathRecord, PathState,
    PathStatus, ScoredCandidate, SearchConfig, SearchError, SearchResult, Step, Strategy,
};
use crate::aggregation::{extract_answer_checked, normalize_answer, weighted_vote};
use crate::backend::{checked_generate, GenerationBackend, GenerationRequest, StepCandidate};
use crate::metrics::{peak_concurrent_context_tokens, QuestionMetrics};
use crate::scoring::{chain_confidence_last_k, normalize_words, score_step};
use crate::Scalar;

/// Separator used to stitch accepted steps back into a prompt context: the
/// first configured stop sequence, or a blank line when none is configured.
pub fn step_separator(config: &SearchConfig) -> &str {
    config.step_stop_sequences.first().map(String::as_str).unwrap_or("\n\n")
}

/// Rebuild the prompt context for a path: the question, then each accepted
/// step followed by the separator (backends strip the stop sequence from
/// candidates, so it is reinserted here). With no steps this is the question
/// itself. Fixture authors rely on this exact rule for context keys.
pub fn path_context(question: &str, step_texts: &[&str], separator: &str) -> String {
    let mut out = String::from(question);
    for text in step_texts {
        out.push_str(separator);
        out.push_str(text);
    }
    if !step_texts.is_empty() {
        out.push_str(separator);
    }
    out
}

fn context_of(question: &str, path: &PathState, config: &SearchConfig) -> String {
    let texts: Vec<&str> = path.steps.iter().map(|s| s.text.as_str()).collect();
    path_context(question, &texts, step_separator(config))
}

/// True when a candidate looks like degenerated output relative to a path:
/// its trimmed text exactly repeats one of the last `window` accepted steps,
/// or its distinct-word ratio falls below the configured floor. A candidate
/// with no countable words at all is also flagged.
pub fn detect_degeneration(
    path: &PathState,
    candidate_text: &str,
    config: &DegenerationConfig,
) -> bool {
    let normalized = candidate_text.trim();
    let repeats = path
        .steps
        .iter()
        .rev()
        .take(config.window)
        .any(|step| step.text.trim() == normalized);
    if repeats {
        return true;
    }
    let words = normalize_words(candidate_text);
    if words.is_empty() {
        return true;
    }
    let distinct = words.iter().collect::<std::collections::HashSet<_>>().len();
    (distinct as Scalar / words.len() as Scalar) < config.min_distinct_word_ratio
}

/// True when an active path must be finalized instead of expanded: the token
/// budget is within the finalize margin, or depth has reached `T - 1`.
pub fn should_finalize(path: &PathState, config: &SearchConfig) -> bool {
    path.token_count > config.token_budget.saturating_sub(config.finalize_margin)
        || path.depth() >= config.max_depth.saturating_sub(1)
}

/// Score candidates against a frozen explored set and pick the argmax by
/// reward; equal rewards go to the earliest-generated candidate. Candidates
/// without tokens are unscorable and never selected.
fn score_and_select(
    candidates: Vec<StepCandidate>,
    path: &PathState,
    config: &SearchConfig,
) -> (Vec<ScoredCandidate>, Option<usize>) {
    let scored: Vec<ScoredCandidate> = candidates
        .into_iter()
        .map(|candidate| {
            let score = if candidate.tokens.is_empty() {
                None
            } else {
                let words = normalize_words(&candidate.text);
                score_step(&candidate.tokens, &words, &path.explored_words, &config.weights).ok()
            };
            ScoredCandidate { candidate, score }
        })
        .collect();

    let mut selected: Option<usize> = None;
    for (i, cand) in scored.iter().enumerate() {
        let Some(score) = cand.score else { continue };
        let better = match selected {
            None => true,
            Some(best) => score.reward > scored[best].score.expect("selected is scored").reward,
        };
        if better {
            selected = Some(i);
        }
    }
    (scored, selected)
}

/// Append a selected candidate to the path and apply termination transitions:
/// answer detection first, then degeneration, then the hard depth bound.
/// Returns any extraction warning.
fn accept_step(
    path: &mut PathState,
    scored: ScoredCandidate,
    config: &SearchConfig,
) -> Option<String> {
    let score = scored.score.expect("accepted candidates are scored");
    let candidate = scored.candidate;
    // The detector must not compare the candidate against itself.
    let degenerate = detect_degeneration(path, &candidate.text, &config.degeneration);

    path.token_count += candidate.tokens.len();
    path.explored_words.extend(normalize_words(&candidate.text));
    path.steps.push(Step {
        text: candidate.text,
        tokens: candidate.tokens,
        score,
        finish_reason: candidate.finish_reason,
    });

    let step_text = &path.steps.last().expect("just pushed").text;
    let (extracted, warning) = extract_answer_checked(step_text);
    if let Some(extracted) = extracted {
        path.status = PathStatus::Answered;
        path.answer = Some(extracted.raw);
        path.chain_conf = Some(current_chain_confidence(path, config));
    } else if degenerate {
        path.status = PathStatus::Degenerate;
    } else if path.depth() >= config.max_depth {
        path.status = PathStatus::DepthExhausted;
    }
    warning
}

fn current_chain_confidence(path: &PathState, config: &SearchConfig) -> Scalar {
    let confidences: Vec<Scalar> = path.steps.iter().map(|s| s.score.confidence).collect();
    chain_confidence_last_k(&confidences, config.chain_k).expect("answered path has steps")
}

/// Initialize `N/M` subtrees, each seeded with one first step from a single
/// batched backend request and scored against an empty explored set.
pub fn init_subtrees(
    question: &str,
    config: &SearchConfig,
    backend: &dyn GenerationBackend,
) -> Result<Vec<PathRecord>, SearchError> {
    let subtrees = config.subtree_count();
    let request = GenerationRequest {
        context: question.to_string(),
        n_candidates: subtrees,
        max_tokens: config.token_budget,
        temperature: config.temperature,
        top_p: config.top_p,
        stop_sequences: config.step_stop_sequences.clone(),
        want_logprobs: true,
        seed: config.seed,
    };
    let roots =
        checked_generate(backend, &request).map_err(|source| SearchError::Init { source })?;

    let mut records = Vec::with_capacity(subtrees);
    for subtree_id in 0..subtrees {
        let mut record = PathRecord::new(PathState::new(subtree_id));
        match roots.get(subtree_id) {
            Some(root) => {
                let (scored, selected) =
                    score_and_select(vec![root.clone()], &record.state, config);
                match selected {
                    Some(idx) => {
                        let warning = accept_step(&mut record.state, scored[idx].clone(), config);
                        record.warnings.extend(warning);
                        record.expansions.push(Expansion {
                            depth: 0,
                            candidates: scored,
                            selected: Some(idx),
                        });
                    }
                    None => {
                        record.state.status = PathStatus::Degenerate;
                        record.expansions.push(Expansion { depth: 0, candidates: scored, selected: None });
                    }
                }
            }
            None => {
                record.state.status = PathStatus::Failed;
                record.state.failure =
                    Some("backend returned no root candidate for this subtree".to_string());
            }
        }
        records.push(record);
    }
    Ok(records)
}

/// One expansion of an active path: request `M` candidate continuations,
/// score them against the explored set frozen at entry, append the argmax,
/// and apply termination transitions. Backend failure marks the path failed
/// and leaves other subtrees untouched.
pub fn expand_step(
    record: &mut PathRecord,
    question: &str,
    config: &SearchConfig,
    backend: &dyn GenerationBackend,
) {
    debug_assert_eq!(record.state.status, PathStatus::Active);
    debug_assert!(!should_finalize(&record.state, config));
    let depth = record.state.depth();
    let remaining = config.token_budget.saturating_sub(record.state.token_count).max(1);
    let request = GenerationRequest {
        context: context_of(question, &record.state, config),
        n_candidates: config.beam_width,
        max_tokens: remaining,
        temperature: config.temperature,
        top_p: config.top_p,
        stop_sequences: config.step_stop_sequences.clone(),
        want_logprobs: true,
        seed: config.seed,
    };
    let candidates = match checked_generate(backend, &request) {
        Ok(candidates) => candidates,
        Err(err) => {
            record.state.status = PathStatus::Failed;
            record.state.failure = Some(err.to_string());
            record.expansions.push(Expansion { depth, candidates: Vec::new(), selected: None });
            return;
        }
    };

    let (scored, selected) = score_and_select(candidates, &record.state, config);
    match selected {
        Some(idx) => {
            let warning = accept_step(&mut record.state, scored[idx].clone(), config);
            record.warnings.extend(warning);
            record.expansions.push(Expansion { depth, candidates: scored, selected: Some(idx) });
        }
        None => {
            record.state.status = PathStatus::Degenerate;
            record.expansions.push(Expansion { depth, candidates: scored, selected: None });
        }
    }
}

/// Force a conclusion: append the finalization string to the context and
/// request one unscored completion with the remaining allowance
/// (`token_budget + finalize_margin - token_count`). The path ends answered
/// if the completion carries a boxed answer, budget-exhausted otherwise.
pub fn finalize_path(
    record: &mut PathRecord,
    question: &str,
    config: &SearchConfig,
    backend: &dyn GenerationBackend,
) {
    debug_assert_eq!(record.state.status, PathStatus::Active);
    let injected = config.finalization_string.clone();
    let context = format!("{}{}", context_of(question, &record.state, config), injected);
    let allowance = (config.token_budget + config.finalize_margin)
        .saturating_sub(record.state.token_count)
        .max(1);
    let request = GenerationRequest {
        context,
        n_candidates: 1,
        max_tokens: allowance,
        temperature: config.temperature,
        top_p: config.top_p,
        // No stop sequences: the conclusion may span step boundaries.
        stop_sequences: Vec::new(),
        want_logprobs: true,
        seed: config.seed,
    };
    let completion = match checked_generate(backend, &request) {
        Ok(mut candidates) if !candidates.is_empty() => candidates.remove(0),
        Ok(_) => {
            record.state.status = PathStatus::BudgetExhausted;
            record.finalization = Some(FinalizationRecord { injected, completion: None });
            return;
        }
        Err(err) => {
            record.state.status = PathStatus::Failed;
            record.state.failure = Some(err.to_string());
            record.finalization = Some(FinalizationRecord { injected, completion: None });
            return;
        }
    };

    if completion.tokens.is_empty() {
        record.state.status = PathStatus::BudgetExhausted;
        record.finalization = Some(FinalizationRecord { injected, completion: None });
        return;
    }

    // Scored for the trace and for chain confidence; it competes with
    // nothing, so the reward plays no selection role.
    let words = normalize_words(&completion.text);
    let score = score_step(
        &completion.tokens,
        &words,
        &record.state.explored_words,
        &config.weights,
    )
    .expect("non-empty completion scores");
    let scored = ScoredCandidate { candidate: completion, score: Some(score) };

    let path = &mut record.state;
    path.token_count += scored.candidate.tokens.len();
    path.explored_words.extend(words);
    path.steps.push(Step {
        text: scored.candidate.text.clone(),
        tokens: scored.candidate.tokens.clone(),
        score,
        finish_reason: scored.candidate.finish_reason,
    });

    let (extracted, warning) = extract_answer_checked(&scored.candidate.text);
    record.warnings.extend(warning);
    if let Some(extracted) = extracted {
        path.status = PathStatus::Answered;
        path.answer = Some(extracted.raw);
        path.chain_conf = Some(current_chain_confidence(path, config));
    } else {
        path.status = PathStatus::BudgetExhausted;
    }
    record.finalization = Some(FinalizationRecord { injected, completion: Some(scored) });
}

/// Drive one path to a terminal status.
fn drive_path(
    record: &mut PathRecord,
    question: &str,
    config: &SearchConfig,
    backend: &dyn GenerationBackend,
) {
    while record.state.status == PathStatus::Active {
        if should_finalize(&record.state, config) {
            finalize_path(record, question, config, backend);
        } else {
            expand_step(record, question, config, backend);
        }
    }
}

/// Run the subtree search for one question: initialize `N/M` subtrees, drive
/// each to termination (concurrently up to the configured parallelism), and
/// pick the final answer by confidence-weighted vote.
pub fn run_search(
    question_id: &str,
    question: &str,
    config: &SearchConfig,
    backend: &dyn GenerationBackend,
) -> Result<SearchResult, SearchError> {
    config.validate()?;
    let started = Instant::now();
    let records = init_subtrees(question, config, backend)?;

    let slots: Vec<Mutex<PathRecord>> = records.into_iter().map(Mutex::new).collect();
    let next = AtomicUsize::new(0);
    let workers = config.parallelism.min(slots.len()).max(1);
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= slots.len() {
                    break;
                }
                let mut record = slots[i].lock().expect("path slot lock");
                drive_path(&mut record, question, config, backend);
            });
        }
    });
    let records: Vec<PathRecord> =
        slots.into_iter().map(|m| m.into_inner().expect("path slot lock")).collect();

    assemble_result(question_id, records, Weighting::ChainConfidence, started)
}

/// Best-of-N baseline: `N` independent full completions, answers extracted
/// from each, final answer by plain majority (unit weights through the same
/// vote).
pub fn run_best_of_n(
    question_id: &str,
    question: &str,
    config: &SearchConfig,
    backend: &dyn GenerationBackend,
) -> Result<SearchResult, SearchError> {
    config.validate()?;
    let started = Instant::now();
    let request = GenerationRequest {
        context: question.to_string(),
        n_candidates: config.total_paths,
        max_tokens: config.token_budget,
        temperature: config.temperature,
        top_p: config.top_p,
        stop_sequences: Vec::new(),
        want_logprobs: true,
        seed: config.seed,
    };
    let completions =
        checked_generate(backend, &request).map_err(|source| SearchError::Init { source })?;

    let mut records = Vec::with_capacity(config.total_paths);
    for i in 0..config.total_paths {
        let mut record = PathRecord::new(PathState::new(i));
        match completions.get(i) {
            Some(completion) => {
                let (scored, selected) =
                    score_and_select(vec![completion.clone()], &record.state, config);
                if let Some(idx) = selected {
                    let warning = accept_step(&mut record.state, scored[idx].clone(), config);
                    record.warnings.extend(warning);
                }
                // A full completion without a boxed answer is spent, not
                // degenerate or depth-bound.
                if record.state.status != PathStatus::Answered {
                    record.state.status = PathStatus::BudgetExhausted;
                }
                record.expansions.push(Expansion { depth: 0, candidates: scored, selected });
            }
            None => {
                record.state.status = PathStatus::Failed;
                record.state.failure = Some("backend returned no completion".to_string());
            }
        }
        records.push(record);
    }

    assemble_result(question_id, records, Weighting::Unit, started)
}

/// Dispatch on the configured strategy.
pub fn run_strategy(
    question_id: &str,
    question: &str,
    config: &SearchConfig,
    backend: &dyn GenerationBackend,
) -> Result<SearchResult, SearchError> {
    match config.strategy {
        Strategy::SelfGuidedDvts => run_search(question_id, question, config, backend),
        Strategy::BestOfN => run_best_of_n(question_id, question, config, backend),
    }
}

enum Weighting {
    ChainConfidence,
    Unit,
}

fn assemble_result(
    question_id: &str,
    records: Vec<PathRecord>,
    weighting: Weighting,
    started: Instant,
) -> Result<SearchResult, SearchError> {
    if records.iter().all(|r| r.state.status == PathStatus::Failed) {
        let first = records
            .iter()
            .find_map(|r| r.state.failure.clone())
            .unwrap_or_else(|| "unknown".to_string());
        return Err(SearchError::AllPathsFailed { count: records.len(), first });
    }

    let answers: Vec<AnswerRecord> = records
        .iter()
        .filter(|r| r.state.status == PathStatus::Answered)
        .map(|r| {
            let raw = r.state.answer.as_ref().expect("answered path has answer");
            let chain_conf = r.state.chain_conf.expect("answered path has chain confidence");
            AnswerRecord {
                answer: normalize_answer(raw),
                chain_conf,
                subtree_id: r.state.subtree_id,
            }
        })
        .collect();

    let ballots: Vec<(String, Scalar)> = answers
        .iter()
        .map(|a| {
            let weight = match weighting {
                Weighting::ChainConfidence => a.chain_conf,
                Weighting::Unit => 1.0,
            };
            (a.answer.clone(), weight)
        })
        .collect();
    let (final_answer, tally) = match weighted_vote(&ballots) {
        Ok((winner, tally)) => (Some(winner), Some(tally)),
        Err(_) => (None, None),
    };

    let backend_calls = 1
        + records
            .iter()
            .map(|r| r.expansions.len().saturating_sub(1) + usize::from(r.finalization.is_some()))
            .sum::<usize>();
    let generated_tokens: usize = records.iter().map(PathRecord::generated_tokens).sum();
    let step_counts: Vec<Vec<usize>> =
        records.iter().map(PathRecord::step_token_counts).collect();
    let metrics = QuestionMetrics {
        generated_tokens,
        backend_calls,
        peak_concurrent_context_tokens: peak_concurrent_context_tokens(&step_counts),
        wall_time_seconds: started.elapsed().as_secs_f64(),
    };

    Ok(SearchResult {
        question_id: question_id.to_string(),
        answers,
        final_answer,
        tally,
        paths: records,
        metrics,
    })
}
