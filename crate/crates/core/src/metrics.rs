//! Run accounting, including the KV-pressure proxy.
//!
//! GPU memory held by a serving stack is stack-specific; what this crate can
//! account for exactly is the number of context tokens live at once. The
//! proxy models subtrees as level-synchronous: at level `t` every path that
//! has at least `t` steps holds its first `t` steps' tokens, and a path that
//! terminated before `t` is pruned and holds nothing. The peak over levels
//! is `peak_concurrent_context_tokens`. Best-of-N keeps all `N` completions
//! live in one level, so halving the live path count shows up directly here.

use serde::{Deserialize, Serialize};

use crate::Scalar;

/// Accounting for a single question.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuestionMetrics {
    /// Every token the backend generated for this question, selected or not.
    pub generated_tokens: usize,
    pub backend_calls: usize,
    pub peak_concurrent_context_tokens: usize,
    pub wall_time_seconds: Scalar,
}

/// Accounting for one benchmark run (one seed over a dataset).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// `correct / questions`.
    pub accuracy: Scalar,
    pub questions: usize,
    pub correct: usize,
    /// Questions with no voted answer; graded incorrect.
    pub abstentions: usize,
    pub total_generated_tokens: usize,
    pub backend_calls: usize,
    /// Maximum per-question peak across the run.
    pub peak_concurrent_context_tokens: usize,
    pub wall_time_seconds: Scalar,
}

impl RunMetrics {
    /// Fold per-question outcomes into run totals.
    pub fn aggregate(
        question_metrics: &[QuestionMetrics],
        correct: usize,
        abstentions: usize,
        wall_time_seconds: Scalar,
    ) -> Self {
        let questions = question_metrics.len();
        Self {
            accuracy: if questions == 0 { 0.0 } else { correct as Scalar / questions as Scalar },
            questions,
            correct,
            abstentions,
            total_generated_tokens: question_metrics.iter().map(|m| m.generated_tokens).sum(),
            backend_calls: question_metrics.iter().map(|m| m.backend_calls).sum(),
            peak_concurrent_context_tokens: question_metrics
                .iter()
                .map(|m| m.peak_concurrent_context_tokens)
                .max()
                .unwrap_or(0),
            wall_time_seconds,
        }
    }
}

/// Peak number of concurrently live context tokens under level-synchronous
/// execution, from each path's per-step token counts.
///
/// At level `t` (1-based), a path with at least `t` steps contributes the
/// token total of its first `t` steps; shorter (terminated) paths contribute
/// nothing. Deterministic by construction — independent of how subtree work
/// was actually scheduled across threads.
pub fn peak_concurrent_context_tokens(step_token_counts: &[Vec<usize>]) -> usize {
    let max_levels = step_token_counts.iter().map(Vec::len).max().unwrap_or(0);
    let mut peak = 0;
    for level in 1..=max_levels {
        let live: usize = step_token_counts
            .iter()
            .filter(|counts| counts.len() >= level)
            .map(|counts| counts[..level].iter().sum::<usize>())
            .sum();
        peak = peak.max(live);
    }
    peak
}
