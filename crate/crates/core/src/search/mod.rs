//! Step-level tree search over a generation backend.
//!
//! The search splits a total budget of `N` paths into `N/M` independent
//! subtrees. Each subtree holds one path: at every level the backend
//! proposes `M` candidate next steps, each candidate is scored with the
//! intrinsic reward from [`crate::scoring`], and the argmax is appended.
//! A path terminates when a step carries a boxed answer, when it degenerates
//! into repetition, or when depth or token budget runs out — in the budget
//! and depth cases a finalization string is injected first to elicit a
//! conclusive answer. Answers are aggregated by confidence-weighted voting.
//!
//! Best-of-N runs under the same interfaces as a baseline: `N` independent
//! full completions, plain majority vote.

mod engine;

pub use engine::{
    detect_degeneration, expand_step, finalize_path, init_subtrees, path_context, run_best_of_n,
    run_search, run_strategy, should_finalize, step_separator,
};

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::aggregation::VoteTally;
use crate::backend::{BackendError, FinishReason, StepCandidate};
use crate::metrics::QuestionMetrics;
use crate::scoring::{ScoreWeights, StepScore};
use crate::Scalar;

/// Which search strategy to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Subtree search guided by intrinsic step rewards.
    #[serde(alias = "gg")]
    SelfGuidedDvts,
    /// Independent full completions with majority voting.
    #[serde(alias = "bon")]
    BestOfN,
}

/// Repetition detector settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegenerationConfig {
    /// How many recent steps an exact-repeat check looks back over.
    pub window: usize,
    /// A candidate whose distinct-word ratio falls below this is flagged.
    pub min_distinct_word_ratio: Scalar,
}

impl Default for DegenerationConfig {
    fn default() -> Self {
        Self { window: 5, min_distinct_word_ratio: 0.1 }
    }
}

/// All search hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Total path budget `N`; must be a multiple of `beam_width`.
    pub total_paths: usize,
    /// Candidates sampled per expansion, `M`. Subtree count is `N/M`.
    pub beam_width: usize,
    /// Maximum reasoning depth `T` in steps.
    pub max_depth: usize,
    /// Token budget per path.
    pub token_budget: usize,
    /// Tokens reserved below the budget for the forced conclusion.
    pub finalize_margin: usize,
    pub weights: ScoreWeights,
    /// Chain-confidence window (last `k` steps).
    pub chain_k: usize,
    pub temperature: Scalar,
    pub top_p: Scalar,
    /// A step ends at the first occurrence of any of these; the first one is
    /// also the separator used to stitch step contexts back together.
    pub step_stop_sequences: Vec<String>,
    /// Injected near the limits to elicit a conclusive answer.
    pub finalization_string: String,
    pub degeneration: DegenerationConfig,
    pub strategy: Strategy,
    /// Upper bound on concurrently expanded subtrees.
    pub parallelism: usize,
    /// Sampling seed forwarded to the backend.
    pub seed: Option<u64>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            total_paths: 32,
            beam_width: 2,
            max_depth: 200,
            token_budget: 16_384,
            finalize_margin: 512,
            weights: ScoreWeights::default(),
            chain_k: 5,
            temperature: 0.6,
            top_p: 0.95,
            step_stop_sequences: vec!["\n\n".to_string()],
            finalization_string: "**Final Answer**".to_string(),
            degeneration: DegenerationConfig::default(),
            strategy: Strategy::SelfGuidedDvts,
            parallelism: 4,
            seed: None,
        }
    }
}

impl SearchConfig {
    /// Number of independent subtrees, `N/M`.
    pub fn subtree_count(&self) -> usize {
        self.total_paths / self.beam_width
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        let fail = |msg: String| Err(SearchError::Config(msg));
        if self.total_paths == 0 || self.beam_width == 0 {
            return fail("total_paths and beam_width must be positive".into());
        }
        if !self.total_paths.is_multiple_of(self.beam_width) {
            return fail(format!(
                "beam_width {} must divide total_paths {}",
                self.beam_width, self.total_paths
            ));
        }
        if self.max_depth == 0 {
            return fail("max_depth must be positive".into());
        }
        if self.token_budget == 0 {
            return fail("token_budget must be positive".into());
        }
        if self.finalize_margin == 0 || self.finalize_margin >= self.token_budget {
            return fail(format!(
                "finalize_margin {} must be positive and below token_budget {}",
                self.finalize_margin, self.token_budget
            ));
        }
        if self.chain_k == 0 {
            return fail("chain_k must be positive".into());
        }
        if self.temperature < 0.0 {
            return fail("temperature must be non-negative".into());
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return fail("top_p must lie in (0, 1]".into());
        }
        if self.parallelism == 0 {
            return fail("parallelism must be positive".into());
        }
        self.weights
            .validate()
            .map_err(|e| SearchError::Config(e.to_string()))?;
        Ok(())
    }
}

/// Lifecycle of a path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathStatus {
    Active,
    Answered,
    BudgetExhausted,
    Degenerate,
    DepthExhausted,
    /// Backend failure; excluded from voting, preserved in the trace.
    Failed,
}

impl PathStatus {
    pub fn is_terminal(&self) -> bool {
        *self != PathStatus::Active
    }
}

/// One accepted reasoning step.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    /// Step text as generated, stop sequence excluded.
    pub text: String,
    pub tokens: Vec<crate::scoring::TokenLogProb>,
    pub score: StepScore,
    pub finish_reason: FinishReason,
}

/// An ordered chain of steps within one subtree, plus the bookkeeping the
/// search needs: the explored-word set for novelty, token accounting, and
/// lifecycle status.
#[derive(Debug, Clone)]
pub struct PathState {
    pub subtree_id: usize,
    pub steps: Vec<Step>,
    pub explored_words: HashSet<String>,
    pub token_count: usize,
    pub status: PathStatus,
    /// Raw contents of the answering step's boxed expression.
    pub answer: Option<String>,
    /// Chain confidence at answer time; present iff answered.
    pub chain_conf: Option<Scalar>,
    /// Failure cause when `status == Failed`.
    pub failure: Option<String>,
}

impl PathState {
    pub fn new(subtree_id: usize) -> Self {
        Self {
            subtree_id,
            steps: Vec::new(),
            explored_words: HashSet::new(),
            token_count: 0,
            status: PathStatus::Active,
            answer: None,
            chain_conf: None,
            failure: None,
        }
    }

    /// Current depth in steps.
    pub fn depth(&self) -> usize {
        self.steps.len()
    }
}

/// A backend candidate with its score; unscorable (empty) candidates keep
/// `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    pub candidate: StepCandidate,
    pub score: Option<StepScore>,
}

/// One expansion: the candidate set considered at a depth and which one won.
#[derive(Debug, Clone, PartialEq)]
pub struct Expansion {
    /// Depth of the step this expansion produced (0 for the root step).
    pub depth: usize,
    pub candidates: Vec<ScoredCandidate>,
    /// Index into `candidates`; `None` when the expansion failed or every
    /// candidate was empty.
    pub selected: Option<usize>,
}

/// The injected finalization and what came back.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalizationRecord {
    pub injected: String,
    pub completion: Option<ScoredCandidate>,
}

/// Everything one path did, enough to replay its scoring offline.
#[derive(Debug, Clone)]
pub struct PathRecord {
    pub state: PathState,
    pub expansions: Vec<Expansion>,
    pub finalization: Option<FinalizationRecord>,
    pub warnings: Vec<String>,
}

impl PathRecord {
    pub fn new(state: PathState) -> Self {
        Self { state, expansions: Vec::new(), finalization: None, warnings: Vec::new() }
    }

    /// Token counts of the accepted steps, in order.
    pub fn step_token_counts(&self) -> Vec<usize> {
        self.state.steps.iter().map(|s| s.tokens.len()).collect()
    }

    /// Every generated token attributable to this path: all candidates in
    /// all expansions plus the finalization completion.
    pub fn generated_tokens(&self) -> usize {
        let expansion_tokens: usize = self
            .expansions
            .iter()
            .flat_map(|e| e.candidates.iter())
            .map(|c| c.candidate.tokens.len())
            .sum();
        let finalization_tokens = self
            .finalization
            .as_ref()
            .and_then(|f| f.completion.as_ref())
            .map(|c| c.candidate.tokens.len())
            .unwrap_or(0);
        expansion_tokens + finalization_tokens
    }
}

/// An answer contributed by one path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    /// Canonical form; votes group on this.
    pub answer: String,
    /// Vote weight: the path's chain confidence (unit weight in best-of-N).
    pub chain_conf: Scalar,
    pub subtree_id: usize,
}

/// Outcome of one question.
#[derive(Debug, Clone)]
pub struct SearchResult {
    pub question_id: String,
    pub answers: Vec<AnswerRecord>,
    /// Vote winner; `None` is an abstention.
    pub final_answer: Option<String>,
    pub tally: Option<VoteTally>,
    pub paths: Vec<PathRecord>,
    pub metrics: QuestionMetrics,
}

#[derive(Debug, thiserror::Error)]
pub enum SearchError {
    #[error("invalid search config: {0}")]
    Config(String),
    #[error("search initialization failed: {source}")]
    Init {
        #[source]
        source: BackendError,
    },
    #[error("all {count} subtrees failed; first failure: {first}")]
    AllPathsFailed { count: usize, first: String },
}
