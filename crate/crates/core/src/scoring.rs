//! Intrinsic step scoring.
//!
//! A candidate reasoning step is scored from signals the generator itself
//! produces, with no external verifier:
//!
//! * **confidence** — the geometric-mean token probability of the step,
//!   i.e. `exp(mean of token logprobs)`. The mean logprob is kept alongside
//!   as `log_confidence`.
//! * **novelty** — the fraction of the step's words not yet seen along the
//!   current path.
//! * **reward** — `lambda_c * confidence + lambda_n * novelty`, the quantity
//!   the search maximizes when picking among candidate steps.
//!
//! A whole chain is summarized by a recency-weighted mean of its last `k`
//! step confidences; that value weights the chain's answer in the final vote
//! and feeds the calibration reward in [`crate::grpo`].
//!
//! Everything here is pure and stateless; safe to call from any number of
//! concurrent search workers.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::real::{count_to_real, Real};
use crate::Scalar;

/// One generated token with its natural-log probability under the generator.
///
/// Logprobs are `<= 0` (probabilities `<= 1`); backends enforce this at the
/// response boundary, so scoring never sees a positive value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogProb<R = Scalar> {
    /// Token text as the backend reported it.
    #[serde(rename = "t")]
    pub text: String,
    /// Natural-log probability of the token given its context.
    #[serde(rename = "lp")]
    pub logprob: R,
}

impl<R> TokenLogProb<R> {
    pub fn new(text: impl Into<String>, logprob: R) -> Self {
        Self { text: text.into(), logprob }
    }
}

/// Weights balancing exploitation (confidence) against exploration (novelty).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreWeights<R = Scalar> {
    pub lambda_c: R,
    pub lambda_n: R,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self { lambda_c: 1.0, lambda_n: 0.5 }
    }
}

impl<R: Real> ScoreWeights<R> {
    /// Both weights must be non-negative and at least one positive.
    pub fn validate(&self) -> Result<(), ScoringError> {
        if self.lambda_c < R::zero()
            || self.lambda_n < R::zero()
            || (self.lambda_c.is_zero() && self.lambda_n.is_zero())
        {
            return Err(ScoringError::InvalidWeights);
        }
        Ok(())
    }
}

/// Confidence component of a step score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepConfidence<R = Scalar> {
    /// Mean token logprob, `<= 0`.
    pub log_confidence: R,
    /// `exp(log_confidence)`, in `(0, 1]`.
    pub confidence: R,
}

/// Full score of one candidate step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepScore<R = Scalar> {
    pub log_confidence: R,
    pub confidence: R,
    pub novelty: R,
    pub reward: R,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScoringError {
    #[error("step has no tokens to score")]
    EmptyStep,
    #[error("chain confidence requires at least one step confidence")]
    EmptyChain,
    #[error("confidence list length {len} exceeds window k={k}")]
    ChainExceedsWindow { len: usize, k: usize },
    #[error("score weights must be non-negative and not both zero")]
    InvalidWeights,
}

/// Mean token logprob of a step and its exponential.
///
/// The exponential is the geometric-mean token probability, used wherever
/// confidence is combined with novelty or compared across steps.
pub fn step_confidence<R: Real>(tokens: &[TokenLogProb<R>]) -> Result<StepConfidence<R>, ScoringError> {
    if tokens.is_empty() {
        return Err(ScoringError::EmptyStep);
    }
    let sum = tokens.iter().fold(R::zero(), |acc, t| acc + t.logprob);
    let log_confidence = sum / count_to_real(tokens.len());
    Ok(StepConfidence { log_confidence, confidence: log_confidence.exp() })
}

/// Fraction of `step_words` not present in `explored_words`.
///
/// Words are compared as exact strings; callers normalize via
/// [`normalize_words`] first. An empty word list yields zero novelty (the
/// engine treats fully empty candidates as degenerate before scoring).
/// `explored_words` is never mutated here.
pub fn step_novelty<R: Real>(step_words: &[String], explored_words: &HashSet<String>) -> R {
    if step_words.is_empty() {
        return R::zero();
    }
    let new = step_words.iter().filter(|w| !explored_words.contains(*w)).count();
    count_to_real::<R>(new) / count_to_real(step_words.len())
}

/// Combined step reward: `lambda_c * confidence + lambda_n * novelty`.
pub fn step_reward<R: Real>(confidence: R, novelty: R, weights: &ScoreWeights<R>) -> R {
    weights.lambda_c * confidence + weights.lambda_n * novelty
}

/// Score a step end to end: confidence from its tokens, novelty of its words
/// against the explored set, and the combined reward.
pub fn score_step<R: Real>(
    tokens: &[TokenLogProb<R>],
    step_words: &[String],
    explored_words: &HashSet<String>,
    weights: &ScoreWeights<R>,
) -> Result<StepScore<R>, ScoringError> {
    let conf = step_confidence(tokens)?;
    let novelty = step_novelty(step_words, explored_words);
    Ok(StepScore {
        log_confidence: conf.log_confidence,
        confidence: conf.confidence,
        novelty,
        reward: step_reward(conf.confidence, novelty, weights),
    })
}

/// Recency-weighted mean of the last `k` step confidences of a chain.
///
/// `last_step_confidences` is ordered oldest to newest and must already be
/// truncated to the last `min(k, chain length)` entries; entry `l` (1-based)
/// gets weight `l`, so the newest step weighs most. Chains shorter than `k`
/// use all available steps with weights `1..=len`.
pub fn chain_confidence<R: Real>(
    last_step_confidences: &[R],
    k: usize,
) -> Result<R, ScoringError> {
    let len = last_step_confidences.len();
    if len == 0 {
        return Err(ScoringError::EmptyChain);
    }
    if len > k {
        return Err(ScoringError::ChainExceedsWindow { len, k });
    }
    let mut num = R::zero();
    let mut den = R::zero();
    for (i, &c) in last_step_confidences.iter().enumerate() {
        let w = count_to_real::<R>(i + 1);
        num = num + w * c;
        den = den + w;
    }
    Ok(num / den)
}

/// Convenience wrapper: take the last `k` entries of a full confidence
/// history and apply [`chain_confidence`].
pub fn chain_confidence_last_k<R: Real>(
    all_confidences: &[R],
    k: usize,
) -> Result<R, ScoringError> {
    let start = all_confidences.len().saturating_sub(k);
    chain_confidence(&all_confidences[start..], k)
}

/// Split text into normalized words for novelty counting: whitespace
/// separated, surrounding non-alphanumeric characters stripped, lowercased.
/// Tokens that normalize to nothing (pure punctuation) are dropped.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|raw| {
            let trimmed = raw.trim_matches(|c: char| !c.is_alphanumeric());
            if trimmed.is_empty() {
                None
            } else {
                Some(trimmed.to_lowercase())
            }
        })
        .collect()
}
