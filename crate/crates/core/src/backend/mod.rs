//! The generation-backend contract.
//!
//! A backend turns a context into candidate continuations with per-token
//! logprobs. Two implementations ship here: [`http::HttpBackend`] for
//! OpenAI-compatible completion endpoints, and [`scripted::ScriptedBackend`]
//! replaying fixture files for tests and oracles.
//!
//! Implementations must be safe for concurrent `generate` calls up to the
//! engine's parallelism limit. Responses are validated at this boundary —
//! a positive logprob or an over-budget candidate never reaches scoring.

pub mod http;
pub mod scripted;

use serde::{Deserialize, Serialize};

use crate::scoring::TokenLogProb;

/// A request for candidate continuations of a context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    /// Question prompt plus the accepted steps so far.
    pub context: String,
    /// How many candidate continuations to sample.
    pub n_candidates: usize,
    /// Upper bound on new tokens per candidate; backends must not exceed it.
    pub max_tokens: usize,
    pub temperature: f64,
    pub top_p: f64,
    /// A candidate ends at the first occurrence of any of these.
    pub stop_sequences: Vec<String>,
    /// Always true from the engine; per-token logprobs are the whole point.
    pub want_logprobs: bool,
    /// Sampling seed, forwarded when the backend supports one.
    pub seed: Option<u64>,
}

/// Why a candidate stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    StopSequence,
    Length,
    EndOfText,
}

/// One candidate continuation with aligned token logprobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepCandidate {
    pub text: String,
    pub tokens: Vec<TokenLogProb>,
    pub finish_reason: FinishReason,
}

/// Result of a backend health probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendHealth {
    pub reachable: bool,
    pub model_id: String,
    /// Must be true for the engine to start.
    pub supports_logprobs: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    /// Connection, I/O, or HTTP status failure. Retryable transport errors
    /// are retried inside the HTTP backend before surfacing.
    #[error("transport error{}: {message}", status.map(|s| format!(" (status {s})")).unwrap_or_default())]
    Transport {
        status: Option<u16>,
        message: String,
        retryable: bool,
        /// Server-requested retry delay, from a `Retry-After` header.
        retry_after_seconds: Option<u64>,
    },
    /// The backend answered but did not include token logprobs.
    #[error("backend response carries no token logprobs; a logprob-capable endpoint is required")]
    MissingLogprobs,
    /// The response body did not parse.
    #[error("malformed backend response at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("backend call timed out after {seconds}s")]
    Timeout { seconds: u64 },
    /// Scripted backend has no entry for the requested context.
    #[error("no fixture entry for context starting {context_prefix:?}")]
    FixtureMiss { context_prefix: String },
    /// Fixture file failed load-time validation.
    #[error("invalid fixture {path} line {line}: {message}")]
    InvalidFixture { path: String, line: usize, message: String },
    /// Response violated the candidate contract (positive logprob, budget
    /// overrun, missing tokens).
    #[error("invalid backend response: {message}")]
    InvalidResponse { message: String },
    #[error("backend configuration error: {0}")]
    Config(String),
}

impl BackendError {
    /// Whether retrying the same call may succeed.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            BackendError::Transport { retryable: true, .. } | BackendError::Timeout { .. }
        )
    }
}

/// Contract implemented by every backend.
pub trait GenerationBackend: Send + Sync {
    /// Produce up to `request.n_candidates` continuations (a shorter list is
    /// legal when the backend cannot supply more). Candidates may repeat;
    /// duplicates are scored normally.
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<StepCandidate>, BackendError>;

    /// Cheap reachability and capability probe.
    fn health(&self) -> Result<BackendHealth, BackendError>;
}

impl<B: GenerationBackend + ?Sized> GenerationBackend for &B {
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<StepCandidate>, BackendError> {
        (**self).generate(request)
    }
    fn health(&self) -> Result<BackendHealth, BackendError> {
        (**self).health()
    }
}

/// Validate candidates against the response contract. Called by every
/// backend (and by [`checked_generate`]) so invalid data never crosses into
/// scoring.
pub fn validate_candidates(
    candidates: &[StepCandidate],
    request: &GenerationRequest,
) -> Result<(), BackendError> {
    if candidates.len() > request.n_candidates {
        return Err(BackendError::InvalidResponse {
            message: format!(
                "{} candidates returned for n_candidates={}",
                candidates.len(),
                request.n_candidates
            ),
        });
    }
    for (i, cand) in candidates.iter().enumerate() {
        if cand.tokens.is_empty() && !cand.text.is_empty() {
            return Err(BackendError::InvalidResponse {
                message: format!("candidate {i} has text but no tokens"),
            });
        }
        if cand.tokens.len() > request.max_tokens {
            return Err(BackendError::InvalidResponse {
                message: format!(
                    "candidate {i} has {} tokens, over the requested max of {}",
                    cand.tokens.len(),
                    request.max_tokens
                ),
            });
        }
        for tok in &cand.tokens {
            if tok.logprob.is_nan() || tok.logprob > 0.0 {
                return Err(BackendError::InvalidResponse {
                    message: format!("candidate {i} token {:?} has logprob {} > 0", tok.text, tok.logprob),
                });
            }
        }
    }
    Ok(())
}

/// Generate and validate in one step; the engine's single entry point into a
/// backend.
pub fn checked_generate(
    backend: &dyn GenerationBackend,
    request: &GenerationRequest,
) -> Result<Vec<StepCandidate>, BackendError> {
    let candidates = backend.generate(request)?;
    validate_candidates(&candidates, request)?;
    Ok(candidates)
}
