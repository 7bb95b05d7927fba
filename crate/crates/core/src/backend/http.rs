//! HTTP client for OpenAI-compatible completion endpoints.
//!
//! Speaks the legacy completions shape (`POST {base_url}/v1/completions`)
//! rather than chat, because step-level continuation needs raw-prompt
//! control and echo-free token logprobs. Chat adapters are an extension
//! point, not implemented here.
//!
//! Environment configuration: `GG_BACKEND_URL`, `GG_BACKEND_TOKEN`
//! (optional bearer token), `GG_MODEL_ID`.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    validate_candidates, BackendError, BackendHealth, FinishReason, GenerationBackend,
    GenerationRequest, StepCandidate,
};
use crate::scoring::TokenLogProb;

/// Environment variable naming the endpoint base URL.
pub const ENV_BACKEND_URL: &str = "GG_BACKEND_URL";
/// Environment variable holding an optional bearer token.
pub const ENV_BACKEND_TOKEN: &str = "GG_BACKEND_TOKEN";
/// Environment variable naming the model id to request.
pub const ENV_MODEL_ID: &str = "GG_MODEL_ID";

const BODY_LIMIT_BYTES: u64 = 256 * 1024 * 1024;

#[derive(Debug, Clone)]
pub struct HttpBackendConfig {
    /// Endpoint base, e.g. `http://localhost:8000`; `/v1/completions` is
    /// appended.
    pub base_url: String,
    pub model_id: String,
    pub auth_token: Option<String>,
    /// Per-call timeout.
    pub timeout: Duration,
    /// Retries after the first attempt, transport errors only.
    pub max_retries: u32,
    /// First backoff delay; doubles per retry. A `Retry-After` header takes
    /// precedence.
    pub retry_backoff: Duration,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000".to_string(),
            model_id: "default".to_string(),
            auth_token: None,
            timeout: Duration::from_secs(120),
            max_retries: 3,
            retry_backoff: Duration::from_millis(500),
        }
    }
}

impl HttpBackendConfig {
    /// Read endpoint settings from `GG_BACKEND_URL` / `GG_BACKEND_TOKEN` /
    /// `GG_MODEL_ID`.
    pub fn from_env() -> Result<Self, BackendError> {
        let base_url = std::env::var(ENV_BACKEND_URL)
            .map_err(|_| BackendError::Config(format!("{ENV_BACKEND_URL} is not set")))?;
        let model_id = std::env::var(ENV_MODEL_ID).unwrap_or_else(|_| "default".to_string());
        let auth_token = std::env::var(ENV_BACKEND_TOKEN).ok();
        Ok(Self { base_url, model_id, auth_token, ..Self::default() })
    }
}

/// Client for one OpenAI-compatible completions endpoint. The underlying
/// agent holds a bounded connection pool and is safe to share across
/// concurrent search workers.
pub struct HttpBackend {
    config: HttpBackendConfig,
    agent: ureq::Agent,
}

// --- wire types ---------------------------------------------------------------

#[derive(Debug, Serialize)]
struct CompletionRequestBody<'a> {
    model: &'a str,
    prompt: &'a str,
    n: usize,
    max_tokens: usize,
    temperature: f64,
    top_p: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    stop: Option<&'a [String]>,
    logprobs: u32,
    echo: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub choices: Vec<CompletionChoice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionChoice {
    pub text: String,
    #[serde(default)]
    pub logprobs: Option<LogprobPayload>,
    #[serde(default)]
    pub finish_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogprobPayload {
    #[serde(default)]
    pub tokens: Option<Vec<String>>,
    #[serde(default)]
    pub token_logprobs: Option<Vec<Option<f64>>>,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, agent }
    }

    pub fn from_env() -> Result<Self, BackendError> {
        Ok(Self::new(HttpBackendConfig::from_env()?))
    }

    pub fn config(&self) -> &HttpBackendConfig {
        &self.config
    }

    fn completions_url(&self) -> String {
        format!("{}/v1/completions", self.config.base_url.trim_end_matches('/'))
    }

    /// Issue one completion call and parse the raw response envelope,
    /// without retries.
    pub fn http_round_trip(
        &self,
        request: &GenerationRequest,
    ) -> Result<CompletionResponse, BackendError> {
        let body = CompletionRequestBody {
            model: &self.config.model_id,
            prompt: &request.context,
            n: request.n_candidates,
            max_tokens: request.max_tokens,
            temperature: request.temperature,
            top_p: request.top_p,
            stop: if request.stop_sequences.is_empty() {
                None
            } else {
                Some(&request.stop_sequences)
            },
            logprobs: 1,
            echo: false,
            seed: request.seed,
        };

        let mut call = self.agent.post(self.completions_url());
        if let Some(token) = &self.config.auth_token {
            call = call.header("authorization", &format!("Bearer {token}"));
        }
        let mut response = call.send_json(&body).map_err(map_ureq_error(&self.config))?;

        let status = response.status().as_u16();
        if !(200..300).contains(&status) {
            let retry_after_seconds = response
                .headers()
                .get("retry-after")
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<u64>().ok());
            let text = response
                .body_mut()
                .with_config()
                .limit(64 * 1024)
                .read_to_string()
                .unwrap_or_default();
            return Err(BackendError::Transport {
                status: Some(status),
                message: text.trim().to_string(),
                retryable: is_retryable_status(status),
                retry_after_seconds,
            });
        }

        let text = response
            .body_mut()
            .with_config()
            .limit(BODY_LIMIT_BYTES)
            .read_to_string()
            .map_err(map_ureq_error(&self.config))?;
        serde_json::from_str(&text).map_err(|e| BackendError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    /// Delay before a retry, honoring `Retry-After` when the failure
    /// carried one and falling back to exponential backoff.
    fn backoff(&self, attempt: u32, error: &BackendError) -> Duration {
        if let BackendError::Transport { retry_after_seconds: Some(secs), .. } = error {
            return Duration::from_secs(*secs);
        }
        self.config.retry_backoff.saturating_mul(1u32 << attempt.min(16))
    }
}

fn is_retryable_status(status: u16) -> bool {
    status == 429 || status == 408 || (500..600).contains(&status)
}

fn map_ureq_error(config: &HttpBackendConfig) -> impl Fn(ureq::Error) -> BackendError + '_ {
    move |err| match err {
        ureq::Error::Timeout(_) => BackendError::Timeout { seconds: config.timeout.as_secs() },
        ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => {
            BackendError::Timeout { seconds: config.timeout.as_secs() }
        }
        other => BackendError::Transport {
            status: None,
            message: other.to_string(),
            retryable: true,
            retry_after_seconds: None,
        },
    }
}

/// Convert one parsed choice into a step candidate, requiring aligned
/// token logprobs.
pub fn candidate_from_choice(choice: &CompletionChoice) -> Result<StepCandidate, BackendError> {
    let payload = choice.logprobs.as_ref().ok_or(BackendError::MissingLogprobs)?;
    let tokens = payload.tokens.as_ref().ok_or(BackendError::MissingLogprobs)?;
    let logprobs = payload.token_logprobs.as_ref().ok_or(BackendError::MissingLogprobs)?;
    if tokens.len() != logprobs.len() {
        return Err(BackendError::InvalidResponse {
            message: format!(
                "tokens ({}) and token_logprobs ({}) disagree in length",
                tokens.len(),
                logprobs.len()
            ),
        });
    }
    let tokens = tokens
        .iter()
        .zip(logprobs)
        .map(|(text, lp)| match lp {
            Some(lp) => Ok(TokenLogProb::new(text.clone(), *lp)),
            None => Err(BackendError::MissingLogprobs),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let finish_reason = match choice.finish_reason.as_deref() {
        Some("stop") => FinishReason::StopSequence,
        Some("length") => FinishReason::Length,
        _ => FinishReason::EndOfText,
    };
    Ok(StepCandidate { text: choice.text.clone(), tokens, finish_reason })
}

impl GenerationBackend for HttpBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<StepCandidate>, BackendError> {
        let mut last_error = None;
        for attempt in 0..=self.config.max_retries {
            match self.http_round_trip(request) {
                Ok(response) => {
                    let candidates = response
                        .choices
                        .iter()
                        .map(candidate_from_choice)
                        .collect::<Result<Vec<_>, _>>()?;
                    validate_candidates(&candidates, request)?;
                    return Ok(candidates);
                }
                Err(err) if err.is_retryable() && attempt < self.config.max_retries => {
                    thread::sleep(self.backoff(attempt, &err));
                    last_error = Some(err);
                }
                Err(err) => return Err(err),
            }
        }
        Err(last_error.expect("retry loop exits via return"))
    }

    fn health(&self) -> Result<BackendHealth, BackendError> {
        // A one-token probe both proves reachability and checks that the
        // endpoint actually returns logprobs.
        let probe = GenerationRequest {
            context: "Hello".to_string(),
            n_candidates: 1,
            max_tokens: 1,
            temperature: 0.0,
            top_p: 1.0,
            stop_sequences: Vec::new(),
            want_logprobs: true,
            seed: None,
        };
        let response = self.http_round_trip(&probe)?;
        let supports_logprobs = response
            .choices
            .first()
            .map(|c| candidate_from_choice(c).is_ok())
            .unwrap_or(false);
        Ok(BackendHealth {
            reachable: true,
            model_id: response.model.unwrap_or_else(|| self.config.model_id.clone()),
            supports_logprobs,
        })
    }
}
