//! Deterministic backend replaying fixture files.
//!
//! A fixture is a line-delimited JSON file, one [`FixtureEntry`] per line:
//!
//! ```json
//! {"context":"Q1","candidates":[{"text":"step one","tokens":[{"t":"step","lp":-0.1},{"t":" one","lp":-0.2}],"finish_reason":"stop_sequence"}]}
//! ```
//!
//! Lookup is an exact match on the whitespace-trimmed context. An entry may
//! carry a `"seed"` field; a request with a seed prefers the matching seeded
//! entry and falls back to the unseeded one. Convention is one fixture file
//! per question, but a loaded backend can hold many files' entries since
//! context keys embed the question text.
//!
//! The backend honors `max_tokens` by truncating candidates (marking them
//! `length`), mirroring a real serving stack. Candidates are treated as
//! already step-segmented; stop sequences are not re-applied. Token arrays
//! are explicit so oracle fixtures can be authored by hand.
//!
//! Once loaded the backend is immutable and freely shareable across threads.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{
    validate_candidates, BackendError, BackendHealth, FinishReason, GenerationBackend,
    GenerationRequest, StepCandidate,
};

/// One scripted exchange: a context key and the candidates to replay for it.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FixtureEntry {
    pub context: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub candidates: Vec<StepCandidate>,
}

/// Replay backend over a validated, immutable fixture set.
#[derive(Debug)]
pub struct ScriptedBackend {
    entries: HashMap<(String, Option<u64>), Vec<StepCandidate>>,
}

impl ScriptedBackend {
    /// Build from in-memory entries, applying the same validation as file
    /// loading.
    pub fn from_entries(entries: Vec<FixtureEntry>) -> Result<Self, BackendError> {
        let mut map = HashMap::new();
        for (idx, entry) in entries.into_iter().enumerate() {
            validate_entry(&entry).map_err(|message| BackendError::InvalidFixture {
                path: "<memory>".to_string(),
                line: idx + 1,
                message,
            })?;
            let key = (entry.context.trim().to_string(), entry.seed);
            if map.insert(key, entry.candidates).is_some() {
                return Err(BackendError::InvalidFixture {
                    path: "<memory>".to_string(),
                    line: idx + 1,
                    message: "duplicate context key".to_string(),
                });
            }
        }
        Ok(Self { entries: map })
    }

    /// Load one fixture file.
    pub fn load_file(path: &Path) -> Result<Self, BackendError> {
        let mut backend = Self { entries: HashMap::new() };
        backend.merge_file(path)?;
        Ok(backend)
    }

    /// Load every `*.jsonl` file in a directory (or a single file).
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        if path.is_file() {
            return Self::load_file(path);
        }
        let mut backend = Self { entries: HashMap::new() };
        let mut files: Vec<_> = fs::read_dir(path)
            .map_err(|e| BackendError::InvalidFixture {
                path: path.display().to_string(),
                line: 0,
                message: e.to_string(),
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "jsonl"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(BackendError::InvalidFixture {
                path: path.display().to_string(),
                line: 0,
                message: "no .jsonl fixture files found".to_string(),
            });
        }
        for file in files {
            backend.merge_file(&file)?;
        }
        Ok(backend)
    }

    fn merge_file(&mut self, path: &Path) -> Result<(), BackendError> {
        let display = path.display().to_string();
        let content = fs::read_to_string(path).map_err(|e| BackendError::InvalidFixture {
            path: display.clone(),
            line: 0,
            message: e.to_string(),
        })?;
        for (idx, line) in content.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: FixtureEntry =
                serde_json::from_str(line).map_err(|e| BackendError::InvalidFixture {
                    path: display.clone(),
                    line: idx + 1,
                    message: e.to_string(),
                })?;
            validate_entry(&entry).map_err(|message| BackendError::InvalidFixture {
                path: display.clone(),
                line: idx + 1,
                message,
            })?;
            let key = (entry.context.trim().to_string(), entry.seed);
            if self.entries.insert(key, entry.candidates).is_some() {
                return Err(BackendError::InvalidFixture {
                    path: display,
                    line: idx + 1,
                    message: "duplicate context key".to_string(),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Keyed lookup by trimmed context, preferring a seed-specific entry.
    pub fn lookup(
        &self,
        context: &str,
        seed: Option<u64>,
    ) -> Result<&[StepCandidate], BackendError> {
        let key = context.trim();
        if let Some(seed) = seed {
            if let Some(cands) = self.entries.get(&(key.to_string(), Some(seed))) {
                return Ok(cands);
            }
        }
        self.entries
            .get(&(key.to_string(), None))
            .map(Vec::as_slice)
            .ok_or_else(|| BackendError::FixtureMiss {
                context_prefix: key.chars().take(80).collect(),
            })
    }
}

fn validate_entry(entry: &FixtureEntry) -> Result<(), String> {
    if entry.context.trim().is_empty() {
        return Err("empty context key".to_string());
    }
    if entry.candidates.is_empty() {
        return Err("entry has no candidates".to_string());
    }
    for (i, cand) in entry.candidates.iter().enumerate() {
        if cand.tokens.is_empty() && !cand.text.is_empty() {
            return Err(format!("candidate {i} has text but no tokens"));
        }
        for tok in &cand.tokens {
            if tok.logprob.is_nan() || tok.logprob > 0.0 {
                return Err(format!(
                    "candidate {i} token {:?} has logprob {} > 0",
                    tok.text, tok.logprob
                ));
            }
        }
    }
    Ok(())
}

/// Truncate a candidate to `max_tokens`, recomputing its text from the kept
/// tokens and marking it length-stopped.
fn truncated(candidate: &StepCandidate, max_tokens: usize) -> StepCandidate {
    if candidate.tokens.len() <= max_tokens {
        return candidate.clone();
    }
    let tokens: Vec<_> = candidate.tokens[..max_tokens].to_vec();
    let text: String = tokens.iter().map(|t| t.text.as_str()).collect();
    StepCandidate { text, tokens, finish_reason: FinishReason::Length }
}

impl GenerationBackend for ScriptedBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<StepCandidate>, BackendError> {
        let all = self.lookup(&request.context, request.seed)?;
        let candidates: Vec<StepCandidate> = all
            .iter()
            .take(request.n_candidates)
            .map(|c| truncated(c, request.max_tokens))
            .collect();
        validate_candidates(&candidates, request)?;
        Ok(candidates)
    }

    fn health(&self) -> Result<BackendHealth, BackendError> {
        Ok(BackendHealth {
            reachable: true,
            model_id: "scripted".to_string(),
            supports_logprobs: true,
        })
    }
}
