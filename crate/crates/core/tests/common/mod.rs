//! Shared test machinery: independent naive re-implementations of the
//! scoring/voting math (the oracles), a random scripted-tree generator whose
//! expected outcomes are computed with those oracles, an adversarial
//! never-answering backend, and a minimal scripted HTTP server.
//!
//! The naive functions are deliberately written from scratch — brute-force
//! loops, no reuse of the library's implementation paths.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};
use std::hash::{Hash, Hasher};
use std::io::{Read, Write};
use std::net::TcpListener;
use std::thread::JoinHandle;

use rand::prelude::*;
use rand::rngs::StdRng;

use gg_core::backend::scripted::FixtureEntry;
use gg_core::backend::{
    BackendError, BackendHealth, FinishReason, GenerationBackend, GenerationRequest, StepCandidate,
};
use gg_core::search::{SearchConfig, Strategy};
use gg_core::{ScoreWeights, TokenLogProb};

pub const SEP: &str = "\n\n";

// --- naive oracles -----------------------------------------------------------

pub fn naive_confidence(logprobs: &[f64]) -> f64 {
    let mut sum = 0.0;
    for lp in logprobs {
        sum += lp;
    }
    (sum / logprobs.len() as f64).exp()
}

pub fn naive_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    for raw in text.split_whitespace() {
        let trimmed: &str = raw.trim_matches(|c: char| !c.is_alphanumeric());
        if !trimmed.is_empty() {
            words.push(trimmed.to_lowercase());
        }
    }
    words
}

pub fn naive_novelty(words: &[String], explored: &HashSet<String>) -> f64 {
    if words.is_empty() {
        return 0.0;
    }
    let mut new = 0usize;
    for w in words {
        if !explored.contains(w) {
            new += 1;
        }
    }
    new as f64 / words.len() as f64
}

pub fn naive_chain_confidence(confidences: &[f64], k: usize) -> f64 {
    let start = confidences.len().saturating_sub(k);
    let tail = &confidences[start..];
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, c) in tail.iter().enumerate() {
        let w = (i + 1) as f64;
        num += w * c;
        den += w;
    }
    num / den
}

pub fn naive_boxed(text: &str) -> Option<String> {
    let marker = "\\boxed{";
    let at = text.rfind(marker)?;
    let body = &text[at + marker.len()..];
    let mut depth = 1;
    for (i, ch) in body.char_indices() {
        match ch {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(body[..i].to_string());
                }
            }
            _ => {}
        }
    }
    None
}

/// Winner by total weight, ties to the largest single ballot, then to the
/// lexicographically smallest answer.
pub fn naive_vote(ballots: &[(String, f64)]) -> String {
    let mut totals: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for (answer, weight) in ballots {
        let entry = totals.entry(answer).or_insert((0.0, 0.0));
        entry.0 += weight;
        if *weight > entry.1 {
            entry.1 = *weight;
        }
    }
    let mut best: Option<(&str, (f64, f64))> = None;
    for (answer, stats) in totals {
        let improves = match best {
            None => true,
            Some((_, b)) => stats.0 > b.0 || (stats.0 == b.0 && stats.1 > b.1),
        };
        if improves {
            best = Some((answer, stats));
        }
    }
    best.expect("non-empty ballots").0.to_string()
}

pub fn candidate_logprobs(candidate: &StepCandidate) -> Vec<f64> {
    candidate.tokens.iter().map(|t| t.logprob).collect()
}

/// The documented context rule, restated for fixture authoring.
pub fn oracle_context(question: &str, step_texts: &[String]) -> String {
    let mut out = question.to_string();
    for text in step_texts {
        out.push_str(SEP);
        out.push_str(text);
    }
    if !step_texts.is_empty() {
        out.push_str(SEP);
    }
    out
}

// --- random scripted trees ----------------------------------------------------

pub struct TreeSpec {
    pub subtrees: usize,
    pub beam: usize,
    pub depth: usize,
    pub lambda_c: f64,
    pub lambda_n: f64,
}

pub struct OracleSubtree {
    /// Selected step texts in order, root first.
    pub texts: Vec<String>,
    pub answer: String,
    pub chain_conf: f64,
}

pub struct OracleTree {
    pub question: String,
    pub entries: Vec<FixtureEntry>,
    pub config: SearchConfig,
    pub expected: Vec<OracleSubtree>,
    pub expected_final: String,
}

const WORD_POOL: &[&str] = &[
    "alpha", "beta", "gamma", "delta", "epsilon", "factor", "prime", "series", "ratio", "bound",
    "sum", "term", "case", "lemma", "result",
];
const ANSWER_POOL: &[&str] = &["1", "2", "3"];

fn make_candidate(
    rng: &mut StdRng,
    marker: String,
    boxed: Option<&str>,
) -> StepCandidate {
    let n = rng.random_range(2..=5);
    let mut words: Vec<String> = (0..n)
        .map(|_| WORD_POOL[rng.random_range(0..WORD_POOL.len())].to_string())
        .collect();
    words.push(marker);
    let mut text = words.join(" ");
    if let Some(answer) = boxed {
        text.push_str(&format!(" so \\boxed{{{answer}}}"));
    }
    let tokens: Vec<TokenLogProb> = text
        .split(' ')
        .map(|w| TokenLogProb::new(format!("{w} "), -rng.random_range(0.05..2.5)))
        .collect();
    StepCandidate { text, tokens, finish_reason: FinishReason::StopSequence }
}

/// Generate a fully scripted search tree and walk it with the naive oracle:
/// greedy argmax of `lambda_c * confidence + lambda_n * novelty` at every
/// node (first index on ties), answers at the final level, chain confidence
/// and the weighted vote computed naively. The fixture holds exactly the
/// contexts the engine will request if it agrees with the oracle at every
/// node; any disagreement surfaces as a fixture miss or a mismatched path.
pub fn generate_tree(seed: u64, spec: &TreeSpec) -> OracleTree {
    let mut rng = StdRng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(17));
    let question =
        format!("Q{seed}: evaluate the target quantity, variant {}", rng.random_range(0..1000));

    let roots: Vec<StepCandidate> =
        (0..spec.subtrees).map(|s| make_candidate(&mut rng, format!("r{seed}s{s}"), None)).collect();
    let mut entries =
        vec![FixtureEntry { context: question.clone(), seed: None, candidates: roots.clone() }];

    let mut expected = Vec::new();
    let mut ballots = Vec::new();
    for (s, root) in roots.iter().enumerate() {
        let mut explored: HashSet<String> = HashSet::new();
        let mut confidences = Vec::new();
        let mut texts: Vec<String> = Vec::new();

        explored.extend(naive_words(&root.text));
        confidences.push(naive_confidence(&candidate_logprobs(root)));
        texts.push(root.text.clone());

        let mut answer = None;
        for level in 1..=spec.depth {
            let context = oracle_context(&question, &texts);
            let is_final = level == spec.depth;
            let candidates: Vec<StepCandidate> = (0..spec.beam)
                .map(|i| {
                    let boxed =
                        is_final.then(|| ANSWER_POOL[rng.random_range(0..ANSWER_POOL.len())]);
                    make_candidate(&mut rng, format!("m{seed}s{s}l{level}c{i}"), boxed)
                })
                .collect();

            // Brute-force argmax with first-index tie-break.
            let mut best = 0usize;
            let mut best_reward = f64::NEG_INFINITY;
            for (i, cand) in candidates.iter().enumerate() {
                let conf = naive_confidence(&candidate_logprobs(cand));
                let nov = naive_novelty(&naive_words(&cand.text), &explored);
                let reward = spec.lambda_c * conf + spec.lambda_n * nov;
                if reward > best_reward {
                    best_reward = reward;
                    best = i;
                }
            }

            entries.push(FixtureEntry { context, seed: None, candidates: candidates.clone() });
            let chosen = &candidates[best];
            explored.extend(naive_words(&chosen.text));
            confidences.push(naive_confidence(&candidate_logprobs(chosen)));
            texts.push(chosen.text.clone());
            if is_final {
                answer = naive_boxed(&chosen.text);
            }
        }

        let answer = answer.expect("final level always carries a boxed answer");
        let chain_conf = naive_chain_confidence(&confidences, 5);
        ballots.push((answer.clone(), chain_conf));
        expected.push(OracleSubtree { texts, answer, chain_conf });
    }

    let expected_final = naive_vote(&ballots);
    let config = SearchConfig {
        total_paths: spec.subtrees * spec.beam,
        beam_width: spec.beam,
        max_depth: spec.depth + 10,
        token_budget: 1_000_000,
        finalize_margin: 64,
        weights: ScoreWeights { lambda_c: spec.lambda_c, lambda_n: spec.lambda_n },
        chain_k: 5,
        parallelism: 2,
        strategy: Strategy::SelfGuidedDvts,
        ..SearchConfig::default()
    };
    OracleTree { question, entries, config, expected, expected_final }
}

// --- adversarial backend -------------------------------------------------------

/// Deterministic backend that never emits a boxed answer: candidates are
/// derived from a hash of (context, salt, candidate index, seed), honor
/// `max_tokens` by truncation, and babble forever otherwise.
pub struct AdversarialBackend {
    pub salt: u64,
    pub words_per_step: usize,
}

impl GenerationBackend for AdversarialBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<StepCandidate>, BackendError> {
        let mut out = Vec::new();
        for i in 0..request.n_candidates {
            let mut hasher = std::collections::hash_map::DefaultHasher::new();
            (request.context.as_str(), self.salt, i as u64, request.seed).hash(&mut hasher);
            let mut rng = StdRng::seed_from_u64(hasher.finish());
            let words: Vec<String> = (0..self.words_per_step)
                .map(|j| {
                    if j == 0 {
                        format!("u{}", rng.random_range(0..u32::MAX))
                    } else {
                        WORD_POOL[rng.random_range(0..WORD_POOL.len())].to_string()
                    }
                })
                .collect();
            let text = words.join(" ");
            let mut tokens: Vec<TokenLogProb> = text
                .split(' ')
                .map(|w| TokenLogProb::new(format!("{w} "), -rng.random_range(0.05..2.0)))
                .collect();
            let truncated = tokens.len() > request.max_tokens;
            if truncated {
                tokens.truncate(request.max_tokens);
            }
            let text: String = tokens.iter().map(|t| t.text.as_str()).collect();
            out.push(StepCandidate {
                text,
                tokens,
                finish_reason: if truncated { FinishReason::Length } else { FinishReason::StopSequence },
            });
        }
        Ok(out)
    }

    fn health(&self) -> Result<BackendHealth, BackendError> {
        Ok(BackendHealth {
            reachable: true,
            model_id: "adversarial".to_string(),
            supports_logprobs: true,
        })
    }
}

// --- scripted HTTP server -------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CannedResponse {
    pub status: u16,
    #[serde(default)]
    pub headers: Vec<(String, String)>,
    /// Raw body text; may deliberately be invalid JSON.
    pub body: String,
}

/// One recorded wire exchange: the generation request to drive the client
/// with, and the canned HTTP responses the server plays back in order.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct WireCapture {
    pub name: String,
    pub generation_request: GenerationRequest,
    pub responses: Vec<CannedResponse>,
}

pub fn load_capture(name: &str) -> WireCapture {
    let path = format!("{}/tests/golden/{name}.json", env!("CARGO_MANIFEST_DIR"));
    let content = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"));
    serde_json::from_str(&content).unwrap_or_else(|e| panic!("{path}: {e}"))
}

/// A request as the test server saw it.
pub struct CapturedRequest {
    pub headers: String,
    pub body: String,
}

/// Serve the canned responses in order on a fresh localhost port, capturing
/// each request. Returns the base URL and a handle yielding the captures.
pub fn spawn_scripted_server(
    responses: Vec<CannedResponse>,
) -> (String, JoinHandle<Vec<CapturedRequest>>) {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind test server");
    let base_url = format!("http://{}", listener.local_addr().expect("local addr"));
    let handle = std::thread::spawn(move || {
        let mut bodies = Vec::new();
        for canned in responses {
            let (mut stream, _) = listener.accept().expect("accept");
            stream
                .set_read_timeout(Some(std::time::Duration::from_secs(10)))
                .expect("read timeout");
            bodies.push(read_http_request(&mut stream));

            let status_text = match canned.status {
                200 => "OK",
                429 => "Too Many Requests",
                500 => "Internal Server Error",
                _ => "Status",
            };
            let mut response = format!("HTTP/1.1 {} {status_text}\r\n", canned.status);
            for (k, v) in &canned.headers {
                response.push_str(&format!("{k}: {v}\r\n"));
            }
            response.push_str("content-type: application/json\r\n");
            response.push_str(&format!("content-length: {}\r\n", canned.body.len()));
            response.push_str("connection: close\r\n\r\n");
            response.push_str(&canned.body);
            stream.write_all(response.as_bytes()).expect("write response");
        }
        bodies
    });
    (base_url, handle)
}

fn read_http_request(stream: &mut std::net::TcpStream) -> CapturedRequest {
    let mut buf = Vec::new();
    let mut chunk = [0u8; 4096];
    let header_end;
    loop {
        let n = stream.read(&mut chunk).expect("read request");
        buf.extend_from_slice(&chunk[..n]);
        if let Some(pos) = find_header_end(&buf) {
            header_end = pos;
            break;
        }
        assert!(n > 0, "connection closed before headers completed");
    }
    let headers = String::from_utf8_lossy(&buf[..header_end]).to_string();
    let content_length: usize = headers
        .lines()
        .find_map(|l| {
            let (name, value) = l.split_once(':')?;
            name.eq_ignore_ascii_case("content-length").then(|| value.trim().parse().ok())?
        })
        .unwrap_or(0);
    let mut body = buf[header_end + 4..].to_vec();
    while body.len() < content_length {
        let n = stream.read(&mut chunk).expect("read body");
        assert!(n > 0, "connection closed mid-body");
        body.extend_from_slice(&chunk[..n]);
    }
    CapturedRequest { headers, body: String::from_utf8(body).expect("utf8 body") }
}

fn find_header_end(buf: &[u8]) -> Option<usize> {
    buf.windows(4).position(|w| w == b"\r\n\r\n")
}

// --- misc helpers ----------------------------------------------------------------

pub fn basic_request(context: &str, n: usize, max_tokens: usize) -> GenerationRequest {
    GenerationRequest {
        context: context.to_string(),
        n_candidates: n,
        max_tokens,
        temperature: 0.6,
        top_p: 0.95,
        stop_sequences: vec![SEP.to_string()],
        want_logprobs: true,
        seed: None,
    }
}
