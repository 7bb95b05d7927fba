//! Confidence-calibration math over rollout files.
//!
//! Pure implementations of the group-relative policy-optimization quantities
//! used to calibrate a generator's confidence: the confidence-shaped reward,
//! group-normalized advantages, the per-token clipped surrogate with a KL
//! penalty, and the group objective. No optimizer, no parameter updates —
//! the functions consume recorded rollouts so the math is testable on its
//! own.
//!
//! The reward is
//!
//! ```text
//! r = 1 + C^4          when the rollout's answer is correct
//! r = 1 - 10 * C^4     otherwise
//! ```
//!
//! where `C` is the chain confidence of the rollout's last `k` steps. Correct
//! confident chains gain the most; incorrect confident chains are penalized
//! ten times as hard, which is what pushes the confidence signal toward
//! calibration.
//!
//! Rollout files are line-delimited JSON, one rollout per line; see
//! [`Rollout`] for the field layout.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregation::normalize_answer;
use crate::real::Real;
use crate::scoring::{chain_confidence_last_k, step_confidence, ScoringError, TokenLogProb};
use crate::Scalar;

/// Calibration hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    /// Rollouts per group.
    pub group_size: usize,
    /// Clip half-width for the importance ratio.
    pub epsilon: Scalar,
    /// KL penalty coefficient.
    pub beta: Scalar,
    /// Chain-confidence window (last `k` steps).
    pub chain_k: usize,
    /// Lower bound on the advantage-normalizing standard deviation, guarding
    /// zero-variance groups.
    pub std_floor: Scalar,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self { group_size: 8, epsilon: 0.2, beta: 0.04, chain_k: 5, std_floor: 1e-6 }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.group_size == 0 {
            return Err(GrpoError::Config("group_size must be positive".into()));
        }
        if self.epsilon <= 0.0 {
            return Err(GrpoError::Config("epsilon must be positive".into()));
        }
        if self.beta < 0.0 {
            return Err(GrpoError::Config("beta must be non-negative".into()));
        }
        if self.chain_k == 0 {
            return Err(GrpoError::Config("chain_k must be positive".into()));
        }
        if self.std_floor <= 0.0 {
            return Err(GrpoError::Config("std_floor must be positive".into()));
        }
        Ok(())
    }
}

/// Per-token logprobs of one generated token under the three policies
/// involved in an update: current, previous-iteration, and reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyLogprobs {
    #[serde(rename = "lp_current")]
    pub current: Scalar,
    #[serde(rename = "lp_old")]
    pub old: Scalar,
    #[serde(rename = "lp_ref")]
    pub reference: Scalar,
}

/// One reasoning step of a rollout: its text and generation-time token
/// logprobs, enough to recompute the step confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutStep {
    pub text: String,
    pub tokens: Vec<TokenLogProb>,
}

/// A recorded training sample: the reasoning chain, its final answer and the
/// gold answer, plus per-token policy logprob triples aligned 1:1 with the
/// generated tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub steps: Vec<RolloutStep>,
    pub answer: String,
    pub gold: String,
    /// Derived from `answer`/`gold` when absent; validated against them when
    /// present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub is_correct: Option<bool>,
    pub policy_logprobs: Vec<PolicyLogprobs>,
}

impl Rollout {
    /// Whether the rollout's answer matches gold under canonical equality.
    pub fn correct(&self) -> bool {
        normalize_answer(&self.answer) == normalize_answer(&self.gold)
    }

    /// Chain confidence over the last `chain_k` steps.
    pub fn chain_confidence(&self, chain_k: usize) -> Result<Scalar, GrpoError> {
        let confs: Vec<Scalar> = self
            .steps
            .iter()
            .map(|s| step_confidence(&s.tokens).map(|c| c.confidence))
            .collect::<Result<_, _>>()?;
        Ok(chain_confidence_last_k(&confs, chain_k)?)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GrpoError {
    #[error("invalid calibration config: {0}")]
    Config(String),
    #[error("chain confidence must lie in (0, 1], got {0}")]
    ConfidenceOutOfRange(Scalar),
    #[error("advantage group needs at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("surrogate needs at least one token logprob triple")]
    EmptyTokenList,
    #[error("objective needs at least one surrogate value")]
    EmptyGroup,
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error("rollout file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("rollout file {path} line {line}: {message}")]
    Malformed { path: String, line: usize, message: String },
}

/// Confidence-shaped correctness reward.
///
/// `1 + chain_conf^4` when correct, `1 - 10 * chain_conf^4` otherwise. As
/// confidence approaches zero both branches approach 1, so uncertain chains
/// are scored almost purely on nothing — the shaping only bites when the
/// model commits.
pub fn grpo_reward<R: Real>(is_correct: bool, chain_conf: R) -> Result<R, GrpoError> {
    if !(chain_conf > R::zero() && chain_conf <= R::one()) {
        return Err(GrpoError::ConfidenceOutOfRange(
            chain_conf.to_f64().unwrap_or(Scalar::NAN),
        ));
    }
    let c4 = chain_conf.powi(4);
    Ok(if is_correct {
        R::one() + c4
    } else {
        R::one() - R::from_f64_lossy(10.0) * c4
    })
}

/// Group-normalized advantages: `(r_i - mean) / max(std, std_floor)` with the
/// population standard deviation.
pub fn group_advantages<R: Real>(rewards: &[R], config: &GrpoConfig) -> Result<Vec<R>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    let n = crate::real::count_to_real::<R>(rewards.len());
    let mean = rewards.iter().fold(R::zero(), |a, &r| a + r) / n;
    let var = rewards.iter().fold(R::zero(), |a, &r| a + (r - mean) * (r - mean)) / n;
    let std = var.sqrt().max(R::from_f64_lossy(config.std_floor));
    Ok(rewards.iter().map(|&r| (r - mean) / std).collect())
}

/// Per-token clipped surrogate with KL penalty, averaged over the tokens of
/// one rollout.
///
/// For each token, with importance ratio `rho = exp(lp_current - lp_old)`:
///
/// ```text
/// term = min(rho * adv, clip(rho, 1 - eps, 1 + eps) * adv) - beta * kl
/// kl   = exp(lp_ref - lp_current) - (lp_ref - lp_current) - 1
/// ```
///
/// The KL estimator is non-negative by convexity; it is clamped at zero to
/// keep float rounding from dipping below.
pub fn token_surrogate(
    rollout: &Rollout,
    advantage: Scalar,
    config: &GrpoConfig,
) -> Result<Scalar, GrpoError> {
    clipped_surrogate_mean(&rollout.policy_logprobs, advantage, config.epsilon, config.beta)
}

/// Generic core of [`token_surrogate`], usable on bare logprob triples.
pub fn clipped_surrogate_mean<R: Real>(
    triples: &[PolicyLogprobs],
    advantage: R,
    epsilon: R,
    beta: R,
) -> Result<R, GrpoError> {
    if triples.is_empty() {
        return Err(GrpoError::EmptyTokenList);
    }
    let one = R::one();
    let mut sum = R::zero();
    for t in triples {
        let rho = (R::from_f64_lossy(t.current) - R::from_f64_lossy(t.old)).exp();
        let clipped = rho.min(one + epsilon).max(one - epsilon);
        let unclipped_term = rho * advantage;
        let clipped_term = clipped * advantage;
        let delta = R::from_f64_lossy(t.reference) - R::from_f64_lossy(t.current);
        let kl = (delta.exp() - delta - one).max(R::zero());
        sum = sum + unclipped_term.min(clipped_term) - beta * kl;
    }
    Ok(sum / crate::real::count_to_real(triples.len()))
}

/// Group objective: the mean of the per-rollout surrogates.
pub fn grpo_objective<R: Real>(deltas: &[R]) -> Result<R, GrpoError> {
    if deltas.is_empty() {
        return Err(GrpoError::EmptyGroup);
    }
    let sum = deltas.iter().fold(R::zero(), |a, &d| a + d);
    Ok(sum / crate::real::count_to_real(deltas.len()))
}

/// Number of histogram bins in [`CalibrationReport`].
pub const CONFIDENCE_BINS: usize = 10;

/// Chain-confidence statistics for one correctness group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub count: usize,
    pub mean_chain_confidence: Scalar,
    /// Counts over `CONFIDENCE_BINS` uniform bins of `[0, 1]`, the last bin
    /// closed at 1.
    pub histogram: Vec<usize>,
}

/// How well chain confidence separates correct from incorrect rollouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub rollouts: usize,
    pub correct: Option<GroupStats>,
    pub incorrect: Option<GroupStats>,
    /// `mean(correct) - mean(incorrect)`; present only when both groups are.
    pub separation: Option<Scalar>,
}

impl CalibrationReport {
    /// Plain-text rendering for terminal output.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("rollouts: {}\n", self.rollouts));
        for (label, stats) in [("correct", &self.correct), ("incorrect", &self.incorrect)] {
            match stats {
                Some(s) => out.push_str(&format!(
                    "{label:>9}: n={} mean_chain_confidence={:.6} histogram={:?}\n",
                    s.count, s.mean_chain_confidence, s.histogram
                )),
                None => out.push_str(&format!("{label:>9}: (no rollouts)\n")),
            }
        }
        match self.separation {
            Some(sep) => out.push_str(&format!("separation: {sep:.6}\n")),
            None => out.push_str("separation: undefined (a group is empty)\n"),
        }
        out
    }
}

/// Summarize how chain confidence distributes over correct vs incorrect
/// rollouts: per-group mean and histogram, and the mean difference.
pub fn calibration_report(
    rollouts: &[Rollout],
    config: &GrpoConfig,
) -> Result<CalibrationReport, GrpoError> {
    config.validate()?;
    let mut groups: [Vec<Scalar>; 2] = [Vec::new(), Vec::new()];
    for r in rollouts {
        let conf = r.chain_confidence(config.chain_k)?;
        groups[usize::from(!r.correct())].push(conf);
    }
    let stats = |confs: &Vec<Scalar>| -> Option<GroupStats> {
        if confs.is_empty() {
            return None;
        }
        let mut histogram = vec![0usize; CONFIDENCE_BINS];
        for &c in confs {
            let bin = ((c * CONFIDENCE_BINS as Scalar) as usize).min(CONFIDENCE_BINS - 1);
            histogram[bin] += 1;
        }
        Some(GroupStats {
            count: confs.len(),
            mean_chain_confidence: confs.iter().sum::<Scalar>() / confs.len() as Scalar,
            histogram,
        })
    };
    let correct = stats(&groups[0]);
    let incorrect = stats(&groups[1]);
    let separation = match (&correct, &incorrect) {
        (Some(c), Some(i)) => Some(c.mean_chain_confidence - i.mean_chain_confidence),
        _ => None,
    };
    Ok(CalibrationReport { rollouts: rollouts.len(), correct, incorrect, separation })
}

/// Load rollouts from a line-delimited JSON file, validating logprob signs,
/// token/triple alignment, and the stored correctness flag.
pub fn load_rollouts(path: &Path) -> Result<Vec<Rollout>, GrpoError> {
    let display = path.display().to_string();
    let content = fs::read_to_string(path)
        .map_err(|source| GrpoError::Io { path: display.clone(), source })?;
    let mut rollouts = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rollout: Rollout = serde_json::from_str(line).map_err(|e| GrpoError::Malformed {
            path: display.clone(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        validate_rollout(&rollout).map_err(|message| GrpoError::Malformed {
            path: display.clone(),
            line: idx + 1,
            message,
        })?;
        rollouts.push(rollout);
    }
    Ok(rollouts)
}

/// Write rollouts as line-delimited JSON.
pub fn write_rollouts(path: &Path, rollouts: &[Rollout]) -> Result<(), GrpoError> {
    let display = path.display().to_string();
    let io_err = |source| GrpoError::Io { path: display.clone(), source };
    let file = fs::File::create(path).map_err(io_err)?;
    let mut writer = BufWriter::new(file);
    for r in rollouts {
        let line = serde_json::to_string(r).expect("rollout serializes");
        writeln!(writer, "{line}").map_err(io_err)?;
    }
    writer.flush().map_err(io_err)?;
    Ok(())
}

fn validate_rollout(rollout: &Rollout) -> Result<(), String> {
    if rollout.steps.is_empty() {
        return Err("rollout has no steps".into());
    }
    let mut generated = 0usize;
    for (i, step) in rollout.steps.iter().enumerate() {
        if step.tokens.is_empty() {
            return Err(format!("step {i} has no tokens"));
        }
        for tok in &step.tokens {
            if tok.logprob.is_nan() || tok.logprob > 0.0 {
                return Err(format!("step {i} has logprob {} > 0", tok.logprob));
            }
        }
        generated += step.tokens.len();
    }
    if rollout.policy_logprobs.len() != generated {
        return Err(format!(
            "policy logprob triples ({}) not aligned with generated tokens ({generated})",
            rollout.policy_logprobs.len()
        ));
    }
    for (i, t) in rollout.policy_logprobs.iter().enumerate() {
        if !(t.current <= 0.0 && t.old <= 0.0 && t.reference <= 0.0) {
            return Err(format!("policy logprob triple {i} has a positive entry"));
        }
    }
    if let Some(flag) = rollout.is_correct {
        if flag != rollout.correct() {
            return Err(format!(
                "is_correct={flag} contradicts answers ({:?} vs gold {:?})",
                rollout.answer, rollout.gold
            ));
        }
    }
    Ok(())
}
