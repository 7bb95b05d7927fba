//! Backend-agnostic test-time-scaling engine.
//!
//! Runs a self-guided subtree search over any text-generation backend that
//! exposes token logprobs, scoring candidate reasoning steps with intrinsic
//! confidence and novelty signals instead of an external verifier, and
//! aggregating answers by confidence-weighted voting. The confidence
//! calibration math (group-relative reward, advantages, clipped surrogate)
//! ships as pure functions over rollout files.
//!
//! Module map:
//!
//! * [`scoring`] — step confidence, novelty, combined reward, chain
//!   confidence (generic over the float type via [`real::Real`]).
//! * [`search`] — subtree search, termination and forced finalization,
//!   best-of-N baseline.
//! * [`backend`] — the generation contract; HTTP and scripted-replay
//!   implementations.
//! * [`aggregation`] — boxed-answer extraction, canonicalization, weighted
//!   voting.
//! * [`grpo`] — calibration reward/advantage/surrogate math over rollouts.
//! * [`harness`] — dataset benchmarking, traces, re-voting, reports.

pub mod aggregation;
pub mod backend;
pub mod dataset;
pub mod grpo;
pub mod harness;
pub mod metrics;
pub mod real;
pub mod scoring;
pub mod search;
pub mod trace;

/// The scalar every file format and tolerance in this crate is pinned to.
/// The math in [`scoring`] and [`grpo`] stays generic over [`real::Real`].
pub type Scalar = f64;

/// [`scoring::TokenLogProb`] at the crate's pinned scalar.
pub type TokenLogProb = scoring::TokenLogProb<Scalar>;
/// [`scoring::StepScore`] at the crate's pinned scalar.
pub type StepScore = scoring::StepScore<Scalar>;
/// [`scoring::ScoreWeights`] at the crate's pinned scalar.
pub type ScoreWeights = scoring::ScoreWeights<Scalar>;
