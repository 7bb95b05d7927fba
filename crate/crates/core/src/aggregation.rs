//! Answer extraction, normalization, and confidence-weighted voting.
//!
//! Answers are read out of generated text as the contents of the last
//! `\boxed{...}` expression, canonicalized so trivially-equivalent forms
//! (`42` vs ` 42 `, `\frac{1}{2}` vs `0.5`) group together, and the final
//! answer is the canonical form with the largest total vote weight. Unit
//! weights reproduce plain majority voting.
//!
//! Canonicalization covers integers, decimals, and simple fraction forms;
//! full symbolic equivalence checking is out of scope.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::Scalar;

/// The marker whose brace-balanced argument is treated as the final answer.
pub const BOXED_MARKER: &str = "\\boxed{";

/// An answer pulled out of generated text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedAnswer {
    /// Verbatim contents of the boxed expression.
    pub raw: String,
    /// Canonical form of `raw`; a pure function of it.
    pub canonical: String,
}

/// Per-answer vote accumulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteEntry {
    /// Sum of supporter weights.
    pub total_weight: Scalar,
    /// Number of supporting paths.
    pub supporters: usize,
    /// Largest single-supporter weight, the first tie-break key.
    pub max_weight: Scalar,
}

/// Vote totals grouped by canonical answer.
///
/// A `BTreeMap` keeps serialization order stable so traces are reproducible.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VoteTally {
    pub entries: BTreeMap<String, VoteEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VoteError {
    #[error("no answers to vote over")]
    NoAnswers,
}

/// Extract the last boxed expression from `text`.
///
/// Scans for the final occurrence of [`BOXED_MARKER`] and returns its
/// brace-balanced contents. Braces escaped with a backslash do not affect
/// balancing. Returns `None` when the marker is absent or its braces never
/// balance; the caller records a trace warning for the unbalanced case via
/// [`extract_answer_checked`].
pub fn extract_answer(text: &str) -> Option<ExtractedAnswer> {
    extract_answer_checked(text).0
}

/// Like [`extract_answer`], but distinguishes "no marker" from "marker with
/// unbalanced braces" so the engine can log a warning for the latter.
pub fn extract_answer_checked(text: &str) -> (Option<ExtractedAnswer>, Option<String>) {
    let Some(start) = text.rfind(BOXED_MARKER) else {
        return (None, None);
    };
    let body = &text[start + BOXED_MARKER.len()..];
    let mut depth = 1usize;
    let mut prev_backslash = false;
    for (i, ch) in body.char_indices() {
        if !prev_backslash {
            match ch {
                '{' => depth += 1,
                '}' => {
                    depth -= 1;
                    if depth == 0 {
                        let raw = body[..i].to_string();
                        let canonical = normalize_answer(&raw);
                        return (Some(ExtractedAnswer { raw, canonical }), None);
                    }
                }
                _ => {}
            }
        }
        prev_backslash = ch == '\\' && !prev_backslash;
    }
    (None, Some("unbalanced braces after boxed marker".to_string()))
}

/// Canonicalize an answer string.
///
/// Trims whitespace, strips surrounding `$`, collapses internal whitespace,
/// and — when the result parses as an integer, decimal, or simple fraction —
/// renders a canonical numeric form: no leading zeros, no trailing fractional
/// zeros, fractions reduced (and expanded to a decimal when terminating).
/// Anything else is returned cleaned but otherwise untouched. Total function;
/// idempotent.
pub fn normalize_answer(raw: &str) -> String {
    // Strip to a fixed point: collapsing whitespace can expose new outer `$`
    // and vice versa.
    let mut cleaned = raw.split_whitespace().collect::<Vec<_>>().join(" ");
    loop {
        let stripped = cleaned.trim_matches('$').split_whitespace().collect::<Vec<_>>().join(" ");
        if stripped == cleaned {
            break;
        }
        cleaned = stripped;
    }
    match parse_rational(&cleaned) {
        Some((num, den)) => render_rational(num, den),
        None => cleaned,
    }
}

/// Group weighted answers by canonical form and pick the winner.
///
/// The winner has the largest total weight; ties break to the entry with the
/// highest single-supporter weight, then to the lexicographically smallest
/// canonical string. Weights must be non-negative; unit weights reproduce a
/// plain majority vote.
pub fn weighted_vote(answers: &[(String, Scalar)]) -> Result<(String, VoteTally), VoteError> {
    if answers.is_empty() {
        return Err(VoteError::NoAnswers);
    }
    let mut tally = VoteTally::default();
    for (canonical, weight) in answers {
        let entry = tally.entries.entry(canonical.clone()).or_insert(VoteEntry {
            total_weight: 0.0,
            supporters: 0,
            max_weight: 0.0,
        });
        entry.total_weight += weight;
        entry.supporters += 1;
        if *weight > entry.max_weight {
            entry.max_weight = *weight;
        }
    }
    // BTreeMap iteration is ascending by key, so taking strict improvements
    // while scanning realizes the lexicographic tie-break for free.
    let mut winner: Option<(&String, &VoteEntry)> = None;
    for (answer, entry) in &tally.entries {
        let better = match winner {
            None => true,
            Some((_, best)) => {
                entry.total_weight > best.total_weight
                    || (entry.total_weight == best.total_weight
                        && entry.max_weight > best.max_weight)
            }
        };
        if better {
            winner = Some((answer, entry));
        }
    }
    let winner = winner.expect("non-empty tally").0.clone();
    Ok((winner, tally))
}

// --- numeric canonicalization ------------------------------------------------

/// Parse `s` as a rational number, if it has one of the supported shapes:
/// integer, decimal, `a/b`, or `\frac{a}{b}` (also `\dfrac`/`\tfrac`, with an
/// optional leading sign). Returns `(numerator, denominator)` with
/// `denominator > 0`, unreduced.
fn parse_rational(s: &str) -> Option<(i128, i128)> {
    let (sign, body) = match s.strip_prefix('-') {
        Some(rest) => (-1i128, rest.trim_start()),
        None => (1i128, s.strip_prefix('+').unwrap_or(s).trim_start()),
    };

    if let Some((num, den)) = parse_frac_macro(body) {
        let (n, d) = (parse_signed_int(num)?, parse_signed_int(den)?);
        return combine(sign, n, d);
    }
    if let Some((num, den)) = body.split_once('/') {
        let (n, d) = (parse_signed_int(num.trim())?, parse_signed_int(den.trim())?);
        return combine(sign, n, d);
    }
    if let Some((int_part, frac_part)) = body.split_once('.') {
        if !frac_part.is_empty() && frac_part.bytes().all(|b| b.is_ascii_digit()) {
            let int_val: i128 = if int_part.is_empty() { 0 } else { parse_digits(int_part)? };
            let frac_val = parse_digits(frac_part)?;
            let scale = checked_pow10(frac_part.len() as u32)?;
            let num = int_val.checked_mul(scale)?.checked_add(frac_val)?;
            return Some((sign * num, scale));
        }
        return None;
    }
    parse_digits(body).map(|n| (sign * n, 1))
}

fn combine(sign: i128, n: i128, d: i128) -> Option<(i128, i128)> {
    if d == 0 {
        return None;
    }
    let (n, d) = if d < 0 { (-n, -d) } else { (n, d) };
    Some((sign * n, d))
}

/// Match `\frac{NUM}{DEN}` and variants, returning the two brace bodies.
fn parse_frac_macro(s: &str) -> Option<(&str, &str)> {
    let rest = ["\\frac", "\\dfrac", "\\tfrac"]
        .iter()
        .find_map(|m| s.strip_prefix(m))?;
    let rest = rest.strip_prefix('{')?;
    let (num, rest) = rest.split_once('}')?;
    let rest = rest.strip_prefix('{')?;
    let (den, rest) = rest.split_once('}')?;
    if !rest.trim().is_empty() {
        return None;
    }
    Some((num, den))
}

fn parse_signed_int(s: &str) -> Option<i128> {
    let (sign, digits) = match s.strip_prefix('-') {
        Some(rest) => (-1i128, rest),
        None => (1, s.strip_prefix('+').unwrap_or(s)),
    };
    parse_digits(digits).map(|n| sign * n)
}

fn parse_digits(s: &str) -> Option<i128> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) || s.len() > 30 {
        return None;
    }
    s.parse().ok()
}

fn checked_pow10(exp: u32) -> Option<i128> {
    10i128.checked_pow(exp)
}

/// Render a rational canonically: reduced; as an integer when the reduced
/// denominator is 1; as an exact decimal when it only has factors 2 and 5;
/// otherwise as `p/q`.
fn render_rational(num: i128, den: i128) -> String {
    debug_assert!(den > 0);
    if num == 0 {
        return "0".to_string();
    }
    let g = gcd(num.unsigned_abs(), den.unsigned_abs());
    let (num, den) = (num / g as i128, den / g as i128);
    if den == 1 {
        return num.to_string();
    }

    // den = 2^a * 5^b  =>  terminating decimal with max(a, b) digits.
    let (mut d, mut twos, mut fives) = (den, 0u32, 0u32);
    while d % 2 == 0 {
        d /= 2;
        twos += 1;
    }
    while d % 5 == 0 {
        d /= 5;
        fives += 1;
    }
    if d != 1 {
        return format!("{num}/{den}");
    }

    let digits = twos.max(fives);
    let Some(scale) = checked_pow10(digits) else {
        return format!("{num}/{den}");
    };
    let Some(scaled) = num.checked_mul(scale / den) else {
        return format!("{num}/{den}");
    };
    let sign = if scaled < 0 { "-" } else { "" };
    let abs = scaled.unsigned_abs();
    let int_part = abs / scale.unsigned_abs();
    let frac_part = abs % scale.unsigned_abs();
    let frac_str = format!("{frac_part:0width$}", width = digits as usize);
    let frac_str = frac_str.trim_end_matches('0');
    if frac_str.is_empty() {
        format!("{sign}{int_part}")
    } else {
        format!("{sign}{int_part}.{frac_str}")
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}
