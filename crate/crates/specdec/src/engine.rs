//! Draft-then-verify decode engine.
//!
//! Drafted chains are verified against the target's distributions either
//! stochastically (accept token `x` with probability `min(1, q(x)/d(x))`,
//! resample rejections from `norm(max(0, q - d))`, bonus-sample on full
//! acceptance) or greedily (accept only exact argmax matches). The
//! stochastic rule is lossless: every emitted position has marginal exactly
//! `q`, which the enumeration oracle checks path-by-path.

use crate::dist::{draw_categorical, sample_token, ProbDist};
use crate::error::{Error, Result};
use crate::rng::UnitUniform;

/// Outcome of verifying one drafted chain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyOutcome {
    /// Number of drafted tokens accepted (`0..=t`).
    pub accepted_count: usize,
    /// Accepted prefix plus exactly one correction or bonus token.
    pub emitted_tokens: Vec<usize>,
    /// Zero-based index of the first rejected position, if any.
    pub rejection_index: Option<usize>,
    /// All drafted tokens accepted and an extra token drawn from `q[t]`.
    pub bonus: bool,
}

impl VerifyOutcome {
    fn check_invariants(&self, t: usize) {
        debug_assert_eq!(self.emitted_tokens.len(), self.accepted_count + 1);
        debug_assert!(!self.bonus || self.accepted_count == t);
        debug_assert_eq!(self.bonus, self.rejection_index.is_none());
    }
}

fn validate_chain(q_dists: &[ProbDist], d_dists: &[ProbDist], draft_tokens: &[usize]) -> Result<usize> {
    let t = draft_tokens.len();
    if d_dists.len() != t || q_dists.len() != t + 1 {
        return Err(Error::Contract(format!(
            "verify expects t draft dists and t+1 target dists; got {} drafts, {} d, {} q",
            t,
            d_dists.len(),
            q_dists.len()
        )));
    }
    for (i, (&tok, d)) in draft_tokens.iter().zip(d_dists).enumerate() {
        if d.prob(tok) <= 0.0 {
            return Err(Error::Contract(format!(
                "draft token {tok} at position {i} has zero draft probability"
            )));
        }
    }
    Ok(t)
}

/// Stochastic acceptance with residual resampling.
///
/// Consumes one unit variate per scanned position, plus one for the
/// residual draw on rejection or one for the bonus draw on full acceptance,
/// in that order.
pub fn verify_stochastic<R: UnitUniform + ?Sized>(
    q_dists: &[ProbDist],
    d_dists: &[ProbDist],
    draft_tokens: &[usize],
    rng: &mut R,
) -> Result<VerifyOutcome> {
    let t = validate_chain(q_dists, d_dists, draft_tokens)?;
    let mut emitted = Vec::with_capacity(t + 1);
    for i in 0..t {
        let tok = draft_tokens[i];
        let accept_prob = (q_dists[i].prob(tok) / d_dists[i].prob(tok)).min(1.0);
        let u = rng.next_unit();
        if u < accept_prob {
            emitted.push(tok);
            continue;
        }
        // Rejected: resample from norm(max(0, q - d)). Rejection has
        // positive probability only when q(tok) < d(tok), which forces the
        // residual mass to be positive.
        let residual: Vec<f64> = q_dists[i]
            .probs()
            .iter()
            .zip(d_dists[i].probs())
            .map(|(&q, &d)| (q - d).max(0.0))
            .collect();
        let total: f64 = residual.iter().sum();
        assert!(total > 0.0, "residual distribution is all-zero on a rejection path");
        let correction = draw_categorical(&residual, total, rng.next_unit());
        emitted.push(correction);
        let outcome = VerifyOutcome {
            accepted_count: i,
            emitted_tokens: emitted,
            rejection_index: Some(i),
            bonus: false,
        };
        outcome.check_invariants(t);
        return Ok(outcome);
    }
    // Full acceptance: bonus token from q[t].
    let bonus_tok = sample_token(&q_dists[t], 1.0, rng);
    emitted.push(bonus_tok);
    let outcome = VerifyOutcome {
        accepted_count: t,
        emitted_tokens: emitted,
        rejection_index: None,
        bonus: true,
    };
    outcome.check_invariants(t);
    Ok(outcome)
}

/// Greedy verification: accept a drafted token only when it equals the
/// argmax of the matching target distribution. Deterministic.
pub fn verify_greedy(q_dists: &[ProbDist], draft_tokens: &[usize]) -> Result<VerifyOutcome> {
    let t = draft_tokens.len();
    if q_dists.len() != t + 1 {
        return Err(Error::Contract(format!(
            "verify expects t+1 target dists; got {} drafts, {} q",
            t,
            q_dists.len()
        )));
    }
    let mut emitted = Vec::with_capacity(t + 1);
    for i in 0..t {
        let best = q_dists[i].argmax();
        if draft_tokens[i] == best {
            emitted.push(best);
        } else {
            emitted.push(best);
            let outcome = VerifyOutcome {
                accepted_count: i,
                emitted_tokens: emitted,
                rejection_index: Some(i),
                bonus: false,
            };
            outcome.check_invariants(t);
            return Ok(outcome);
        }
    }
    emitted.push(q_dists[t].argmax());
    let outcome = VerifyOutcome {
        accepted_count: t,
        emitted_tokens: emitted,
        rejection_index: None,
        bonus: true,
    };
    outcome.check_invariants(t);
    Ok(outcome)
}

// ── Decode loop ──────────────────────────────────────────────────────────

/// Per-iteration record. `accept_flags` holds one boolean per *evaluated*
/// position: `true` for each accepted token, then `false` if a rejection
/// ended the scan (positions after a rejection are never evaluated).
#[derive(Debug, Clone, serde::Serialize)]
pub struct IterationRecord {
    pub accepted_count: usize,
    pub bonus: bool,
    pub accept_flags: Vec<bool>,
    pub draft_ns: u128,
    pub verify_ns: u128,
}

/// Full accounting of one speculative decode.
#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct DecodeTrace {
    pub iterations: Vec<IterationRecord>,
    pub emitted_tokens: usize,
    /// One batched verification pass per iteration.
    pub target_forward_passes: usize,
    /// Head invocations: 1 per medusa chain, `t` per eagle chain.
    pub draft_forward_passes: usize,
    pub draft_ns_total: u128,
    pub verify_ns_total: u128,
    /// Decode stopped because the context window filled up.
    pub overflow_stop: bool,
    pub draft_len: usize,
}

impl DecodeTrace {
    pub fn check_invariants(&self) -> Result<()> {
        let sum: usize = self.iterations.iter().map(|r| r.accepted_count + 1).sum();
        if sum != self.emitted_tokens {
            return Err(Error::Contract(format!(
                "trace accounting broken: emitted {} vs accepted+1 sum {}",
                self.emitted_tokens, sum
            )));
        }
        if self.target_forward_passes != self.iterations.len() {
            return Err(Error::Contract(format!(
                "trace accounting broken: {} passes vs {} iterations",
                self.target_forward_passes,
                self.iterations.len()
            )));
        }
        for r in &self.iterations {
            let ell = r.accepted_count + 1;
            if ell < 1 || ell > self.draft_len + 1 {
                return Err(Error::Contract(format!(
                    "per-iteration acceptance length {ell} outside [1, t+1]"
                )));
            }
        }
        Ok(())
    }
}

/// Speculative decoding: draft a chain, verify it in one batched target
/// pass, accept a prefix, emit a correction or bonus token, repeat until at
/// least `max_new` tokens are out (the final iteration may overshoot by up
/// to `t`).
pub fn spec_decode<R: UnitUniform + ?Sized>(
    target: &crate::target::TargetModel,
    head: &crate::heads::DraftHead,
    prompt: &[u8],
    max_new: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<(Vec<u8>, DecodeTrace)> {
    use std::time::Instant;

    if !target.frozen() {
        return Err(Error::NotFrozen("speculative decoding requires a frozen target".into()));
    }
    if prompt.is_empty() {
        return Err(Error::Contract("prompt must be nonempty".into()));
    }
    if head.config().d_model != target.config().d_model {
        return Err(Error::ShapeMismatch {
            op: "spec_decode",
            lhs: vec![head.config().d_model],
            rhs: vec![target.config().d_model],
        });
    }
    let t = head.config().draft_len;
    let limit = target.config().max_seq_len;
    let dist_temp = if temperature == 0.0 { 1.0 } else { temperature };

    let mut trace = DecodeTrace { draft_len: t, ..DecodeTrace::default() };
    let mut tokens: Vec<u8> = prompt.to_vec();

    if prompt.len() + t + 1 > limit {
        trace.overflow_stop = true;
        return Ok((tokens, trace));
    }

    let mut session = crate::target::TargetSession::new(target);
    let prefill = session.feed(prompt)?;
    let mut last_logits = prefill.logits.last().unwrap().clone();
    let mut last_hidden = vec![prefill.hidden.last().unwrap().clone()];

    while trace.emitted_tokens < max_new {
        if session.len() + t + 1 > limit {
            trace.overflow_stop = true;
            break;
        }

        // draft phase
        let draft_start = Instant::now();
        let draft = head.draft_chain(target, &tokens, &last_hidden, t, temperature, rng)?;
        let draft_ns = draft_start.elapsed().as_nanos();
        trace.draft_forward_passes += match head.kind() {
            crate::heads::HeadKind::Medusa => 1,
            crate::heads::HeadKind::Eagle => t,
        };

        // verify phase: one batched pass over the drafted chain
        let verify_start = Instant::now();
        let draft_bytes: Vec<u8> = draft.tokens.iter().map(|&x| x as u8).collect();
        let base_len = session.len();
        let step = session.feed(&draft_bytes)?;
        let mut q_dists = Vec::with_capacity(t + 1);
        q_dists.push(ProbDist::from_logits(&last_logits, dist_temp)?);
        for row in &step.logits {
            q_dists.push(ProbDist::from_logits(row, dist_temp)?);
        }

        let outcome = if temperature == 0.0 {
            verify_greedy(&q_dists, &draft.tokens)?
        } else {
            verify_stochastic(&q_dists, &draft.dists, &draft.tokens, rng)?
        };

        // roll back rejected rows, then process the correction/bonus token
        let accepted = outcome.accepted_count;
        session.truncate(base_len + accepted);
        let pending = *outcome.emitted_tokens.last().unwrap() as u8;
        let pending_out = session.feed(&[pending])?;
        last_logits = pending_out.logits.last().unwrap().clone();
        last_hidden = vec![pending_out.hidden.last().unwrap().clone()];
        let verify_ns = verify_start.elapsed().as_nanos();

        for &tok in &outcome.emitted_tokens {
            tokens.push(tok as u8);
        }
        trace.emitted_tokens += outcome.emitted_tokens.len();
        trace.target_forward_passes += 1;
        trace.draft_ns_total += draft_ns;
        trace.verify_ns_total += verify_ns;
        let mut accept_flags = vec![true; accepted];
        if outcome.rejection_index.is_some() {
            accept_flags.push(false);
        }
        trace.iterations.push(IterationRecord {
            accepted_count: accepted,
            bonus: outcome.bonus,
            accept_flags,
            draft_ns,
            verify_ns,
        });
    }

    trace.check_invariants()?;
    Ok((tokens, trace))
}

/// Vanilla decoding with the same timing instrumentation as the
/// speculative path.
#[derive(Debug, Clone, serde::Serialize)]
pub struct VanillaRun {
    pub tokens_generated: usize,
    pub forward_passes: usize,
    pub total_ns: u128,
    pub truncated: bool,
}

pub fn vanilla_decode_bench<R: UnitUniform + ?Sized>(
    target: &crate::target::TargetModel,
    prompt: &[u8],
    max_new: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<(Vec<u8>, VanillaRun)> {
    let start = std::time::Instant::now();
    let res = crate::target::generate_autoregressive(target, prompt, max_new, temperature, rng)?;
    let total_ns = start.elapsed().as_nanos();
    Ok((
        res.tokens,
        VanillaRun {
            tokens_generated: max_new,
            forward_passes: res.forward_passes,
            total_ns,
            truncated: res.truncated,
        },
    ))
}
