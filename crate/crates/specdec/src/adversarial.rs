//! Adversarial + distillation training of draft heads.
//!
//! The head (generator) drafts teacher-forced chains over corpus positions
//! and is trained to match the frozen target's distributions (soft-label
//! KL) plus, optionally, to fool a discriminator that scores whether a
//! logits row came from the target or the head:
//!
//! ```text
//! L_G = -lambda * E[log D(draft logits)] + KL(softmax(q) || softmax(d))
//! L_D = -E[log D(target logits)] - E[log(1 - D(draft logits))]
//! ```
//!
//! Generator and discriminator alternate (`g_steps` then `d_steps` per
//! batch) on independent optimizers; gradients never cross between them.
//! Training stops when the discriminator's sliding-window accuracy settles
//! into the near-chance band, or at the epoch cap.

use crate::corpus::DistillSet;
use crate::error::{Error, Result};
use crate::heads::DraftHead;
use crate::rng::seeded;
use crate::target::Lease;
use crate::tensor::graph::{Graph, ValueId};
use crate::tensor::kernels;
use crate::tensor::optim::Optimizer;
use crate::tensor::{Real, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Probability clamp for log terms.
pub const PROB_EPS: f64 = 1e-7;

// ── Loss functions (pure reference path) ────────────────────────────────

/// Mean over rows of `KL(softmax(q) || softmax(d))`. Zero iff the
/// distributions match row-for-row.
pub fn distill_loss<T: Real>(d_logits: &[T], q_logits: &[T], rows: usize, vocab: usize) -> Result<T> {
    if d_logits.len() != rows * vocab || q_logits.len() != rows * vocab {
        return Err(Error::ShapeMismatch {
            op: "distill_loss",
            lhs: vec![d_logits.len()],
            rhs: vec![q_logits.len()],
        });
    }
    let mut total = T::zero();
    for r in 0..rows {
        let q_row = &q_logits[r * vocab..(r + 1) * vocab];
        let d_row = &d_logits[r * vocab..(r + 1) * vocab];
        let mut lq = q_row.to_vec();
        kernels::log_softmax_row_inplace(&mut lq);
        let mut ld = d_row.to_vec();
        kernels::log_softmax_row_inplace(&mut ld);
        let mut row_kl = T::zero();
        for (lqv, ldv) in lq.iter().zip(&ld) {
            let p = lqv.exp();
            row_kl += p * (*lqv - *ldv);
        }
        total += row_kl;
    }
    Ok(total / T::from_f64(rows as f64))
}

/// Clamp a probability into `(0, 1)`; returns the value and whether it was
/// saturated.
fn clamp_prob(p: f64) -> (f64, bool) {
    if p < PROB_EPS {
        (PROB_EPS, true)
    } else if p > 1.0 - PROB_EPS {
        (1.0 - PROB_EPS, true)
    } else {
        (p, false)
    }
}

/// `L_D = -E[log D_real] - E[log(1 - D_fake)]`. Returns the loss and the
/// number of clamped (saturated) probabilities.
pub fn discriminator_loss(d_real: &[f64], d_fake: &[f64]) -> (f64, usize) {
    let mut saturated = 0usize;
    let mut real_term = 0.0;
    for &p in d_real {
        let (p, s) = clamp_prob(p);
        saturated += s as usize;
        real_term += p.ln();
    }
    let mut fake_term = 0.0;
    for &p in d_fake {
        let (p, s) = clamp_prob(p);
        saturated += s as usize;
        fake_term += (1.0 - p).ln();
    }
    (
        -real_term / d_real.len() as f64 - fake_term / d_fake.len() as f64,
        saturated,
    )
}

/// `L_G = -lambda * E[log D_fake] + distill_loss(d, q)`. With `lambda = 0`
/// this is exactly `distill_loss` (the adversarial term is skipped).
pub fn generator_loss(
    d_fake: &[f64],
    d_logits: &[f64],
    q_logits: &[f64],
    rows: usize,
    vocab: usize,
    lambda: f64,
) -> Result<(f64, usize)> {
    let distill = distill_loss(d_logits, q_logits, rows, vocab)?;
    if lambda == 0.0 {
        return Ok((distill, 0));
    }
    let mut saturated = 0usize;
    let mut log_term = 0.0;
    for &p in d_fake {
        let (p, s) = clamp_prob(p);
        saturated += s as usize;
        log_term += p.ln();
    }
    Ok((-lambda * log_term / d_fake.len() as f64 + distill, saturated))
}

// ── Discriminator ────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub d_model: usize,
    pub vocab_size: usize,
    /// Fully connected depth, 1..=3 (matched to the head's K by default).
    pub fc_depth: usize,
    pub fc_width: usize,
}

impl DiscriminatorConfig {
    pub fn for_head(head: &crate::heads::HeadConfig) -> Self {
        Self {
            d_model: head.d_model,
            vocab_size: head.vocab_size,
            fc_depth: head.k.clamp(1, 3),
            fc_width: head.vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.fc_depth) {
            return Err(Error::Config(format!(
                "discriminator fc_depth must be in 1..=3, got {}",
                self.fc_depth
            )));
        }
        if self.d_model == 0 || self.vocab_size == 0 || self.fc_width == 0 {
            return Err(Error::Config("discriminator dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Scores whether a logits row originated from the target. A linear layer
/// maps the context hidden state into logit space; the mapped hidden state
/// is concatenated with the candidate logits (and a reference slot, zeroed
/// during training) and passed through 1-3 FC layers with SiLU between,
/// ending in a scalar sigmoid.
#[derive(Debug, Clone)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    pub w_map: Tensor<f32>,
    pub b_map: Tensor<f32>,
    /// `fc_depth` layers; the last one has a single output column and is
    /// zero-initialized, so an untrained discriminator outputs exactly 0.5.
    pub fc: Vec<(Tensor<f32>, Tensor<f32>)>,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let v = config.vocab_size;
        let mut fc = Vec::with_capacity(config.fc_depth);
        let mut in_width = 3 * v;
        for layer in 0..config.fc_depth {
            let last = layer + 1 == config.fc_depth;
            let out_width = if last { 1 } else { config.fc_width };
            let w = if last {
                Tensor::zeros(&[in_width, 1])
            } else {
                Tensor::randn(&[in_width, out_width], 0.05, rng)
            };
            fc.push((w, Tensor::zeros(&[1, out_width])));
            in_width = out_width;
        }
        let mut disc = Self {
            w_map: Tensor::randn(&[config.d_model, v], 0.05, rng),
            b_map: Tensor::zeros(&[1, v]),
            config,
            fc,
        };
        for (_, p) in disc.named_params_mut() {
            p.set_requires_grad(true);
        }
        Ok(disc)
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = Vec::new();
        out.push(("w_map".to_string(), &self.w_map));
        out.push(("b_map".to_string(), &self.b_map));
        for (i, (w, b)) in self.fc.iter().enumerate() {
            out.push((format!("fc{i}.w"), w));
            out.push((format!("fc{i}.b"), b));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<f32>)> {
        let mut out: Vec<(String, &mut Tensor<f32>)> = Vec::new();
        out.push(("w_map".to_string(), &mut self.w_map));
        out.push(("b_map".to_string(), &mut self.b_map));
        for (i, (w, b)) in self.fc.iter_mut().enumerate() {
            out.push((format!("fc{i}.w"), w));
            out.push((format!("fc{i}.b"), b));
        }
        out
    }

    pub fn weight_hash(&self) -> String {
        crate::target::hash_params(&self.named_params())
    }

    /// Map a raw hidden state into logit space.
    pub fn map_hidden(&self, hidden: &[f32]) -> Result<Vec<f32>> {
        let d = self.config.d_model;
        if hidden.len() != d {
            return Err(Error::ShapeMismatch {
                op: "discriminate",
                lhs: vec![hidden.len()],
                rhs: vec![d],
            });
        }
        let v = self.config.vocab_size;
        let mut mapped = kernels::matmul(hidden, self.w_map.data(), 1, d, v);
        kernels::add_row_inplace(&mut mapped, self.b_map.data());
        Ok(mapped)
    }

    fn fc_forward(&self, input: Vec<f32>) -> f32 {
        let mut x = input;
        for (layer, (w, b)) in self.fc.iter().enumerate() {
            let (rows, cols) = (w.shape()[0], w.shape()[1]);
            debug_assert_eq!(x.len(), rows);
            let mut y = kernels::matmul(&x, w.data(), 1, rows, cols);
            kernels::add_row_inplace(&mut y, b.data());
            if layer + 1 < self.fc.len() {
                for v in y.iter_mut() {
                    *v = kernels::silu(*v);
                }
            }
            x = y;
        }
        kernels::sigmoid(x[0])
    }

    /// Probability that `candidate_logits` originate from the target LLM,
    /// judged in the context of `mapped_hidden` (see [`Self::map_hidden`])
    /// with an optional reference slot.
    pub fn discriminate(
        &self,
        mapped_hidden: &[f32],
        candidate_logits: &[f32],
        reference_logits: &[f32],
    ) -> Result<f64> {
        let v = self.config.vocab_size;
        if mapped_hidden.len() != v || candidate_logits.len() != v || reference_logits.len() != v {
            return Err(Error::ShapeMismatch {
                op: "discriminate",
                lhs: vec![mapped_hidden.len(), candidate_logits.len(), reference_logits.len()],
                rhs: vec![v, v, v],
            });
        }
        let mut input = Vec::with_capacity(3 * v);
        input.extend_from_slice(mapped_hidden);
        input.extend_from_slice(candidate_logits);
        input.extend_from_slice(reference_logits);
        Ok(self.fc_forward(input) as f64)
    }

    /// Differentiable scoring of a `[R, V]` candidate batch against `[R, d]`
    /// context hidden states. Returns the `[R, 1]` probability node.
    pub fn trace(
        &self,
        g: &mut Graph<f32>,
        ids: &DiscriminatorLeafIds,
        hidden: ValueId,
        candidates: ValueId,
    ) -> Result<ValueId> {
        let rows = g.rows(hidden);
        let v = self.config.vocab_size;
        let mapped = g.matmul(hidden, ids.w_map)?;
        let mapped = g.add(mapped, ids.b_map)?;
        let zeros = vec![0.0f32; rows * v];
        let reference = g.constant(rows, v, &zeros)?;
        let joined = g.concat_cols(mapped, candidates)?;
        let mut x = g.concat_cols(joined, reference)?;
        for (layer, &(w, b)) in ids.fc.iter().enumerate() {
            x = g.matmul(x, w)?;
            x = g.add(x, b)?;
            if layer + 1 < ids.fc.len() {
                x = g.silu(x);
            }
        }
        Ok(g.sigmoid(x))
    }

    /// Lease all parameters into a graph once, so repeated `trace` calls
    /// share leaves (gradients accumulate across uses).
    pub fn lease(&self, g: &mut Graph<f32>, lease: &mut Lease) -> Result<DiscriminatorLeafIds> {
        let w_map = lease.add(g, "w_map", &self.w_map)?;
        let b_map = lease.add(g, "b_map", &self.b_map)?;
        let mut fc = Vec::with_capacity(self.fc.len());
        for (i, (w, b)) in self.fc.iter().enumerate() {
            fc.push((lease.add(g, &format!("fc{i}.w"), w)?, lease.add(g, &format!("fc{i}.b"), b)?));
        }
        Ok(DiscriminatorLeafIds { w_map, b_map, fc })
    }
}

pub struct DiscriminatorLeafIds {
    w_map: ValueId,
    b_map: ValueId,
    fc: Vec<(ValueId, ValueId)>,
}

// ── Training configuration ───────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Adversarial weight in the generator loss.
    pub lambda: f64,
    pub g_steps: usize,
    pub d_steps: usize,
    pub lr_g: f32,
    pub lr_d: f32,
    pub max_epochs: usize,
    /// Sliding window (epochs) for the equilibrium check.
    pub nash_window: usize,
    /// Accuracy band around 0.5 that counts as equilibrium.
    pub nash_low: f64,
    pub nash_high: f64,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            g_steps: 1,
            d_steps: 1,
            lr_g: 1e-4,
            lr_d: 1e-4,
            max_epochs: 40,
            nash_window: 5,
            nash_low: 0.45,
            nash_high: 0.55,
            batch_size: 64,
            batches_per_epoch: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must be in [0, 1], got {}", self.lambda)));
        }
        if self.lr_g <= 0.0 || self.lr_d <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.nash_low >= self.nash_high {
            return Err(Error::Config("nash band is empty".into()));
        }
        if self.batch_size == 0 || self.nash_window == 0 {
            return Err(Error::Config("batch_size and nash_window must be positive".into()));
        }
        Ok(())
    }

    /// The pure-distillation baseline: adversarial term and discriminator
    /// disabled.
    pub fn without_adversarial(mut self) -> Self {
        self.lambda = 0.0;
        self.d_steps = 0;
        self
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub l_g: f64,
    pub l_d: Option<f64>,
    pub disc_accuracy: Option<f64>,
    pub distill: f64,
    pub adversarial: f64,
    pub saturated_probs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopCriterion {
    Nash,
    MaxEpochs,
    Diverged,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub stop: StopCriterion,
}

// ── Batch assembly ───────────────────────────────────────────────────────

struct Batch {
    /// `[B, d]` hidden states at the chain start positions.
    features0: Vec<f32>,
    /// Teacher-forced input token per chain step, `[t][B]`.
    step_tokens: Vec<Vec<usize>>,
    /// Target logits aligned with the chain steps, `[t * B, V]`
    /// (step-major, matching concatenated trace outputs).
    q_logits: Vec<f32>,
    /// Context hidden states aligned per judged position, `[t * B, d]`.
    judge_hidden: Vec<f32>,
    rows: usize,
}

fn assemble_batch(set: &DistillSet, positions: &[(usize, usize)], t: usize) -> Batch {
    let b = positions.len();
    let d = set.d_model;
    let v = set.vocab_size;
    let mut features0 = Vec::with_capacity(b * d);
    for &(w, p) in positions {
        features0.extend_from_slice(&set.windows[w].hidden[p]);
    }
    let mut step_tokens = Vec::with_capacity(t);
    for j in 0..t {
        step_tokens.push(
            positions.iter().map(|&(w, p)| set.windows[w].tokens[p + j] as usize).collect(),
        );
    }
    let mut q_logits = Vec::with_capacity(t * b * v);
    let mut judge_hidden = Vec::with_capacity(t * b * d);
    for j in 0..t {
        for &(w, p) in positions {
            q_logits.extend_from_slice(&set.windows[w].logits[p + j]);
            judge_hidden.extend_from_slice(&set.windows[w].hidden[p + j]);
        }
    }
    Batch { features0, step_tokens, q_logits, judge_hidden, rows: t * b }
}

/// In-graph distillation loss against constant teacher logits.
fn distill_trace(
    g: &mut Graph<f32>,
    d_logits: ValueId,
    q_logits: &[f32],
) -> Result<ValueId> {
    let (rows, vocab) = (g.rows(d_logits), g.cols(d_logits));
    // teacher terms are constants: precompute p_q and log p_q
    let mut pq = vec![0.0f32; rows * vocab];
    let mut lq = q_logits.to_vec();
    for r in 0..rows {
        let row = &mut lq[r * vocab..(r + 1) * vocab];
        kernels::log_softmax_row_inplace(row);
        for (dst, &l) in pq[r * vocab..(r + 1) * vocab].iter_mut().zip(row.iter()) {
            *dst = l.exp();
        }
    }
    let pq = g.constant(rows, vocab, &pq)?;
    let lq = g.constant(rows, vocab, &lq)?;
    let ld = g.log_softmax(d_logits);
    let neg_ld = g.scale(ld, -1.0);
    let diff = g.add(lq, neg_ld)?;
    let prod = g.mul(pq, diff)?;
    let total = g.sum_all(prod);
    Ok(g.scale(total, 1.0 / rows as f32))
}

/// Mean log of clamped probabilities, as a graph node. Also returns the
/// saturation count.
fn mean_log_prob_trace(g: &mut Graph<f32>, probs: ValueId) -> Result<(ValueId, usize)> {
    let (clamped, saturated) = g.clamp_counted(probs, PROB_EPS as f32, 1.0 - PROB_EPS as f32);
    let logs = g.log(clamped)?;
    Ok((g.mean_all(logs), saturated))
}

// ── Training loops ───────────────────────────────────────────────────────

pub struct Trainer<'a> {
    pub set: &'a DistillSet,
    pub cfg: TrainConfig,
    opt_g: Optimizer<f32>,
    opt_d: Optimizer<f32>,
    rng: ChaCha8Rng,
}

impl<'a> Trainer<'a> {
    pub fn new(set: &'a DistillSet, cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            opt_g: Optimizer::adam(cfg.lr_g)?,
            opt_d: Optimizer::adam(cfg.lr_d)?,
            rng: seeded(seed),
            set,
            cfg,
        })
    }

    /// One epoch of alternating generator/discriminator steps.
    pub fn train_epoch(
        &mut self,
        epoch: usize,
        head: &mut DraftHead,
        disc: Option<&mut Discriminator>,
    ) -> Result<EpochStats> {
        let t = head.config().draft_len;
        let use_adv = self.cfg.lambda > 0.0;
        if use_adv && disc.is_none() {
            return Err(Error::Config("lambda > 0 requires a discriminator".into()));
        }
        let disc = disc.map(|d| &mut *d);

        let mut sum_lg = 0.0;
        let mut sum_ld = 0.0;
        let mut ld_batches = 0usize;
        let mut sum_distill = 0.0;
        let mut sum_adv = 0.0;
        let mut acc_hits = 0usize;
        let mut acc_total = 0usize;
        let mut saturated = 0usize;

        // borrow disc immutably where possible; steps alternate per batch
        let mut disc = disc;
        for _batch in 0..self.cfg.batches_per_epoch {
            let positions = self.set.sample_positions(self.cfg.batch_size, t, &mut self.rng);
            let batch = assemble_batch(self.set, &positions, t);

            // generator steps: discriminator weights untouched
            for _ in 0..self.cfg.g_steps {
                let (lg, distill_v, adv_v, sat) =
                    self.generator_step(head, disc.as_deref(), &batch)?;
                sum_lg += lg;
                sum_distill += distill_v;
                sum_adv += adv_v;
                saturated += sat;
            }

            // discriminator steps: head weights untouched
            if let Some(d) = disc.as_deref_mut() {
                for _ in 0..self.cfg.d_steps {
                    let (ld, hits, total, sat) = self.discriminator_step(head, d, &batch)?;
                    sum_ld += ld;
                    ld_batches += 1;
                    acc_hits += hits;
                    acc_total += total;
                    saturated += sat;
                }
            }
        }

        let batches = self.cfg.batches_per_epoch as f64;
        let g_count = batches * self.cfg.g_steps.max(1) as f64;
        let l_g = sum_lg / g_count;
        if !l_g.is_finite() {
            return Err(Error::Diverged(format!("non-finite generator loss in epoch {epoch}")));
        }
        Ok(EpochStats {
            epoch,
            l_g,
            l_d: (ld_batches > 0).then(|| sum_ld / ld_batches as f64),
            disc_accuracy: (acc_total > 0).then(|| acc_hits as f64 / acc_total as f64),
            distill: sum_distill / g_count,
            adversarial: sum_adv / g_count,
            saturated_probs: saturated,
        })
    }

    fn generator_step(
        &mut self,
        head: &mut DraftHead,
        disc: Option<&Discriminator>,
        batch: &Batch,
    ) -> Result<(f64, f64, f64, usize)> {
        let b = batch.step_tokens[0].len();
        let d = self.set.d_model;
        let v = self.set.vocab_size;

        let mut g = Graph::new();
        let mut head_lease = Lease::new();
        let features0 = g.constant(b, d, &batch.features0)?;
        let lm_head = match head.kind() {
            crate::heads::HeadKind::Eagle => Some(g.constant(d, v, &self.set.lm_head)?),
            crate::heads::HeadKind::Medusa => None,
        };
        let step_logits = head.trace_chain(&mut g, lm_head, &batch.step_tokens, features0, &mut head_lease)?;
        let mut d_logits = step_logits[0];
        for &s in &step_logits[1..] {
            d_logits = g.concat_rows(d_logits, s)?;
        }

        let distill = distill_trace(&mut g, d_logits, &batch.q_logits)?;
        let (loss, adv_value, sat) = match disc {
            Some(dsc) if self.cfg.lambda > 0.0 => {
                // lease disc params as non-gradient constants: the
                // adversarial signal flows through them to the head only
                let mut frozen = dsc.clone();
                for (_, p) in frozen.named_params_mut() {
                    p.set_requires_grad(false);
                }
                let mut disc_lease = Lease::new();
                let ids = frozen.lease(&mut g, &mut disc_lease)?;
                let judge = g.constant(batch.rows, d, &batch.judge_hidden)?;
                let probs = frozen.trace(&mut g, &ids, judge, d_logits)?;
                let (mean_log, sat) = mean_log_prob_trace(&mut g, probs)?;
                let adv = g.scale(mean_log, -self.cfg.lambda as f32);
                let loss = g.add(adv, distill)?;
                (loss, g.scalar(adv) as f64, sat)
            }
            _ => (distill, 0.0, 0),
        };

        g.backward(loss)?;
        let mut params = head.named_params_mut();
        head_lease.harvest(&g, &mut params, 1.0);
        self.opt_g.step(&mut params)?;
        Ok((
            g.scalar(loss) as f64,
            g.scalar(distill) as f64,
            adv_value,
            sat,
        ))
    }

    fn discriminator_step(
        &mut self,
        head: &DraftHead,
        disc: &mut Discriminator,
        batch: &Batch,
    ) -> Result<(f64, usize, usize, usize)> {
        let b = batch.step_tokens[0].len();
        let d = self.set.d_model;
        let v = self.set.vocab_size;

        let mut g = Graph::new();
        // head output recomputed without gradient tracking
        let mut frozen_head = head.clone();
        for (_, p) in frozen_head.named_params_mut() {
            p.set_requires_grad(false);
        }
        let mut head_lease = Lease::new();
        let features0 = g.constant(b, d, &batch.features0)?;
        let lm_head = match head.kind() {
            crate::heads::HeadKind::Eagle => Some(g.constant(d, v, &self.set.lm_head)?),
            crate::heads::HeadKind::Medusa => None,
        };
        let step_logits =
            frozen_head.trace_chain(&mut g, lm_head, &batch.step_tokens, features0, &mut head_lease)?;
        let mut fake_logits = step_logits[0];
        for &s in &step_logits[1..] {
            fake_logits = g.concat_rows(fake_logits, s)?;
        }
        let real_logits = g.constant(batch.rows, v, &batch.q_logits)?;
        let judge = g.constant(batch.rows, d, &batch.judge_hidden)?;

        let mut disc_lease = Lease::new();
        let ids = disc.lease(&mut g, &mut disc_lease)?;
        let real_probs = disc.trace(&mut g, &ids, judge, real_logits)?;
        let fake_probs = disc.trace(&mut g, &ids, judge, fake_logits)?;

        // accuracy before the update
        let mut hits = 0usize;
        for &p in g.data(real_probs) {
            hits += (p > 0.5) as usize;
        }
        for &p in g.data(fake_probs) {
            hits += (p < 0.5) as usize;
        }
        let total = 2 * batch.rows;

        let (mean_log_real, sat_r) = mean_log_prob_trace(&mut g, real_probs)?;
        let one_minus_fake = g.affine(fake_probs, -1.0, 1.0);
        let (mean_log_omf, sat_f) = mean_log_prob_trace(&mut g, one_minus_fake)?;
        let neg_real = g.scale(mean_log_real, -1.0);
        let neg_fake = g.scale(mean_log_omf, -1.0);
        let loss = g.add(neg_real, neg_fake)?;

        g.backward(loss)?;
        let mut params = disc.named_params_mut();
        disc_lease.harvest(&g, &mut params, 1.0);
        self.opt_d.step(&mut params)?;
        Ok((g.scalar(loss) as f64, hits, total, sat_r + sat_f))
    }

    /// Alternate until the discriminator's sliding-window accuracy sits in
    /// the near-chance band, divergence is detected, or the epoch cap hits.
    pub fn train_until_equilibrium(
        &mut self,
        head: &mut DraftHead,
        mut disc: Option<&mut Discriminator>,
    ) -> Result<TrainReport> {
        let mut epochs: Vec<EpochStats> = Vec::new();
        let mut stop = StopCriterion::MaxEpochs;
        for epoch in 0..self.cfg.max_epochs {
            let stats = self.train_epoch(epoch, head, disc.as_deref_mut())?;
            epochs.push(stats);

            // divergence: L_G grows 10x over 3 consecutive epochs
            if epochs.len() >= 4 {
                let now = epochs[epochs.len() - 1].l_g;
                let base = epochs[epochs.len() - 4].l_g;
                if base > 0.0 && now > 10.0 * base {
                    stop = StopCriterion::Diverged;
                    break;
                }
            }

            // equilibrium: windowed mean accuracy inside the band
            let w = self.cfg.nash_window;
            if epochs.len() >= w {
                let accs: Vec<f64> =
                    epochs[epochs.len() - w..].iter().filter_map(|e| e.disc_accuracy).collect();
                if accs.len() == w {
                    let mean = accs.iter().sum::<f64>() / w as f64;
                    if mean >= self.cfg.nash_low && mean <= self.cfg.nash_high {
                        stop = StopCriterion::Nash;
                        break;
                    }
                }
            }
        }
        Ok(TrainReport { epochs, stop })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Corpus;
    use crate::heads::{HeadConfig, HeadKind};
    use crate::target::{TargetConfig, TargetModel};

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn distill_loss_zero_on_equal_logits() {
        let q = vec![0.4f64, -1.0, 2.0, 0.0, 0.1, 0.2, -0.3, 1.0];
        let v = distill_loss(&q, &q, 2, 4).unwrap();
        assert!(v.abs() < 1e-12, "{v}");
    }

    #[test]
    fn distill_loss_hand_computed_two_vocab() {
        // q = [ln 2, 0], d = [0, 0]:
        // KL([2/3, 1/3] || [1/2, 1/2]) = 2/3 ln(4/3) + 1/3 ln(2/3)
        let q = vec![LN2, 0.0];
        let d = vec![0.0, 0.0];
        let v = distill_loss(&d, &q, 1, 2).unwrap();
        assert!((v - 0.056633012265132491).abs() < 1e-9, "{v}");
    }

    #[test]
    fn distill_loss_one_hot_limit_is_cross_entropy() {
        // q with a huge logit gap acts like a one-hot target: the KL
        // reduces to -log softmax(d)[argmax q]
        let q = vec![50.0f64, 0.0, 0.0];
        let d = vec![0.3f64, -0.4, 1.1];
        let v = distill_loss(&d, &q, 1, 3).unwrap();
        let mut ld = d.clone();
        kernels::log_softmax_row_inplace(&mut ld);
        assert!((v - (-ld[0])).abs() < 1e-9, "{v} vs {}", -ld[0]);
    }

    #[test]
    fn discriminator_loss_anchors() {
        // D_real = D_fake = 0.5 -> 2 ln 2
        let (v, sat) = discriminator_loss(&[0.5, 0.5], &[0.5, 0.5]);
        assert!((v - 2.0 * LN2).abs() < 1e-9, "{v}");
        assert_eq!(sat, 0);

        // perfect discriminator -> loss -> 0 (clamped at eps)
        let (v, sat) = discriminator_loss(&[1.0], &[0.0]);
        assert!(v < 1e-6, "{v}");
        assert_eq!(sat, 2);

        // hand arithmetic: -ln 0.8 - ln 0.7
        let (v, _) = discriminator_loss(&[0.8], &[0.3]);
        assert!((v - 0.579818495252942135).abs() < 1e-9, "{v}");
    }

    #[test]
    fn generator_loss_anchors() {
        let q = vec![0.3f64, 1.0, -0.5];
        // lambda = 0 is bitwise the distillation loss
        let (v, sat) = generator_loss(&[0.123], &q, &q, 1, 3, 0.0).unwrap();
        let distill = distill_loss(&q, &q, 1, 3).unwrap();
        assert_eq!(v.to_bits(), distill.to_bits());
        assert_eq!(sat, 0);

        // D_fake = 0.5, lambda = 0.1, d == q -> 0.1 ln 2
        let (v, _) = generator_loss(&[0.5], &q, &q, 1, 3, 0.1).unwrap();
        assert!((v - 0.1 * LN2).abs() < 1e-9, "{v}");

        // lambda = 0.5, D_fake = 0.9, d == q -> -0.5 ln 0.9
        let (v, _) = generator_loss(&[0.9], &q, &q, 1, 3, 0.5).unwrap();
        assert!((v - 0.052680257828913151).abs() < 1e-9, "{v}");
    }

    fn fill_randn(t: &mut Tensor<f32>, std: f32, rng: &mut ChaCha8Rng) {
        let fresh = Tensor::randn(t.shape(), std, rng);
        t.data_mut().copy_from_slice(fresh.data());
    }

    fn tiny_frozen_target(seed: u64) -> TargetModel {
        let cfg = TargetConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 32,
            ff_mult: 2,
            ..TargetConfig::default()
        };
        let mut m = TargetModel::new(cfg, &mut seeded(seed)).unwrap();
        // non-trivial LM head so teacher logits are not uniform
        m.w_lm = Tensor::randn(&[16, 256], 0.3, &mut seeded(seed ^ 1));
        m.freeze();
        m
    }

    fn tiny_set(target: &TargetModel) -> DistillSet {
        const PHRASE: &[u8] = b"the quick onyx goblin jumps over a lazy dwarf. ";
        let bytes: Vec<u8> = (0..8192).map(|i| PHRASE[i % PHRASE.len()]).collect();
        let corpus = Corpus::from_bytes(bytes).unwrap();
        DistillSet::build(target, &corpus, 6, 24, &mut seeded(3)).unwrap()
    }

    #[test]
    fn discriminator_zero_final_layer_outputs_half() {
        for depth in 1..=3 {
            let cfg = DiscriminatorConfig { d_model: 16, vocab_size: 256, fc_depth: depth, fc_width: 32 };
            let disc = Discriminator::new(cfg, &mut seeded(4)).unwrap();
            let mapped = disc.map_hidden(&vec![0.3f32; 16]).unwrap();
            let p = disc.discriminate(&mapped, &vec![0.1f32; 256], &vec![0.0f32; 256]).unwrap();
            assert_eq!(p, 0.5, "depth {depth}");
        }
    }

    #[test]
    fn discriminator_output_strictly_inside_unit_interval() {
        let cfg = DiscriminatorConfig { d_model: 16, vocab_size: 256, fc_depth: 2, fc_width: 32 };
        let mut disc = Discriminator::new(cfg, &mut seeded(5)).unwrap();
        let mut rng = seeded(6);
        for (_, p) in disc.named_params_mut() {
            *p = Tensor::randn(p.shape(), 0.05, &mut rng);
        }
        let mapped = disc.map_hidden(&vec![1.0f32; 16]).unwrap();
        for scale in [0.01f32, 0.5, 3.0] {
            let cand: Vec<f32> = (0..256).map(|i| scale * (i as f32 * 0.1).sin()).collect();
            let p = disc.discriminate(&mapped, &cand, &vec![0.0f32; 256]).unwrap();
            assert!(p > 0.0 && p < 1.0, "{p}");
        }
    }

    #[test]
    fn discriminator_depth_outside_range_rejected() {
        let cfg = DiscriminatorConfig { d_model: 8, vocab_size: 16, fc_depth: 4, fc_width: 8 };
        assert!(Discriminator::new(cfg, &mut seeded(0)).is_err());
    }

    #[test]
    fn swapping_candidate_and_reference_changes_trained_output() {
        let cfg = DiscriminatorConfig { d_model: 16, vocab_size: 256, fc_depth: 2, fc_width: 32 };
        let mut disc = Discriminator::new(cfg, &mut seeded(7)).unwrap();
        let mut rng = seeded(8);
        for (_, p) in disc.named_params_mut() {
            *p = Tensor::randn(p.shape(), 0.5, &mut rng);
        }
        let mapped = disc.map_hidden(&vec![0.2f32; 16]).unwrap();
        let cand: Vec<f32> = (0..256).map(|i| (i as f32 * 0.01).sin()).collect();
        let mut refr = vec![0.0f32; 256];
        refr[3] = 2.0;
        let a = disc.discriminate(&mapped, &cand, &refr).unwrap();
        let b = disc.discriminate(&mapped, &refr, &cand).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn zero_steps_leave_both_models_unchanged() {
        let target = tiny_frozen_target(10);
        let set = tiny_set(&target);
        let mut head =
            DraftHead::init_from_target(HeadConfig::medusa(1, target.config()), &target).unwrap();
        let mut disc = Discriminator::new(
            DiscriminatorConfig::for_head(head.config()),
            &mut seeded(11),
        )
        .unwrap();
        let head_hash = head.weight_hash();
        let disc_hash = disc.weight_hash();
        let cfg = TrainConfig { g_steps: 0, d_steps: 0, batches_per_epoch: 3, ..TrainConfig::default() };
        let mut trainer = Trainer::new(&set, cfg, 12).unwrap();
        trainer.train_epoch(0, &mut head, Some(&mut disc)).unwrap();
        assert_eq!(head.weight_hash(), head_hash);
        assert_eq!(disc.weight_hash(), disc_hash);
    }

    #[test]
    fn lambda_zero_step_equals_pure_distillation_bitwise() {
        let target = tiny_frozen_target(13);
        let set = tiny_set(&target);
        let make_head = || {
            DraftHead::init_from_target(HeadConfig::medusa(1, target.config()), &target).unwrap()
        };

        // run one epoch with lambda 0 + discriminator present vs no disc;
        // head weights must match bitwise (same seed, same batches)
        let cfg = TrainConfig {
            lambda: 0.0,
            batches_per_epoch: 2,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let mut h1 = make_head();
        let mut t1 = Trainer::new(&set, cfg.clone(), 99).unwrap();
        t1.train_epoch(0, &mut h1, None).unwrap();

        let mut h2 = make_head();
        let mut disc = Discriminator::new(
            DiscriminatorConfig::for_head(h2.config()),
            &mut seeded(14),
        )
        .unwrap();
        let mut t2 = Trainer::new(&set, cfg.without_adversarial(), 99).unwrap();
        t2.train_epoch(0, &mut h2, Some(&mut disc)).unwrap();
        assert_eq!(h1.weight_hash(), h2.weight_hash());
    }

    #[test]
    fn parameter_isolation_between_steps() {
        let target = tiny_frozen_target(15);
        let set = tiny_set(&target);
        let mut head =
            DraftHead::init_from_target(HeadConfig::eagle(1, target.config()), &target).unwrap();
        let mut disc =
            Discriminator::new(DiscriminatorConfig::for_head(head.config()), &mut seeded(16)).unwrap();
        let cfg = TrainConfig { batch_size: 4, batches_per_epoch: 1, ..TrainConfig::default() };
        let mut trainer = Trainer::new(&set, cfg, 17).unwrap();

        // generator step alone: disc untouched
        let positions = set.sample_positions(4, 3, &mut seeded(18));
        let batch = assemble_batch(&set, &positions, 3);
        let disc_hash = disc.weight_hash();
        trainer.generator_step(&mut head, Some(&disc), &batch).unwrap();
        assert_eq!(disc.weight_hash(), disc_hash);

        // discriminator step alone: head untouched
        let head_hash = head.weight_hash();
        trainer.discriminator_step(&head, &mut disc, &batch).unwrap();
        assert_eq!(head.weight_hash(), head_hash);
        assert_ne!(disc.weight_hash(), disc_hash, "disc did update");
    }

    #[test]
    fn discriminator_step_reduces_its_loss_on_fixed_batch() {
        // single step with small lr must not increase L_D on that batch
        let target = tiny_frozen_target(19);
        let set = tiny_set(&target);
        for seed in 0..10u64 {
            let mut head =
                DraftHead::init_from_target(HeadConfig::medusa(1, target.config()), &target).unwrap();
            // perturb the head so fake logits differ from teacher logits
            let mut rng = seeded(seed ^ 0xBEEF);
            for (name, p) in head.named_params_mut() {
                if name.contains("res") {
                    fill_randn(p, 0.2, &mut rng);
                }
            }
            let mut disc = Discriminator::new(
                DiscriminatorConfig { fc_depth: 2, ..DiscriminatorConfig::for_head(head.config()) },
                &mut seeded(seed),
            )
            .unwrap();
            // give the disc non-zero output layer so the loss can move
            let mut rng2 = seeded(seed ^ 0xF00D);
            for (name, p) in disc.named_params_mut() {
                if name.starts_with("fc") {
                    fill_randn(p, 0.1, &mut rng2);
                }
            }
            let cfg = TrainConfig { lr_d: 1e-3, batch_size: 8, ..TrainConfig::default() };
            let mut trainer = Trainer::new(&set, cfg, seed).unwrap();
            let positions = set.sample_positions(8, 3, &mut seeded(seed ^ 2));
            let batch = assemble_batch(&set, &positions, 3);

            let loss_of = |tr: &mut Trainer, d: &mut Discriminator, h: &DraftHead| -> f64 {
                // measure without updating: clone disc, huge-batch free eval
                let saved = d.clone();
                let (l, _, _, _) = tr.discriminator_step(h, d, &batch).unwrap();
                *d = saved;
                l
            };
            let before = loss_of(&mut trainer, &mut disc, &head);
            // now actually update once
            trainer.discriminator_step(&head, &mut disc, &batch).unwrap();
            let after = loss_of(&mut trainer, &mut disc, &head);
            assert!(
                after <= before + 1e-6,
                "seed {seed}: L_D increased from {before} to {after}"
            );
        }
    }

    #[test]
    fn equilibrium_run_is_deterministic() {
        let target = tiny_frozen_target(23);
        let set = tiny_set(&target);
        let cfg = TrainConfig {
            max_epochs: 3,
            batches_per_epoch: 2,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let run = || {
            let mut head =
                DraftHead::init_from_target(HeadConfig::medusa(2, target.config()), &target).unwrap();
            let mut disc = Discriminator::new(
                DiscriminatorConfig::for_head(head.config()),
                &mut seeded(24),
            )
            .unwrap();
            let mut trainer = Trainer::new(&set, cfg.clone(), 25).unwrap();
            let report = trainer.train_until_equilibrium(&mut head, Some(&mut disc)).unwrap();
            (head.weight_hash(), serde_json::to_string(&report).unwrap())
        };
        let (h1, r1) = run();
        let (h2, r2) = run();
        assert_eq!(h1, h2);
        assert_eq!(r1, r2);
    }

    #[test]
    fn max_epochs_one_stops_after_one_epoch() {
        let target = tiny_frozen_target(26);
        let set = tiny_set(&target);
        let mut head =
            DraftHead::init_from_target(HeadConfig::medusa(1, target.config()), &target).unwrap();
        let cfg = TrainConfig {
            max_epochs: 1,
            batches_per_epoch: 1,
            batch_size: 4,
            ..TrainConfig::default()
        }
        .without_adversarial();
        let mut trainer = Trainer::new(&set, cfg, 27).unwrap();
        let report = trainer.train_until_equilibrium(&mut head, None).unwrap();
        assert_eq!(report.epochs.len(), 1);
        assert_eq!(report.stop, StopCriterion::MaxEpochs);
    }

    #[test]
    fn pinned_accuracy_stops_via_nash_after_window() {
        // a zero-initialized discriminator with zero lr stays at exactly
        // 0.5 output: accuracy counts p > 0.5 for real and p < 0.5 for
        // fake, both false at exactly 0.5 -> accuracy 0.0. Instead pin by
        // keeping lambda 0 and substituting accuracies directly.
        let target = tiny_frozen_target(28);
        let set = tiny_set(&target);
        let cfg = TrainConfig {
            max_epochs: 10,
            nash_window: 4,
            batches_per_epoch: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(&set, cfg.clone().without_adversarial(), 29).unwrap();
        let mut head =
            DraftHead::init_from_target(HeadConfig::medusa(1, target.config()), &target).unwrap();
        // stub: drive epochs manually, injecting chance-level accuracy
        let mut epochs = Vec::new();
        let mut stop = StopCriterion::MaxEpochs;
        for epoch in 0..cfg.max_epochs {
            let mut stats = trainer.train_epoch(epoch, &mut head, None).unwrap();
            stats.disc_accuracy = Some(0.5);
            epochs.push(stats);
            if epochs.len() >= cfg.nash_window {
                let accs: Vec<f64> = epochs[epochs.len() - cfg.nash_window..]
                    .iter()
                    .filter_map(|e| e.disc_accuracy)
                    .collect();
                let mean = accs.iter().sum::<f64>() / accs.len() as f64;
                if mean >= cfg.nash_low && mean <= cfg.nash_high {
                    stop = StopCriterion::Nash;
                    break;
                }
            }
        }
        assert_eq!(stop, StopCriterion::Nash);
        assert_eq!(epochs.len(), cfg.nash_window);
    }

    #[test]
    fn training_reduces_distillation_loss() {
        let target = tiny_frozen_target(30);
        let set = tiny_set(&target);
        let mut head =
            DraftHead::init_from_target(HeadConfig::eagle(1, target.config()), &target).unwrap();
        let cfg = TrainConfig {
            max_epochs: 4,
            batches_per_epoch: 8,
            batch_size: 16,
            lr_g: 1e-3,
            ..TrainConfig::default()
        }
        .without_adversarial();
        let mut trainer = Trainer::new(&set, cfg, 31).unwrap();
        let report = trainer.train_until_equilibrium(&mut head, None).unwrap();
        let first = report.epochs.first().unwrap().distill;
        let last = report.epochs.last().unwrap().distill;
        assert!(last < first, "distill did not improve: {first} -> {last}");
    }
}
