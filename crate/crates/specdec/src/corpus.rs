//! Corpus ingestion and the precomputed distillation set.
//!
//! A corpus is any directory of UTF-8 text files, concatenated in
//! lexicographic filename order. The tail of the corpus is held out from
//! training; benchmark prompts come from there.
//!
//! Head training never re-runs the target per batch: [`DistillSet`] runs the
//! frozen target over sampled windows once and keeps every position's
//! hidden state and logits, so all head/discriminator trainings share the
//! same teacher outputs.

use crate::error::{Error, Result};
use crate::target::{TargetModel, TargetSession};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Bytes reserved at the end of the corpus for held-out prompts.
pub const HOLDOUT_BYTES: usize = 65_536;

#[derive(Debug, Clone)]
pub struct Corpus {
    bytes: Vec<u8>,
    holdout_start: usize,
}

impl Corpus {
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        if bytes.is_empty() {
            return Err(Error::Corpus("corpus is empty".into()));
        }
        let holdout = HOLDOUT_BYTES.min(bytes.len() / 8);
        let holdout_start = bytes.len() - holdout;
        Ok(Self { bytes, holdout_start })
    }

    /// Concatenate every file in the directory, lexicographic by name.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Corpus(format!("corpus directory not found: {}", dir.display())));
        }
        let mut names: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_file())
            .map(|e| e.path())
            .collect();
        names.sort();
        let mut bytes = Vec::new();
        for path in names {
            bytes.extend_from_slice(&std::fs::read(&path)?);
        }
        Self::from_bytes(bytes)
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    /// Training region (everything before the holdout tail).
    pub fn train_bytes(&self) -> &[u8] {
        &self.bytes[..self.holdout_start]
    }

    /// Held-out tail, never used for training.
    pub fn holdout_bytes(&self) -> &[u8] {
        &self.bytes[self.holdout_start..]
    }

    /// Deterministic benchmark prompts: evenly spaced excerpts of the
    /// holdout region.
    pub fn holdout_prompts(&self, count: usize, prompt_len: usize) -> Result<Vec<Vec<u8>>> {
        let tail = self.holdout_bytes();
        if tail.len() < prompt_len * 2 {
            return Err(Error::Corpus(format!(
                "holdout of {} bytes is too small for {count} prompts of {prompt_len} bytes",
                tail.len()
            )));
        }
        let stride = (tail.len() - prompt_len) / count.max(1);
        Ok((0..count).map(|i| tail[i * stride..i * stride + prompt_len].to_vec()).collect())
    }
}

/// One teacher window: tokens plus the frozen target's hidden state and
/// logits at every position.
#[derive(Debug, Clone)]
pub struct DistillWindow {
    pub tokens: Vec<u8>,
    pub hidden: Vec<Vec<f32>>,
    pub logits: Vec<Vec<f32>>,
}

/// Precomputed teacher outputs over sampled corpus windows.
pub struct DistillSet {
    pub windows: Vec<DistillWindow>,
    pub window_len: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    /// Copy of the frozen target's LM projection, for eagle heads.
    pub lm_head: Vec<f32>,
}

impl DistillSet {
    pub fn build(
        target: &TargetModel,
        corpus: &Corpus,
        num_windows: usize,
        window_len: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if !target.frozen() {
            return Err(Error::NotFrozen("distill set requires a frozen target".into()));
        }
        let train = corpus.train_bytes();
        if train.len() < window_len + 1 {
            return Err(Error::Corpus(format!(
                "training region of {} bytes is too small for window_len {window_len}",
                train.len()
            )));
        }
        if window_len > target.config().max_seq_len {
            return Err(Error::Config(format!(
                "window_len {window_len} exceeds target max_seq_len {}",
                target.config().max_seq_len
            )));
        }
        let span = train.len() - window_len;
        let mut windows = Vec::with_capacity(num_windows);
        for _ in 0..num_windows {
            let start = rng.random_range(0..=span);
            let tokens = train[start..start + window_len].to_vec();
            let mut session = TargetSession::new(target);
            let out = session.feed(&tokens)?;
            windows.push(DistillWindow { tokens, hidden: out.hidden, logits: out.logits });
        }
        Ok(Self {
            windows,
            window_len,
            d_model: target.config().d_model,
            vocab_size: target.config().vocab_size,
            lm_head: target.w_lm.data().to_vec(),
        })
    }

    /// Sample training positions `(window, pos)` such that a chain of
    /// `draft_len` teacher-forced steps fits inside the window.
    pub fn sample_positions(
        &self,
        batch: usize,
        draft_len: usize,
        rng: &mut ChaCha8Rng,
    ) -> Vec<(usize, usize)> {
        let max_pos = self.window_len - draft_len;
        (0..batch)
            .map(|_| {
                let w = rng.random_range(0..self.windows.len());
                let p = rng.random_range(0..max_pos);
                (w, p)
            })
            .collect()
    }
}
