//! Probability distributions over the token vocabulary.

use crate::error::{Error, Result};
use crate::rng::UnitUniform;

/// Normalized probability vector over the vocabulary. Stored at f64 so the
/// acceptance/resampling arithmetic in the decode engine is exact relative
/// to the distributions it is given.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist {
    probs: Vec<f64>,
}

impl ProbDist {
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::Domain {
                op: "prob_dist",
                msg: "negative or non-finite probability".into(),
            });
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Domain {
                op: "prob_dist",
                msg: format!("probabilities sum to {sum}, expected 1"),
            });
        }
        Ok(Self { probs })
    }

    /// Softmax of logits at f64, with optional temperature flattening
    /// (`temperature = 1` reproduces the logits' softmax exactly).
    pub fn from_logits(logits: &[f32], temperature: f64) -> Result<Self> {
        if temperature <= 0.0 {
            return Err(Error::Domain {
                op: "prob_dist",
                msg: format!("temperature must be positive, got {temperature}"),
            });
        }
        let scaled: Vec<f64> = logits.iter().map(|&l| l as f64 / temperature).collect();
        let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = scaled.iter().map(|&l| (l - max).exp()).collect();
        let sum: f64 = probs.iter().sum();
        for p in probs.iter_mut() {
            *p /= sum;
        }
        Ok(Self { probs })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, token: usize) -> f64 {
        self.probs[token]
    }

    /// Highest-probability token; ties break to the lowest index.
    pub fn argmax(&self) -> usize {
        crate::tensor::kernels::argmax(&self.probs)
    }
}

/// Walk the cumulative distribution of non-negative `weights` (sum
/// `total`) and pick the bucket containing `u * total`. Zero-weight buckets
/// can never be selected.
pub fn draw_categorical(weights: &[f64], total: f64, u: f64) -> usize {
    debug_assert!(total > 0.0);
    let target = u * total;
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        cum += w;
        last_positive = i;
        if target < cum {
            return i;
        }
    }
    // rounding pushed the target past the final bucket
    last_positive
}

/// Sample a token id.
///
/// Temperature 0 is greedy argmax (lowest index wins ties). Temperature
/// `t > 0` samples from `softmax(log(p) / t)`, i.e. `p^(1/t)` renormalized;
/// `t = 1` samples from `p` directly. Consumes exactly one unit variate for
/// `t > 0` and none for `t = 0`.
pub fn sample_token<R: UnitUniform + ?Sized>(
    dist: &ProbDist,
    temperature: f64,
    rng: &mut R,
) -> usize {
    if temperature == 0.0 {
        return dist.argmax();
    }
    if (temperature - 1.0).abs() < f64::EPSILON {
        return draw_categorical(dist.probs(), 1.0, rng.next_unit());
    }
    // p^(1/t) via exp((ln p)/t - max), stable and zero-preserving
    let inv_t = 1.0 / temperature;
    let mut max = f64::NEG_INFINITY;
    for &p in dist.probs() {
        if p > 0.0 {
            max = max.max(p.ln() * inv_t);
        }
    }
    let weights: Vec<f64> = dist
        .probs()
        .iter()
        .map(|&p| if p > 0.0 { (p.ln() * inv_t - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = weights.iter().sum();
    draw_categorical(&weights, total, rng.next_unit())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn greedy_picks_argmax() {
        let d = ProbDist::from_probs(vec![0.1, 0.7, 0.2]).unwrap();
        let mut rng = seeded(0);
        assert_eq!(sample_token(&d, 0.0, &mut rng), 1);
    }

    #[test]
    fn greedy_ties_break_to_lowest_index() {
        let d = ProbDist::from_probs(vec![0.5, 0.5, 0.0]).unwrap();
        let mut rng = seeded(0);
        assert_eq!(sample_token(&d, 0.0, &mut rng), 0);
    }

    #[test]
    fn temperature_one_matches_base_frequencies() {
        // 10^5 seeded samples from [0.25, 0.75]: token-1 frequency within
        // 0.75 +/- 0.01
        let d = ProbDist::from_probs(vec![0.25, 0.75]).unwrap();
        let mut rng = seeded(42);
        let n = 100_000;
        let ones = (0..n).filter(|_| sample_token(&d, 1.0, &mut rng) == 1).count();
        let freq = ones as f64 / n as f64;
        assert!((freq - 0.75).abs() < 0.01, "freq {freq}");
    }

    #[test]
    fn zero_probability_tokens_are_never_sampled() {
        let d = ProbDist::from_probs(vec![0.0, 0.5, 0.0, 0.5, 0.0]).unwrap();
        let mut rng = seeded(7);
        for _ in 0..10_000 {
            let tok = sample_token(&d, 1.0, &mut rng);
            assert!(tok == 1 || tok == 3);
        }
        for _ in 0..1_000 {
            let tok = sample_token(&d, 0.7, &mut rng);
            assert!(tok == 1 || tok == 3);
        }
    }

    #[test]
    fn from_logits_is_temperature_consistent() {
        // softmax(l/t) must equal p^(1/t) normalized
        let logits = [1.5f32, -0.5, 0.0, 2.0];
        let t = 0.5;
        let direct = ProbDist::from_logits(&logits, t).unwrap();
        let base = ProbDist::from_logits(&logits, 1.0).unwrap();
        let powed: Vec<f64> = base.probs().iter().map(|&p| p.powf(1.0 / t)).collect();
        let sum: f64 = powed.iter().sum();
        for (a, b) in direct.probs().iter().zip(&powed) {
            assert!((a - b / sum).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_distributions_rejected() {
        assert!(ProbDist::from_probs(vec![0.5, 0.6]).is_err());
        assert!(ProbDist::from_probs(vec![-0.1, 1.1]).is_err());
        assert!(ProbDist::from_logits(&[0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn uniform_logits_give_uniform_probs() {
        let d = ProbDist::from_logits(&[0.0; 4], 1.0).unwrap();
        assert_eq!(d.probs(), &[0.25; 4]);
    }
}
