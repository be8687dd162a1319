//! Deterministic seeded randomness.
//!
//! One root seed lives in the run config. Every component derives its own
//! stream by hashing `(root, component name)`, so adding a component never
//! perturbs the streams of existing ones.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Source of unit-interval variates. The decode engine draws exactly one
/// variate per acceptance decision and one per residual/bonus sample, in
/// position order, so tests can enumerate the probability space by scripting
/// the stream.
pub trait UnitUniform {
    /// Next value in `[0, 1)`.
    fn next_unit(&mut self) -> f64;
}

impl UnitUniform for ChaCha8Rng {
    fn next_unit(&mut self) -> f64 {
        self.random::<f64>()
    }
}

/// Scripted stream for exhaustive verification tests.
pub struct ScriptedUniforms {
    values: Vec<f64>,
    pos: usize,
}

impl ScriptedUniforms {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values, pos: 0 }
    }

    pub fn consumed(&self) -> usize {
        self.pos
    }
}

impl UnitUniform for ScriptedUniforms {
    fn next_unit(&mut self) -> f64 {
        let v = self.values[self.pos];
        self.pos += 1;
        v
    }
}

/// Derive a component seed from the root seed and a component name.
pub fn derive_seed(root: u64, component: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(component.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Deterministic RNG for a component stream.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Shorthand for `seeded(derive_seed(root, component))`.
pub fn component_rng(root: u64, component: &str) -> ChaCha8Rng {
    seeded(derive_seed(root, component))
}
