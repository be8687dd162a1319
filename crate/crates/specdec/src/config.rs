//! Run configuration: one JSON document drives every command.
//!
//! Parsing is strict: unknown keys fail fast with their JSON path. One root
//! seed feeds every component through named stream derivation, so adding a
//! component never perturbs existing streams.

use crate::adversarial::TrainConfig;
use crate::error::{Error, Result};
use crate::heads::{HeadConfig, HeadKind};
use crate::target::{TargetConfig, TargetTrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub corpus_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
    /// Committed prompt set (JSON array of strings).
    pub prompts_file: PathBuf,
}

/// Head settings from the config file; architecture dims come from the
/// target config, kind/K may be overridden per command.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct HeadSettings {
    pub kind: HeadKind,
    pub k: usize,
    pub medusa_heads: usize,
    pub draft_len: usize,
}

impl HeadSettings {
    pub fn to_head_config(&self, target: &TargetConfig) -> HeadConfig {
        HeadConfig {
            kind: self.kind,
            k: self.k,
            medusa_heads: self.medusa_heads,
            d_model: target.d_model,
            vocab_size: target.vocab_size,
            ff_mult: target.ff_mult,
            n_heads: target.n_heads,
            draft_len: self.draft_len,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BenchSettings {
    pub max_new: usize,
    pub temperature: f64,
    pub repetitions: usize,
}

/// Distillation-set construction knobs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DistillSettings {
    pub num_windows: usize,
    pub window_len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub target: TargetConfig,
    pub target_train: TargetTrainConfig,
    pub head: HeadSettings,
    pub distill: DistillSettings,
    pub train: TrainConfig,
    pub bench: BenchSettings,
}

impl RunConfig {
    /// Parse with strict unknown-key rejection; errors carry the JSON path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::Config(format!("{} (at {})", e.inner(), e.path())))?;
        cfg.validate_values()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn validate_values(&self) -> Result<()> {
        self.target.validate()?;
        self.train.validate()?;
        if self.bench.max_new == 0 || self.bench.repetitions == 0 {
            return Err(Error::Config("bench.max_new and bench.repetitions must be >= 1".into()));
        }
        if !(self.bench.temperature == 0.0 || self.bench.temperature > 0.0) {
            return Err(Error::Config("bench.temperature must be >= 0".into()));
        }
        if self.distill.num_windows == 0 || self.distill.window_len < self.head.draft_len + 1 {
            return Err(Error::Config(
                "distill.num_windows must be >= 1 and window_len > draft_len".into(),
            ));
        }
        self.head.to_head_config(&self.target).validate()?;
        Ok(())
    }

    /// Check referenced input paths; create output directories.
    pub fn prepare_paths(&self) -> Result<()> {
        if !self.paths.corpus_dir.is_dir() {
            return Err(Error::Config(format!(
                "corpus directory not found: {}",
                self.paths.corpus_dir.display()
            )));
        }
        if !self.paths.prompts_file.is_file() {
            return Err(Error::Config(format!(
                "prompts file not found: {}",
                self.paths.prompts_file.display()
            )));
        }
        std::fs::create_dir_all(&self.paths.checkpoint_dir)?;
        std::fs::create_dir_all(&self.paths.output_dir)?;
        Ok(())
    }

    pub fn load_prompts(&self) -> Result<Vec<String>> {
        let text = std::fs::read_to_string(&self.paths.prompts_file)
            .map_err(|e| Error::Config(format!("cannot read prompts: {e}")))?;
        let prompts: Vec<String> =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("bad prompts file: {e}")))?;
        if prompts.is_empty() {
            return Err(Error::Config("prompts file holds no prompts".into()));
        }
        Ok(prompts)
    }

    pub fn target_ckpt(&self) -> PathBuf {
        self.paths.checkpoint_dir.join("target.ckpt")
    }

    pub fn head_ckpt(&self, kind: HeadKind, k: usize, adversarial: bool) -> PathBuf {
        self.paths
            .checkpoint_dir
            .join(format!("head-{kind}-k{k}-al{}.ckpt", if adversarial { "on" } else { "off" }))
    }

    pub fn disc_ckpt(&self, kind: HeadKind, k: usize) -> PathBuf {
        self.paths.checkpoint_dir.join(format!("disc-{kind}-k{k}.ckpt"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_json() -> String {
        r#"{
            "seed": 42,
            "paths": {
                "corpus_dir": "corpus/desk",
                "checkpoint_dir": "runs/checkpoints",
                "output_dir": "runs/out",
                "prompts_file": "corpus/prompts.json"
            },
            "target": {
                "vocab_size": 256, "d_model": 128, "n_layers": 6,
                "n_heads": 4, "max_seq_len": 256, "ff_mult": 4
            },
            "target_train": { "steps": 1500, "batch_size": 8, "seq_len": 128, "learning_rate": 0.001 },
            "head": { "kind": "medusa", "k": 1, "medusa_heads": 3, "draft_len": 3 },
            "distill": { "num_windows": 160, "window_len": 96 },
            "train": {
                "lambda": 0.1, "g_steps": 1, "d_steps": 1,
                "lr_g": 0.0001, "lr_d": 0.0001,
                "max_epochs": 40, "nash_window": 5,
                "nash_low": 0.45, "nash_high": 0.55,
                "batch_size": 64, "batches_per_epoch": 50
            },
            "bench": { "max_new": 64, "temperature": 0.0, "repetitions": 3 }
        }"#
        .to_string()
    }

    #[test]
    fn sample_config_parses() {
        let cfg = RunConfig::from_json(&sample_json()).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.target.d_model, 128);
        assert_eq!(cfg.head.draft_len, 3);
    }

    #[test]
    fn unknown_key_fails_with_its_path() {
        let bad = sample_json().replace(r#""max_new": 64"#, r#""max_new": 64, "bogus_key": 1"#);
        let err = RunConfig::from_json(&bad).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus_key"), "{msg}");
        assert!(msg.contains("bench"), "path should name the section: {msg}");
    }

    #[test]
    fn invalid_values_rejected() {
        let bad = sample_json().replace(r#""d_model": 128"#, r#""d_model": 126"#);
        assert!(RunConfig::from_json(&bad).is_err(), "d_model not divisible by heads");

        let bad = sample_json().replace(r#""lambda": 0.1"#, r#""lambda": 7.0"#);
        assert!(RunConfig::from_json(&bad).is_err());
    }

    #[test]
    fn checkpoint_paths_are_stable() {
        let cfg = RunConfig::from_json(&sample_json()).unwrap();
        assert!(cfg
            .head_ckpt(HeadKind::Eagle, 2, true)
            .to_string_lossy()
            .ends_with("head-eagle-k2-alon.ckpt"));
    }
}
