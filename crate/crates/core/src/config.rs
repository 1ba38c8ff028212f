//! Declarative run configuration (TOML, one section per subsystem).
//!
//! ```toml
//! [model]
//! policy = "causal,bidirectional,bidirectional,causal"   # or: option = 3
//! width = 256
//!
//! [train]
//! steps = 20000
//!
//! [paths]
//! out_dir = "runs/default"
//! ```
//!
//! Unknown keys are rejected. Relative paths resolve against the directory of
//! the config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffhead::DiffusionConfig;
use crate::error::{Error, Result};
use crate::marloop::{GenerateOptions, TrainConfig};
use crate::model::{ImageSpec, ModelConfig, NetworkShape};
use crate::seqmask::{ablation_policy, AttentionPolicy};
use crate::synthdata::Jitter;
use crate::tokenize::TextVocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// `text,imgcond,gen,cross` modes; mutually exclusive with `option`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy: Option<String>,
    /// Ablation row 1..=8.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub option: Option<u8>,
    pub width: usize,
    pub depth_enc: usize,
    pub depth_dec: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub head_hidden: usize,
    pub head_blocks: usize,
    pub time_dim: usize,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let s = NetworkShape::reference();
        Self {
            policy: None,
            option: None,
            width: s.width,
            depth_enc: s.depth_enc,
            depth_dec: s.depth_dec,
            heads: s.heads,
            mlp_ratio: s.mlp_ratio,
            head_hidden: s.head_hidden,
            head_blocks: s.head_blocks,
            time_dim: s.time_dim,
            init_seed: 0,
        }
    }
}

impl ModelSection {
    pub fn attention_policy(&self) -> Result<AttentionPolicy> {
        match (&self.policy, self.option) {
            (Some(_), Some(_)) => Err(Error::Config("set model.policy or model.option, not both".into())),
            (Some(p), None) => p.parse().map_err(|e: Error| Error::Config(e.to_string())),
            (None, Some(o)) => ablation_policy(o).map_err(|e| Error::Config(e.to_string())),
            (None, None) => Ok(AttentionPolicy::PAPER_DEFAULT),
        }
    }

    pub fn shape(&self) -> NetworkShape {
        NetworkShape {
            width: self.width,
            depth_enc: self.depth_enc,
            depth_dec: self.depth_dec,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            head_hidden: self.head_hidden,
            head_blocks: self.head_blocks,
            time_dim: self.time_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub lr: f64,
    pub steps: usize,
    pub mask_ratio_lo: f64,
    pub mask_ratio_hi: f64,
    pub condition_dropout: f64,
    pub seed: u64,
    pub log_every: usize,
    /// 0 disables periodic checkpoints (the final one is always written).
    pub checkpoint_every: usize,
    /// Window of the moving average reported as the smoothed loss.
    pub smoothing_window: usize,
    /// Stop early once training has run this many seconds of wall time.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_budget_secs: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            lr: t.lr,
            steps: t.steps,
            mask_ratio_lo: t.mask_ratio_lo,
            mask_ratio_hi: t.mask_ratio_hi,
            condition_dropout: t.condition_dropout,
            seed: t.seed,
            log_every: 1,
            checkpoint_every: 1000,
            smoothing_window: 50,
            time_budget_secs: None,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            lr: self.lr,
            steps: self.steps,
            mask_ratio_lo: self.mask_ratio_lo,
            mask_ratio_hi: self.mask_ratio_hi,
            condition_dropout: self.condition_dropout,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Number of synthesized training samples (ignored when `dir` is set).
    pub size: usize,
    pub seed: u64,
    pub max_shift: i32,
    pub max_size_delta: i32,
    /// Load an exported dataset instead of synthesizing one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        let j = Jitter::default();
        Self {
            size: 4500,
            seed: 1,
            max_shift: j.max_shift,
            max_size_delta: j.max_size_delta,
            dir: None,
        }
    }
}

impl DataSection {
    pub fn jitter(&self) -> Jitter {
        Jitter {
            max_shift: self.max_shift,
            max_size_delta: self.max_size_delta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Generated samples used to score probe accuracy.
    pub samples: usize,
    /// Generation steps K.
    pub steps: usize,
    pub temperature: f64,
    pub guidance_scale: f64,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            samples: 200,
            steps: 8,
            temperature: 1.0,
            guidance_scale: 1.0,
            seed: 1234,
        }
    }
}

impl EvalSection {
    pub fn generate_options(&self) -> GenerateOptions {
        GenerateOptions {
            steps: self.steps,
            temperature: self.temperature,
            guidance_scale: self.guidance_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub image: ImageSpec,
    #[serde(default)]
    pub diffusion: DiffusionConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub eval: EvalSection,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, resolves relative paths against the file's directory, and checks
    /// that referenced inputs exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::path(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::path(path, msg),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.check_paths()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let resolve = |p: &Path| if p.is_relative() { base.join(p) } else { p.to_path_buf() };
        self.paths.out_dir = resolve(&self.paths.out_dir);
        if let Some(dir) = &self.data.dir {
            self.data.dir = Some(resolve(dir));
        }
    }

    pub fn check_paths(&self) -> Result<()> {
        if let Some(dir) = &self.data.dir {
            if !dir.join("manifest.jsonl").is_file() {
                return Err(Error::path(dir, "dataset directory has no manifest.jsonl"));
            }
        }
        let parent = self.paths.out_dir.parent().filter(|p| !p.as_os_str().is_empty());
        if let Some(parent) = parent {
            if !parent.is_dir() {
                return Err(Error::path(parent, "parent of paths.out_dir does not exist"));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.attention_policy()?;
        self.train.train_config().validate()?;
        self.diffusion.validate()?;
        self.image.validate()?;
        self.data
            .jitter()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.eval.steps == 0 || self.eval.steps > self.image.num_patches() {
            return Err(Error::Config(format!(
                "eval.steps must lie in 1..={}",
                self.image.num_patches()
            )));
        }
        if self.train.time_budget_secs.is_some_and(|t| !(t.is_finite() && t > 0.0)) {
            return Err(Error::Config("train.time_budget_secs must be positive".into()));
        }
        if self.train.smoothing_window == 0 {
            return Err(Error::Config("train.smoothing_window must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Model configuration for `vocab` under the configured (or overridden) policy.
    pub fn model_config(&self, vocab: &TextVocab, policy: Option<AttentionPolicy>) -> Result<ModelConfig> {
        let policy = match policy {
            Some(p) => p,
            None => self.model.attention_policy()?,
        };
        ModelConfig::new(self.image.clone(), vocab, policy, self.model.shape(), self.diffusion.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqmask::IntraMode;

    const MINIMAL: &str = "[paths]\nout_dir = \"run\"\n";

    #[test]
    fn defaults_are_reference() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.model.width, 256);
        assert_eq!(cfg.train.lr, 1e-3);
        assert_eq!((cfg.train.mask_ratio_lo, cfg.train.mask_ratio_hi), (0.7, 1.0));
        assert_eq!(cfg.train.condition_dropout, 0.1);
        assert_eq!(cfg.diffusion, DiffusionConfig::default());
        assert_eq!(cfg.model.attention_policy().unwrap(), AttentionPolicy::PAPER_DEFAULT);
        let mc = cfg.model_config(&crate::synthdata::vocab(), None).unwrap();
        assert_eq!(mc.layout().total_len(), 36);
        assert_eq!(mc.token_dim(), 48);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse("[paths]\nout_dir = \"x\"\nbogus = 1\n").is_err());
        assert!(RunConfig::parse("[model]\nwidht = 3\n[paths]\nout_dir = \"x\"\n").is_err());
        assert!(RunConfig::parse("[model]\nwidth = 3\n").is_err());
    }

    #[test]
    fn time_budget_must_be_positive() {
        let ok = RunConfig::parse("[train]\ntime_budget_secs = 60.0\n[paths]\nout_dir = \"x\"\n").unwrap();
        assert_eq!(ok.train.time_budget_secs, Some(60.0));
        assert!(RunConfig::parse("[train]\ntime_budget_secs = 0.0\n[paths]\nout_dir = \"x\"\n").is_err());
    }

    #[test]
    fn policy_selection() {
        let cfg = RunConfig::parse("[model]\noption = 8\n[paths]\nout_dir = \"x\"\n").unwrap();
        assert_eq!(cfg.model.attention_policy().unwrap().cross_mode, IntraMode::Bidirectional);
        let cfg = RunConfig::parse("[model]\npolicy = \"b,b,c,c\"\n[paths]\nout_dir = \"x\"\n").unwrap();
        assert_eq!(cfg.model.attention_policy().unwrap().gen_mode, IntraMode::Causal);
        assert!(RunConfig::parse("[model]\noption = 9\n[paths]\nout_dir = \"x\"\n").is_err());
        assert!(RunConfig::parse("[model]\noption = 1\npolicy = \"c,c,c,c\"\n[paths]\nout_dir = \"x\"\n").is_err());
    }

    #[test]
    fn round_trip() {
        let mut cfg = RunConfig::parse(MINIMAL).unwrap();
        cfg.model.option = Some(5);
        cfg.data.dir = Some(PathBuf::from("data/shapes"));
        cfg.train.steps = 17;
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn load_checks_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "[data]\ndir = \"missing\"\n[paths]\nout_dir = \"out\"\n").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(Error::Path { .. })));
        fs::write(&path, MINIMAL).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.paths.out_dir, dir.path().join("run"));
        assert!(RunConfig::load(&dir.path().join("nope.toml")).is_err());
    }
}
