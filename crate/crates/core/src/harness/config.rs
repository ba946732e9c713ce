use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder::DecoderConfig;
use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics::Protocol;
use crate::sampler::{KinematicTemplate, PoseParamSpec, SynthSettings};

/// Heatmap grid of the detector output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            depth: 64,
            height: 64,
            width: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Stage-1 epoch (0-based) from which the decayed rate applies.
    pub decay_epoch: usize,
    pub decay_factor: f64,
    pub stage2_lr: f64,
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Discriminator updates per detector update.
    pub d_steps: usize,
    /// Discriminator learning rate; the detector rate is used when absent.
    pub d_lr: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            momentum: 0.9,
            decay_epoch: 16,
            decay_factor: 0.1,
            stage2_lr: 1e-4,
            batch_size: 32,
            stage1_epochs: 20,
            stage2_epochs: 5,
            d_steps: 1,
            d_lr: None,
        }
    }
}

impl OptimizerConfig {
    /// Detector learning rate for a stage and a 0-based epoch within it.
    pub fn lr_at(&self, stage: usize, epoch: usize) -> f64 {
        match stage {
            1 if epoch >= self.decay_epoch => self.lr * self.decay_factor,
            1 => self.lr,
            _ => self.stage2_lr,
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.stage1_epochs + self.stage2_epochs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Side of the square patches averaged before the first dense layer.
    pub pool: usize,
    pub hidden: usize,
    /// Standard deviation of the output-layer initial weights.
    pub output_init: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            pool: 8,
            hidden: 256,
            output_init: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    /// Side of the down-sampled masks the mask loss compares.
    pub size: usize,
    /// Hidden width of the physique reconstruction network.
    pub physique_hidden: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            size: 32,
            physique_hidden: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Skeleton and pose-distribution file; the bundled 18-joint skeleton when absent.
    pub skeleton: Option<PathBuf>,
    pub focal: f64,
    pub synth: SynthSettings,
    /// Emit samples in depth-reflected pairs.
    pub ambiguity_pairs: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            skeleton: None,
            focal: 120.0,
            synth: SynthSettings::default(),
            ambiguity_pairs: true,
        }
    }
}

impl DataConfig {
    pub fn load_skeleton(&self) -> Result<(KinematicTemplate, PoseParamSpec)> {
        match &self.skeleton {
            Some(path) => KinematicTemplate::load(path),
            None => Ok((KinematicTemplate::human18(), PoseParamSpec::human18())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub protocols: Vec<Protocol>,
    /// Records held out of the training set for per-epoch validation.
    pub val_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            protocols: vec![Protocol::Single, Protocol::Conf, Protocol::Best],
            val_samples: 100,
        }
    }
}

/// Everything that defines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub decoder: DecoderConfig,
    pub grid: GridConfig,
    pub weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub detector: DetectorConfig,
    pub mask: MaskConfig,
    pub discriminator: DiscriminatorConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            decoder: DecoderConfig::default(),
            grid: GridConfig::default(),
            weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            detector: DetectorConfig::default(),
            mask: MaskConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg = Self::parse(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Loads and validates a config file. A relative skeleton path is
    /// resolved against the config's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::parse(&std::fs::read_to_string(path)?)?;
        if let Some(s) = &cfg.data.skeleton {
            if s.is_relative() {
                let base = path.parent().unwrap_or_else(|| Path::new("."));
                cfg.data.skeleton = Some(base.join(s));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        self.weights.validate()?;
        self.discriminator.validate()?;
        self.data.synth.validate()?;
        let o = &self.optimizer;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if o.total_epochs() == 0 {
            return bad("at least one training epoch is required");
        }
        if o.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if o.d_steps == 0 {
            return bad("d_steps must be at least 1");
        }
        let rates = [Some(o.lr), Some(o.stage2_lr), Some(o.decay_factor), o.d_lr];
        if rates.iter().flatten().any(|r| !(r.is_finite() && *r >= 0.0)) || !(0.0..1.0).contains(&o.momentum) {
            return bad("learning rates must be non-negative and momentum in [0, 1)");
        }
        let g = &self.grid;
        if g.depth != self.data.synth.depth_bins || g.height != self.data.synth.image_size || g.width != self.data.synth.image_size {
            return bad("heatmap grid must match the synthetic image size and depth bins");
        }
        let d = &self.detector;
        if d.pool == 0 || self.data.synth.image_size % d.pool != 0 || d.hidden == 0 || !(d.output_init >= 0.0) {
            return bad("detector pool must divide the image size and hidden must be positive");
        }
        if self.mask.size == 0 || self.data.synth.image_size % self.mask.size != 0 || self.mask.physique_hidden == 0 {
            return bad("mask size must divide the image size");
        }
        if !(self.data.focal > 0.0 && self.data.focal.is_finite()) {
            return bad("focal length must be positive");
        }
        if let Some(p) = &self.data.skeleton {
            if !p.exists() {
                return Err(Error::Config(format!("skeleton file {} does not exist", p.display())));
            }
        }
        if self.eval.protocols.is_empty() {
            return bad("at least one evaluation protocol is required");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<[u8; 32]> {
        let text = serde_json::to_vec(self)?;
        Ok(Sha256::digest(&text).into())
    }
}
