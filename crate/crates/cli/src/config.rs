use std::path::{Path, PathBuf};

use ldp_core::autoencoder::AEConfig;
use ldp_core::detector::{DetectorTrainConfig, GridConfig};
use ldp_core::diffusion::DiffusionConfig;
use ldp_core::evaluation::EvalConfig;
use ldp_core::patch::{AttackConfig, LossWeights, TransformConfig};
use ldp_core::{LdpError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory of natural images for the autoencoder and the diffusion model.
    pub corpus_dir: Option<PathBuf>,
    /// Use the procedural corpus when no directory is given.
    pub synthetic: bool,
    pub corpus_images: usize,
    /// Extra procedural images kept out of training to measure reconstruction.
    pub held_out_images: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus_dir: None,
            synthetic: true,
            corpus_images: 512,
            held_out_images: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSection {
    pub grid: GridConfig,
    pub train: DetectorTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    /// Synthetic scenes whose pseudo ground truth hosts the patch in training.
    pub train_scenes: usize,
    /// Printable colors, one `r g b` line each; the bundled palette if unset.
    pub palette: Option<PathBuf>,
    pub weights: LossWeights,
    pub transform: TransformConfig,
    pub optimizer: AttackConfig,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            train_scenes: 200,
            palette: None,
            weights: LossWeights::default(),
            transform: TransformConfig::default(),
            optimizer: AttackConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub autoencoder: AEConfig,
    pub diffusion: DiffusionConfig,
    pub detector: DetectorSection,
    pub attack: AttackSection,
    pub eval: EvalConfig,
}


impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| LdpError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LdpError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            LdpError::Config(m) => LdpError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Checks every section, whichever stage is about to run.
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.corpus_dir.is_none() && !d.synthetic {
            return Err(LdpError::Config("data.corpus_dir is required when data.synthetic is false".into()));
        }
        if d.corpus_images == 0 || d.held_out_images == 0 {
            return Err(LdpError::Config("data.corpus_images and data.held_out_images must be positive".into()));
        }
        self.autoencoder.validate()?;
        self.diffusion.validate()?;
        self.detector.grid.validate()?;
        self.detector.train.validate()?;
        if self.detector.train.scenes == 0 {
            return Err(LdpError::Config("detector.train.scenes must be positive".into()));
        }
        if self.attack.train_scenes == 0 {
            return Err(LdpError::Config("attack.train_scenes must be positive".into()));
        }
        self.attack.weights.validate()?;
        self.attack.transform.validate()?;
        self.attack.optimizer.validate()?;
        self.eval.validate()
    }
}
