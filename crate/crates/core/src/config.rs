//! Run configuration, read from a TOML document of dotted keys
//! (`train.lr = 2e-4`, `loss.lambda2 = 0.8`, ...). Unknown keys are rejected.

use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::RainSpec;
use crate::error::{Error, Result};
use crate::losses::{AdvOperands, LossWeights, LreConvention, MetricLossConfig, ObjectiveConfig};
use crate::metrics::{SsimConfig, PSNR_CAP_DB};
use crate::nn::models::{ArchConfig, DemSwitch};
use crate::optim::AdamConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub patch_size: usize,
    pub batch_size: usize,
    /// Steps per epoch; 0 means one pass over the rainy pool.
    pub steps_per_epoch: usize,
    pub seed: u64,
    pub stage1_max_epochs: usize,
    pub stage2_max_epochs: usize,
    /// Stop stage two early on a second plateau.
    pub stage2_plateau_stop: bool,
    /// Keep the generator and discriminator fixed during stage two.
    pub freeze_gan_in_stage2: bool,
    pub checkpoint_keep: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            patch_size: 64,
            batch_size: 8,
            steps_per_epoch: 0,
            seed: 0,
            stage1_max_epochs: 60,
            stage2_max_epochs: 20,
            stage2_plateau_stop: true,
            freeze_gan_in_stage2: false,
            checkpoint_keep: 3,
            precision: Precision::F32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lre_convention: LreConvention,
    pub adv_operands: AdvOperands,
    pub psnr_scale: f64,
    pub psnr_cap: f64,
    pub ssim_window: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            lre_convention: LreConvention::Mean,
            adv_operands: AdvOperands::Paper4,
            psnr_scale: 40.0,
            psnr_cap: PSNR_CAP_DB,
            ssim_window: SsimConfig::default().window,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransitionConfig {
    pub min_epochs: usize,
    pub window: usize,
    pub epsilon_psnr: f64,
    pub epsilon_ssim: f64,
    pub min_reward_coverage: f64,
}

impl Default for TransitionConfig {
    fn default() -> Self {
        Self {
            min_epochs: 5,
            window: 5,
            epsilon_psnr: 0.1,
            epsilon_ssim: 0.002,
            min_reward_coverage: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SrConfig {
    /// Run stage two at all; when false training stops at the transition.
    pub enabled: bool,
    /// DEM path in stage two.
    pub dem_switch: DemSwitch,
}

impl Default for SrConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            dem_switch: DemSwitch::RewardPath,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    Directory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub image_size: usize,
    pub clean_count: usize,
    pub rainy_count: usize,
    pub val_count: usize,
    pub seed: u64,
    pub clean_dir: Option<PathBuf>,
    pub rainy_dir: Option<PathBuf>,
    /// Paired validation root holding `rainy/` and `clean/` with matching file names.
    pub val_root: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            image_size: 64,
            clean_count: 200,
            rainy_count: 200,
            val_count: 40,
            seed: 0,
            clean_dir: None,
            rainy_dir: None,
            val_root: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    #[default]
    Reference,
    External,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerConfig {
    pub kind: ScorerKind,
    /// Command template containing `{image}`, for the external scorer.
    pub command: Option<String>,
    pub lower_is_better: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub out_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub transition: TransitionConfig,
    pub model: ArchConfig,
    pub sr: SrConfig,
    pub data: DataConfig,
    pub rain: RainSpec,
    pub scorer: ScorerConfig,
    pub run: RunSection,
}

/// Text of `configs/toy.toml`.
pub const TOY_TOML: &str = include_str!("../configs/toy.toml");

impl RunConfig {
    /// The small synthetic protocol used for directional experiments (`configs/toy.toml`).
    /// `seed` drives initialization, sampling and crops; the dataset stays fixed.
    pub fn toy(seed: u64, out_dir: &Path) -> Self {
        let mut cfg = Self::from_toml_str(TOY_TOML).expect("bundled toy config is valid");
        cfg.train.seed = seed;
        cfg.run.out_dir = out_dir.to_path_buf();
        cfg
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let t = &self.train;
        self.adam().validate()?;
        self.weights().validate()?;
        if t.batch_size == 0 || t.patch_size == 0 || t.checkpoint_keep == 0 {
            return bad("train.batch_size, train.patch_size and train.checkpoint_keep must be positive".into());
        }
        if t.patch_size % 2 != 0 || t.patch_size < 8 {
            return bad(format!("train.patch_size must be even and >= 8, got {}", t.patch_size));
        }
        if t.patch_size < self.loss.ssim_window {
            return bad(format!(
                "train.patch_size {} is smaller than loss.ssim_window {}",
                t.patch_size, self.loss.ssim_window
            ));
        }
        if t.stage1_max_epochs == 0 {
            return bad("train.stage1_max_epochs must be positive".into());
        }
        let l = &self.loss;
        if !(l.psnr_scale > 0.0 && l.psnr_cap > 0.0) || l.ssim_window < 3 || l.ssim_window % 2 == 0 {
            return bad("loss.psnr_scale and loss.psnr_cap must be positive; loss.ssim_window odd and >= 3".into());
        }
        let tr = &self.transition;
        if tr.window == 0 || !(tr.epsilon_psnr > 0.0 && tr.epsilon_ssim > 0.0) {
            return bad("transition.window and both epsilons must be positive".into());
        }
        if !(0.0..=1.0).contains(&tr.min_reward_coverage) {
            return bad("transition.min_reward_coverage must lie in [0, 1]".into());
        }
        let m = &self.model;
        if [m.derainer_channels, m.dem_channels, m.gen_channels, m.disc_channels].contains(&0) {
            return bad("model channel counts must be positive".into());
        }
        let d = &self.data;
        match d.source {
            DataSource::Synthetic => {
                if d.clean_count == 0 || d.rainy_count == 0 || d.val_count == 0 {
                    return bad("data.clean_count, data.rainy_count and data.val_count must be positive".into());
                }
                if d.image_size < t.patch_size {
                    return bad(format!(
                        "data.image_size {} is smaller than train.patch_size {}",
                        d.image_size, t.patch_size
                    ));
                }
                self.rain.validate(d.image_size, d.image_size)?;
            }
            DataSource::Directory => {
                if d.clean_dir.is_none() || d.rainy_dir.is_none() || d.val_root.is_none() {
                    return bad("directory data needs data.clean_dir, data.rainy_dir and data.val_root".into());
                }
            }
        }
        if self.scorer.kind == ScorerKind::External && self.scorer.command.is_none() {
            return bad("scorer.kind = \"external\" needs scorer.command".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.train.lr,
            beta1: self.train.adam_beta1,
            beta2: self.train.adam_beta2,
            eps: self.train.adam_eps,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.loss.lambda1,
            lambda2: self.loss.lambda2,
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            weights: self.weights(),
            metric: MetricLossConfig {
                psnr_scale: self.loss.psnr_scale,
                psnr_cap: self.loss.psnr_cap,
                ssim: SsimConfig {
                    window: self.loss.ssim_window,
                    ..SsimConfig::default()
                },
            },
            convention: self.loss.lre_convention,
            operands: self.loss.adv_operands,
        }
    }

    /// Short stable digest of every setting.
    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_published_settings() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.train.lr, 2e-4);
        assert_eq!((cfg.train.adam_beta1, cfg.train.adam_beta2), (0.9, 0.999));
        assert_eq!((cfg.loss.lambda1, cfg.loss.lambda2), (1.0, 0.8));
        assert_eq!(cfg.transition.window, 5);
        assert_eq!(cfg.transition.epsilon_psnr, 0.1);
        assert_eq!(cfg.transition.epsilon_ssim, 0.002);
        assert_eq!(cfg.transition.min_reward_coverage, 0.9);
        assert_eq!(cfg.train.checkpoint_keep, 3);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn dotted_keys_parse() {
        let cfg = RunConfig::from_toml_str(
            "train.lr = 1e-3\nloss.lambda2 = 0.0\nloss.lre_convention = \"sum\"\nsr.dem_switch = \"estimator_path\"\n[transition]\nwindow = 3\n",
        )
        .unwrap();
        assert_eq!(cfg.train.lr, 1e-3);
        assert_eq!(cfg.loss.lambda2, 0.0);
        assert_eq!(cfg.loss.lre_convention, LreConvention::Sum);
        assert_eq!(cfg.sr.dem_switch, DemSwitch::EstimatorPath);
        assert_eq!(cfg.transition.window, 3);
        assert_eq!(cfg.train.batch_size, 8);
    }

    #[test]
    fn unknown_and_invalid_keys_are_config_errors() {
        for text in [
            "train.learning_rate = 1.0",
            "bogus = 1",
            "train.lr = -1.0",
            "train.patch_size = 63",
            "loss.adv_operands = \"three\"",
            "scorer.kind = \"external\"",
            "train.lr = \"fast\"",
        ] {
            match RunConfig::from_toml_str(text) {
                Err(Error::Config(_)) => {}
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn round_trip_and_hash() {
        let mut cfg = RunConfig::default();
        cfg.data.val_root = Some(PathBuf::from("/tmp/val"));
        let text = cfg.to_toml_string().unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.config_hash(), cfg.config_hash());
        let mut other = cfg.clone();
        other.loss.lambda2 = 0.5;
        assert_ne!(other.config_hash(), cfg.config_hash());
    }

    #[test]
    fn bundled_toy_protocol_is_valid() {
        let cfg = RunConfig::toy(3, Path::new("/tmp/toy"));
        assert_eq!(cfg.train.seed, 3);
        assert_eq!(cfg.data.image_size, 64);
        assert_eq!((cfg.data.clean_count, cfg.data.rainy_count, cfg.data.val_count), (200, 200, 40));
        assert_eq!(cfg.train.stage2_max_epochs, 20);
        assert!(!cfg.train.stage2_plateau_stop);
    }
}
