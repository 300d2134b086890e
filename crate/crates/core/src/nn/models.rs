//! The four trainable networks: derainer, degradation estimation module (DEM),
//! rain generator and patch discriminator.
//!
//! | network       | layout                                                        |
//! |---------------|---------------------------------------------------------------|
//! | derainer      | 3x3 intro, N gated blocks (3x3 -> gate -> 1x1), 3x3 out + skip |
//! | DEM estimator | 2-level encoder/decoder with one skip, 3x3 out + skip          |
//! | generator     | 3x3 intro on `[clean, rain]`, N residual blocks, 3x3 out       |
//! | discriminator | three 4x4 stride-2 convs, 3x3 logit head: 64x64 -> 8x8 grid    |
//!
//! Every image-to-image output layer starts at zero, so untrained networks are
//! exact identities on their image input.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::{leaky_relu, relu, upsample2, Conv2d, Init, ParamBuilder, ParamSet};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Channel widths and depths of the four networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub derainer_channels: usize,
    pub derainer_blocks: usize,
    pub dem_channels: usize,
    pub gen_channels: usize,
    pub gen_blocks: usize,
    pub disc_channels: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            derainer_channels: 32,
            derainer_blocks: 2,
            dem_channels: 16,
            gen_channels: 32,
            gen_blocks: 6,
            disc_channels: 32,
        }
    }
}

/// Swappable image-to-image restoration network.
pub trait Derainer: Send + Sync {
    fn name(&self) -> &str;

    /// Raw (unclamped) restoration of an `N x 3 x H x W` batch.
    fn forward(&self, rainy: &Tensor) -> Result<Tensor>;

    fn params(&self) -> &ParamSet;
}

/// Evaluation-mode deraining of one image: output clamped to `[0, 1]`.
pub fn derain(derainer: &dyn Derainer, rainy: &ImageTensor) -> Result<ImageTensor> {
    let dtype = derainer
        .params()
        .vars()
        .first()
        .map(|v| v.dtype())
        .unwrap_or(DType::F32);
    let x = ImageTensor::stack(&[rainy], dtype, &candle_core::Device::Cpu)?;
    let y = derainer.forward(&x)?;
    Ok(ImageTensor::unstack(&y)?.remove(0))
}

/// Pass-through derainer; a baseline for evaluation.
#[derive(Default)]
pub struct IdentityDerainer {
    params: ParamSet,
}

impl Derainer for IdentityDerainer {
    fn name(&self) -> &str {
        "identity"
    }

    fn forward(&self, rainy: &Tensor) -> Result<Tensor> {
        Ok(rainy.clone())
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }
}

struct GatedBlock {
    expand: Conv2d,
    project: Conv2d,
}

/// Reduced gated-convolution restoration network with a global residual.
pub struct GatedDerainer {
    intro: Conv2d,
    blocks: Vec<GatedBlock>,
    ending: Conv2d,
    params: ParamSet,
}

impl GatedDerainer {
    pub fn new(channels: usize, blocks: usize, seed: u64, dtype: DType) -> Result<Self> {
        let mut b = ParamBuilder::new(seed, dtype);
        b.with_prefix("derainer.");
        let intro = b.conv("intro", 3, channels, 3, 1, 1, Init::He { gain: 1.0 })?;
        let blocks = (0..blocks)
            .map(|i| {
                Ok(GatedBlock {
                    expand: b.conv(&format!("block{i}.expand"), channels, 2 * channels, 3, 1, 1, Init::He { gain: 1.0 })?,
                    project: b.conv(&format!("block{i}.project"), channels, channels, 1, 1, 0, Init::He { gain: 0.5 })?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ending = b.conv("ending", channels, 3, 3, 1, 1, Init::Zero)?;
        Ok(Self {
            intro,
            blocks,
            ending,
            params: b.finish(),
        })
    }
}

impl Derainer for GatedDerainer {
    fn name(&self) -> &str {
        "gated"
    }

    fn forward(&self, rainy: &Tensor) -> Result<Tensor> {
        let mut h = self.intro.forward(rainy)?;
        for block in &self.blocks {
            let y = block.expand.forward(&h)?;
            let c = y.dim(1)? / 2;
            let gated = (y.narrow(1, 0, c)? * y.narrow(1, c, c)?)?;
            h = (h + block.project.forward(&gated)?)?;
        }
        Ok((rainy + self.ending.forward(&h)?)?)
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }
}

/// Whether rewards replace the estimator as the clean-image estimate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemSwitch {
    EstimatorPath,
    RewardPath,
}

/// Degradation estimation module: rain information as `rainy - clean_estimate`.
pub struct Dem {
    enc1: Conv2d,
    enc1b: Conv2d,
    down: Conv2d,
    mid: Conv2d,
    dec: Conv2d,
    out: Conv2d,
    params: ParamSet,
}

impl Dem {
    pub fn new(channels: usize, seed: u64, dtype: DType) -> Result<Self> {
        let mut b = ParamBuilder::new(seed, dtype);
        b.with_prefix("dem.");
        let c = channels;
        let he = Init::He { gain: 1.0 };
        Ok(Self {
            enc1: b.conv("enc1", 3, c, 3, 1, 1, he)?,
            enc1b: b.conv("enc1b", c, c, 3, 1, 1, he)?,
            down: b.conv("down", c, 2 * c, 3, 2, 1, he)?,
            mid: b.conv("mid", 2 * c, 2 * c, 3, 1, 1, he)?,
            dec: b.conv("dec", 3 * c, c, 3, 1, 1, he)?,
            out: b.conv("out", c, 3, 3, 1, 1, Init::Zero)?,
            params: b.finish(),
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Clean-image estimate of a rainy batch. Height and width must be even.
    pub fn estimate(&self, rainy: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = rainy.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape((h, w), "even height and width"));
        }
        let e1 = relu(&self.enc1b.forward(&relu(&self.enc1.forward(rainy)?)?)?)?;
        let d = relu(&self.mid.forward(&relu(&self.down.forward(&e1)?)?)?)?;
        let u = Tensor::cat(&[&upsample2(&d)?, &e1], 1)?;
        let y = self.out.forward(&relu(&self.dec.forward(&u)?)?)?;
        Ok((rainy + y)?)
    }

    /// Rain information for a batch.
    ///
    /// Under [`DemSwitch::RewardPath`], samples with a reward use `rainy - reward`
    /// (the reward is detached); samples without one fall back to the estimator.
    pub fn rain_info(&self, rainy: &Tensor, rewards: &[Option<Tensor>], switch: DemSwitch) -> Result<Tensor> {
        let n = rainy.dim(0)?;
        if rewards.len() != n {
            return Err(Error::shape(rewards.len(), n));
        }
        let use_reward: Vec<bool> = rewards
            .iter()
            .map(|r| switch == DemSwitch::RewardPath && r.is_some())
            .collect();
        if !use_reward.iter().any(|&u| u) {
            return Ok((rainy - self.estimate(rainy)?)?);
        }
        let est_idx: Vec<usize> = (0..n).filter(|&i| !use_reward[i]).collect();
        let estimated = if est_idx.is_empty() {
            None
        } else {
            let subset = Tensor::cat(
                &est_idx.iter().map(|&i| rainy.narrow(0, i, 1)).collect::<candle_core::Result<Vec<_>>>()?,
                0,
            )?;
            Some(self.estimate(&subset)?)
        };
        let mut parts = Vec::with_capacity(n);
        let mut next_est = 0;
        for i in 0..n {
            let x = rainy.narrow(0, i, 1)?;
            if use_reward[i] {
                let reward = rewards[i].as_ref().expect("checked above").detach();
                if reward.dims() != x.dims() {
                    return Err(Error::shape(reward.dims(), x.dims()));
                }
                parts.push((x - reward)?);
            } else {
                let est = estimated.as_ref().expect("estimator subset").narrow(0, next_est, 1)?;
                next_est += 1;
                parts.push((x - est)?);
            }
        }
        Ok(Tensor::cat(&parts, 0)?)
    }
}

/// Single-sample form of [`Dem::rain_info`].
pub fn dem_forward(dem: &Dem, rainy: &Tensor, reward: Option<&Tensor>, switch: DemSwitch) -> Result<Tensor> {
    if let Some(r) = reward {
        if r.dims() != rainy.dims() {
            return Err(Error::shape(r.dims(), rainy.dims()));
        }
    }
    let n = rainy.dim(0)?;
    let rewards: Vec<Option<Tensor>> = (0..n)
        .map(|i| reward.map(|r| r.narrow(0, i, 1)).transpose())
        .collect::<candle_core::Result<_>>()?;
    dem.rain_info(rainy, &rewards, switch)
}

struct ResBlock {
    a: Conv2d,
    b: Conv2d,
}

/// Conditional rain synthesizer `G(clean, rain_info)`.
///
/// The trunk sees `[clean, rain_info]` stacked on channels; its output is added to
/// `clean + rain_info`, the additive rain model.
pub struct Generator {
    intro: Conv2d,
    blocks: Vec<ResBlock>,
    out: Conv2d,
    params: ParamSet,
}

impl Generator {
    pub fn new(channels: usize, blocks: usize, seed: u64, dtype: DType) -> Result<Self> {
        let mut b = ParamBuilder::new(seed, dtype);
        b.with_prefix("generator.");
        let intro = b.conv("intro", 6, channels, 3, 1, 1, Init::He { gain: 1.0 })?;
        let blocks = (0..blocks)
            .map(|i| {
                Ok(ResBlock {
                    a: b.conv(&format!("res{i}.a"), channels, channels, 3, 1, 1, Init::He { gain: 1.0 })?,
                    b: b.conv(&format!("res{i}.b"), channels, channels, 3, 1, 1, Init::He { gain: 0.5 })?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let out = b.conv("out", channels, 3, 3, 1, 1, Init::Zero)?;
        Ok(Self {
            intro,
            blocks,
            out,
            params: b.finish(),
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn generate(&self, clean: &Tensor, rain_info: &Tensor) -> Result<Tensor> {
        if clean.dims() != rain_info.dims() {
            return Err(Error::shape(clean.dims(), rain_info.dims()));
        }
        let mut h = relu(&self.intro.forward(&Tensor::cat(&[clean, rain_info], 1)?)?)?;
        for block in &self.blocks {
            let r = block.b.forward(&relu(&block.a.forward(&h)?)?)?;
            h = (h + r)?;
        }
        Ok(((clean + rain_info)? + self.out.forward(&h)?)?)
    }
}

/// Patch-level real/fake classifier emitting a grid of logits.
pub struct Discriminator {
    layers: Vec<Conv2d>,
    head: Conv2d,
    params: ParamSet,
}

impl Discriminator {
    pub const DOWNSAMPLING: usize = 8;

    pub fn new(channels: usize, seed: u64, dtype: DType) -> Result<Self> {
        let mut b = ParamBuilder::new(seed, dtype);
        b.with_prefix("discriminator.");
        let c = channels;
        let he = Init::He { gain: 1.0 };
        let layers = vec![
            b.conv("l0", 3, c, 4, 2, 1, he)?,
            b.conv("l1", c, 2 * c, 4, 2, 1, he)?,
            b.conv("l2", 2 * c, 4 * c, 4, 2, 1, he)?,
        ];
        let head = b.conv("head", 4 * c, 1, 3, 1, 1, Init::He { gain: 0.5 })?;
        Ok(Self {
            layers,
            head,
            params: b.finish(),
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Logit grid size for an `h x w` input: each 4x4/2 layer maps `s -> s / 2`.
    pub fn grid_dims(h: usize, w: usize) -> (usize, usize) {
        (h / Self::DOWNSAMPLING, w / Self::DOWNSAMPLING)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if h < Self::DOWNSAMPLING || w < Self::DOWNSAMPLING {
            return Err(Error::shape((h, w), "at least 8x8 for the discriminator"));
        }
        let mut h = x.clone();
        for layer in &self.layers {
            h = leaky_relu(&layer.forward(&h)?, 0.2)?;
        }
        self.head.forward(&h)
    }
}

/// All four networks of one training run.
pub struct Networks {
    pub derainer: Box<dyn Derainer>,
    pub dem: Dem,
    pub generator: Generator,
    pub discriminator: Discriminator,
}

impl Networks {
    pub fn new(arch: &ArchConfig, seed: u64, dtype: DType) -> Result<Self> {
        let s = seed.wrapping_mul(4);
        Ok(Self {
            derainer: Box::new(GatedDerainer::new(arch.derainer_channels, arch.derainer_blocks, s, dtype)?),
            dem: Dem::new(arch.dem_channels, s + 1, dtype)?,
            generator: Generator::new(arch.gen_channels, arch.gen_blocks, s + 2, dtype)?,
            discriminator: Discriminator::new(arch.disc_channels, s + 3, dtype)?,
        })
    }

    /// `(name, params)` for each network in a fixed order.
    pub fn param_sets(&self) -> [(&'static str, &ParamSet); 4] {
        [
            ("derainer", self.derainer.params()),
            ("dem", &self.dem.params),
            ("generator", &self.generator.params),
            ("discriminator", &self.discriminator.params),
        ]
    }

    pub fn fingerprint(&self) -> Result<String> {
        let mut all = String::new();
        for (_, p) in self.param_sets() {
            all.push_str(&p.fingerprint()?);
        }
        Ok(all)
    }
}
