//! Training objectives: least-squares adversarial terms, the PSNR + SSIM derainer
//! loss, the reward consistency loss and their stage-dependent composition.
//!
//! Every loss is a scalar candle tensor so it can be differentiated directly.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{SsimConfig, PSNR_CAP_DB};
use crate::nn::conv2d;
use crate::nn::models::Discriminator;

/// Loss weights: `lambda1` scales the derainer loss, `lambda2` the reward loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.8,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("loss.lambda1", self.lambda1), ("loss.lambda2", self.lambda2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Normalization of the squared reward distance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LreConvention {
    /// `sum(d^2) / N`, independent of patch size.
    #[default]
    Mean,
    /// Plain squared Frobenius norm.
    Sum,
}

/// Which generated images the adversarial loss constrains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvOperands {
    /// Four terms: `G(B_u)`, `G(B_u1)`, `G(B_r)` and `G(B_rw)` (or `G(B_r)` without a reward).
    #[default]
    Paper4,
    /// Only the re-rained derained real image `G(B_r)`.
    Single,
}

impl AdvOperands {
    pub fn arity(self) -> usize {
        match self {
            AdvOperands::Paper4 => 4,
            AdvOperands::Single => 1,
        }
    }
}

/// Shape and numerics of the differentiable PSNR and SSIM terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricLossConfig {
    /// PSNR (dB) is divided by this to bring it near the SSIM term's range.
    pub psnr_scale: f64,
    /// Upper PSNR bound; the per-image MSE is floored at `10^(-cap/10)`.
    pub psnr_cap: f64,
    pub ssim: SsimConfig,
}

impl Default for MetricLossConfig {
    fn default() -> Self {
        Self {
            psnr_scale: 40.0,
            psnr_cap: PSNR_CAP_DB,
            ssim: SsimConfig::default(),
        }
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(a.dims(), b.dims()));
    }
    Ok(())
}

/// Batch-mean PSNR in dB of `N x C x H x W` tensors at peak 1.
pub fn psnr_tensor(a: &Tensor, b: &Tensor, cap: f64) -> Result<Tensor> {
    same_shape(a, b)?;
    let floor = 10f64.powf(-cap / 10.0);
    let mse = (a - b)?.sqr()?.flatten_from(1)?.mean(1)?.maximum(floor)?;
    let db = (mse.log()? * (-10.0 / std::f64::consts::LN_10))?;
    Ok(db.mean_all()?)
}

/// `-psnr / scale`.
pub fn psnr_loss(a: &Tensor, b: &Tensor, cfg: &MetricLossConfig) -> Result<Tensor> {
    Ok((psnr_tensor(a, b, cfg.psnr_cap)? * (-1.0 / cfg.psnr_scale))?)
}

/// Differentiable mean SSIM, the same statistic as [`crate::metrics::ssim_with`].
pub fn ssim_tensor(a: &Tensor, b: &Tensor, cfg: &SsimConfig) -> Result<Tensor> {
    same_shape(a, b)?;
    let (n, c, h, w) = a.dims4()?;
    let k = cfg.window;
    if h < k || w < k {
        return Err(Error::InvalidImage(format!(
            "image {h}x{w} is smaller than the {k}x{k} SSIM window"
        )));
    }
    let kernel = Tensor::from_vec(cfg.kernel_2d(), (1, 1, k, k), &Device::Cpu)?.to_dtype(a.dtype())?;
    let planes = Tensor::cat(&[a, b, &a.sqr()?, &b.sqr()?, &(a * b)?], 0)?.reshape((5 * n * c, 1, h, w))?;
    let filtered = conv2d(&planes, &kernel, 1, 0)?;
    let m = n * c;
    let part = |i: usize| filtered.narrow(0, i * m, m);
    let (mx, my, sxx, syy, sxy) = (part(0)?, part(1)?, part(2)?, part(3)?, part(4)?);
    let mxy = (&mx * &my)?;
    let mx2 = mx.sqr()?;
    let my2 = my.sqr()?;
    let vx = (sxx - &mx2)?;
    let vy = (syy - &my2)?;
    let cxy = (sxy - &mxy)?;
    let num = (((mxy * 2.0)? + cfg.c1)? * ((cxy * 2.0)? + cfg.c2)?)?;
    let den = (((mx2 + my2)? + cfg.c1)? * ((vx + vy)? + cfg.c2)?)?;
    Ok((num / den)?.mean_all()?)
}

/// `1 - ssim`.
pub fn ssim_loss(a: &Tensor, b: &Tensor, cfg: &SsimConfig) -> Result<Tensor> {
    Ok(ssim_tensor(a, b, cfg)?.affine(-1.0, 1.0)?)
}

/// PSNR loss plus SSIM loss between a clean batch and its reconstruction.
pub fn derainer_loss(b_u: &Tensor, b_u1: &Tensor, cfg: &MetricLossConfig) -> Result<Tensor> {
    Ok((psnr_loss(b_u, b_u1, cfg)? + ssim_loss(b_u, b_u1, &cfg.ssim)?)?)
}

/// Squared distance between the derained output and a constant reward target.
pub fn self_reinforcement_loss(b_rw: &Tensor, b_r: &Tensor, convention: LreConvention) -> Result<Tensor> {
    same_shape(b_rw, b_r)?;
    let sq = (b_r - b_rw.detach())?.sqr()?;
    Ok(match convention {
        LreConvention::Mean => sq.mean_all()?,
        LreConvention::Sum => sq.sum_all()?,
    })
}

/// Least-squares discriminator term: real logits toward 1, generated toward 0.
pub fn lsgan_disc_term(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    let real = real_logits.affine(1.0, -1.0)?.sqr()?.mean_all()?;
    let fake = fake_logits.sqr()?.mean_all()?;
    Ok((real + fake)?)
}

/// Least-squares generator term: generated logits toward 1.
pub fn lsgan_gen_term(fake_logits: &Tensor) -> Result<Tensor> {
    Ok(fake_logits.affine(1.0, -1.0)?.sqr()?.mean_all()?)
}

fn sum_scalars(terms: Vec<Tensor>) -> Result<Tensor> {
    let mut it = terms.into_iter();
    let mut acc = it.next().ok_or_else(|| Error::Stage("empty loss sum".into()))?;
    for t in it {
        acc = (acc + t)?;
    }
    Ok(acc)
}

fn check_arity(generated: &[Tensor], operands: AdvOperands) -> Result<()> {
    if generated.len() != operands.arity() {
        return Err(Error::Stage(format!(
            "adversarial loss expects {} generated batches, got {}",
            operands.arity(),
            generated.len()
        )));
    }
    for g in generated {
        if g.dim(0)? == 0 {
            return Err(Error::Stage("empty generated batch".into()));
        }
    }
    Ok(())
}

/// Discriminator side of the adversarial loss. Generated inputs are detached, so
/// only the discriminator receives gradients. All inputs go through one batched call.
pub fn adversarial_disc_loss(disc: &Discriminator, generated: &[Tensor], real: &Tensor, operands: AdvOperands) -> Result<Tensor> {
    check_arity(generated, operands)?;
    for g in generated {
        same_shape(g, real)?;
    }
    let n = real.dim(0)?;
    let mut inputs = vec![real.clone()];
    inputs.extend(generated.iter().map(Tensor::detach));
    let logits = disc.forward(&Tensor::cat(&inputs, 0)?)?;
    let real_logits = logits.narrow(0, 0, n)?;
    let terms = (0..generated.len())
        .map(|k| lsgan_disc_term(&real_logits, &logits.narrow(0, (k + 1) * n, n)?))
        .collect::<Result<Vec<_>>>()?;
    sum_scalars(terms)
}

/// Generator side of the adversarial loss; gradients reach the generated images
/// (and through them every upstream network).
pub fn adversarial_gen_loss(disc: &Discriminator, generated: &[Tensor], operands: AdvOperands) -> Result<Tensor> {
    check_arity(generated, operands)?;
    let n = generated[0].dim(0)?;
    for g in generated {
        same_shape(g, &generated[0])?;
    }
    let logits = disc.forward(&Tensor::cat(generated, 0)?)?;
    let terms = (0..generated.len())
        .map(|k| lsgan_gen_term(&logits.narrow(0, k * n, n)?))
        .collect::<Result<Vec<_>>>()?;
    sum_scalars(terms)
}

/// `(gen_loss, disc_loss)` of the four-term adversarial loss under the current discriminator.
pub fn adversarial_losses(disc: &Discriminator, generated: &[Tensor], real: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((
        adversarial_gen_loss(disc, generated, AdvOperands::Paper4)?,
        adversarial_disc_loss(disc, generated, real, AdvOperands::Paper4)?,
    ))
}

/// Rewards for the subset of a batch that has one.
#[derive(Clone, Debug)]
pub struct RewardTargets {
    /// Batch positions, strictly increasing.
    pub indices: Vec<usize>,
    /// `len(indices) x C x H x W`, treated as a constant.
    pub images: Tensor,
}

/// Every image of one training step (batches, `N x C x H x W`).
#[derive(Clone, Debug)]
pub struct FlowImages {
    pub b_u: Tensor,
    pub o_u1: Tensor,
    pub b_u1: Tensor,
    pub o_r: Tensor,
    pub b_r: Tensor,
    pub b_rw: Option<RewardTargets>,
    /// Generated rainy batches shown to the discriminator.
    pub o_gen: Vec<Tensor>,
}

impl FlowImages {
    pub fn validate(&self) -> Result<()> {
        let shape = self.b_u.dims();
        for t in [&self.o_u1, &self.b_u1, &self.o_r, &self.b_r] {
            if t.dims() != shape {
                return Err(Error::shape(t.dims(), shape));
            }
        }
        if let Some(rw) = &self.b_rw {
            let n = shape[0];
            if rw.indices.windows(2).any(|p| p[0] >= p[1]) || rw.indices.iter().any(|&i| i >= n) {
                return Err(Error::Stage("reward indices must be increasing batch positions".into()));
            }
            let mut expect = shape.to_vec();
            expect[0] = rw.indices.len();
            if rw.images.dims() != expect.as_slice() {
                return Err(Error::shape(rw.images.dims(), expect));
            }
        }
        Ok(())
    }

    /// The derained outputs that have a reward, in reward order.
    pub fn rewarded_b_r(&self) -> Result<Option<(Tensor, Tensor)>> {
        let Some(rw) = &self.b_rw else { return Ok(None) };
        if rw.indices.is_empty() {
            return Ok(None);
        }
        let idx = Tensor::from_vec(
            rw.indices.iter().map(|&i| i as u32).collect::<Vec<_>>(),
            rw.indices.len(),
            self.b_r.device(),
        )?;
        Ok(Some((rw.images.clone(), self.b_r.index_select(&idx, 0)?)))
    }
}

/// Training stage, ordered: recycling precedes self-reinforcement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TrainingStage {
    RecyclingStage,
    SelfReinforcementStage,
}

/// Everything the composite objectives need besides the flow.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    pub metric: MetricLossConfig,
    pub convention: LreConvention,
    pub operands: AdvOperands,
}

/// Generator-side objective: adversarial generator loss + `lambda1` derainer loss,
/// plus `lambda2` reward loss in stage two when any sample has a reward.
pub fn generator_side(flow: &FlowImages, cfg: &ObjectiveConfig, disc: &Discriminator, stage: TrainingStage) -> Result<Tensor> {
    flow.validate()?;
    let adv = adversarial_gen_loss(disc, &flow.o_gen, cfg.operands)?;
    let der = derainer_loss(&flow.b_u, &flow.b_u1, &cfg.metric)?;
    let s1 = (adv + (der * cfg.weights.lambda1)?)?;
    match (stage, flow.rewarded_b_r()?) {
        (TrainingStage::SelfReinforcementStage, Some((rw, br))) => {
            let lre = self_reinforcement_loss(&rw, &br, cfg.convention)?;
            Ok((s1 + (lre * cfg.weights.lambda2)?)?)
        }
        _ => Ok(s1),
    }
}

/// Discriminator-side objective (the adversarial discriminator loss).
pub fn discriminator_side(flow: &FlowImages, cfg: &ObjectiveConfig, disc: &Discriminator) -> Result<Tensor> {
    adversarial_disc_loss(disc, &flow.o_gen, &flow.o_r, cfg.operands)
}

/// Stage-one objective `(gen_side, disc_side)`; rewards must be absent.
pub fn stage_one_loss(flow: &FlowImages, cfg: &ObjectiveConfig, disc: &Discriminator) -> Result<(Tensor, Tensor)> {
    if flow.b_rw.is_some() {
        return Err(Error::Stage("stage-one loss received reward targets".into()));
    }
    Ok((
        generator_side(flow, cfg, disc, TrainingStage::RecyclingStage)?,
        discriminator_side(flow, cfg, disc)?,
    ))
}

/// Stage-dependent total objective `(gen_side, disc_side)`.
pub fn total_loss(flow: &FlowImages, cfg: &ObjectiveConfig, disc: &Discriminator, stage: TrainingStage) -> Result<(Tensor, Tensor)> {
    Ok((generator_side(flow, cfg, disc, stage)?, discriminator_side(flow, cfg, disc)?))
}
