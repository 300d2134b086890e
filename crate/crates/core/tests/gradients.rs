//! Finite-difference checks of every differentiable term, in f64 on 8x8 inputs.

mod common;

use candle_core::{DType, Tensor};
use common::{uniform, worst_gradient_error};
use derain_sr::losses::{
    adversarial_disc_loss, adversarial_gen_loss, lsgan_disc_term, lsgan_gen_term, psnr_loss, self_reinforcement_loss,
    ssim_loss, AdvOperands, LreConvention, MetricLossConfig,
};
use derain_sr::metrics::SsimConfig;
use derain_sr::nn::models::{ArchConfig, DemSwitch, Discriminator, Networks};

const TRIALS: usize = 50;
const TOL: f64 = 1e-3;
const SHAPE: (usize, usize, usize, usize) = (2, 3, 8, 8);

fn small_window() -> SsimConfig {
    SsimConfig {
        window: 7,
        ..SsimConfig::default()
    }
}

fn image(r: &mut rand_chacha::ChaCha8Rng) -> Tensor {
    uniform(r, SHAPE, 0.0, 1.0)
}

fn check(name: &str, seed: u64, trials: usize, point: &dyn Fn(&mut rand_chacha::ChaCha8Rng) -> Tensor, f: &dyn Fn(&Tensor) -> Tensor) {
    let worst = worst_gradient_error(trials, seed, point, f);
    assert!(worst < TOL, "{name}: worst relative error {worst:e}");
}

#[test]
fn ssim_loss_gradient() {
    let target = image(&mut common::rng(100));
    let cfg = small_window();
    check("ssim", 1, TRIALS, &image, &|x| ssim_loss(x, &target, &cfg).unwrap());
    check("ssim (second argument)", 2, TRIALS, &image, &|x| ssim_loss(&target, x, &cfg).unwrap());
}

#[test]
fn psnr_loss_gradient() {
    let target = image(&mut common::rng(101));
    let cfg = MetricLossConfig::default();
    check("psnr", 3, TRIALS, &image, &|x| psnr_loss(&target, x, &cfg).unwrap());
}

#[test]
fn reward_loss_gradient() {
    let reward = image(&mut common::rng(102));
    for (seed, conv) in [(4, LreConvention::Mean), (5, LreConvention::Sum)] {
        check("l_re", seed, TRIALS, &image, &|x| self_reinforcement_loss(&reward, x, conv).unwrap());
    }
}

#[test]
fn lsgan_term_gradients() {
    let logits = |r: &mut rand_chacha::ChaCha8Rng| uniform(r, (2, 1, 2, 2), -2.0, 2.0);
    let other = logits(&mut common::rng(103));
    check("lsgan disc (real)", 6, TRIALS, &logits, &|x| lsgan_disc_term(x, &other).unwrap());
    check("lsgan disc (fake)", 7, TRIALS, &logits, &|x| lsgan_disc_term(&other, x).unwrap());
    check("lsgan gen", 8, TRIALS, &logits, &|x| lsgan_gen_term(x).unwrap());
}

#[test]
fn adversarial_losses_through_the_discriminator() {
    let disc = Discriminator::new(4, 9, DType::F64).unwrap();
    let fixed = image(&mut common::rng(104));
    check("adv gen", 10, TRIALS, &image, &|x| {
        adversarial_gen_loss(&disc, &[x.clone(), fixed.clone(), fixed.clone(), x.clone()], AdvOperands::Paper4).unwrap()
    });
    check("adv disc (real)", 11, TRIALS, &image, &|x| {
        adversarial_disc_loss(&disc, &[fixed.clone()], x, AdvOperands::Single).unwrap()
    });
}

fn networks() -> Networks {
    let arch = ArchConfig {
        derainer_channels: 4,
        derainer_blocks: 1,
        dem_channels: 4,
        gen_channels: 4,
        gen_blocks: 1,
        disc_channels: 4,
    };
    Networks::new(&arch, 12, DType::F64).unwrap()
}

fn weighted(t: Tensor, seed: u64) -> Tensor {
    let probe = uniform(&mut common::rng(seed), t.dims4().unwrap(), -1.0, 1.0);
    (t * probe).unwrap().sum_all().unwrap()
}

#[test]
fn network_input_gradients() {
    let nets = networks();
    let trials = 20;
    check("derainer", 13, trials, &image, &|x| weighted(nets.derainer.forward(x).unwrap(), 200));
    check("dem", 14, trials, &image, &|x| {
        let n = x.dim(0).unwrap();
        weighted(nets.dem.rain_info(x, &vec![None; n], DemSwitch::EstimatorPath).unwrap(), 201)
    });
    let info = uniform(&mut common::rng(105), SHAPE, -0.3, 0.3);
    let clean = image(&mut common::rng(106));
    check("generator (clean)", 15, trials, &image, &|x| weighted(nets.generator.generate(x, &info).unwrap(), 202));
    check("generator (rain info)", 16, trials, &|r| uniform(r, SHAPE, -0.3, 0.3), &|x| {
        weighted(nets.generator.generate(&clean, x).unwrap(), 203)
    });
    check("discriminator", 17, trials, &image, &|x| weighted(nets.discriminator.forward(x).unwrap(), 204));
}
