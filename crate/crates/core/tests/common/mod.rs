//! Shared oracles for the integration suites. Everything here is written from
//! the definitions, without calling the kernels it checks.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use derain_sr::image::ImageTensor;
use derain_sr::metrics::SsimConfig;
use derain_sr::scorer::IqaScorer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize), lo: f64, hi: f64) -> Tensor {
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageTensor {
    ImageTensor::from_fn(h, w, 3, |_, _, _| rng.random_range(0.0f32..1.0)).unwrap()
}

/// `|a - n| / max(|a|, |n|)`, zero when both vanish.
pub fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-12 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

/// Analytic and central-difference derivatives of `f` at `x` along a random
/// unit-variance direction.
pub fn directional(f: &dyn Fn(&Tensor) -> Tensor, x: &Tensor, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let var = Var::from_tensor(x).unwrap();
    let grads = f(var.as_tensor()).backward().unwrap();
    let g = grads.get(var.as_tensor()).expect("input gradient");
    let dir: Vec<f64> = (0..x.elem_count()).map(|_| rng.sample(StandardNormal)).collect();
    let dir = Tensor::from_vec(dir, x.shape(), &Device::Cpu).unwrap();
    let analytic = (g * &dir).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
    let h = 1e-6;
    let at = |s: f64| f(&(x + (&dir * s).unwrap()).unwrap()).to_scalar::<f64>().unwrap();
    (analytic, (at(h) - at(-h)) / (2.0 * h))
}

/// Worst relative error over `trials` random points and directions.
pub fn worst_gradient_error(
    trials: usize,
    seed: u64,
    point: &dyn Fn(&mut ChaCha8Rng) -> Tensor,
    f: &dyn Fn(&Tensor) -> Tensor,
) -> f64 {
    let mut r = rng(seed);
    (0..trials)
        .map(|_| {
            let x = point(&mut r);
            let (a, n) = directional(f, &x, &mut r);
            rel_err(a, n)
        })
        .fold(0.0, f64::max)
}

/// Gaussian window weights, straight from the definition.
pub fn gaussian_window(k: usize, sigma: f64) -> Vec<Vec<f64>> {
    let c = (k as f64 - 1.0) / 2.0;
    let mut w = vec![vec![0.0; k]; k];
    let mut total = 0.0;
    for (i, row) in w.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            *v = (-d2 / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    for row in &mut w {
        for v in row {
            *v /= total;
        }
    }
    w
}

/// Mean SSIM over every valid window position and channel, one window at a time.
pub fn brute_ssim(a: &ImageTensor, b: &ImageTensor, cfg: &SsimConfig) -> f64 {
    let (h, w, ch) = a.shape();
    let k = cfg.window;
    let win = gaussian_window(k, cfg.sigma);
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..ch {
        for top in 0..=h - k {
            for left in 0..=w - k {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        mx += win[i][j] * a.get(top + i, left + j, c) as f64;
                        my += win[i][j] * b.get(top + i, left + j, c) as f64;
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let dx = a.get(top + i, left + j, c) as f64 - mx;
                        let dy = b.get(top + i, left + j, c) as f64 - my;
                        vx += win[i][j] * dx * dx;
                        vy += win[i][j] * dy * dy;
                        cxy += win[i][j] * dx * dy;
                    }
                }
                total += ((2.0 * mx * my + cfg.c1) * (2.0 * cxy + cfg.c2))
                    / ((mx * mx + my * my + cfg.c1) * (vx + vy + cfg.c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

pub fn brute_psnr(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let n = a.data().len() as f64;
    let mse: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / n;
    -10.0 * mse.log10()
}

/// Scores an image by its first pixel, so tests choose scores directly.
pub struct FirstPixel;

impl IqaScorer for FirstPixel {
    fn name(&self) -> &str {
        "first-pixel"
    }

    fn score(&self, img: &ImageTensor) -> derain_sr::Result<f64> {
        Ok(img.data()[0] as f64)
    }
}

/// An image whose quantized first pixel is `level / 65535`.
pub fn level_image(level: u16, tag: f32) -> ImageTensor {
    let v = level as f32 / 65535.0;
    ImageTensor::from_fn(8, 8, 3, |y, x, c| if y + x + c == 0 { v } else { tag }).unwrap()
}

pub fn f64_tensor(t: &Tensor) -> Tensor {
    t.to_dtype(DType::F64).unwrap()
}

/// A configuration small enough for step-level tests: 16x16 full-frame crops.
pub fn tiny_config() -> derain_sr::config::RunConfig {
    let mut cfg = derain_sr::config::RunConfig::default();
    cfg.model = derain_sr::nn::models::ArchConfig {
        derainer_channels: 4,
        derainer_blocks: 1,
        dem_channels: 4,
        gen_channels: 4,
        gen_blocks: 1,
        disc_channels: 4,
    };
    cfg.train.patch_size = 16;
    cfg.train.batch_size = 2;
    cfg.train.steps_per_epoch = 4;
    cfg.loss.ssim_window = 7;
    cfg.data.image_size = 16;
    cfg.data.clean_count = 8;
    cfg.data.rainy_count = 8;
    cfg.data.val_count = 2;
    cfg
}
