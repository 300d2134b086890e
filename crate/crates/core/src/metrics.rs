//! Full-reference metric kernels: PSNR and Gaussian-window SSIM.

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Value reported by [`psnr`] for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    psnr_with_cap(a, b, PSNR_CAP_DB)
}

/// `10 log10(1 / MSE)` at peak 1.0, or `cap` when the images are identical.
pub fn psnr_with_cap(a: &ImageTensor, b: &ImageTensor, cap: f64) -> Result<f64> {
    let mse = mse(a, b)?;
    if mse == 0.0 {
        return Ok(cap);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(cap))
}

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

/// SSIM parameters; [`SsimConfig::default`] is the usual 11x11, sigma 1.5 window at peak 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
        }
    }
}

impl SsimConfig {
    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let center = (self.window as f64 - 1.0) / 2.0;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - center;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / sum).collect()
    }

    /// Row-major `window x window` kernel.
    pub fn kernel_2d(&self) -> Vec<f64> {
        let taps = self.taps();
        let mut k = Vec::with_capacity(taps.len() * taps.len());
        for &a in &taps {
            for &b in &taps {
                k.push(a * b);
            }
        }
        k
    }
}

pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    ssim_with(a, b, &SsimConfig::default())
}

/// Mean local SSIM over all valid (unpadded) window positions and channels.
pub fn ssim_with(a: &ImageTensor, b: &ImageTensor, cfg: &SsimConfig) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    let (h, w, ch) = a.shape();
    let k = cfg.window;
    if h < k || w < k {
        return Err(Error::InvalidImage(format!(
            "image {h}x{w} is smaller than the {k}x{k} SSIM window"
        )));
    }
    let taps = cfg.taps();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut total = 0.0;
    for c in 0..ch {
        let plane = |img: &ImageTensor| -> Vec<f64> {
            (0..h * w).map(|i| img.data()[i * ch + c] as f64).collect()
        };
        let x = plane(a);
        let y = plane(b);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, h, w, &taps);
        let my = filter_valid(&y, h, w, &taps);
        let sxx = filter_valid(&xx, h, w, &taps);
        let syy = filter_valid(&yy, h, w, &taps);
        let sxy = filter_valid(&xy, h, w, &taps);
        let mut acc = 0.0;
        for i in 0..oh * ow {
            acc += ssim_term(mx[i], my[i], sxx[i] - mx[i] * mx[i], syy[i] - my[i] * my[i], sxy[i] - mx[i] * my[i], cfg);
        }
        total += acc / (oh * ow) as f64;
    }
    Ok(total / ch as f64)
}

#[inline]
pub(crate) fn ssim_term(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64, cfg: &SsimConfig) -> f64 {
    let num = (2.0 * mx * my + cfg.c1) * (2.0 * cxy + cfg.c2);
    let den = (mx * mx + my * my + cfg.c1) * (vx + vy + cfg.c2);
    num / den
}

/// Separable valid-mode filtering of an `h x w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let ow = w - k + 1;
    let oh = h - k + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&line[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}
