//! Minimal line charts rendered straight into PNG pixels.
//!
//! There is no text: the plot area is framed, a light grid marks quarters of each
//! axis range, and series are told apart by color (legend swatches top-left, in
//! series order).

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const MARGIN: i64 = 30;
const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [23, 190, 207],
];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LineChart {
    pub series: Vec<Series>,
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(c));
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, c);
        put(img, x, y + 1, c);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

impl LineChart {
    pub fn render(&self) -> RgbImage {
        let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
        let (w, h) = (WIDTH as i64, HEIGHT as i64);
        let (x_lo, x_hi) = bounds(self.series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
        let (y_lo, y_hi) = bounds(self.series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
        let to_px = |(x, y): (f64, f64)| {
            let px = MARGIN + ((x - x_lo) / (x_hi - x_lo) * (w - 2 * MARGIN) as f64).round() as i64;
            let py = h - MARGIN - ((y - y_lo) / (y_hi - y_lo) * (h - 2 * MARGIN) as f64).round() as i64;
            (px, py)
        };
        for q in 1..4 {
            let gx = MARGIN + q * (w - 2 * MARGIN) / 4;
            let gy = MARGIN + q * (h - 2 * MARGIN) / 4;
            line(&mut img, (gx, MARGIN), (gx, h - MARGIN), [230, 230, 230]);
            line(&mut img, (MARGIN, gy), (w - MARGIN, gy), [230, 230, 230]);
        }
        let frame = [(MARGIN, MARGIN), (w - MARGIN, MARGIN), (w - MARGIN, h - MARGIN), (MARGIN, h - MARGIN)];
        for i in 0..4 {
            line(&mut img, frame[i], frame[(i + 1) % 4], [0, 0, 0]);
        }
        for (k, s) in self.series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            let pts: Vec<(i64, i64)> = s.points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()).map(|&p| to_px(p)).collect();
            for pair in pts.windows(2) {
                line(&mut img, pair[0], pair[1], color);
            }
            for &(x, y) in &pts {
                for d in -1..=1 {
                    put(&mut img, x + d, y, color);
                    put(&mut img, x, y + d, color);
                }
            }
            let sx = MARGIN + 6 + 16 * k as i64;
            for yy in 6..14 {
                line(&mut img, (sx, yy), (sx + 10, yy), color);
            }
        }
        img
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        self.render().save(path)?;
        Ok(())
    }
}
