//! Unpaired clean/rainy image pools: synthetic rain, procedural scenes, directory
//! ingestion, cropping and unpaired batch sampling.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Stable identifier of a rainy training sample; keys the reward store.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SampleId(pub String);

impl SampleId {
    pub fn new(s: impl Into<String>) -> Self {
        SampleId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<usize> for SampleId {
    fn from(i: usize) -> Self {
        SampleId(i.to_string())
    }
}

/// Parameters of the additive streak-plus-noise rain model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RainSpec {
    pub streak_count: usize,
    /// Degrees from vertical, clockwise.
    pub streak_angle: f64,
    pub streak_length: usize,
    pub streak_intensity: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for RainSpec {
    fn default() -> Self {
        Self {
            streak_count: 24,
            streak_angle: 10.0,
            streak_length: 10,
            streak_intensity: 0.3,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl RainSpec {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if !(-45.0..=45.0).contains(&self.streak_angle) {
            return Err(Error::Config(format!(
                "streak_angle {} outside [-45, 45]",
                self.streak_angle
            )));
        }
        if !(self.streak_intensity > 0.0 && self.streak_intensity <= 1.0) {
            return Err(Error::Config(format!(
                "streak_intensity {} outside (0, 1]",
                self.streak_intensity
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!(
                "noise_sigma {} must be >= 0",
                self.noise_sigma
            )));
        }
        if self.streak_length >= height.min(width) {
            return Err(Error::Config(format!(
                "streak_length {} must be below min(height, width) = {}",
                self.streak_length,
                height.min(width)
            )));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// One straight streak; rasterized as `length + 1` unit steps from `(row, col)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Streak {
    pub row: f64,
    pub col: f64,
    /// Degrees from vertical, clockwise.
    pub angle: f64,
    pub length: usize,
    pub intensity: f64,
}

/// Renders streaks into a single-channel additive layer (`height * width`, row-major).
/// A pixel is counted at most once per streak; overlapping streaks add up.
pub fn render_streaks(height: usize, width: usize, streaks: &[Streak]) -> Vec<f32> {
    let mut layer = vec![0.0f32; height * width];
    let mut seen = HashSet::new();
    for s in streaks {
        seen.clear();
        let (dy, dx) = (s.angle.to_radians().cos(), s.angle.to_radians().sin());
        for t in 0..=s.length {
            let y = (s.row + t as f64 * dy).round();
            let x = (s.col + t as f64 * dx).round();
            if y < 0.0 || x < 0.0 || y >= height as f64 || x >= width as f64 {
                continue;
            }
            let idx = y as usize * width + x as usize;
            if seen.insert(idx) {
                layer[idx] += s.intensity as f32;
            }
        }
    }
    layer
}

/// Streak placements drawn from `spec.seed`.
pub fn sample_streaks(height: usize, width: usize, spec: &RainSpec, rng: &mut ChaCha8Rng) -> Vec<Streak> {
    (0..spec.streak_count)
        .map(|_| Streak {
            // start above the frame so streaks enter from the top edge too
            row: rng.random_range(-(spec.streak_length as f64)..height as f64),
            col: rng.random_range(0.0..width as f64),
            angle: spec.streak_angle,
            length: spec.streak_length,
            intensity: spec.streak_intensity,
        })
        .collect()
}

/// `clamp(clean + streaks + noise, 0, 1)`, deterministic in `(clean, spec)`.
pub fn synthesize_rain(clean: &ImageTensor, spec: &RainSpec) -> Result<ImageTensor> {
    let (h, w, c) = clean.shape();
    spec.validate(h, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let streaks = sample_streaks(h, w, spec, &mut rng);
    let layer = render_streaks(h, w, &streaks);
    let noise = if spec.noise_sigma > 0.0 {
        Some(Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let mut data = Vec::with_capacity(clean.len());
    for (i, &v) in clean.data().iter().enumerate() {
        let mut out = v + layer[i / c];
        if let Some(n) = &noise {
            out += n.sample(&mut rng) as f32;
        }
        data.push(out.clamp(0.0, 1.0));
    }
    ImageTensor::new(h, w, c, data)
}

/// Smooth procedural RGB scene: a bilinear color ramp, soft blobs and one soft rectangle.
pub fn toy_scene(size: usize, seed: u64) -> Result<ImageTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce9_e5ce_9e5c_e9e5);
    let mut corner = || -> [f32; 3] {
        [
            rng.random_range(0.1..0.6),
            rng.random_range(0.1..0.6),
            rng.random_range(0.1..0.6),
        ]
    };
    let corners = [corner(), corner(), corner(), corner()];
    let blobs: Vec<(f32, f32, f32, [f32; 3])> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.0..size as f32),
                rng.random_range(0.0..size as f32),
                rng.random_range(size as f32 * 0.08..size as f32 * 0.25),
                [
                    rng.random_range(-0.15..0.15),
                    rng.random_range(-0.15..0.15),
                    rng.random_range(-0.15..0.15),
                ],
            )
        })
        .collect();
    let r0 = rng.random_range(0.0..size as f32 * 0.6);
    let c0 = rng.random_range(0.0..size as f32 * 0.6);
    let r1 = r0 + rng.random_range(size as f32 * 0.2..size as f32 * 0.4);
    let c1 = c0 + rng.random_range(size as f32 * 0.2..size as f32 * 0.4);
    let rect_tint: [f32; 3] = [
        rng.random_range(-0.12..0.12),
        rng.random_range(-0.12..0.12),
        rng.random_range(-0.12..0.12),
    ];
    let soft = |d: f32| 1.0 / (1.0 + (-d / 1.5).exp());
    let denom = (size - 1).max(1) as f32;
    ImageTensor::from_fn(size, size, 3, |y, x, c| {
        let (fy, fx) = (y as f32 / denom, x as f32 / denom);
        let mut v = corners[0][c] * (1.0 - fy) * (1.0 - fx)
            + corners[1][c] * (1.0 - fy) * fx
            + corners[2][c] * fy * (1.0 - fx)
            + corners[3][c] * fy * fx;
        for (by, bx, r, tint) in &blobs {
            let d2 = (y as f32 - by).powi(2) + (x as f32 - bx).powi(2);
            v += tint[c] * (-d2 / (2.0 * r * r)).exp();
        }
        let inside = soft(y as f32 - r0) * soft(r1 - y as f32) * soft(x as f32 - c0) * soft(c1 - x as f32);
        v += rect_tint[c] * inside;
        v.clamp(0.02, 0.75)
    })
}

/// Top-left corner of a uniformly drawn `size x size` window.
pub fn crop_offset(height: usize, width: usize, size: usize, rng: &mut impl Rng) -> Result<(usize, usize)> {
    if size == 0 {
        return Err(Error::Config("crop size must be positive".into()));
    }
    if size > height {
        return Err(Error::Data(format!(
            "crop size {size} exceeds image height {height}"
        )));
    }
    if size > width {
        return Err(Error::Data(format!(
            "crop size {size} exceeds image width {width}"
        )));
    }
    Ok((rng.random_range(0..=height - size), rng.random_range(0..=width - size)))
}

pub fn random_crop(img: &ImageTensor, size: usize, rng: &mut impl Rng) -> Result<ImageTensor> {
    let (top, left) = crop_offset(img.height(), img.width(), size, rng)?;
    img.window(top, left, size)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolKind {
    Clean,
    Rainy,
}

#[derive(Clone, Debug)]
pub struct PoolItem {
    pub id: SampleId,
    pub image: ImageTensor,
}

/// Immutable collection of images of one kind.
#[derive(Clone, Debug)]
pub struct Pool {
    kind: PoolKind,
    items: Arc<Vec<PoolItem>>,
    skipped: usize,
}

impl Pool {
    pub fn new(kind: PoolKind, items: Vec<PoolItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Data(format!("{kind:?} pool is empty")));
        }
        Ok(Self {
            kind,
            items: Arc::new(items),
            skipped: 0,
        })
    }

    pub fn kind(&self) -> PoolKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[PoolItem] {
        &self.items
    }

    pub fn get(&self, index: usize) -> &PoolItem {
        &self.items[index]
    }

    pub fn find(&self, id: &SampleId) -> Option<&PoolItem> {
        self.items.iter().find(|item| &item.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &SampleId> {
        self.items.iter().map(|item| &item.id)
    }

    /// The same pool with every image converted to three channels.
    pub fn to_rgb(&self) -> Result<Self> {
        let items = self
            .items
            .iter()
            .map(|item| PoolItem {
                id: item.id.clone(),
                image: item.image.to_rgb(),
            })
            .collect();
        let mut pool = Self::new(self.kind, items)?;
        pool.skipped = self.skipped;
        Ok(pool)
    }

    /// Files that failed to decode during ingestion.
    pub fn skipped(&self) -> usize {
        self.skipped
    }
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Loads every PNG/JPEG under `path` (non-recursive) into a pool keyed by file name.
///
/// Undecodable files are skipped with a warning and counted.
pub fn ingest_directory(path: &Path, kind: PoolKind) -> Result<Pool> {
    let entries = std::fs::read_dir(path).map_err(|e| Error::io(path, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(path, e))?;
        let p = entry.path();
        if p.is_file() && is_image_file(&p) {
            files.push(p);
        }
    }
    files.sort();
    let mut items = Vec::new();
    let mut skipped = 0;
    for file in files {
        let rel = file
            .strip_prefix(path)
            .unwrap_or(&file)
            .to_string_lossy()
            .into_owned();
        match ImageTensor::open(&file) {
            Ok(image) => items.push(PoolItem {
                id: SampleId(rel),
                image,
            }),
            Err(e) => {
                log::warn!("skipping {}: {e}", file.display());
                skipped += 1;
            }
        }
    }
    if items.is_empty() {
        return Err(Error::Data(format!(
            "no decodable images in {} ({skipped} skipped)",
            path.display()
        )));
    }
    let mut pool = Pool::new(kind, items)?;
    pool.skipped = skipped;
    Ok(pool)
}

/// Clean and rainy samples drawn independently; indices carry no pairing.
#[derive(Clone, Debug)]
pub struct UnpairedBatch {
    pub clean: Vec<ImageTensor>,
    pub rainy: Vec<(SampleId, ImageTensor)>,
}

impl UnpairedBatch {
    pub fn len(&self) -> usize {
        self.rainy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rainy.is_empty()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ShuffledCursor {
    order: Vec<usize>,
    next: usize,
}

impl ShuffledCursor {
    fn draw(&mut self, len: usize, rng: &mut ChaCha8Rng) -> usize {
        if self.order.len() != len || self.next >= self.order.len() {
            self.order = (0..len).collect();
            self.order.shuffle(rng);
            self.next = 0;
        }
        let i = self.order[self.next];
        self.next += 1;
        i
    }
}

/// Sampler state: an independent epoch-shuffled permutation per pool.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UnpairedSampler {
    rng: ChaCha8Rng,
    clean: ShuffledCursor,
    rainy: ShuffledCursor,
}

impl UnpairedSampler {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            clean: ShuffledCursor {
                order: Vec::new(),
                next: 0,
            },
            rainy: ShuffledCursor {
                order: Vec::new(),
                next: 0,
            },
        }
    }

    pub fn next_batch(&mut self, clean_pool: &Pool, rainy_pool: &Pool, batch_size: usize) -> Result<UnpairedBatch> {
        next_unpaired_batch(clean_pool, rainy_pool, batch_size, self)
    }
}

pub fn next_unpaired_batch(
    clean_pool: &Pool,
    rainy_pool: &Pool,
    batch_size: usize,
    state: &mut UnpairedSampler,
) -> Result<UnpairedBatch> {
    if clean_pool.is_empty() || rainy_pool.is_empty() {
        return Err(Error::Data("cannot sample from an empty pool".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut clean = Vec::with_capacity(batch_size);
    let mut rainy = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let ci = state.clean.draw(clean_pool.len(), &mut state.rng);
        clean.push(clean_pool.get(ci).image.clone());
        let ri = state.rainy.draw(rainy_pool.len(), &mut state.rng);
        let item = rainy_pool.get(ri);
        rainy.push((item.id.clone(), item.image.clone()));
    }
    Ok(UnpairedBatch { clean, rainy })
}

/// Generated desk-scale dataset: unpaired training pools plus held-out pairs.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub clean: Pool,
    pub rainy: Pool,
    /// `(id, rainy, clean)` validation triples.
    pub validation: Vec<(SampleId, ImageTensor, ImageTensor)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub clean_count: usize,
    pub rainy_count: usize,
    pub val_count: usize,
    pub seed: u64,
    pub rain: RainSpec,
}

impl SyntheticSpec {
    pub fn build(&self) -> Result<SyntheticData> {
        self.rain.validate(self.image_size, self.image_size)?;
        let s = self.seed.wrapping_mul(1_000_003);
        let clean = (0..self.clean_count)
            .map(|i| {
                Ok(PoolItem {
                    id: SampleId::from(i),
                    image: toy_scene(self.image_size, s.wrapping_add(i as u64))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let rain_for = |scene_seed: u64| -> Result<ImageTensor> {
            let scene = toy_scene(self.image_size, scene_seed)?;
            synthesize_rain(&scene, &self.rain.with_seed(scene_seed ^ 0xa5a5))
        };
        let rainy = (0..self.rainy_count)
            .map(|i| {
                Ok(PoolItem {
                    id: SampleId::from(i),
                    image: rain_for(s.wrapping_add(500_000 + i as u64))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let validation = (0..self.val_count)
            .map(|i| {
                let seed = s.wrapping_add(900_000 + i as u64);
                let clean = toy_scene(self.image_size, seed)?;
                let rainy = synthesize_rain(&clean, &self.rain.with_seed(seed ^ 0xa5a5))?;
                Ok((SampleId::new(format!("val{i}")), rainy, clean))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SyntheticData {
            clean: Pool::new(PoolKind::Clean, clean)?,
            rainy: Pool::new(PoolKind::Rainy, rainy)?,
            validation,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(size: usize, v: f32) -> ImageTensor {
        ImageTensor::filled(size, size, 1, v).unwrap()
    }

    #[test]
    fn zero_rain_is_identity() {
        let clean = toy_scene(32, 3).unwrap();
        let spec = RainSpec {
            streak_count: 0,
            noise_sigma: 0.0,
            ..RainSpec::default()
        };
        assert_eq!(synthesize_rain(&clean, &spec).unwrap(), clean);
    }

    #[test]
    fn rain_is_deterministic() {
        let clean = toy_scene(32, 4).unwrap();
        let spec = RainSpec {
            noise_sigma: 0.02,
            seed: 77,
            ..RainSpec::default()
        };
        let a = synthesize_rain(&clean, &spec).unwrap();
        let b = synthesize_rain(&clean, &spec).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn single_horizontal_streak_matches_hand_render() {
        let base = gray(16, 0.5);
        let layer = render_streaks(
            16,
            16,
            &[Streak {
                row: 8.0,
                col: 0.0,
                angle: 90.0,
                length: 15,
                intensity: 0.4,
            }],
        );
        let out: Vec<f32> = base.data().iter().zip(&layer).map(|(a, b)| a + b).collect();
        for y in 0..16 {
            for x in 0..16 {
                let expected = if y == 8 { 0.9 } else { 0.5 };
                assert!((out[y * 16 + x] - expected).abs() < 1e-6, "pixel ({y},{x})");
            }
        }
    }

    #[test]
    fn rain_rejects_degenerate_length() {
        let clean = gray(16, 0.2);
        let spec = RainSpec {
            streak_length: 16,
            ..RainSpec::default()
        };
        assert!(matches!(synthesize_rain(&clean, &spec), Err(Error::Config(_))));
    }

    #[test]
    fn rain_is_additive_without_noise() {
        let clean = toy_scene(32, 9).unwrap();
        let rainy = synthesize_rain(&clean, &RainSpec::default()).unwrap();
        for (r, c) in rainy.data().iter().zip(clean.data()) {
            if *r < 1.0 {
                assert!(r >= c);
            }
        }
    }

    #[test]
    fn full_frame_crop_is_identity() {
        let img = toy_scene(64, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(random_crop(&img, 64, &mut rng).unwrap(), img);
    }

    #[test]
    fn crop_too_large_names_dimension() {
        let img = ImageTensor::filled(16, 32, 1, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = random_crop(&img, 20, &mut rng).unwrap_err().to_string();
        assert!(err.contains("height"), "{err}");
    }

    #[test]
    fn crop_is_a_sub_block() {
        // unique values so the window can be located exhaustively
        let img = ImageTensor::from_fn(32, 32, 1, |y, x, _| (y * 32 + x) as f32 / 1024.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let crop = random_crop(&img, 16, &mut rng).unwrap();
        let mut found = 0;
        for top in 0..=16 {
            for left in 0..=16 {
                let matches = (0..16).all(|y| (0..16).all(|x| crop.get(y, x, 0) == img.get(top + y, left + x, 0)));
                if matches {
                    found += 1;
                }
            }
        }
        assert_eq!(found, 1);
        let mut rng2 = ChaCha8Rng::seed_from_u64(11);
        assert_eq!(random_crop(&img, 16, &mut rng2).unwrap(), crop);
    }

    fn pools(n_clean: usize, n_rainy: usize) -> (Pool, Pool) {
        let clean = (0..n_clean)
            .map(|i| PoolItem {
                id: SampleId::from(i),
                image: gray(8, i as f32 / n_clean as f32),
            })
            .collect();
        let rainy = (0..n_rainy)
            .map(|i| PoolItem {
                id: SampleId::new(format!("r{i}")),
                image: gray(8, 0.5),
            })
            .collect();
        (
            Pool::new(PoolKind::Clean, clean).unwrap(),
            Pool::new(PoolKind::Rainy, rainy).unwrap(),
        )
    }

    #[test]
    fn singleton_pools() {
        let (c, r) = pools(1, 1);
        let mut s = UnpairedSampler::new(0);
        let b = s.next_batch(&c, &r, 1).unwrap();
        assert_eq!(b.clean.len(), 1);
        assert_eq!(b.rainy[0].0, SampleId::new("r0"));
    }

    #[test]
    fn batch_shape_and_replay() {
        let (c, r) = pools(100, 100);
        let mut s = UnpairedSampler::new(5);
        let b = s.next_batch(&c, &r, 4).unwrap();
        assert_eq!((b.clean.len(), b.rainy.len()), (4, 4));
        assert!(b.rainy.iter().all(|(id, _)| r.find(id).is_some()));

        let ids = |seed| {
            let mut s = UnpairedSampler::new(seed);
            (0..3)
                .flat_map(|_| s.next_batch(&c, &r, 4).unwrap().rainy.into_iter().map(|(id, _)| id))
                .collect::<Vec<_>>()
        };
        assert_eq!(ids(9), ids(9));
    }

    #[test]
    fn epoch_covers_every_rainy_sample_once() {
        let (c, r) = pools(7, 10);
        let mut s = UnpairedSampler::new(1);
        let mut seen: Vec<_> = (0..5)
            .flat_map(|_| s.next_batch(&c, &r, 2).unwrap().rainy.into_iter().map(|(id, _)| id))
            .collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 10);
    }

    #[test]
    fn empty_pool_is_rejected() {
        assert!(Pool::new(PoolKind::Clean, Vec::new()).is_err());
    }

    #[test]
    fn ingest_skips_bad_files_and_keys_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let img = toy_scene(16, 2).unwrap();
        std::fs::write(dir.path().join("b.png"), img.encode_png8().unwrap()).unwrap();
        std::fs::write(dir.path().join("a.png"), img.encode_png8().unwrap()).unwrap();
        std::fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
        let pool = ingest_directory(dir.path(), PoolKind::Rainy).unwrap();
        let ids: Vec<_> = pool.ids().map(|i| i.0.clone()).collect();
        assert_eq!(ids, vec!["a.png", "b.png"]);
        assert_eq!(pool.skipped(), 1);

        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(ingest_directory(empty.path(), PoolKind::Clean), Err(Error::Data(_))));
    }
}
