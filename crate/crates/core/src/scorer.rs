//! No-reference quality scorers. Every scorer reports higher-is-better.

use std::path::Path;
use std::process::Command;

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Placeholder substituted with the temporary image path in external commands.
pub const IMAGE_PLACEHOLDER: &str = "{image}";

/// Quality scorer contract: deterministic, higher is better.
pub trait IqaScorer: Send + Sync {
    fn name(&self) -> &str;

    fn score(&self, img: &ImageTensor) -> Result<f64>;
}

impl<S: IqaScorer + ?Sized> IqaScorer for Box<S> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn score(&self, img: &ImageTensor) -> Result<f64> {
        (**self).score(img)
    }
}

impl<S: IqaScorer + ?Sized> IqaScorer for std::sync::Arc<S> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn score(&self, img: &ImageTensor) -> Result<f64> {
        (**self).score(img)
    }
}

/// Cheap deterministic stand-in for a learned quality model.
///
/// Penalizes high-frequency energy (thin streaks), horizontal/vertical gradient
/// imbalance and clipped extremes, all computed on luminance. The streak term is
/// relative to the image's own contrast, so dimming an image cannot raise its score.
/// Keeps the streak term finite on flat images.
pub const CONTRAST_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceScorer {
    pub streak_weight: f64,
    pub anisotropy_weight: f64,
    pub saturation_weight: f64,
}

impl Default for ReferenceScorer {
    fn default() -> Self {
        Self {
            streak_weight: 1.0,
            anisotropy_weight: 0.05,
            saturation_weight: 1.0,
        }
    }
}

/// Component statistics behind a [`ReferenceScorer`] score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QualityStats {
    /// RMS of luminance minus its 3x3 box mean, over the luminance standard
    /// deviation (plus [`CONTRAST_FLOOR`]).
    pub streak_energy: f64,
    /// `|Gx - Gy| / (Gx + Gy)` over squared finite differences.
    pub anisotropy: f64,
    /// Fraction of luminance values within 0.02 of either extreme.
    pub saturation: f64,
}

impl ReferenceScorer {
    pub fn stats(img: &ImageTensor) -> QualityStats {
        let (h, w) = (img.height(), img.width());
        let y = img.luma();
        let mut hp = 0.0;
        let mut count = 0usize;
        for r in 1..h - 1 {
            for c in 1..w - 1 {
                let mut box_sum = 0.0;
                for dr in 0..3 {
                    for dc in 0..3 {
                        box_sum += y[(r + dr - 1) * w + c + dc - 1];
                    }
                }
                let d = y[r * w + c] - box_sum / 9.0;
                hp += d * d;
                count += 1;
            }
        }
        let (mut gx, mut gy) = (0.0, 0.0);
        for r in 0..h {
            for c in 0..w {
                if c + 1 < w {
                    gx += (y[r * w + c + 1] - y[r * w + c]).powi(2);
                }
                if r + 1 < h {
                    gy += (y[(r + 1) * w + c] - y[r * w + c]).powi(2);
                }
            }
        }
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let std = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.len() as f64).sqrt();
        let saturated = y.iter().filter(|&&v| !(0.02..=0.98).contains(&v)).count();
        QualityStats {
            streak_energy: (hp / count as f64).sqrt() / (std + CONTRAST_FLOOR),
            anisotropy: (gx - gy).abs() / (gx + gy + 1e-12),
            saturation: saturated as f64 / y.len() as f64,
        }
    }
}

impl IqaScorer for ReferenceScorer {
    fn name(&self) -> &str {
        "reference"
    }

    fn score(&self, img: &ImageTensor) -> Result<f64> {
        let s = Self::stats(img);
        Ok(-(self.streak_weight * s.streak_energy
            + self.anisotropy_weight * s.anisotropy
            + self.saturation_weight * s.saturation))
    }
}

/// Adapts a lower-is-better backend to the higher-is-better contract by negation.
#[derive(Clone, Debug)]
pub struct Negated<S>(pub S);

impl<S: IqaScorer> IqaScorer for Negated<S> {
    fn name(&self) -> &str {
        self.0.name()
    }

    fn score(&self, img: &ImageTensor) -> Result<f64> {
        self.0.score(img).map(|v| -v)
    }
}

/// Parses the single decimal number on the last non-empty line of scorer output.
pub fn parse_score_output(stdout: &str) -> Result<f64> {
    let fail = |message: &str| Error::Scoring {
        message: message.to_string(),
        raw: stdout.to_string(),
    };
    let line = stdout
        .lines()
        .map(str::trim)
        .rfind(|l| !l.is_empty())
        .ok_or_else(|| fail("empty scorer output"))?;
    let value: f64 = line
        .parse()
        .map_err(|_| fail("last line is not a decimal number"))?;
    if !value.is_finite() {
        return Err(fail("score is not finite"));
    }
    Ok(value)
}

/// Runs `<cmd> <image-path>` per image and parses the score from standard output.
#[derive(Clone, Debug)]
pub struct ExternalScorer {
    name: String,
    program: String,
    args: Vec<String>,
    lower_is_better: bool,
}

impl ExternalScorer {
    /// `template` is split on whitespace; one token must be [`IMAGE_PLACEHOLDER`].
    pub fn new(template: &str, lower_is_better: bool) -> Result<Self> {
        let mut tokens = template.split_whitespace().map(str::to_string);
        let program = tokens
            .next()
            .ok_or_else(|| Error::Config("external scorer command is empty".into()))?;
        let args: Vec<String> = tokens.collect();
        if !args.iter().any(|a| a.contains(IMAGE_PLACEHOLDER)) {
            return Err(Error::Config(format!(
                "external scorer command must contain {IMAGE_PLACEHOLDER}"
            )));
        }
        Ok(Self {
            name: format!("external:{program}"),
            program,
            args,
            lower_is_better,
        })
    }

    fn run(&self, image_path: &Path) -> Result<f64> {
        let path = image_path.to_string_lossy();
        let args: Vec<String> = self
            .args
            .iter()
            .map(|a| a.replace(IMAGE_PLACEHOLDER, &path))
            .collect();
        let output = Command::new(&self.program)
            .args(&args)
            .output()
            .map_err(|e| Error::Scoring {
                message: format!("failed to launch {}: {e}", self.program),
                raw: String::new(),
            })?;
        let stdout = String::from_utf8_lossy(&output.stdout).into_owned();
        if !output.status.success() {
            return Err(Error::Scoring {
                message: format!("{} exited with {}", self.program, output.status),
                raw: format!("{stdout}{}", String::from_utf8_lossy(&output.stderr)),
            });
        }
        let raw = parse_score_output(&stdout)?;
        Ok(if self.lower_is_better { -raw } else { raw })
    }
}

impl IqaScorer for ExternalScorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, img: &ImageTensor) -> Result<f64> {
        let file = tempfile::Builder::new()
            .suffix(".png")
            .tempfile()
            .map_err(|e| Error::io(std::env::temp_dir(), e))?;
        std::fs::write(file.path(), img.encode_png16()?).map_err(|e| Error::io(file.path(), e))?;
        self.run(file.path())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_rain, toy_scene, RainSpec};

    #[test]
    fn parse_takes_last_nonempty_line() {
        assert_eq!(parse_score_output("loading model\n0.25\n\n").unwrap(), 0.25);
        assert_eq!(parse_score_output("-3e-2").unwrap(), -0.03);
    }

    #[test]
    fn parse_errors_carry_raw_output() {
        match parse_score_output("score: high\n") {
            Err(Error::Scoring { raw, .. }) => assert_eq!(raw, "score: high\n"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_score_output("").is_err());
        assert!(parse_score_output("NaN").is_err());
        assert!(parse_score_output("inf").is_err());
    }

    #[test]
    fn clean_beats_heavy_rain() {
        let clean = toy_scene(64, 12).unwrap();
        let rainy = synthesize_rain(
            &clean,
            &RainSpec {
                streak_count: 60,
                streak_intensity: 0.6,
                ..RainSpec::default()
            },
        )
        .unwrap();
        let s = ReferenceScorer::default();
        assert!(s.score(&clean).unwrap() > s.score(&rainy).unwrap());
        assert_eq!(s.score(&clean).unwrap(), s.score(&clean).unwrap());
    }

    #[test]
    fn dimming_does_not_pay() {
        let img = synthesize_rain(&toy_scene(32, 4).unwrap(), &RainSpec::default()).unwrap();
        let dim = ImageTensor::new(32, 32, img.channels(), img.data().iter().map(|v| 0.25 + 0.5 * (v - 0.25)).collect()).unwrap();
        let s = ReferenceScorer::default();
        let (a, b) = (ReferenceScorer::stats(&img), ReferenceScorer::stats(&dim));
        assert!((a.streak_energy - b.streak_energy).abs() < 0.05 * a.streak_energy);
        assert!(s.score(&dim).unwrap() <= s.score(&img).unwrap() + 0.05);
    }

    #[test]
    fn negation_flips_ordering() {
        let s = ReferenceScorer::default();
        let n = Negated(s.clone());
        let img = toy_scene(16, 1).unwrap();
        assert_eq!(n.score(&img).unwrap(), -s.score(&img).unwrap());
    }

    #[test]
    fn template_requires_placeholder() {
        assert!(ExternalScorer::new("score-tool --fast", true).is_err());
        assert!(ExternalScorer::new("", true).is_err());
        assert!(ExternalScorer::new("score-tool {image}", true).is_ok());
    }

    #[test]
    fn failing_backend_is_a_scoring_error() {
        let s = ExternalScorer::new("false {image}", false).unwrap();
        let img = toy_scene(16, 1).unwrap();
        assert!(matches!(s.score(&img), Err(Error::Scoring { .. })));
    }
}
