//! Paired PSNR/SSIM evaluation, the ablation harness and report files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::config::{RunConfig, ScorerKind};
use crate::data::SampleId;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::losses::{AdvOperands, TrainingStage};
use crate::metrics;
use crate::nn::models::{derain, DemSwitch, Derainer};
use crate::plot::{LineChart, Series};
use crate::trainer::{RunReport, TrainState};

/// A rainy image with its ground truth.
#[derive(Clone, Debug)]
pub struct PairedSample {
    pub id: SampleId,
    pub rainy: ImageTensor,
    pub clean: ImageTensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub sample_id: SampleId,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ImageScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Pairs left out because their shapes disagree.
    pub skipped: usize,
    pub config_hash: Option<String>,
    pub checkpoint_id: Option<String>,
    pub stage: Option<TrainingStage>,
}

/// Derains every pair in evaluation mode and scores it against its ground truth.
pub fn evaluate(derainer: &dyn Derainer, pairs: &[PairedSample]) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(pairs.len());
    let mut skipped = 0;
    for pair in pairs {
        let (rainy, clean) = (pair.rainy.to_rgb(), pair.clean.to_rgb());
        if rainy.shape() != clean.shape() {
            log::warn!("skipping {}: {:?} vs {:?}", pair.id, rainy.shape(), clean.shape());
            skipped += 1;
            continue;
        }
        let out = derain(derainer, &rainy)?;
        rows.push(ImageScore {
            sample_id: pair.id.clone(),
            psnr_db: metrics::psnr(&out, &clean)?,
            ssim: metrics::ssim(&out, &clean)?,
        });
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("no evaluable pairs ({skipped} skipped)")));
    }
    let n = rows.len() as f64;
    Ok(EvalReport {
        mean_psnr: rows.iter().map(|r| r.psnr_db).sum::<f64>() / n,
        mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        rows,
        skipped,
        config_hash: None,
        checkpoint_id: None,
        stage: None,
    })
}

/// Rebuilds the training state stored in a checkpoint, with its configuration.
pub fn load_checkpoint(path: &Path) -> Result<(TrainState, RunConfig, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let archive = checkpoint::decode(&bytes)?;
    let cfg_value = archive
        .meta
        .get("config")
        .cloned()
        .ok_or_else(|| Error::Checkpoint("checkpoint carries no configuration".into()))?;
    let cfg: RunConfig = serde_json::from_value(cfg_value)?;
    let state = TrainState::from_archive(&archive, &cfg)?;
    let id = hex::encode(&Sha256::digest(&bytes)[..8]);
    Ok((state, cfg, id))
}

/// Evaluates the derainer stored in a checkpoint.
pub fn evaluate_checkpoint(path: &Path, pairs: &[PairedSample]) -> Result<EvalReport> {
    let (state, cfg, id) = load_checkpoint(path)?;
    let mut report = evaluate(state.networks.derainer.as_ref(), pairs)?;
    report.config_hash = Some(cfg.config_hash());
    report.checkpoint_id = Some(id);
    report.stage = Some(state.stage);
    Ok(report)
}

/// Reads `<root>/rainy/*` and `<root>/clean/*`, pairing files by name.
///
/// Returns the pairs and the number of rainy files without a usable counterpart.
pub fn ingest_paired(root: &Path) -> Result<(Vec<PairedSample>, usize)> {
    let rainy_dir = root.join("rainy");
    let clean_dir = root.join("clean");
    let mut names: Vec<String> = fs::read_dir(&rainy_dir)
        .map_err(|e| Error::io(&rainy_dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    names.sort();
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for name in names {
        let loaded = ImageTensor::open(&rainy_dir.join(&name)).and_then(|r| Ok((r, ImageTensor::open(&clean_dir.join(&name))?)));
        match loaded {
            Ok((rainy, clean)) if rainy.height() == clean.height() && rainy.width() == clean.width() => pairs.push(PairedSample {
                id: SampleId::new(name),
                rainy: rainy.to_rgb(),
                clean: clean.to_rgb(),
            }),
            Ok(_) => {
                log::warn!("skipping {name}: rainy and clean sizes differ");
                skipped += 1;
            }
            Err(e) => {
                log::warn!("skipping {name}: {e}");
                skipped += 1;
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Data(format!("no usable pairs under {} ({skipped} skipped)", root.display())));
    }
    Ok((pairs, skipped))
}

/// Per-image CSV: `sample_id,psnr_db,ssim`.
pub fn eval_csv(report: &EvalReport) -> String {
    let mut out = String::from("sample_id,psnr_db,ssim\n");
    for r in &report.rows {
        out.push_str(&format!("{},{},{}\n", r.sample_id, r.psnr_db, r.ssim));
    }
    out
}

/// One setting along an ablation axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AblationValue {
    /// Self-reinforcement on or off.
    Sr(bool),
    /// Registered scorer name: `reference` or `external`.
    Scorer(String),
    Lambdas { lambda1: f64, lambda2: f64 },
    Adv(AdvOperands),
    Dem(DemSwitch),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub name: String,
    pub values: Vec<AblationValue>,
}

impl AblationCell {
    pub fn new(name: &str, values: Vec<AblationValue>) -> Self {
        Self {
            name: name.to_string(),
            values,
        }
    }

    /// The base configuration with this cell's settings applied.
    pub fn apply(&self, base: &RunConfig) -> Result<RunConfig> {
        let mut cfg = base.clone();
        for v in &self.values {
            match v {
                AblationValue::Sr(on) => cfg.sr.enabled = *on,
                AblationValue::Scorer(name) => {
                    cfg.scorer.kind = match name.as_str() {
                        "reference" => ScorerKind::Reference,
                        "external" => ScorerKind::External,
                        other => return Err(Error::Config(format!("unregistered scorer {other:?}"))),
                    }
                }
                AblationValue::Lambdas { lambda1, lambda2 } => {
                    cfg.loss.lambda1 = *lambda1;
                    cfg.loss.lambda2 = *lambda2;
                }
                AblationValue::Adv(ops) => cfg.loss.adv_operands = *ops,
                AblationValue::Dem(switch) => cfg.sr.dem_switch = *switch,
            }
        }
        cfg.run.out_dir = base.run.out_dir.join(&self.name);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Self-reinforcement off, then on.
pub fn sr_cells() -> Vec<AblationCell> {
    vec![
        AblationCell::new("sr_off", vec![AblationValue::Sr(false)]),
        AblationCell::new("sr_on", vec![AblationValue::Sr(true)]),
    ]
}

/// DEM variants: V1 trains with the single re-rained adversarial term on the reward
/// path, V2 with all four terms but the estimator only, V3 with all four terms on the
/// reward path. All three use the reward loss in stage two.
pub fn dem_variant_cells() -> Vec<AblationCell> {
    vec![
        AblationCell::new(
            "v1_adv1_reward_path",
            vec![AblationValue::Adv(AdvOperands::Single), AblationValue::Dem(DemSwitch::RewardPath)],
        ),
        AblationCell::new(
            "v2_estimator_only",
            vec![AblationValue::Adv(AdvOperands::Paper4), AblationValue::Dem(DemSwitch::EstimatorPath)],
        ),
        AblationCell::new(
            "v3_reward_path",
            vec![AblationValue::Adv(AdvOperands::Paper4), AblationValue::Dem(DemSwitch::RewardPath)],
        ),
    ]
}

/// Median; the mean of the middle two for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunReport>,
    pub median_psnr: f64,
    pub median_ssim: f64,
}

/// Runs every cell once per seed through `runner` (normally [`crate::trainer::run`]).
///
/// Seeds are shared across cells; each run writes to `<out_dir>/<cell>/seed-<seed>`.
pub fn ablation_matrix(
    base: &RunConfig,
    cells: &[AblationCell],
    seeds: &[u64],
    mut runner: impl FnMut(&RunConfig) -> Result<RunReport>,
) -> Result<Vec<CellResult>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut results = Vec::with_capacity(cells.len());
    for cell in cells {
        let cfg = cell.apply(base)?;
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut run_cfg = cfg.clone();
            run_cfg.train.seed = seed;
            run_cfg.run.out_dir = cfg.run.out_dir.join(format!("seed-{seed}"));
            runs.push(runner(&run_cfg)?);
        }
        let psnr: Vec<f64> = runs.iter().map(|r| r.final_psnr).collect();
        let ssim: Vec<f64> = runs.iter().map(|r| r.final_ssim).collect();
        results.push(CellResult {
            cell: cell.name.clone(),
            config_hash: cfg.config_hash(),
            seeds: seeds.to_vec(),
            median_psnr: median(&psnr),
            median_ssim: median(&ssim),
            runs,
        });
    }
    Ok(results)
}

/// Consolidated table: `config_hash,cell,mean_psnr,mean_ssim,delta_psnr,delta_ssim`.
///
/// The metric columns hold the across-seed medians of each run's mean validation
/// metrics; deltas are relative to the `baseline` cell.
pub fn ablation_csv(results: &[CellResult], baseline: usize) -> Result<String> {
    let base = results
        .get(baseline)
        .ok_or_else(|| Error::Config(format!("baseline cell {baseline} out of range")))?;
    let mut out = String::from("config_hash,cell,mean_psnr,mean_ssim,delta_psnr,delta_ssim\n");
    for r in results {
        out.push_str(&format!(
            "{},{},{:.4},{:.6},{:+.4},{:+.6}\n",
            r.config_hash,
            r.cell,
            r.median_psnr,
            r.median_ssim,
            r.median_psnr - base.median_psnr,
            r.median_ssim - base.median_ssim
        ));
    }
    Ok(out)
}

/// Writes the ablation CSV and a PSNR-per-epoch chart (first seed of each cell),
/// named after `key` (normally the base configuration hash).
pub fn emit_report(results: &[CellResult], baseline: usize, key: &str, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv_path = out_dir.join(format!("ablation_{key}.csv"));
    fs::write(&csv_path, ablation_csv(results, baseline)?).map_err(|e| Error::io(&csv_path, e))?;
    let series = results
        .iter()
        .filter_map(|r| r.runs.first().map(|run| (r, run)))
        .map(|(r, run)| Series {
            label: r.cell.clone(),
            points: run.validation_history.iter().map(|v| (v.epoch as f64, v.psnr_db)).collect(),
        })
        .collect();
    let png_path = out_dir.join(format!("ablation_{key}_psnr.png"));
    LineChart { series }.save(&png_path)?;
    Ok(vec![csv_path, png_path])
}
