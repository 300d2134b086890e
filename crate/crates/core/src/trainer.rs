//! Two-stage training: reward recycling, then self-reinforcement once the
//! validation metrics plateau.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Archive};
use crate::config::{DataSource, RunConfig, ScorerKind};
use crate::data::{crop_offset, ingest_directory, PoolKind, SampleId, SyntheticData, SyntheticSpec, UnpairedBatch, UnpairedSampler};
use crate::error::{Error, Result};
use crate::evaluation::{self, PairedSample};
use crate::image::ImageTensor;
use crate::losses::{self, FlowImages, RewardTargets};
pub use crate::losses::TrainingStage;
use crate::nn::models::{derain, DemSwitch, Networks};
use crate::nn::ParamSet;
use crate::optim::Adam;
use crate::reward_store::{RewardEvent, RewardSink, RewardStore, UpdateOutcome};
use crate::scorer::{ExternalScorer, IqaScorer, ReferenceScorer};

/// Training pools plus held-out validation pairs.
pub type Dataset = SyntheticData;

/// One validation pass, recorded after every epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub epoch: usize,
    pub stage: TrainingStage,
    pub psnr_db: f64,
    pub ssim: f64,
    pub mean_reward: Option<f64>,
    pub reward_coverage: f64,
}

struct Optimizers {
    derainer: Adam,
    dem: Adam,
    generator: Adam,
    discriminator: Adam,
}

impl Optimizers {
    fn all(&self) -> [(&'static str, &Adam); 4] {
        [
            ("derainer", &self.derainer),
            ("dem", &self.dem),
            ("generator", &self.generator),
            ("discriminator", &self.discriminator),
        ]
    }

    fn all_mut(&mut self) -> [(&'static str, &mut Adam); 4] {
        [
            ("derainer", &mut self.derainer),
            ("dem", &mut self.dem),
            ("generator", &mut self.generator),
            ("discriminator", &mut self.discriminator),
        ]
    }
}

/// Everything needed to continue training bit-for-bit.
pub struct TrainState {
    pub stage: TrainingStage,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed steps.
    pub step: u64,
    /// Epoch count at which stage two began.
    pub transition_epoch: Option<usize>,
    pub forced_transition: bool,
    pub networks: Networks,
    optimizers: Optimizers,
    pub sampler: UnpairedSampler,
    pub crop_rng: ChaCha8Rng,
    pub validation_history: Vec<ValidationRecord>,
}

const CROP_STREAM: u64 = 0x6372_6f70;

impl TrainState {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.train.seed;
        let networks = Networks::new(&cfg.model, seed, cfg.train.precision.dtype())?;
        let adam = cfg.adam();
        let optimizers = Optimizers {
            derainer: Adam::new(networks.derainer.params(), adam)?,
            dem: Adam::new(networks.dem.params(), adam)?,
            generator: Adam::new(networks.generator.params(), adam)?,
            discriminator: Adam::new(networks.discriminator.params(), adam)?,
        };
        Ok(Self {
            stage: TrainingStage::RecyclingStage,
            epoch: 0,
            step: 0,
            transition_epoch: None,
            forced_transition: false,
            networks,
            optimizers,
            sampler: UnpairedSampler::new(seed),
            crop_rng: ChaCha8Rng::seed_from_u64(seed ^ CROP_STREAM),
            validation_history: Vec::new(),
        })
    }

    pub fn dtype(&self) -> DType {
        self.networks.derainer.params().vars().first().map(|v| v.dtype()).unwrap_or(DType::F32)
    }

    /// SHA-256 digests of all four networks' parameters, concatenated.
    pub fn fingerprint(&self) -> Result<String> {
        self.networks.fingerprint()
    }

    pub fn to_archive(&self, cfg: &RunConfig) -> Result<Archive> {
        let mut tensors = Vec::new();
        let mut adam_steps = serde_json::Map::new();
        for ((_, params), (name, opt)) in self.networks.param_sets().into_iter().zip(self.optimizers.all()) {
            let (t, m, v) = opt.state();
            adam_steps.insert(name.to_string(), t.into());
            for (i, (pname, var)) in params.iter().enumerate() {
                tensors.push((pname.to_string(), var.as_tensor().clone()));
                tensors.push((format!("adam.m.{pname}"), m[i].clone()));
                tensors.push((format!("adam.v.{pname}"), v[i].clone()));
            }
        }
        let meta = serde_json::json!({
            "stage": self.stage,
            "epoch": self.epoch,
            "step": self.step,
            "transition_epoch": self.transition_epoch,
            "forced_transition": self.forced_transition,
            "sampler": self.sampler,
            "crop_rng": self.crop_rng,
            "validation_history": self.validation_history,
            "adam_steps": adam_steps,
            "config": cfg,
            "config_hash": cfg.config_hash(),
        });
        Ok(Archive { meta, tensors })
    }

    /// Rebuilds a state from an archive; the configuration must describe the same networks.
    pub fn from_archive(archive: &Archive, cfg: &RunConfig) -> Result<Self> {
        let mut state = Self::new(cfg)?;
        let meta = &archive.meta;
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::Checkpoint(format!("missing field {k}")));
        let parse = |k: &str| -> Result<serde_json::Value> { field(k) };
        state.stage = serde_json::from_value(parse("stage")?)?;
        state.epoch = serde_json::from_value(parse("epoch")?)?;
        state.step = serde_json::from_value(parse("step")?)?;
        state.transition_epoch = serde_json::from_value(parse("transition_epoch")?)?;
        state.forced_transition = serde_json::from_value(parse("forced_transition")?)?;
        state.sampler = serde_json::from_value(parse("sampler")?)?;
        state.crop_rng = serde_json::from_value(parse("crop_rng")?)?;
        state.validation_history = serde_json::from_value(parse("validation_history")?)?;
        let steps: std::collections::BTreeMap<String, u64> = serde_json::from_value(parse("adam_steps")?)?;
        let dtype = state.dtype();
        let load = |name: &str| -> Result<Tensor> { Ok(archive.tensor(name)?.to_dtype(dtype)?) };
        let sets: Vec<ParamSet> = state.networks.param_sets().iter().map(|(_, p)| (*p).clone()).collect();
        for (params, (name, opt)) in sets.iter().zip(state.optimizers.all_mut()) {
            let mut m = Vec::new();
            let mut v = Vec::new();
            for (pname, var) in params.iter() {
                let t = load(pname)?;
                if t.dims() != var.dims() {
                    return Err(Error::Checkpoint(format!("{pname}: stored {:?}, expected {:?}", t.dims(), var.dims())));
                }
                var.set(&t)?;
                m.push(load(&format!("adam.m.{pname}"))?);
                v.push(load(&format!("adam.v.{pname}"))?);
            }
            let t = *steps.get(name).ok_or_else(|| Error::Checkpoint(format!("missing optimizer steps for {name}")))?;
            opt.restore(t, m, v)?;
        }
        Ok(state)
    }
}

/// Summary of one optimization step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub gen_loss: f64,
    pub disc_loss: f64,
    /// Offers made this step, in batch order.
    pub offers: Vec<(SampleId, UpdateOutcome)>,
    /// Batch samples that had a reward target.
    pub rewarded: usize,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn stack(images: &[ImageTensor], dtype: DType) -> Result<Tensor> {
    let refs: Vec<&ImageTensor> = images.iter().collect();
    ImageTensor::stack(&refs, dtype, &Device::Cpu)
}

fn index_tensor(indices: &[usize]) -> Result<Tensor> {
    Ok(Tensor::from_vec(indices.iter().map(|&i| i as u32).collect::<Vec<_>>(), indices.len(), &Device::Cpu)?)
}

pub fn stage_one_step(state: &mut TrainState, cfg: &RunConfig, batch: &UnpairedBatch, sink: &dyn RewardSink) -> Result<StepOutcome> {
    if state.stage != TrainingStage::RecyclingStage {
        return Err(Error::Stage("stage-one step requested during stage two".into()));
    }
    train_step(state, cfg, batch, sink)
}

pub fn stage_two_step(state: &mut TrainState, cfg: &RunConfig, batch: &UnpairedBatch, sink: &dyn RewardSink) -> Result<StepOutcome> {
    if state.stage != TrainingStage::SelfReinforcementStage {
        return Err(Error::Stage("stage-two step requested during stage one".into()));
    }
    train_step(state, cfg, batch, sink)
}

/// One step in the state's current stage, with step context on errors.
pub fn train_step(state: &mut TrainState, cfg: &RunConfig, batch: &UnpairedBatch, sink: &dyn RewardSink) -> Result<StepOutcome> {
    step_inner(state, cfg, batch, sink).map_err(|e| Error::Step {
        epoch: state.epoch,
        step: state.step,
        source: Box::new(e),
    })
}

fn step_inner(state: &mut TrainState, cfg: &RunConfig, batch: &UnpairedBatch, sink: &dyn RewardSink) -> Result<StepOutcome> {
    if batch.is_empty() || batch.clean.len() != batch.rainy.len() {
        return Err(Error::Data("batch needs equally many clean and rainy samples".into()));
    }
    let stage = state.stage;
    let stage_two = stage == TrainingStage::SelfReinforcementStage;
    let reward_path = stage_two && cfg.sr.dem_switch == DemSwitch::RewardPath;
    let frozen_gan = stage_two && cfg.train.freeze_gan_in_stage2;
    let p = cfg.train.patch_size;
    let dtype = state.dtype();
    let objective = cfg.objective();

    // crops: clean first, then rainy, from the crop stream
    let mut clean_crops = Vec::with_capacity(batch.len());
    for img in &batch.clean {
        let (top, left) = crop_offset(img.height(), img.width(), p, &mut state.crop_rng)?;
        clean_crops.push(img.window(top, left, p)?);
    }
    let mut rainy_crops = Vec::with_capacity(batch.len());
    let mut windows = Vec::with_capacity(batch.len());
    for (_, img) in &batch.rainy {
        let (top, left) = crop_offset(img.height(), img.width(), p, &mut state.crop_rng)?;
        rainy_crops.push(img.window(top, left, p)?);
        windows.push((top, left));
    }

    // rewards are read before this step's offers; stage one never reads them
    let mut reward_rows: Vec<Option<ImageTensor>> = vec![None; batch.len()];
    if stage_two {
        for (i, (id, _)) in batch.rainy.iter().enumerate() {
            if let Some(entry) = sink.get(id) {
                let (top, left) = windows[i];
                reward_rows[i] = Some(entry.image.window(top, left, p)?);
            }
        }
    }
    let reward_idx: Vec<usize> = (0..batch.len()).filter(|&i| reward_rows[i].is_some()).collect();
    let reward_tensor = if reward_idx.is_empty() {
        None
    } else {
        let imgs: Vec<ImageTensor> = reward_idx.iter().map(|&i| reward_rows[i].clone().expect("present")).collect();
        Some(stack(&imgs, dtype)?)
    };

    let nets = &state.networks;
    let n = batch.len();
    let b_u = stack(&clean_crops, dtype)?;
    let o_r = stack(&rainy_crops, dtype)?;

    let dem_rewards: Vec<Option<Tensor>> = match (&reward_tensor, reward_path) {
        (Some(rt), true) => {
            let mut rows = vec![None; n];
            for (k, &i) in reward_idx.iter().enumerate() {
                rows[i] = Some(rt.narrow(0, k, 1)?);
            }
            rows
        }
        _ => vec![None; n],
    };
    let switch = if reward_path { DemSwitch::RewardPath } else { DemSwitch::EstimatorPath };
    let rain_info = nets.dem.rain_info(&o_r, &dem_rewards, switch)?;

    let o_u1 = nets.generator.generate(&b_u, &rain_info)?;
    let derained = nets.derainer.forward(&Tensor::cat(&[&o_r, &o_u1], 0)?)?;
    let b_r = derained.narrow(0, 0, n)?;
    let b_u1 = derained.narrow(0, n, n)?;

    // remaining generator calls in one batch: G(B_u1), G(B_r) and G(B_rw) on the reward path.
    // The adversarial objective is minimized over G (and the DEM feeding it); the
    // derainer is shaped only by its metric losses and L_re, so its outputs enter
    // these calls detached.
    let mut g_clean = vec![b_u1.detach(), b_r.detach()];
    let mut g_info = vec![rain_info.clone(), rain_info.clone()];
    let rw_in_term4 = reward_path && reward_tensor.is_some();
    if rw_in_term4 {
        g_clean.push(reward_tensor.clone().expect("present"));
        g_info.push(rain_info.index_select(&index_tensor(&reward_idx)?, 0)?);
    }
    let generated = nets.generator.generate(&Tensor::cat(&g_clean, 0)?, &Tensor::cat(&g_info, 0)?)?;
    let g_bu1 = generated.narrow(0, 0, n)?;
    let o_r1 = generated.narrow(0, n, n)?;
    let term4 = if rw_in_term4 {
        let g_rw = generated.narrow(0, 2 * n, reward_idx.len())?;
        let mut rows = Vec::with_capacity(n);
        let mut k = 0;
        for i in 0..n {
            if reward_idx.get(k) == Some(&i) {
                rows.push(g_rw.narrow(0, k, 1)?);
                k += 1;
            } else {
                rows.push(o_r1.narrow(0, i, 1)?);
            }
        }
        Tensor::cat(&rows, 0)?
    } else {
        o_r1.clone()
    };
    let o_gen = match objective.operands {
        losses::AdvOperands::Paper4 => vec![o_u1.clone(), g_bu1, o_r1, term4],
        losses::AdvOperands::Single => vec![o_r1],
    };

    let flow = FlowImages {
        b_u,
        o_u1,
        b_u1,
        o_r,
        b_r: b_r.clone(),
        b_rw: if stage_two {
            reward_tensor.map(|images| RewardTargets {
                indices: reward_idx.clone(),
                images,
            })
        } else {
            None
        },
        o_gen,
    };

    // offers: full-frame derained outputs, detached copies
    let mut offers = Vec::with_capacity(n);
    let derained_rows = ImageTensor::unstack(&b_r.detach())?;
    for (i, (id, img)) in batch.rainy.iter().enumerate() {
        let candidate = if img.height() == p && img.width() == p {
            derained_rows[i].clone()
        } else {
            derain(nets.derainer.as_ref(), img)?
        };
        offers.push((id.clone(), sink.offer(id, &candidate, state.step)));
    }

    // discriminator first, then the generator side against the updated discriminator
    let disc_loss = losses::discriminator_side(&flow, &objective, &nets.discriminator)?;
    if !frozen_gan {
        let grads = disc_loss.backward()?;
        state.optimizers.discriminator.step(&grads)?;
    }
    let nets = &state.networks;
    let gen_loss = losses::generator_side(&flow, &objective, &nets.discriminator, stage)?;
    let grads = gen_loss.backward()?;
    state.optimizers.derainer.step(&grads)?;
    state.optimizers.dem.step(&grads)?;
    if !frozen_gan {
        state.optimizers.generator.step(&grads)?;
    }

    let (gen_loss, disc_loss) = (scalar(&gen_loss)?, scalar(&disc_loss)?);
    if !gen_loss.is_finite() || !disc_loss.is_finite() {
        return Err(Error::Stage(format!("non-finite loss (gen {gen_loss}, disc {disc_loss})")));
    }
    state.step += 1;
    Ok(StepOutcome {
        gen_loss,
        disc_loss,
        offers,
        rewarded: reward_idx.len(),
    })
}

fn window_range(records: &[&ValidationRecord], window: usize) -> Option<(f64, f64)> {
    if records.len() < window {
        return None;
    }
    let tail = &records[records.len() - window..];
    let range = |f: fn(&ValidationRecord) -> f64| {
        let (lo, hi) = tail.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(f(r)), hi.max(f(r))));
        hi - lo
    };
    Some((range(|r| r.psnr_db), range(|r| r.ssim)))
}

/// True when both metrics moved less than their epsilon over the last `window` records.
pub fn plateaued(records: &[&ValidationRecord], window: usize, eps_psnr: f64, eps_ssim: f64) -> bool {
    window_range(records, window).is_some_and(|(dp, ds)| dp < eps_psnr && ds < eps_ssim)
}

/// Stage-transition rule: enough epochs, enough reward coverage and a validation plateau.
pub fn should_transition(history: &[ValidationRecord], epoch: usize, coverage: f64, cfg: &RunConfig) -> bool {
    let t = &cfg.transition;
    let refs: Vec<&ValidationRecord> = history.iter().collect();
    epoch >= t.min_epochs && coverage >= t.min_reward_coverage && plateaued(&refs, t.window, t.epsilon_psnr, t.epsilon_ssim)
}

/// Builds the configured scorer.
pub fn build_scorer(cfg: &RunConfig) -> Result<Arc<dyn IqaScorer>> {
    Ok(match cfg.scorer.kind {
        ScorerKind::Reference => Arc::new(ReferenceScorer::default()),
        ScorerKind::External => {
            let cmd = cfg.scorer.command.as_deref().ok_or_else(|| Error::Config("scorer.command missing".into()))?;
            Arc::new(ExternalScorer::new(cmd, cfg.scorer.lower_is_better)?)
        }
    })
}

/// Loads or synthesizes the configured dataset.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let d = &cfg.data;
    match d.source {
        DataSource::Synthetic => SyntheticSpec {
            image_size: d.image_size,
            clean_count: d.clean_count,
            rainy_count: d.rainy_count,
            val_count: d.val_count,
            seed: d.seed,
            rain: cfg.rain.clone(),
        }
        .build(),
        DataSource::Directory => {
            let dir = |p: &Option<PathBuf>, key: &str| p.clone().ok_or_else(|| Error::Config(format!("{key} missing")));
            let clean = ingest_directory(&dir(&d.clean_dir, "data.clean_dir")?, PoolKind::Clean)?.to_rgb()?;
            let rainy = ingest_directory(&dir(&d.rainy_dir, "data.rainy_dir")?, PoolKind::Rainy)?.to_rgb()?;
            let (pairs, skipped) = evaluation::ingest_paired(&dir(&d.val_root, "data.val_root")?)?;
            if skipped > 0 {
                log::warn!("skipped {skipped} unusable validation pairs");
            }
            Ok(Dataset {
                clean,
                rainy,
                validation: pairs.into_iter().map(|s| (s.id, s.rainy, s.clean)).collect(),
            })
        }
    }
}

/// Outcome of a full training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub out_dir: PathBuf,
    pub epochs: usize,
    pub steps: u64,
    pub stage_reached: TrainingStage,
    pub transition_epoch: Option<usize>,
    pub forced_transition: bool,
    /// Validation metrics at the last stage-one epoch.
    pub stage_one_psnr: f64,
    pub stage_one_ssim: f64,
    pub final_psnr: f64,
    pub final_ssim: f64,
    pub reward_coverage: f64,
    pub mean_reward: Option<f64>,
    pub validation_history: Vec<ValidationRecord>,
}

pub const VALIDATION_CSV: &str = "validation_history.csv";
pub const REWARD_SCORES_CSV: &str = "reward_scores.csv";
pub const REWARD_EVENTS_CSV: &str = "reward_events.csv";
pub const REPORT_JSON: &str = "report.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const STATE_FILE: &str = "state.ckpt";

/// A training run: configuration, data, reward store and state.
pub struct Trainer {
    pub cfg: RunConfig,
    pub data: Dataset,
    pub store: RewardStore,
    pub state: TrainState,
    validation: Vec<PairedSample>,
    events_logged: usize,
}

impl Trainer {
    pub fn new(cfg: RunConfig, data: Dataset, scorer: Arc<dyn IqaScorer>) -> Result<Self> {
        let state = TrainState::new(&cfg)?;
        Self::assemble(cfg, data, RewardStore::new(scorer), state)
    }

    /// Continues from a checkpoint written by [`Trainer::save_checkpoint`].
    pub fn resume(cfg: RunConfig, data: Dataset, scorer: Arc<dyn IqaScorer>, state_file: &Path) -> Result<Self> {
        let archive = checkpoint::read(state_file)?;
        let stored_hash = archive.meta.get("config_hash").and_then(|v| v.as_str()).unwrap_or_default();
        if stored_hash != cfg.config_hash() {
            log::warn!("resuming with a configuration that differs from the checkpoint's");
        }
        let state = TrainState::from_archive(&archive, &cfg)?;
        let dir = state_file.parent().unwrap_or(Path::new("."));
        let store = RewardStore::restore(dir, scorer)?;
        Self::assemble(cfg, data, store, state)
    }

    fn assemble(cfg: RunConfig, data: Dataset, store: RewardStore, state: TrainState) -> Result<Self> {
        let p = cfg.train.patch_size;
        for item in data.clean.items().iter().chain(data.rainy.items()) {
            if item.image.height() < p || item.image.width() < p {
                return Err(Error::Data(format!(
                    "sample {} is {}x{}, smaller than train.patch_size {p}",
                    item.id,
                    item.image.height(),
                    item.image.width()
                )));
            }
        }
        if data.validation.is_empty() {
            return Err(Error::Data("no validation pairs".into()));
        }
        let validation = data
            .validation
            .iter()
            .map(|(id, rainy, clean)| PairedSample {
                id: id.clone(),
                rainy: rainy.clone(),
                clean: clean.clone(),
            })
            .collect();
        Ok(Self {
            cfg,
            data,
            store,
            state,
            validation,
            events_logged: 0,
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.cfg.run.out_dir
    }

    pub fn steps_per_epoch(&self) -> usize {
        match self.cfg.train.steps_per_epoch {
            0 => self.data.rainy.len().div_ceil(self.cfg.train.batch_size),
            n => n,
        }
    }

    /// One step on the next sampled batch.
    pub fn step(&mut self) -> Result<StepOutcome> {
        let batch = self
            .state
            .sampler
            .next_batch(&self.data.clean, &self.data.rainy, self.cfg.train.batch_size)?;
        train_step(&mut self.state, &self.cfg, &batch, &self.store)
    }

    /// Validation PSNR/SSIM of the current derainer.
    pub fn validate(&self) -> Result<(f64, f64)> {
        let report = evaluation::evaluate(self.state.networks.derainer.as_ref(), &self.validation)?;
        Ok((report.mean_psnr, report.mean_ssim))
    }

    /// Runs one epoch, validates and appends a history record.
    pub fn run_epoch(&mut self) -> Result<ValidationRecord> {
        for _ in 0..self.steps_per_epoch() {
            self.step()?;
        }
        self.state.epoch += 1;
        let (psnr_db, ssim) = self.validate()?;
        let record = ValidationRecord {
            epoch: self.state.epoch,
            stage: self.state.stage,
            psnr_db,
            ssim,
            mean_reward: self.store.mean_score(),
            reward_coverage: self.store.coverage(&self.data.rainy),
        };
        log::info!(
            "epoch {} ({:?}): psnr {:.3} dB, ssim {:.4}, coverage {:.2}",
            record.epoch,
            record.stage,
            psnr_db,
            ssim,
            record.reward_coverage
        );
        self.state.validation_history.push(record.clone());
        Ok(record)
    }

    /// Applies the stage logic after an epoch; returns false when training is done.
    pub fn advance_stage(&mut self) -> bool {
        let cfg = &self.cfg;
        let state = &mut self.state;
        match state.stage {
            TrainingStage::RecyclingStage => {
                let coverage = self.store.coverage(&self.data.rainy);
                let plateau = should_transition(&state.validation_history, state.epoch, coverage, cfg);
                let forced = !plateau && state.epoch >= cfg.train.stage1_max_epochs;
                if !(plateau || forced) {
                    return true;
                }
                if forced {
                    log::warn!("stage one reached train.stage1_max_epochs without a plateau; forcing the transition");
                }
                if !cfg.sr.enabled || cfg.train.stage2_max_epochs == 0 {
                    return false;
                }
                state.stage = TrainingStage::SelfReinforcementStage;
                state.transition_epoch = Some(state.epoch);
                state.forced_transition = forced;
                true
            }
            TrainingStage::SelfReinforcementStage => {
                let start = state.transition_epoch.unwrap_or(0);
                if state.epoch - start >= cfg.train.stage2_max_epochs {
                    return false;
                }
                let t = &cfg.transition;
                let stage_two: Vec<&ValidationRecord> = state
                    .validation_history
                    .iter()
                    .filter(|r| r.stage == TrainingStage::SelfReinforcementStage)
                    .collect();
                !(cfg.train.stage2_plateau_stop && plateaued(&stage_two, t.window, t.epsilon_psnr, t.epsilon_ssim))
            }
        }
    }

    /// Writes `checkpoints/epoch-XXXX/{state.ckpt, rewards/}` and prunes old ones.
    pub fn save_checkpoint(&self) -> Result<PathBuf> {
        let root = self.out_dir().join(CHECKPOINT_DIR);
        let dir = root.join(format!("epoch-{:04}", self.state.epoch));
        self.write_checkpoint(&dir)?;
        let mut existing: Vec<PathBuf> = fs::read_dir(&root)
            .map_err(|e| Error::io(&root, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("epoch-")))
            .collect();
        existing.sort();
        let keep = self.cfg.train.checkpoint_keep;
        if existing.len() > keep {
            for old in &existing[..existing.len() - keep] {
                fs::remove_dir_all(old).map_err(|e| Error::io(old, e))?;
            }
        }
        Ok(dir.join(STATE_FILE))
    }

    /// Writes the state and reward snapshot into `dir`.
    pub fn write_checkpoint(&self, dir: &Path) -> Result<PathBuf> {
        let bytes = checkpoint::encode(&self.state.to_archive(&self.cfg)?)?;
        let path = dir.join(STATE_FILE);
        checkpoint::write_atomic(&path, &bytes)?;
        self.store.snapshot(dir)?;
        Ok(path)
    }

    fn append_events(&mut self) -> Result<()> {
        let events = self.store.events();
        let path = self.out_dir().join(REWARD_EVENTS_CSV);
        let fresh = !path.exists();
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut out = String::new();
        if fresh {
            out.push_str("step,sample_id,score\n");
        }
        for RewardEvent { sample_id, step, score } in &events[self.events_logged..] {
            out.push_str(&format!("{step},{sample_id},{score}\n"));
        }
        file.write_all(out.as_bytes()).map_err(|e| Error::io(&path, e))?;
        self.events_logged = events.len();
        Ok(())
    }

    fn write_histories(&self) -> Result<()> {
        let dir = self.out_dir();
        let mut val = String::from("epoch,stage,psnr_db,ssim\n");
        let mut rewards = String::from("epoch,stage,mean_score,coverage\n");
        for r in &self.state.validation_history {
            let stage = stage_label(r.stage);
            val.push_str(&format!("{},{stage},{},{}\n", r.epoch, r.psnr_db, r.ssim));
            let mean = r.mean_reward.map(|m| m.to_string()).unwrap_or_default();
            rewards.push_str(&format!("{},{stage},{mean},{}\n", r.epoch, r.reward_coverage));
        }
        for (name, text) in [(VALIDATION_CSV, val), (REWARD_SCORES_CSV, rewards)] {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn report(&self) -> Result<RunReport> {
        let h = &self.state.validation_history;
        let last = h.last().ok_or_else(|| Error::Stage("no completed epochs".into()))?;
        let stage_one = h
            .iter()
            .rev()
            .find(|r| r.stage == TrainingStage::RecyclingStage)
            .unwrap_or(last);
        Ok(RunReport {
            config_hash: self.cfg.config_hash(),
            out_dir: self.out_dir().to_path_buf(),
            epochs: self.state.epoch,
            steps: self.state.step,
            stage_reached: self.state.stage,
            transition_epoch: self.state.transition_epoch,
            forced_transition: self.state.forced_transition,
            stage_one_psnr: stage_one.psnr_db,
            stage_one_ssim: stage_one.ssim,
            final_psnr: last.psnr_db,
            final_ssim: last.ssim,
            reward_coverage: self.store.coverage(&self.data.rainy),
            mean_reward: self.store.mean_score(),
            validation_history: h.clone(),
        })
    }

    /// Trains until stage two finishes (or stage one, when self-reinforcement is off).
    ///
    /// On a step failure the current state is written to `checkpoints/abort/`.
    pub fn run(&mut self) -> Result<RunReport> {
        self.run_with(|_| Ok(()))
    }

    /// [`Trainer::run`], calling `after_epoch` once each epoch's checkpoint and
    /// histories are on disk.
    pub fn run_with(&mut self, mut after_epoch: impl FnMut(&Trainer) -> Result<()>) -> Result<RunReport> {
        let dir = self.out_dir().to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let config_path = dir.join("config.toml");
        fs::write(&config_path, self.cfg.to_toml_string()?).map_err(|e| Error::io(&config_path, e))?;
        let mut running = self.state.validation_history.is_empty() || self.advance_stage_resumed();
        while running {
            if let Err(e) = self.run_epoch() {
                let abort = dir.join(CHECKPOINT_DIR).join("abort");
                match self.write_checkpoint(&abort) {
                    Ok(p) => log::error!("training aborted; state written to {}", p.display()),
                    Err(w) => log::error!("training aborted and the abort checkpoint failed: {w}"),
                }
                return Err(e);
            }
            running = self.advance_stage();
            self.save_checkpoint()?;
            self.append_events()?;
            self.write_histories()?;
            after_epoch(self)?;
        }
        let report = self.report()?;
        let path = dir.join(REPORT_JSON);
        fs::write(&path, serde_json::to_vec_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
        Ok(report)
    }

    /// Whether a resumed run still has epochs left.
    fn advance_stage_resumed(&self) -> bool {
        let cfg = &self.cfg;
        let state = &self.state;
        match state.stage {
            TrainingStage::RecyclingStage => true,
            TrainingStage::SelfReinforcementStage => {
                let start = state.transition_epoch.unwrap_or(0);
                let t = &cfg.transition;
                let stage_two: Vec<&ValidationRecord> = state
                    .validation_history
                    .iter()
                    .filter(|r| r.stage == TrainingStage::SelfReinforcementStage)
                    .collect();
                state.epoch - start < cfg.train.stage2_max_epochs
                    && !(cfg.train.stage2_plateau_stop && plateaued(&stage_two, t.window, t.epsilon_psnr, t.epsilon_ssim))
            }
        }
    }
}

pub fn stage_label(stage: TrainingStage) -> &'static str {
    match stage {
        TrainingStage::RecyclingStage => "recycling",
        TrainingStage::SelfReinforcementStage => "self_reinforcement",
    }
}

/// Loads data and scorer from the configuration and trains, optionally resuming.
pub fn run(cfg: &RunConfig, resume: Option<&Path>) -> Result<RunReport> {
    let data = load_dataset(cfg)?;
    let scorer = build_scorer(cfg)?;
    let mut trainer = match resume {
        Some(path) => Trainer::resume(cfg.clone(), data, scorer, path)?,
        None => Trainer::new(cfg.clone(), data, scorer)?,
    };
    trainer.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::models::ArchConfig;
    use crate::reward_store::RewardEntry;
    use std::collections::BTreeMap;
    use std::sync::Mutex;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model = ArchConfig {
            derainer_channels: 4,
            derainer_blocks: 1,
            dem_channels: 4,
            gen_channels: 4,
            gen_blocks: 1,
            disc_channels: 4,
        };
        cfg.train.patch_size = 16;
        cfg.train.batch_size = 2;
        cfg.loss.ssim_window = 7;
        cfg.data.image_size = 16;
        cfg.data.clean_count = 6;
        cfg.data.rainy_count = 6;
        cfg.data.val_count = 2;
        cfg.train.seed = 5;
        cfg
    }

    fn data(cfg: &RunConfig) -> Dataset {
        load_dataset(cfg).unwrap()
    }

    fn batch(state: &mut TrainState, cfg: &RunConfig, d: &Dataset) -> UnpairedBatch {
        state.sampler.next_batch(&d.clean, &d.rainy, cfg.train.batch_size).unwrap()
    }

    fn store() -> RewardStore {
        RewardStore::new(Arc::new(ReferenceScorer::default()))
    }

    /// Records offers verbatim and serves fixed rewards.
    #[derive(Default)]
    struct Recorder {
        offers: Mutex<Vec<(SampleId, ImageTensor)>>,
        rewards: BTreeMap<SampleId, ImageTensor>,
    }

    impl RewardSink for Recorder {
        fn offer(&self, id: &SampleId, candidate: &ImageTensor, _step: u64) -> UpdateOutcome {
            self.offers.lock().unwrap().push((id.clone(), candidate.clone()));
            UpdateOutcome::Inserted { score: 0.0 }
        }

        fn get(&self, id: &SampleId) -> Option<RewardEntry> {
            self.rewards.get(id).map(|img| RewardEntry {
                sample_id: id.clone(),
                image: Arc::new(img.clone()),
                score: 0.0,
                updated_at: 0,
            })
        }
    }

    fn param_sets(state: &TrainState) -> Vec<Vec<f64>> {
        state.networks.param_sets().iter().map(|(_, p)| p.flat_values().unwrap()).collect()
    }

    #[test]
    fn one_step_moves_every_network_and_fills_the_store() {
        let cfg = tiny();
        let d = data(&cfg);
        let mut state = TrainState::new(&cfg).unwrap();
        let b = batch(&mut state, &cfg, &d);
        let before = param_sets(&state);
        let s = store();
        let out = stage_one_step(&mut state, &cfg, &b, &s).unwrap();
        let after = param_sets(&state);
        for (k, (a, b)) in before.iter().zip(&after).enumerate() {
            assert_ne!(a, b, "network {k} did not move");
        }
        assert_eq!(state.step, 1);
        assert_eq!(out.offers.len(), 2);
        for (id, _) in &b.rainy {
            assert!(s.get(id).is_some());
        }
    }

    #[test]
    fn offers_are_detached_derained_outputs() {
        let cfg = tiny();
        let d = data(&cfg);
        let mut state = TrainState::new(&cfg).unwrap();
        let b = batch(&mut state, &cfg, &d);
        // full-frame crops, so B_r is exactly the derainer on each rainy image
        let expected: Vec<ImageTensor> = {
            let o_r = stack(&b.rainy.iter().map(|(_, i)| i.clone()).collect::<Vec<_>>(), state.dtype()).unwrap();
            ImageTensor::unstack(&state.networks.derainer.forward(&o_r).unwrap()).unwrap()
        };
        let rec = Recorder::default();
        stage_one_step(&mut state, &cfg, &b, &rec).unwrap();
        let recorded = rec.offers.lock().unwrap().clone();
        assert_eq!(recorded.len(), 2);
        for ((id, img), ((bid, _), want)) in recorded.iter().zip(b.rainy.iter().zip(&expected)) {
            assert_eq!(id, bid);
            assert_eq!(img.data(), want.data());
        }
        // later steps mutate parameters; the recorded copies stay as they were
        let b2 = batch(&mut state, &cfg, &d);
        stage_one_step(&mut state, &cfg, &b2, &Recorder::default()).unwrap();
        for ((_, img), want) in rec.offers.lock().unwrap().iter().zip(&expected) {
            assert_eq!(img.data(), want.data());
        }
    }

    #[test]
    fn steps_check_the_stage() {
        let cfg = tiny();
        let d = data(&cfg);
        let mut state = TrainState::new(&cfg).unwrap();
        let b = batch(&mut state, &cfg, &d);
        assert!(matches!(stage_two_step(&mut state, &cfg, &b, &store()), Err(Error::Stage(_))));
        state.stage = TrainingStage::SelfReinforcementStage;
        assert!(matches!(stage_one_step(&mut state, &cfg, &b, &store()), Err(Error::Stage(_))));
    }

    #[test]
    fn wiping_rewards_never_changes_stage_one() {
        let cfg = tiny();
        let d = data(&cfg);
        let (mut a, mut b) = (TrainState::new(&cfg).unwrap(), TrainState::new(&cfg).unwrap());
        let (sa, sb) = (store(), store());
        for _ in 0..4 {
            let ba = batch(&mut a, &cfg, &d);
            let bb = batch(&mut b, &cfg, &d);
            stage_one_step(&mut a, &cfg, &ba, &sa).unwrap();
            stage_one_step(&mut b, &cfg, &bb, &sb).unwrap();
            sb.clear();
            assert_eq!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
        }
    }

    fn stage_two_matches_stage_one(cfg: &RunConfig, rewards_equal_b_r: bool) {
        let d = data(cfg);
        let mut one = TrainState::new(cfg).unwrap();
        let mut two = TrainState::new(cfg).unwrap();
        two.stage = TrainingStage::SelfReinforcementStage;
        let b1 = batch(&mut one, cfg, &d);
        let b2 = batch(&mut two, cfg, &d);
        let mut rec = Recorder::default();
        for (id, img) in &b2.rainy {
            let reward = if rewards_equal_b_r {
                derain_exact(&two, img)
            } else {
                ImageTensor::filled(16, 16, 3, 0.5).unwrap()
            };
            rec.rewards.insert(id.clone(), reward);
        }
        stage_one_step(&mut one, cfg, &b1, &Recorder::default()).unwrap();
        let out = stage_two_step(&mut two, cfg, &b2, &rec).unwrap();
        assert_eq!(out.rewarded, 2);
        assert_eq!(param_sets(&one), param_sets(&two));
    }

    /// Unclamped derainer output, as B_r appears inside a step.
    fn derain_exact(state: &TrainState, img: &ImageTensor) -> ImageTensor {
        let t = stack(std::slice::from_ref(img), state.dtype()).unwrap();
        ImageTensor::unstack(&state.networks.derainer.forward(&t).unwrap()).unwrap().remove(0)
    }

    #[test]
    fn zero_lambda2_reduces_stage_two_to_stage_one() {
        let mut cfg = tiny();
        cfg.loss.lambda2 = 0.0;
        cfg.sr.dem_switch = DemSwitch::EstimatorPath;
        stage_two_matches_stage_one(&cfg, false);
    }

    #[test]
    fn rewards_equal_to_b_r_add_nothing() {
        let mut cfg = tiny();
        cfg.sr.dem_switch = DemSwitch::EstimatorPath;
        stage_two_matches_stage_one(&cfg, true);
    }

    #[test]
    fn stage_two_keeps_replacing_worse_rewards() {
        let cfg = tiny();
        let d = data(&cfg);
        let mut state = TrainState::new(&cfg).unwrap();
        state.stage = TrainingStage::SelfReinforcementStage;
        let b = batch(&mut state, &cfg, &d);
        let s = store();
        // a checkerboard scores far below any smooth derained image
        let bad = ImageTensor::from_fn(16, 16, 3, |y, x, _| ((y + x) % 2) as f32).unwrap();
        for (id, _) in &b.rainy {
            s.offer(id, &bad, 0);
        }
        let out = stage_two_step(&mut state, &cfg, &b, &s).unwrap();
        assert_eq!(out.rewarded, 2);
        for (_, outcome) in &out.offers {
            assert!(matches!(outcome, UpdateOutcome::Replaced { .. }), "{outcome:?}");
        }
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let mut cfg = tiny();
        cfg.train.lr = 0.0;
        let d = data(&cfg);
        let mut state = TrainState::new(&cfg).unwrap();
        let before = state.fingerprint().unwrap();
        let b = batch(&mut state, &cfg, &d);
        stage_one_step(&mut state, &cfg, &b, &store()).unwrap();
        assert_eq!(state.fingerprint().unwrap(), before);
    }

    fn record(epoch: usize, psnr_db: f64, ssim: f64) -> ValidationRecord {
        ValidationRecord {
            epoch,
            stage: TrainingStage::RecyclingStage,
            psnr_db,
            ssim,
            mean_reward: None,
            reward_coverage: 1.0,
        }
    }

    #[test]
    fn transition_rule_examples() {
        let mut cfg = RunConfig::default();
        cfg.transition.window = 3;
        cfg.transition.epsilon_psnr = 0.05;
        cfg.transition.min_epochs = 3;
        let hist = |v: &[f64]| v.iter().enumerate().map(|(i, &p)| record(i + 1, p, 0.9)).collect::<Vec<_>>();
        assert!(!should_transition(&hist(&[30.01, 30.02]), 3, 1.0, &cfg));
        assert!(should_transition(&hist(&[30.01, 30.02, 30.00]), 3, 1.0, &cfg));
        assert!(!should_transition(&hist(&[28.0, 29.0, 30.0]), 3, 1.0, &cfg));
        // too early, too little coverage, or an unsettled SSIM all block the switch
        assert!(!should_transition(&hist(&[30.01, 30.02, 30.00]), 2, 1.0, &cfg));
        assert!(!should_transition(&hist(&[30.01, 30.02, 30.00]), 3, 0.5, &cfg));
        let mut moving = hist(&[30.01, 30.02, 30.00]);
        moving[2].ssim = 0.95;
        assert!(!should_transition(&moving, 3, 1.0, &cfg));
    }

    #[test]
    fn resume_continues_bit_for_bit() {
        let cfg = tiny();
        let d = data(&cfg);
        let s = store();
        let mut a = TrainState::new(&cfg).unwrap();
        for _ in 0..2 {
            let b = batch(&mut a, &cfg, &d);
            train_step(&mut a, &cfg, &b, &s).unwrap();
        }
        let bytes = checkpoint::encode(&a.to_archive(&cfg).unwrap()).unwrap();
        let mut b = TrainState::from_archive(&checkpoint::decode(&bytes).unwrap(), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        s.snapshot(dir.path()).unwrap();
        let s2 = RewardStore::restore(dir.path(), Arc::new(ReferenceScorer::default())).unwrap();
        for _ in 0..3 {
            let ba = batch(&mut a, &cfg, &d);
            let bb = batch(&mut b, &cfg, &d);
            train_step(&mut a, &cfg, &ba, &s).unwrap();
            train_step(&mut b, &cfg, &bb, &s2).unwrap();
        }
        assert_eq!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
        assert_eq!(a.step, b.step);
    }

    #[test]
    fn run_writes_histories_and_stages_only_advance() {
        let mut cfg = tiny();
        let dir = tempfile::tempdir().unwrap();
        cfg.run.out_dir = dir.path().to_path_buf();
        cfg.train.stage1_max_epochs = 2;
        cfg.train.stage2_max_epochs = 1;
        let report = run(&cfg, None).unwrap();
        assert_eq!(report.epochs, 3);
        assert_eq!(report.transition_epoch, Some(2));
        assert!(report.forced_transition);
        let stages: Vec<TrainingStage> = report.validation_history.iter().map(|r| r.stage).collect();
        assert!(stages.windows(2).all(|w| w[0] <= w[1]));
        let csv = fs::read_to_string(dir.path().join(VALIDATION_CSV)).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(dir.path().join(REPORT_JSON).exists());
        assert!(dir.path().join(CHECKPOINT_DIR).join("epoch-0003").join(STATE_FILE).exists());
    }
}
