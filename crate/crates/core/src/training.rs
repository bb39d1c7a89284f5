//! End-to-end optimization: schedule, freeze window, clipping, checkpoints.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{build_factor_space_with, Corpus, DatasetKind, DatasetSplit, FactorSpace, Resolution, SpaceOptions};
use crate::datasets::stratified_split;
use crate::error::{Error, Result};
use crate::evaluation::{infer_task_edges, mic_score, task_accuracy, EdgeReport, MicConfig, MicScore, DEFAULT_FP_MARGIN};
use crate::losses::{self, LossBreakdown, LossTerms, LossWeights, SupervisionKind};
use crate::model::{ModelConfig, ModelState, NoiseDraws};
use crate::nn::optim::AdamSlot;
use crate::nn::{Adam, AdamConfig, ParamGroup, ParamId, Tape, Var};
use crate::scm::{clip_a, AInit, Nonlinearity};
use crate::tasks::{build_task_dataset, find_task, TaskDataset, TaskSpec};
use crate::vae::{Architecture, NoiseConfig, Variant};

/// Consecutive aborted steps after which training gives up.
pub const MAX_CONSECUTIVE_ABORTS: u32 = 3;
const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: DatasetKind,
    pub resolution: Resolution,
    pub image_size: usize,
    pub dsprites_colors: usize,
    /// Catalog task, by 1-based index or name.
    pub task: String,
    pub variant: Variant,
    pub epochs: usize,
    pub freeze_epochs: usize,
    /// Epochs over which the supervision weight ramps in after the freeze.
    pub lu_ramp_epochs: usize,
    pub lr: f64,
    /// Fraction of all steps spent in linear warmup.
    pub warmup_fraction: f64,
    pub batch_size: usize,
    /// Defaults to the dataset's preset when absent.
    pub weights: Option<LossWeights>,
    pub noise: NoiseConfig,
    pub seed: u64,
    pub split_ratio: f64,
    pub min_positives: usize,
    pub z_dim: usize,
    /// Defaults to the factor count.
    pub concepts: Option<usize>,
    pub nonlinearity: Nonlinearity,
    pub supervision: SupervisionKind,
    pub a_init: AInit,
    /// Project A back into `[-1, 1]` after every step that changed it.
    pub clip_a: bool,
    /// Checkpoint every this many epochs (the final epoch is always saved).
    pub checkpoint_every: usize,
    /// Defaults to the dataset's network.
    pub architecture: Option<Architecture>,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::DspritesLike,
            resolution: Resolution::Mini,
            image_size: 64,
            dsprites_colors: 1,
            task: "1".into(),
            variant: Variant::Ours,
            epochs: 50,
            freeze_epochs: 10,
            lu_ramp_epochs: 5,
            lr: 1e-3,
            warmup_fraction: 0.05,
            batch_size: 128,
            weights: None,
            noise: NoiseConfig::default(),
            seed: 0,
            split_ratio: 0.7,
            min_positives: crate::tasks::MIN_TRAIN_POSITIVES,
            z_dim: 16,
            concepts: None,
            nonlinearity: Nonlinearity::default(),
            supervision: SupervisionKind::default(),
            a_init: AInit::default(),
            clip_a: true,
            checkpoint_every: 10,
            architecture: None,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn space(&self) -> Result<FactorSpace> {
        build_factor_space_with(
            self.dataset,
            self.resolution,
            SpaceOptions {
                image_size: self.image_size,
                dsprites_colors: self.dsprites_colors,
            },
        )
    }

    pub fn task_spec(&self) -> Result<TaskSpec> {
        find_task(self.dataset, &self.task)
    }

    pub fn loss_weights(&self) -> LossWeights {
        self.weights.unwrap_or_else(|| match self.dataset {
            DatasetKind::DspritesLike => LossWeights::dsprites(),
            DatasetKind::Shapes3dLike => LossWeights::shapes3d(),
        })
    }

    pub fn model_config(&self, space: &FactorSpace) -> ModelConfig {
        let m = space.m();
        ModelConfig {
            image: space.image,
            architecture: self.architecture.clone().unwrap_or_else(|| match self.dataset {
                DatasetKind::DspritesLike => Architecture::dsprites_default(),
                DatasetKind::Shapes3dLike => Architecture::shapes3d_default(),
            }),
            z_dim: self.z_dim,
            m,
            concepts: self.concepts.unwrap_or(m),
            nonlinearity: self.nonlinearity,
            supervision: self.supervision,
            a_init: self.a_init.clone(),
            variant: self.variant,
            noise: self.noise,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be positive"));
        }
        if self.freeze_epochs > self.epochs {
            return Err(Error::config(format!(
                "freeze_epochs ({}) exceeds epochs ({})",
                self.freeze_epochs, self.epochs
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::config(format!("warmup_fraction must lie in [0, 1), got {}", self.warmup_fraction)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        self.loss_weights().validate()?;
        let space = self.space()?;
        self.task_spec()?.validate(&space)?;
        self.model_config(&space).validate()
    }
}

/// Weights actually applied for `variant` during `epoch`.
///
/// Unsupervised variants only use the latent KL; supervised ones add the
/// alignment term. The full model always uses both KL terms, and switches on
/// classification and diversity once the freeze window ends while the
/// supervision weight ramps linearly over `ramp` epochs.
pub fn effective_weights(variant: Variant, base: LossWeights, epoch: usize, freeze: usize, ramp: usize) -> LossWeights {
    let mut w = LossWeights {
        beta2: base.beta2,
        ..LossWeights::ZERO
    };
    match variant {
        Variant::BetaVae | Variant::NoisyBetaVae => {}
        Variant::SupBetaVae | Variant::SupNoisyBetaVae => w.alpha = base.alpha,
        Variant::Ours => {
            w.beta1 = base.beta1;
            if epoch >= freeze {
                let ramped = (epoch + 1 - freeze) as f64 / ramp.max(1) as f64;
                w.alpha = base.alpha * ramped.min(1.0);
                w.delta = base.delta;
                w.gamma = base.gamma;
            }
        }
    }
    w
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub loss: LossBreakdown,
    /// Condition number of A, for variants with a causal layer.
    pub a_condition: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEntry {
    Step(StepRecord),
    Abort { step: u64, epoch: usize, term: String },
}

/// One minibatch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Array2<f64>,
    pub u: Array2<f64>,
    /// `batch × 1` task labels.
    pub y: Array2<f64>,
}

impl Batch {
    pub fn gather(corpus: &Corpus, data: &TaskDataset, rows: &[usize]) -> Self {
        let ids: Vec<usize> = rows.iter().map(|&r| data.indices[r]).collect();
        Self {
            x: corpus.batch_images(&ids),
            u: corpus.batch_labels(&ids),
            y: Array2::from_shape_fn((rows.len(), 1), |(i, _)| data.labels[rows[i]] as f64),
        }
    }
}

/// Split and task datasets a run trains and evaluates on.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub task: TaskSpec,
    pub split: DatasetSplit,
    pub train: TaskDataset,
    pub test: TaskDataset,
}

impl TrainData {
    pub fn prepare(config: &TrainConfig, corpus: &Corpus) -> Result<Self> {
        config.validate()?;
        let space = config.space()?;
        if corpus.space != space {
            return Err(Error::config(format!(
                "corpus ({}, {} images) does not match the configured factor space",
                corpus.space.dataset,
                corpus.len()
            )));
        }
        let task = config.task_spec()?;
        let split = stratified_split(&space, config.dataset.default_stratification(), config.split_ratio, config.seed)?;
        let (train, test) = build_task_dataset(&task, &space, &split, config.seed, config.min_positives)?;
        Ok(Self { task, split, train, test })
    }

    pub fn steps_per_epoch(&self, batch_size: usize) -> usize {
        self.train.len().div_ceil(batch_size)
    }
}

#[derive(Debug, Clone)]
pub struct RunState {
    pub config: TrainConfig,
    pub model: ModelState,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    /// Completed epochs; during training, the epoch in progress.
    pub epoch: usize,
    pub step: u64,
    pub warmup_steps: u64,
    /// Consecutive aborted steps.
    pub failures: u32,
    pub history: Vec<LogEntry>,
}

impl RunState {
    pub fn new(config: TrainConfig, data: &TrainData) -> Result<Self> {
        config.validate()?;
        let space = config.space()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = ModelState::new(config.model_config(&space), &mut rng)?;
        let adam = Adam::new(config.adam, model.store.iter().map(|(_, p)| p.value.dim()));
        let total = (config.epochs * data.steps_per_epoch(config.batch_size)) as f64;
        let warmup_steps = (config.warmup_fraction * total).ceil() as u64;
        Ok(Self {
            config,
            model,
            adam,
            rng,
            epoch: 0,
            step: 0,
            warmup_steps,
            failures: 0,
            history: Vec::new(),
        })
    }

    pub fn learning_rate(&self) -> f64 {
        if self.warmup_steps == 0 {
            return self.config.lr;
        }
        self.config.lr * ((self.step + 1) as f64 / self.warmup_steps as f64).min(1.0)
    }

    pub fn weights(&self) -> LossWeights {
        let c = &self.config;
        effective_weights(c.variant, c.loss_weights(), self.epoch, c.freeze_epochs, c.lu_ramp_epochs)
    }

    /// Whether the causal layer and predictor are updated this epoch.
    pub fn scm_unfrozen(&self) -> bool {
        self.config.variant.uses_scm() && self.epoch >= self.config.freeze_epochs
    }

    /// Parameters updated by a step in the current epoch.
    pub fn trainable(&self) -> Vec<ParamId> {
        let scm = self.scm_unfrozen();
        let model = &self.model;
        model
            .store
            .iter()
            .map(|(id, _)| id)
            .filter(|&id| {
                if id == model.prior_a || id == model.prior_b {
                    return self.config.variant.uses_labels();
                }
                match model.store.param(id).group {
                    ParamGroup::Vae => true,
                    ParamGroup::Scm => scm && !(id == model.scm.a && model.config.a_init.frozen()),
                }
            })
            .collect()
    }

    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.history.iter().filter_map(|e| match e {
            LogEntry::Step(s) => Some(s),
            LogEntry::Abort { .. } => None,
        })
    }
}

fn weighted_total(tape: &mut Tape, terms: &[(Option<Var>, f64)]) -> Var {
    let mut total: Option<Var> = None;
    for &(var, w) in terms {
        let Some(v) = var else { continue };
        if w == 0.0 {
            continue;
        }
        let scaled = if w == 1.0 { v } else { tape.scale(v, w) };
        total = Some(match total {
            Some(t) => tape.add(t, scaled),
            None => scaled,
        });
    }
    total.expect("reconstruction term is always present")
}

/// Result of a single [`train_step`].
#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Applied(StepRecord),
    /// Non-finite loss or gradient; parameters and rng are unchanged.
    Aborted { term: String },
}

/// One optimizer step on every unfrozen parameter.
///
/// A non-finite loss term or gradient aborts the step without touching the
/// model, optimizer or rng; the abort is logged and after
/// [`MAX_CONSECUTIVE_ABORTS`] in a row training fails.
pub fn train_step(state: &mut RunState, batch: &Batch) -> Result<StepOutcome> {
    let rows = batch.x.nrows();
    let rng_before = state.rng.clone();
    let draws = NoiseDraws::sample(&state.model.config, rows, &mut state.rng);
    let weights = state.weights();

    let mut tape = Tape::new();
    let p = state.model.store.bind(&mut tape);
    let x = tape.leaf(batch.x.clone());
    let u = tape.leaf(batch.u.clone());
    let y = tape.leaf(batch.y.clone());
    let f = state.model.forward(&mut tape, &p, x, Some(u), Some(y), &draws);

    let value = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar(v));
    let terms = LossTerms {
        recon: value(Some(f.recon)),
        kl_eps: value(f.kl_eps),
        kl_zc: value(Some(f.kl_zc)),
        l_u: value(f.l_u),
        l_clf: value(f.l_clf),
        l_diversity: value(f.l_diversity),
    };
    let breakdown = match losses::total_loss(terms, weights) {
        Ok(b) => b,
        Err(Error::Numerical { term }) => return abort(state, rng_before, term),
        Err(e) => return Err(e),
    };

    let total = weighted_total(
        &mut tape,
        &[
            (Some(f.recon), 1.0),
            (f.kl_eps, weights.beta1),
            (Some(f.kl_zc), weights.beta2),
            (f.l_u, weights.alpha),
            (f.l_clf, weights.delta),
            (f.l_diversity, weights.gamma),
        ],
    );
    let mut grads = tape.backward(total);
    let trainable = state.trainable();
    let mut updates = Vec::with_capacity(trainable.len());
    for id in trainable {
        let g = grads
            .take(p.var(id))
            .unwrap_or_else(|| Array2::zeros(state.model.store.get(id).dim()));
        if g.iter().any(|v| !v.is_finite()) {
            let name = state.model.store.param(id).name.clone();
            return abort(state, rng_before, format!("grad:{name}"));
        }
        updates.push((id, g));
    }

    let lr = state.learning_rate();
    let a_id = state.model.scm.a;
    let mut a_updated = false;
    for (id, g) in updates {
        state.adam.update(id.0, state.model.store.get_mut(id), &g, lr);
        a_updated |= id == a_id;
    }
    if a_updated && state.config.clip_a {
        if let Some(clipped) = clip_a(state.model.store.get(a_id)) {
            state.model.store.set(a_id, clipped);
        }
    }
    let a_condition = state
        .config
        .variant
        .uses_scm()
        .then(|| losses::back_map_condition(state.model.a()));
    let record = StepRecord {
        step: state.step,
        epoch: state.epoch,
        lr,
        weights,
        loss: breakdown,
        a_condition,
    };
    debug!(
        "step {} epoch {} loss {:.5} cond(A) {:?}",
        record.step, record.epoch, breakdown.total, a_condition
    );
    state.step += 1;
    state.failures = 0;
    state.history.push(LogEntry::Step(record.clone()));
    Ok(StepOutcome::Applied(record))
}

fn abort(state: &mut RunState, rng_before: ChaCha8Rng, term: String) -> Result<StepOutcome> {
    state.rng = rng_before;
    state.failures += 1;
    warn!("step {} aborted: non-finite {term}", state.step);
    state.history.push(LogEntry::Abort {
        step: state.step,
        epoch: state.epoch,
        term: term.clone(),
    });
    if state.failures >= MAX_CONSECUTIVE_ABORTS {
        return Err(Error::TrainingFailed(format!(
            "{} consecutive non-finite steps (last: {term})",
            state.failures
        )));
    }
    Ok(StepOutcome::Aborted { term })
}

/// One pass over the shuffled training set; advances `state.epoch`.
pub fn train_epoch(state: &mut RunState, corpus: &Corpus, data: &TrainData) -> Result<()> {
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    order.shuffle(&mut state.rng);
    for rows in order.chunks(state.config.batch_size) {
        let batch = Batch::gather(corpus, &data.train, rows);
        train_step(state, &batch)?;
    }
    state.epoch += 1;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    adam_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    config: TrainConfig,
    epoch: usize,
    step: u64,
    warmup_steps: u64,
    failures: u32,
    rng: ChaCha8Rng,
    tensors: Vec<TensorEntry>,
    history: Vec<LogEntry>,
}

fn checkpoint_bytes(state: &RunState) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut tensors = Vec::new();
    let mut bin = Vec::new();
    let mut put = |a: &Array2<f64>| {
        for v in a.iter() {
            bin.extend_from_slice(&v.to_le_bytes());
        }
    };
    for ((_, p), slot) in state.model.store.iter().zip(&state.adam.slots) {
        let (r, c) = p.value.dim();
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: [r, c],
            adam_steps: slot.steps,
        });
        put(&p.value);
        put(&slot.m);
        put(&slot.v);
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT,
        config: state.config.clone(),
        epoch: state.epoch,
        step: state.step,
        warmup_steps: state.warmup_steps,
        failures: state.failures,
        rng: state.rng.clone(),
        tensors,
        history: state.history.clone(),
    };
    Ok((serde_json::to_vec_pretty(&manifest)?, bin))
}

fn digest(manifest: &[u8], tensors: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(manifest);
    h.update(tensors);
    hex::encode(h.finalize())
}

/// SHA-256 over a checkpoint's manifest and tensor bytes.
pub fn state_hash(state: &RunState) -> Result<String> {
    let (m, t) = checkpoint_bytes(state)?;
    Ok(digest(&m, &t))
}

/// Write `state` to `dir` (`manifest.json` + `tensors.bin`, little-endian
/// f64) via a temporary sibling directory, returning the checkpoint hash.
pub fn save_checkpoint(state: &RunState, dir: &Path) -> Result<String> {
    let (manifest, tensors) = checkpoint_bytes(state)?;
    let tmp = dir.with_extension("tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    fs::write(tmp.join("manifest.json"), &manifest)?;
    fs::write(tmp.join("tensors.bin"), &tensors)?;
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&tmp, dir)?;
    Ok(digest(&manifest, &tensors))
}

pub fn checkpoint_hash(dir: &Path) -> Result<String> {
    Ok(digest(&fs::read(dir.join("manifest.json"))?, &fs::read(dir.join("tensors.bin"))?))
}

pub fn load_checkpoint(dir: &Path) -> Result<RunState> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::format(&manifest_path, format!("unsupported checkpoint format {}", manifest.format)));
    }
    let space = manifest.config.space()?;
    // Parameter init draws are overwritten below.
    let mut scratch = ChaCha8Rng::seed_from_u64(manifest.config.seed);
    let mut model = ModelState::new(manifest.config.model_config(&space), &mut scratch)?;
    let bin_path = dir.join("tensors.bin");
    let bin = fs::read(&bin_path)?;
    let ids: Vec<ParamId> = model.store.iter().map(|(id, _)| id).collect();
    if ids.len() != manifest.tensors.len() {
        return Err(Error::format(&manifest_path, "tensor count does not match the model"));
    }
    let mut offset = 0usize;
    let mut take = |shape: [usize; 2]| -> Result<Array2<f64>> {
        let n = shape[0] * shape[1];
        let end = offset + 8 * n;
        let bytes = bin
            .get(offset..end)
            .ok_or_else(|| Error::format(&bin_path, "tensor data truncated"))?;
        offset = end;
        let vals = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(Array2::from_shape_vec((shape[0], shape[1]), vals).expect("shape matches length"))
    };
    let mut slots = Vec::with_capacity(ids.len());
    for (id, entry) in ids.into_iter().zip(&manifest.tensors) {
        let p = model.store.param(id);
        if p.name != entry.name || p.value.dim() != (entry.shape[0], entry.shape[1]) {
            return Err(Error::format(&manifest_path, format!("tensor `{}` does not match the model", entry.name)));
        }
        model.store.set(id, take(entry.shape)?);
        let m = take(entry.shape)?;
        let v = take(entry.shape)?;
        slots.push(AdamSlot {
            steps: entry.adam_steps,
            m,
            v,
        });
    }
    if offset != bin.len() {
        return Err(Error::format(&bin_path, "trailing bytes after the last tensor"));
    }
    let adam = Adam {
        config: manifest.config.adam,
        slots,
    };
    Ok(RunState {
        config: manifest.config,
        model,
        adam,
        rng: manifest.rng,
        epoch: manifest.epoch,
        step: manifest.step,
        warmup_steps: manifest.warmup_steps,
        failures: manifest.failures,
        history: manifest.history,
    })
}

pub fn checkpoint_dir(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("epoch_{epoch}"))
}

/// Highest complete checkpoint epoch under `run_dir`.
pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<usize>> {
    let dir = run_dir.join("checkpoints");
    if !dir.exists() {
        return Ok(None);
    }
    let mut best = None;
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name();
        let Some(k) = name.to_str().and_then(|n| n.strip_prefix("epoch_")).and_then(|k| k.parse::<usize>().ok()) else {
            continue;
        };
        if entry.path().join("manifest.json").exists() && entry.path().join("tensors.bin").exists() {
            best = best.max(Some(k));
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub dataset: DatasetKind,
    pub task: String,
    pub variant: Variant,
    pub seed: u64,
    pub epochs: usize,
    pub steps: u64,
    pub aborted_steps: usize,
    pub train_size: usize,
    pub test_size: usize,
    /// Task accuracy; only for variants with a predictor.
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    /// Disentanglement of posterior means on the full-corpus test split.
    pub mic: MicScore,
    pub edges: Option<EdgeReport>,
    /// Mean raw classification loss over the first and last epochs.
    pub initial_l_clf: Option<f64>,
    pub final_l_clf: Option<f64>,
    /// Mean loss breakdown over the last epoch.
    pub final_losses: LossBreakdown,
    pub checkpoint_hash: String,
}

fn epoch_mean(state: &RunState, epoch: usize) -> Option<LossBreakdown> {
    let rows: Vec<&LossBreakdown> = state.steps().filter(|s| s.epoch == epoch).map(|s| &s.loss).collect();
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&LossBreakdown) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
    Some(LossBreakdown {
        recon: mean(|r| r.recon),
        kl_eps: mean(|r| r.kl_eps),
        kl_zc: mean(|r| r.kl_zc),
        l_u: mean(|r| r.l_u),
        l_clf: mean(|r| r.l_clf),
        l_diversity: mean(|r| r.l_diversity),
        total: mean(|r| r.total),
    })
}

/// Accuracy, disentanglement and edge recovery of a trained state.
pub fn evaluate(state: &RunState, corpus: &Corpus, data: &TrainData, checkpoint_hash: String) -> Result<Metrics> {
    let model = &state.model;
    let uses_scm = state.config.variant.uses_scm();
    let accuracy = |d: &TaskDataset| -> Result<Option<f64>> {
        if !uses_scm {
            return Ok(None);
        }
        let probs = model.predict_proba(&corpus.batch_images(&d.indices))?;
        task_accuracy(&probs, &d.labels).map(Some)
    };
    let test_ids = &data.split.test_indices;
    let latents = model.posterior_means(&corpus.batch_images(test_ids))?;
    let mic = mic_score(&latents, &corpus.batch_labels(test_ids), &MicConfig::default())?;
    let edges = if uses_scm {
        let true_set = data.task.relevant_positions(&corpus.space)?.into_iter().collect();
        Some(infer_task_edges(
            &data.task.name,
            model.w().view(),
            model.a(),
            &true_set,
            None,
            DEFAULT_FP_MARGIN,
        )?)
    } else {
        None
    };
    let last = state.epoch.saturating_sub(1);
    let first = epoch_mean(state, 0);
    let final_losses = epoch_mean(state, last).unwrap_or_default();
    Ok(Metrics {
        dataset: state.config.dataset,
        task: data.task.name.clone(),
        variant: state.config.variant,
        seed: state.config.seed,
        epochs: state.epoch,
        steps: state.step,
        aborted_steps: state.history.len() - state.steps().count(),
        train_size: data.train.len(),
        test_size: data.test.len(),
        train_accuracy: accuracy(&data.train)?,
        test_accuracy: accuracy(&data.test)?,
        mic,
        edges,
        initial_l_clf: uses_scm.then(|| first.map(|b| b.l_clf)).flatten(),
        final_l_clf: uses_scm.then_some(final_losses.l_clf),
        final_losses,
        checkpoint_hash,
    })
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub state: RunState,
    pub metrics: Metrics,
    /// Optimizer steps taken by this call (zero for a completed run).
    pub steps_run: u64,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn write_log(path: &Path, history: &[LogEntry]) -> Result<()> {
    let mut out = Vec::new();
    for e in history {
        serde_json::to_writer(&mut out, e)?;
        out.push(b'\n');
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Train `config` on `corpus` inside `run_dir`, resuming from the latest
/// checkpoint. A run whose `metrics.json` already exists is loaded, not
/// retrained.
pub fn fit(config: &TrainConfig, corpus: &Corpus, run_dir: &Path) -> Result<FitOutcome> {
    let data = TrainData::prepare(config, corpus)?;
    fs::create_dir_all(run_dir)?;
    let config_path = run_dir.join("config.json");
    if config_path.exists() {
        let existing: TrainConfig = serde_json::from_slice(&fs::read(&config_path)?)?;
        if existing != *config {
            return Err(Error::config(format!(
                "{} holds a run with a different configuration",
                run_dir.display()
            )));
        }
    } else {
        write_json(&config_path, config)?;
    }

    let latest = latest_checkpoint(run_dir)?.filter(|&k| k <= config.epochs);
    let metrics_path = run_dir.join("metrics.json");
    if latest == Some(config.epochs) && metrics_path.exists() {
        let state = load_checkpoint(&checkpoint_dir(run_dir, config.epochs))?;
        let metrics = serde_json::from_slice(&fs::read(&metrics_path)?)?;
        info!("{} already complete", run_dir.display());
        return Ok(FitOutcome {
            state,
            metrics,
            steps_run: 0,
        });
    }
    let mut state = match latest {
        Some(k) => {
            info!("resuming {} from epoch {k}", run_dir.display());
            load_checkpoint(&checkpoint_dir(run_dir, k))?
        }
        None => RunState::new(config.clone(), &data)?,
    };
    let start_step = state.step;
    let mut hash = match latest {
        Some(k) => checkpoint_hash(&checkpoint_dir(run_dir, k))?,
        None => String::new(),
    };
    while state.epoch < config.epochs {
        train_epoch(&mut state, corpus, &data)?;
        let e = state.epoch;
        if let Some(last) = state.steps().last() {
            info!("epoch {e}/{} loss {:.4} (l_clf {:.4})", config.epochs, last.loss.total, last.loss.l_clf);
        }
        let every = config.checkpoint_every.max(1);
        if e == config.epochs || e % every == 0 {
            hash = save_checkpoint(&state, &checkpoint_dir(run_dir, e))?;
            write_log(&run_dir.join("train_log.jsonl"), &state.history)?;
        }
    }
    if hash.is_empty() {
        hash = save_checkpoint(&state, &checkpoint_dir(run_dir, state.epoch))?;
    }
    write_log(&run_dir.join("train_log.jsonl"), &state.history)?;
    let metrics = evaluate(&state, corpus, &data, hash)?;
    if config.variant.uses_scm() {
        crate::experiment::write_heatmaps(&run_dir.join("heatmaps"), &state.model, &corpus.space.factor_names())?;
    }
    write_json(&metrics_path, &metrics)?;
    Ok(FitOutcome {
        steps_run: state.step - start_step,
        state,
        metrics,
    })
}
