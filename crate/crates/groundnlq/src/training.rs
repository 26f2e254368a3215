//! Two-stage training: pre-train on narration-derived samples, fine-tune on
//! annotated samples with freshly initialized heads. Includes the warmup +
//! cosine LR schedule, decoupled-weight-decay Adam, gradient clipping,
//! checkpointing, per-epoch Recall evaluation, and a finite-difference
//! gradient-check harness.
//!
//! Determinism: all shuffling comes from the config seed, per-sample
//! gradients are reduced in sample order, and evaluation is pure, so a
//! fixed (seed, config, dataset) reproduces metric traces exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape};
use crate::data::{
    FeatureSequence, GroundingSample, QueryTokens, Split, SyntheticDataset,
};
use crate::decode::DecodeConfig;
use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate_standard, EvalResult, GroundTruthMap, PredictionMap};
use crate::heads::{assign_labels, total_loss_on_tape, AssignmentConfig, LossBreakdown};
use crate::model::GroundingModel;
use crate::nn::{DropoutCtx, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

/// Schedule and optimizer settings. Paper-scale values: 10 total / 4 warmup
/// epochs for both stages, max LR 2e-4 (pretrain) or 1e-4 (finetune),
/// effective batch 16 (pretrain) / 4 (finetune); the desk default batch is 8.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub total_epochs: usize,
    pub warmup_epochs: usize,
    pub max_lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    /// Fresh prediction heads when starting from a checkpoint; forced on for
    /// the finetune stage.
    #[serde(default)]
    pub reinit_heads: bool,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        TrainConfig {
            stage: Stage::Pretrain,
            total_epochs: 10,
            warmup_epochs: 4,
            max_lr: 2e-4,
            batch_size: 8,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            seed: 0,
            init_checkpoint: None,
            reinit_heads: false,
        }
    }

    pub fn finetune() -> Self {
        TrainConfig {
            stage: Stage::Finetune,
            max_lr: 1e-4,
            reinit_heads: true,
            ..TrainConfig::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs < 1 {
            return Err(Error::Config("total_epochs must be >= 1".into()));
        }
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::Config(
                "warmup_epochs must be < total_epochs".into(),
            ));
        }
        if self.max_lr <= 0.0 {
            return Err(Error::Config("max_lr must be > 0".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.grad_clip <= 0.0 {
            return Err(Error::Config("grad_clip must be > 0".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }

    /// Split this stage trains on.
    pub fn train_split(&self) -> Split {
        match self.stage {
            Stage::Pretrain => Split::Pretrain,
            Stage::Finetune => Split::Train,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::pretrain()
    }
}

/// Linear warmup from 0 to `max_lr` over the warmup steps, then cosine decay
/// to 0 at the final step. Continuous at the junction.
pub fn lr_at_step(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let warmup = (cfg.warmup_epochs * steps_per_epoch).max(1);
    let total = (cfg.total_epochs * steps_per_epoch).max(warmup + 1);
    if step <= warmup {
        return cfg.max_lr * step as f64 / warmup as f64;
    }
    let step = step.min(total);
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    0.5 * cfg.max_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

// ---------------------------------------------------------------------------
// Dataset container
// ---------------------------------------------------------------------------

/// In-memory dataset: feature/query rasters by id plus the sample list.
pub struct GroundingDataset {
    pub features: BTreeMap<String, FeatureSequence>,
    pub queries: BTreeMap<String, QueryTokens>,
    pub samples: Vec<GroundingSample>,
}

impl GroundingDataset {
    pub fn new() -> Self {
        GroundingDataset {
            features: BTreeMap::new(),
            queries: BTreeMap::new(),
            samples: Vec::new(),
        }
    }

    pub fn from_synthetic(ds: SyntheticDataset) -> Self {
        let mut out = Self::new();
        out.absorb(ds);
        out
    }

    /// Merge another synthetic split into this dataset.
    pub fn absorb(&mut self, ds: SyntheticDataset) {
        for f in ds.features {
            self.features.insert(f.video_id.clone(), f);
        }
        for q in ds.queries {
            self.queries.insert(q.query_id.clone(), q);
        }
        self.samples.extend(ds.samples);
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Every sample must resolve to loaded rasters and lie inside its video.
    pub fn validate(&self) -> Result<()> {
        for s in &self.samples {
            let f = self.features.get(&s.video_id).ok_or_else(|| {
                Error::Validation(format!("sample {} references unknown video {}", s.query_id, s.video_id))
            })?;
            if !self.queries.contains_key(&s.query_id) {
                return Err(Error::Validation(format!(
                    "sample references unknown query {}",
                    s.query_id
                )));
            }
            if s.moment.end_sec > f.duration_sec() + 1e-6 || s.moment.start_sec < 0.0 {
                return Err(Error::Validation(format!(
                    "moment of {} outside its video extent",
                    s.query_id
                )));
            }
        }
        Ok(())
    }
}

impl Default for GroundingDataset {
    fn default() -> Self {
        Self::new()
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam with decoupled weight decay. Decay applies only to weight matrices
/// (more than one row); biases and norm gains are exempt.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step_count: usize,
    m: Vec<Array2<f32>>,
    v: Vec<Array2<f32>>,
}

impl AdamW {
    pub fn new(params: &ParamSet<f32>, weight_decay: f64) -> Self {
        let m = params
            .ids()
            .map(|id| Array2::zeros(params.value(id).dim()))
            .collect();
        let v = params
            .ids()
            .map(|id| Array2::zeros(params.value(id).dim()))
            .collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            m,
            v,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<f32>, grads: &[Array2<f32>], lr: f64) {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let lr32 = lr as f32;
        let eps = self.eps as f32;
        let wd = (self.weight_decay * lr) as f32;
        for (idx, id) in params.ids().enumerate().collect::<Vec<_>>() {
            let g = &grads[idx];
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            m.zip_mut_with(g, |mi, &gi| *mi = b1 * *mi + (1.0 - b1) * gi);
            v.zip_mut_with(g, |vi, &gi| *vi = b2 * *vi + (1.0 - b2) * gi * gi);
            let decay = params.value(id).nrows() > 1;
            let (bc1, bc2) = (bc1 as f32, bc2 as f32);
            let m_ref = &*m;
            let v_ref = &*v;
            params.update(id, |w| {
                for ((wi, &mi), &vi) in w.iter_mut().zip(m_ref.iter()).zip(v_ref.iter()) {
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    *wi -= lr32 * mhat / (vhat.sqrt() + eps);
                    if decay {
                        *wi -= wd * *wi;
                    }
                }
            });
        }
    }
}

/// Scale all gradients so their global L2 norm is at most `clip`.
pub fn clip_global_norm(grads: &mut [Array2<f32>], clip: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        sq += g.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > clip && norm > 0.0 {
        let scale = (clip / norm) as f32;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

// ---------------------------------------------------------------------------
// Checkpoints and metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_cls: f64,
    pub loss_reg: f64,
    pub lr: f64,
    #[serde(rename = "R1@0.3")]
    pub r1_03: f64,
    #[serde(rename = "R1@0.5")]
    pub r1_05: f64,
    #[serde(rename = "R5@0.3")]
    pub r5_03: f64,
    #[serde(rename = "R5@0.5")]
    pub r5_05: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub assignment: AssignmentConfig,
    pub decode: DecodeConfig,
    pub seed: u64,
    /// Epoch whose parameters the checkpoint holds (best val R1@0.3).
    pub epoch: usize,
    pub params: Vec<ParamInfo>,
    pub metrics: Vec<EpochMetrics>,
}

/// Parameter blob (f32 little-endian, manifest order) plus the manifest.
pub struct Checkpoint {
    pub manifest: Manifest,
    pub blob: Vec<u8>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";

impl Checkpoint {
    pub fn from_params(params: &ParamSet<f32>, manifest_rest: Manifest) -> Self {
        let mut blob = Vec::with_capacity(params.num_scalars() * 4);
        let infos: Vec<ParamInfo> = params
            .ids()
            .map(|id| {
                let v = params.value(id);
                for &x in v.iter() {
                    blob.extend_from_slice(&x.to_le_bytes());
                }
                ParamInfo {
                    name: params.name(id).to_string(),
                    rows: v.nrows(),
                    cols: v.ncols(),
                }
            })
            .collect();
        let manifest = Manifest {
            params: infos,
            ..manifest_rest
        };
        Checkpoint { manifest, blob }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| Error::Format(format!("manifest: {e}")))?;
        fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
        let blob_path = dir.join(PARAMS_FILE);
        fs::write(&blob_path, &self.blob).map_err(|e| Error::io(&blob_path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("manifest {}: {e}", manifest_path.display())))?;
        let blob_path = dir.join(PARAMS_FILE);
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        let expected: usize = manifest.params.iter().map(|p| p.rows * p.cols * 4).sum();
        if blob.len() != expected {
            return Err(Error::Format(format!(
                "parameter blob holds {} bytes, manifest implies {expected}",
                blob.len()
            )));
        }
        Ok(Checkpoint { manifest, blob })
    }

    /// Write this checkpoint's parameter values into a model. Rejects any
    /// architecture mismatch.
    pub fn load_params_into(&self, model: &mut GroundingModel<f32>) -> Result<()> {
        let mut source: ParamSet<f32> = ParamSet::new();
        let mut offset = 0usize;
        for info in &self.manifest.params {
            let n = info.rows * info.cols;
            let mut values = Vec::with_capacity(n);
            for k in 0..n {
                let at = offset + 4 * k;
                values.push(f32::from_le_bytes([
                    self.blob[at],
                    self.blob[at + 1],
                    self.blob[at + 2],
                    self.blob[at + 3],
                ]));
            }
            offset += 4 * n;
            let arr = Array2::from_shape_vec((info.rows, info.cols), values)
                .expect("blob length was checked");
            source.add(info.name.clone(), arr);
        }
        model.copy_params_from(&source)
    }

    fn check_model_config(&self, cfg: &ModelConfig) -> Result<()> {
        let m = &self.manifest.model;
        let same = m.d_model == cfg.d_model
            && m.n_heads == cfg.n_heads
            && m.window == cfg.window
            && m.n_text_blocks == cfg.n_text_blocks
            && m.n_video_blocks == cfg.n_video_blocks
            && m.n_pyramid_blocks == cfg.n_pyramid_blocks
            && m.ffn_expansion == cfg.ffn_expansion
            && m.d_video_in == cfg.d_video_in
            && m.d_text_in == cfg.d_text_in
            && m.variant == cfg.variant;
        if !same {
            return Err(Error::Config(
                "checkpoint model configuration does not match the requested one".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

fn sample_pass(
    model: &GroundingModel<f32>,
    dataset: &GroundingDataset,
    sample: &GroundingSample,
    acfg: &AssignmentConfig,
    dropout_seed: Option<u64>,
) -> Result<(LossBreakdown, Vec<Option<Array2<f32>>>)> {
    let video = dataset
        .features
        .get(&sample.video_id)
        .ok_or_else(|| Error::Validation(format!("unknown video {}", sample.video_id)))?;
    let query = dataset
        .queries
        .get(&sample.query_id)
        .ok_or_else(|| Error::Validation(format!("unknown query {}", sample.query_id)))?;

    let mut drop = match dropout_seed {
        Some(s) if model.cfg.dropout > 0.0 => {
            DropoutCtx::train(model.cfg.dropout, ChaCha8Rng::seed_from_u64(s))
        }
        _ => DropoutCtx::eval(),
    };

    let mut tape: Tape<f32> = Tape::new();
    let (outputs, bind) = model.forward(
        &mut tape,
        &video.data,
        &video.valid_mask,
        &query.data,
        &query.valid_mask,
        &mut drop,
    )?;
    let targets = assign_labels(
        video.data.nrows(),
        video.snippet_duration_sec,
        sample.moment,
        acfg,
    )?;
    let loss = total_loss_on_tape(&mut tape, &outputs, &targets, acfg);
    let breakdown = LossBreakdown {
        classification: tape.value(loss.classification)[[0, 0]] as f64,
        regression: tape.value(loss.regression)[[0, 0]] as f64,
        total: tape.value(loss.total)[[0, 0]] as f64,
        n_foreground: loss.n_foreground,
    };
    let grads = tape.backward(loss.total);
    let per_param: Vec<Option<Array2<f32>>> = model
        .params
        .ids()
        .map(|id| bind.bound(id).and_then(|val| grads.get(val).cloned()))
        .collect();
    Ok((breakdown, per_param))
}

/// Ranked predictions for every sample of a split (parallel per query,
/// deterministic merge).
pub fn predict_split(
    model: &GroundingModel<f32>,
    dataset: &GroundingDataset,
    split: Split,
    dcfg: &DecodeConfig,
) -> Result<PredictionMap> {
    let indices = dataset.indices_of(split);
    let results: Vec<Result<(String, Vec<crate::decode::Candidate>)>> = indices
        .par_iter()
        .map(|&i| {
            let s = &dataset.samples[i];
            let video = dataset
                .features
                .get(&s.video_id)
                .ok_or_else(|| Error::Validation(format!("unknown video {}", s.video_id)))?;
            let query = dataset
                .queries
                .get(&s.query_id)
                .ok_or_else(|| Error::Validation(format!("unknown query {}", s.query_id)))?;
            Ok((s.query_id.clone(), model.predict(video, query, dcfg)?))
        })
        .collect();
    let mut map = PredictionMap::new();
    for r in results {
        let (q, cands) = r?;
        map.insert(q, cands);
    }
    Ok(map)
}

pub fn ground_truth_of(dataset: &GroundingDataset, split: Split) -> GroundTruthMap {
    dataset
        .samples
        .iter()
        .filter(|s| s.split == split)
        .map(|s| (s.query_id.clone(), s.moment))
        .collect()
}

/// Evaluate Recall on one split.
pub fn evaluate_split(
    model: &GroundingModel<f32>,
    dataset: &GroundingDataset,
    split: Split,
    dcfg: &DecodeConfig,
) -> Result<EvalResult> {
    let preds = predict_split(model, dataset, split, dcfg)?;
    let gts = ground_truth_of(dataset, split);
    evaluate_standard(&preds, &gts)
}

/// Build the stage's starting model: fresh init, then (when a checkpoint is
/// given) parameters from it: all of them, or all but the heads when the
/// stage re-initializes heads.
pub fn init_stage_model(
    tcfg: &TrainConfig,
    mcfg: &ModelConfig,
    checkpoint: Option<&Checkpoint>,
) -> Result<GroundingModel<f32>> {
    let mut model = GroundingModel::new(mcfg.clone(), tcfg.seed)?;
    if let Some(ckpt) = checkpoint {
        ckpt.check_model_config(mcfg)?;
        let reinit = tcfg.reinit_heads || tcfg.stage == Stage::Finetune;
        if reinit {
            let mut donor = GroundingModel::new(mcfg.clone(), tcfg.seed)?;
            ckpt.load_params_into(&mut donor)?;
            model.copy_encoder_params_from(&donor.params)?;
        } else {
            ckpt.load_params_into(&mut model)?;
        }
    }
    Ok(model)
}

/// Options that do not affect the learned function, only reporting.
pub struct RunOptions<'a> {
    /// Where to write `metrics.jsonl` and the checkpoint; nothing is written
    /// when absent.
    pub out_dir: Option<&'a Path>,
    /// Evaluate the val split every N epochs (1 = every epoch).
    pub eval_every: usize,
    /// Stop early once val R1@0.5 reaches this value.
    pub stop_at_r1_05: Option<f64>,
    /// Log progress to stderr.
    pub verbose: bool,
}

impl Default for RunOptions<'_> {
    fn default() -> Self {
        RunOptions {
            out_dir: None,
            eval_every: 1,
            stop_at_r1_05: None,
            verbose: false,
        }
    }
}

/// Train one stage and return the checkpoint of the best epoch by val
/// R1@0.3 (earliest epoch on ties). The manifest records per-epoch metrics.
pub fn run_stage(
    tcfg: &TrainConfig,
    mcfg: &ModelConfig,
    acfg: &AssignmentConfig,
    dcfg: &DecodeConfig,
    dataset: &GroundingDataset,
    opts: &RunOptions,
) -> Result<Checkpoint> {
    tcfg.validate()?;
    mcfg.validate()?;
    acfg.validate()?;
    dcfg.validate()?;
    dataset.validate()?;

    let init_ckpt = match &tcfg.init_checkpoint {
        Some(path) => Some(Checkpoint::load(path)?),
        None => None,
    };
    let mut model = init_stage_model(tcfg, mcfg, init_ckpt.as_ref())?;

    let train_indices = dataset.indices_of(tcfg.train_split());
    if train_indices.is_empty() {
        return Err(Error::Validation(format!(
            "no samples for split {:?}",
            tcfg.train_split()
        )));
    }
    let have_val = !dataset.indices_of(Split::Val).is_empty();
    let steps_per_epoch = train_indices.len().div_ceil(tcfg.batch_size);

    let mut optimizer = AdamW::new(&model.params, tcfg.weight_decay);
    let mut metrics: Vec<EpochMetrics> = Vec::new();
    let mut best: Option<(f64, usize, Vec<Array2<f32>>)> = None;
    let mut global_step = 0usize;

    let mut order_rng = ChaCha8Rng::seed_from_u64(tcfg.seed);

    for epoch in 0..tcfg.total_epochs {
        let mut order = train_indices.clone();
        order.shuffle(&mut order_rng);

        let mut epoch_cls = 0.0f64;
        let mut epoch_reg = 0.0f64;
        let mut last_lr = 0.0f64;
        for batch in order.chunks(tcfg.batch_size) {
            let passes: Vec<Result<(LossBreakdown, Vec<Option<Array2<f32>>>)>> = batch
                .par_iter()
                .map(|&i| {
                    let dropout_seed = tcfg
                        .seed
                        .wrapping_mul(0x9e3779b97f4a7c15)
                        .wrapping_add((global_step as u64) << 20)
                        .wrapping_add(i as u64);
                    sample_pass(&model, dataset, &dataset.samples[i], acfg, Some(dropout_seed))
                })
                .collect();

            let mut grads: Vec<Array2<f32>> = model
                .params
                .ids()
                .map(|id| Array2::zeros(model.params.value(id).dim()))
                .collect();
            let scale = 1.0 / batch.len() as f32;
            for pass in passes {
                let (bd, per_param) = pass?;
                if !bd.total.is_finite() {
                    let diag = format!(
                        "loss became non-finite at epoch {epoch}, step {global_step}"
                    );
                    if let Some(dir) = opts.out_dir {
                        let _ = fs::create_dir_all(dir);
                        let _ = fs::write(dir.join("diagnostic.json"), format!(
                            "{{\"error\":\"{diag}\",\"epoch\":{epoch},\"step\":{global_step}}}"
                        ));
                        write_metrics_log(dir, &metrics)?;
                    }
                    return Err(Error::Validation(diag));
                }
                epoch_cls += bd.classification;
                epoch_reg += bd.regression;
                for (acc, g) in grads.iter_mut().zip(per_param) {
                    if let Some(g) = g {
                        acc.zip_mut_with(&g, |a, &b| *a += b * scale);
                    }
                }
            }
            clip_global_norm(&mut grads, tcfg.grad_clip);
            let lr = lr_at_step(global_step, steps_per_epoch, tcfg);
            optimizer.step(&mut model.params, &grads, lr);
            last_lr = lr;
            global_step += 1;
        }

        let n_train = train_indices.len() as f64;
        let run_eval = have_val && (epoch % opts.eval_every.max(1) == 0 || epoch + 1 == tcfg.total_epochs);
        let eval = if run_eval {
            evaluate_split(&model, dataset, Split::Val, dcfg)?
        } else {
            EvalResult {
                r1_03: 0.0,
                r1_05: 0.0,
                r5_03: 0.0,
                r5_05: 0.0,
                n_queries: 0,
            }
        };
        let record = EpochMetrics {
            epoch,
            loss_cls: epoch_cls / n_train,
            loss_reg: epoch_reg / n_train,
            lr: last_lr,
            r1_03: eval.r1_03,
            r1_05: eval.r1_05,
            r5_03: eval.r5_03,
            r5_05: eval.r5_05,
        };
        if opts.verbose {
            eprintln!(
                "epoch {:>3}: loss_cls {:.4} loss_reg {:.4} lr {:.2e} R1@0.3 {:.3} R1@0.5 {:.3}",
                epoch, record.loss_cls, record.loss_reg, record.lr, record.r1_03, record.r1_05
            );
        }
        metrics.push(record);

        // no val split: keep the last epoch instead
        let better = match &best {
            None => true,
            Some((best_r, _, _)) if have_val => run_eval && eval.r1_03 > *best_r,
            Some(_) => true,
        };
        if better {
            let snapshot: Vec<Array2<f32>> = model
                .params
                .ids()
                .map(|id| model.params.value(id).as_ref().clone())
                .collect();
            best = Some((if run_eval { eval.r1_03 } else { 0.0 }, epoch, snapshot));
        }

        if let (Some(target), true) = (opts.stop_at_r1_05, run_eval) {
            if eval.r1_05 >= target {
                break;
            }
        }
    }

    let (_, best_epoch, snapshot) = best.expect("at least one epoch ran");
    for (id, values) in model.params.ids().zip(snapshot) {
        model.params.set(id, values);
    }

    let manifest = Manifest {
        model: mcfg.clone(),
        train: tcfg.clone(),
        assignment: acfg.clone(),
        decode: dcfg.clone(),
        seed: tcfg.seed,
        epoch: best_epoch,
        params: Vec::new(),
        metrics,
    };
    let checkpoint = Checkpoint::from_params(&model.params, manifest);

    if let Some(dir) = opts.out_dir {
        checkpoint.save(dir)?;
        write_metrics_log(dir, &checkpoint.manifest.metrics)?;
    }
    Ok(checkpoint)
}

fn write_metrics_log(dir: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = String::new();
    for m in metrics {
        out.push_str(&serde_json::to_string(m).expect("metrics serialize"));
        out.push('\n');
    }
    let path = dir.join(METRICS_FILE);
    fs::write(&path, out).map_err(|e| Error::io(&path, e))
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub precision: Precision,
    pub tolerance: f64,
    /// Max relative error over well-conditioned probes.
    pub max_rel_err: f64,
    pub worst_param: String,
    pub n_probes: usize,
    /// Probes rejected by the smoothness (Richardson) test: finite
    /// differences are meaningless across a ReLU/max kink.
    pub n_skipped_nonsmooth: usize,
    /// Probes with near-zero gradient checked absolutely instead.
    pub n_abs_checked: usize,
    pub passed: bool,
}

struct GradCheckCase {
    videos: Vec<Array2<f32>>,
    tokens: Vec<Array2<f32>>,
    moments: Vec<crate::data::Moment>,
    snippet: f64,
}

fn gradcheck_case(mcfg: &ModelConfig, seed: u64, t: usize) -> GradCheckCase {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_samples = 2;
    let snippet = 1.0;
    let mut videos = Vec::new();
    let mut tokens = Vec::new();
    let mut moments = Vec::new();
    for _ in 0..n_samples {
        videos.push(Array2::from_shape_fn((t, mcfg.d_video_in), |_| {
            rng.gen_range(-1.0f32..1.0)
        }));
        let l = rng.gen_range(2..5);
        tokens.push(Array2::from_shape_fn((l, mcfg.d_text_in), |_| {
            rng.gen_range(-1.0f32..1.0)
        }));
        let a = rng.gen_range(0.0..(t as f64) * 0.5);
        let w = rng.gen_range(1.0..(t as f64) * 0.45);
        moments.push(crate::data::Moment {
            start_sec: a,
            end_sec: (a + w).min(t as f64 - 1e-3),
        });
    }
    GradCheckCase {
        videos,
        tokens,
        moments,
        snippet,
    }
}

/// Batch loss plus the regime fingerprint of the evaluation (which smooth
/// piece of the loss surface the forward pass ran on).
fn case_loss<F: Real>(
    model: &GroundingModel<F>,
    case: &GradCheckCase,
    acfg: &AssignmentConfig,
) -> Result<(f64, u64)> {
    let mut total = 0.0;
    let mut fingerprint: u64 = 0;
    for k in 0..case.videos.len() {
        let mut tape: Tape<F> = Tape::new();
        let t = case.videos[k].nrows();
        let l = case.tokens[k].nrows();
        let (outputs, _) = model.forward(
            &mut tape,
            &case.videos[k],
            &vec![true; t],
            &case.tokens[k],
            &vec![true; l],
            &mut DropoutCtx::eval(),
        )?;
        let targets = assign_labels(t, case.snippet, case.moments[k], acfg)?;
        let loss = total_loss_on_tape(&mut tape, &outputs, &targets, acfg);
        total += tape.value(loss.total)[[0, 0]].to_f64();
        fingerprint = fingerprint.rotate_left(17) ^ tape.regime_fingerprint();
    }
    Ok((total / case.videos.len() as f64, fingerprint))
}

fn case_grads<F: Real>(
    model: &GroundingModel<F>,
    case: &GradCheckCase,
    acfg: &AssignmentConfig,
) -> Result<Vec<Array2<f64>>> {
    let mut acc: Vec<Array2<f64>> = model
        .params
        .ids()
        .map(|id| Array2::zeros(model.params.value(id).dim()))
        .collect();
    let scale = 1.0 / case.videos.len() as f64;
    for k in 0..case.videos.len() {
        let mut tape: Tape<F> = Tape::new();
        let t = case.videos[k].nrows();
        let l = case.tokens[k].nrows();
        let (outputs, bind) = model.forward(
            &mut tape,
            &case.videos[k],
            &vec![true; t],
            &case.tokens[k],
            &vec![true; l],
            &mut DropoutCtx::eval(),
        )?;
        let targets = assign_labels(t, case.snippet, case.moments[k], acfg)?;
        let loss = total_loss_on_tape(&mut tape, &outputs, &targets, acfg);
        let grads = tape.backward(loss.total);
        for (idx, id) in model.params.ids().enumerate() {
            if let Some(val) = bind.bound(id) {
                if let Some(g) = grads.get(val) {
                    acc[idx].zip_mut_with(g, |a, &b| *a += b.to_f64() * scale);
                }
            }
        }
    }
    Ok(acc)
}

/// Compare analytic gradients of the end-to-end loss against central finite
/// differences (h = 1e-3) on an f64 twin of the model, probing a
/// deterministic spread of elements per parameter tensor. In f32 mode the
/// analytic side runs in f32 while the oracle stays f64, so the oracle's
/// own noise cannot mask (or fake) failures. Probes where the Richardson
/// consistency test detects a kink are re-drawn; near-zero gradients are
/// checked absolutely.
pub fn grad_check(
    mcfg: &ModelConfig,
    seed: u64,
    tolerance: f64,
    precision: Precision,
) -> Result<GradCheckReport> {
    mcfg.validate()?;
    let acfg = AssignmentConfig::for_levels(mcfg.n_levels());
    let case = gradcheck_case(mcfg, seed, 16);

    // analytic gradients at the requested precision, as f64
    let analytic: Vec<Array2<f64>> = match precision {
        Precision::F64 => {
            let model: GroundingModel<f64> = GroundingModel::new(mcfg.clone(), seed)?;
            case_grads(&model, &case, &acfg)?
        }
        Precision::F32 => {
            let model: GroundingModel<f32> = GroundingModel::new(mcfg.clone(), seed)?;
            case_grads(&model, &case, &acfg)?
        }
    };

    // the FD oracle always runs on an f64 model holding the same values
    let mut oracle: GroundingModel<f64> = GroundingModel::new(mcfg.clone(), seed)?;
    if precision == Precision::F32 {
        let f32_model: GroundingModel<f32> = GroundingModel::new(mcfg.clone(), seed)?;
        for id in oracle.params.ids() {
            let name = oracle.params.name(id).to_string();
            let src = f32_model.params.id(&name).expect("same architecture");
            let cast = f32_model.params.value(src).mapv(|v| v as f64);
            oracle.params.set(id, cast);
        }
    }

    let h = 1e-3;
    let probes_per_tensor = 3usize;
    let (grad_floor, abs_tol): (f64, f64) = match precision {
        Precision::F64 => (3e-4, 1e-8),
        Precision::F32 => (1e-3, 1e-4),
    };

    let (_, base_fingerprint) = case_loss(&oracle, &case, &acfg)?;

    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    let mut n_probes = 0usize;
    let mut n_skipped = 0usize;
    let mut n_abs = 0usize;
    let mut abs_failed: Option<String> = None;

    let ids: Vec<_> = oracle.params.ids().collect();
    for (idx, id) in ids.iter().enumerate() {
        let (rows, cols) = oracle.params.value(*id).dim();
        let len = rows * cols;
        let name = oracle.params.name(*id).to_string();
        let mut accepted = 0usize;
        let mut attempt = 0usize;
        let max_attempts = probes_per_tensor * 6;
        while accepted < probes_per_tensor.min(len) && attempt < max_attempts {
            let flat = (attempt * len / max_attempts + attempt) % len;
            attempt += 1;
            let (i, j) = (flat / cols, flat % cols);

            let mut fd_at = |delta: f64| -> Result<(f64, u64)> {
                let original = oracle.params.value(*id)[[i, j]];
                oracle.params.update(*id, |w| w[[i, j]] = original + delta);
                let out = case_loss(&oracle, &case, &acfg);
                oracle.params.update(*id, |w| w[[i, j]] = original);
                out
            };
            // Richardson pair at one window scale. Valid only when every
            // evaluation point stays on the base regime (no ReLU/max flip
            // inside the window) and the h and h/2 differences are
            // consistent; otherwise an FD oracle is meaningless here.
            let mut estimate = |h: f64| -> Result<Option<f64>> {
                let (f_ph, r1) = fd_at(h)?;
                let (f_mh, r2) = fd_at(-h)?;
                let (f_ph2, r3) = fd_at(h / 2.0)?;
                let (f_mh2, r4) = fd_at(-h / 2.0)?;
                if [r1, r2, r3, r4].iter().any(|r| *r != base_fingerprint) {
                    return Ok(None);
                }
                let n1 = (f_ph - f_mh) / (2.0 * h);
                let n2 = (f_ph2 - f_mh2) / h;
                if (n1 - n2).abs() > 1e-8f64.max(1e-3 * n1.abs().max(n2.abs())) {
                    return Ok(None);
                }
                Ok(Some((4.0 * n2 - n1) / 3.0))
            };
            // a kink-crossed window shrinks away; retry once at h/4
            let numeric = match estimate(h)? {
                Some(n) => n,
                None => match estimate(h / 4.0)? {
                    Some(n) => n,
                    None => {
                        n_skipped += 1;
                        continue;
                    }
                },
            };

            let a = analytic[idx][[i, j]];
            n_probes += 1;
            accepted += 1;
            let denom = a.abs().max(numeric.abs());
            if denom < grad_floor {
                n_abs += 1;
                if (a - numeric).abs() > abs_tol {
                    abs_failed = Some(format!("{name}[{i},{j}]"));
                }
            } else {
                let rel = (a - numeric).abs() / denom;
                if rel > max_rel {
                    max_rel = rel;
                    worst = format!("{name}[{i},{j}]");
                }
            }
        }
    }

    let passed = max_rel <= tolerance && abs_failed.is_none();
    Ok(GradCheckReport {
        precision,
        tolerance,
        max_rel_err: max_rel,
        worst_param: if let Some(w) = abs_failed { w } else { worst },
        n_probes,
        n_skipped_nonsmooth: n_skipped,
        n_abs_checked: n_abs,
        passed,
    })
}

/// Per-parameter gradients of one tiny batch with the given assignment
/// config (exposes the dead-branch behavior for tests).
pub fn batch_param_grads_f32(
    mcfg: &ModelConfig,
    acfg: &AssignmentConfig,
    seed: u64,
) -> Result<Vec<(String, Array2<f64>)>> {
    let model: GroundingModel<f32> = GroundingModel::new(mcfg.clone(), seed)?;
    let case = gradcheck_case(mcfg, seed, 12);
    let grads = case_grads(&model, &case, acfg)?;
    Ok(model
        .params
        .ids()
        .zip(grads)
        .map(|(id, g)| (model.params.name(id).to_string(), g))
        .collect())
}
