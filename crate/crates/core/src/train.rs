//! The two-stage protocol: task training, then StyleLess insertion and joint
//! fine-tuning on `L_task + α·L_Gram`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::{config_hash, Checkpoint};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, LayeredNetwork};
use crate::nn::{sgd_step, GroupMultipliers, SgdConfig, SgdState};
use crate::style::gram_loss;
use crate::tensor::Tensor;
use crate::toyscenes::{Dataset, SegSample};

pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_STYLELESS_LR_MULTIPLIER: f64 = 10.0;
pub const DEFAULT_CROP: usize = 48;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: u8,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    /// Weight of the Gram loss in stage 2.
    pub alpha: f64,
    pub styleless_lr_multiplier: f64,
    pub seed: u64,
    /// Provenance of the training data (path or dataset id).
    pub data: String,
    /// Side of the random square crop; the full image when it is not smaller.
    pub crop_size: usize,
    /// Stage 2 only: evaluate and log the Gram loss even when `alpha = 0`.
    pub track_gram: bool,
}

impl TrainConfig {
    pub fn stage1(epochs: usize, seed: u64) -> Self {
        Self {
            stage: 1,
            epochs,
            batch_size: 8,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
            alpha: DEFAULT_ALPHA,
            styleless_lr_multiplier: DEFAULT_STYLELESS_LR_MULTIPLIER,
            seed,
            data: String::new(),
            crop_size: DEFAULT_CROP,
            track_gram: true,
        }
    }

    /// Fine-tuning config for a stage-1 run of `stage1_epochs` epochs: half
    /// as many epochs (at least one), everything else shared.
    pub fn stage2_from(stage1: &TrainConfig) -> Self {
        Self {
            stage: 2,
            epochs: (stage1.epochs / 2).max(1),
            ..stage1.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.stage, 1 | 2) {
            return Err(Error::InvalidConfig(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.crop_size == 0 {
            return Err(Error::InvalidConfig("epochs, batch size and crop size must be >= 1".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::InvalidConfig(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        self.sgd(1).validate()
    }

    pub fn sgd(&self, total_steps: usize) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            poly_power: self.poly_power,
            total_steps,
            multipliers: GroupMultipliers {
                backbone: 1.0,
                styleless: self.styleless_lr_multiplier,
            },
        }
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub l_task: f64,
    /// Raw (unweighted) Gram loss; absent in stage 1.
    pub l_gram: Option<f64>,
    pub l_total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub steps: usize,
    pub last_epoch_l_task: f64,
    pub last_epoch_l_gram: Option<f64>,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    pub summary: Option<FinalMetrics>,
}

impl TrainLog {
    pub fn push(&mut self, record: StepRecord) {
        debug_assert!(self.records.last().is_none_or(|r| r.step < record.step));
        self.records.push(record);
    }

    /// JSON lines: one per step, then a `{"summary": ...}` line.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        if let Some(s) = &self.summary {
            serde_json::to_writer(&mut w, &serde_json::json!({ "summary": s }))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let mut log = TrainLog::default();
        for line in std::fs::read_to_string(path)?.lines().filter(|l| !l.trim().is_empty()) {
            let value: serde_json::Value = serde_json::from_str(line)?;
            match value.get("summary") {
                Some(s) => log.summary = Some(serde_json::from_value(s.clone())?),
                None => log.records.push(serde_json::from_value(value)?),
            }
        }
        Ok(log)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

/// Random square crop of `size` pixels (image and labels together).
fn random_crop(sample: &SegSample, size: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor<f32>, Tensor<u8>)> {
    let (c, h, w) = sample.image.dims3()?;
    if size >= h.min(w) {
        return Ok((sample.image.clone(), sample.labels.clone()));
    }
    let y0 = rng.random_range(0..=h - size);
    let x0 = rng.random_range(0..=w - size);
    let mut img = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        let plane = sample.image.channel(ch);
        for y in y0..y0 + size {
            img.extend_from_slice(&plane[y * w + x0..y * w + x0 + size]);
        }
    }
    let labels = (y0..y0 + size)
        .flat_map(|y| sample.labels.data()[y * w + x0..y * w + x0 + size].iter().copied())
        .collect();
    Ok((Tensor::new([c, size, size], img)?, Tensor::new([size, size], labels)?))
}

/// Shared SGD loop. Stage 2 adds `alpha · gram_loss` over the StyleLess
/// layers to every sample's loss.
fn run(mut net: LayeredNetwork<f32>, data: &Dataset, cfg: &TrainConfig) -> Result<(LayeredNetwork<f32>, TrainLog)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    let started = Instant::now();
    let with_gram = cfg.stage == 2 && (cfg.alpha > 0.0 || cfg.track_gram);
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let sgd = cfg.sgd(total_steps);
    let mut state = SgdState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0000_0000_0000 ^ u64::from(cfg.stage));
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let opts = ForwardOptions::default();
    let mut step = 0;
    let mut epoch_task = Vec::new();
    let mut epoch_gram = Vec::new();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        epoch_task.clear();
        epoch_gram.clear();
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let bound = net.bind(&mut tape, true);
            let inv_b = 1.0 / batch.len() as f32;
            let mut root = None;
            let (mut task_sum, mut gram_sum, mut total_sum) = (0.0f64, 0.0f64, 0.0f64);
            for &i in batch {
                let (img, labels) = random_crop(&data.samples[i], cfg.crop_size, &mut rng)?;
                let x = tape.constant(img);
                let out = bound.forward(&mut tape, x, &opts)?;
                let task = tape.softmax_cross_entropy(out.logits, &labels)?;
                let mut total = task;
                task_sum += f64::from(tape.value(task).item());
                if with_gram {
                    let g = gram_loss(&mut tape, &out.gram_pairs)?;
                    gram_sum += f64::from(tape.value(g).item());
                    if cfg.alpha > 0.0 {
                        let weighted = tape.scale(g, cfg.alpha as f32);
                        total = tape.add(task, weighted)?;
                    }
                }
                total_sum += f64::from(tape.value(total).item());
                let scaled = tape.scale(total, inv_b);
                root = Some(match root {
                    None => scaled,
                    Some(acc) => tape.add(acc, scaled)?,
                });
            }
            let n = batch.len() as f64;
            let record = StepRecord {
                step,
                epoch,
                l_task: task_sum / n,
                l_gram: with_gram.then_some(gram_sum / n),
                l_total: total_sum / n,
                lr: sgd.lr_at(step),
            };
            if !record.l_total.is_finite() {
                return Err(Error::NonFiniteLoss { step, value: record.l_total });
            }
            epoch_task.push(record.l_task);
            epoch_gram.extend(record.l_gram);
            log.push(record);

            let grads = tape.backward(root.expect("non-empty batch"))?;
            let grads: BTreeMap<String, Tensor<f32>> = bound
                .named_vars()
                .iter()
                .map(|(name, var)| (name.clone(), grads.get(*var).cloned().expect("leaf gradient")))
                .collect();
            sgd_step(&mut net.parameters_mut(), &grads, &sgd, step, &mut state)?;
            step += 1;
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    log.summary = Some(FinalMetrics {
        steps: step,
        last_epoch_l_task: mean(&epoch_task),
        last_epoch_l_gram: with_gram.then(|| mean(&epoch_gram)),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    });
    Ok((net, log))
}

/// Stage 1: train the backbone on the task loss alone.
pub fn train_stage1(net: LayeredNetwork<f32>, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if cfg.stage != 1 {
        return Err(Error::InvalidConfig(format!("train_stage1 needs stage 1, got {}", cfg.stage)));
    }
    if net.has_styleless() {
        return Err(Error::InvalidConfig("joint training from scratch is not supported; train stage 1 first".into()));
    }
    let (net, log) = run(net, data, cfg)?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(net, 1, cfg.seed, cfg.hash()?),
        log,
    })
}

/// Stage 2: insert StyleLess layers into a stage-1 model and fine-tune all
/// parameters on `L_task + α·L_Gram`.
pub fn train_stage2(ckpt: &Checkpoint, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if cfg.stage != 2 {
        return Err(Error::InvalidConfig(format!("train_stage2 needs stage 2, got {}", cfg.stage)));
    }
    if ckpt.manifest.stage != 1 || ckpt.network.has_styleless() {
        return Err(Error::InvalidConfig("stage 2 needs a stage-1 checkpoint without StyleLess layers".into()));
    }
    let mut net = ckpt.network.clone();
    net.insert_styleless(cfg.seed)?;
    let (net, log) = run(net, data, cfg)?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(net, 2, cfg.seed, cfg.hash()?),
        log,
    })
}

/// Continue task-only training of a model (no StyleLess insertion).
pub fn finetune_task_only(ckpt: &Checkpoint, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let cfg = TrainConfig { stage: 1, ..cfg.clone() };
    let (net, log) = run(ckpt.network.clone(), data, &cfg)?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(net, ckpt.manifest.stage, cfg.seed, cfg.hash()?),
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyscenes::Split;

    fn tiny(epochs: usize) -> TrainConfig {
        TrainConfig { batch_size: 4, crop_size: 32, ..TrainConfig::stage1(epochs, 3) }
    }

    #[test]
    fn crop_keeps_image_and_labels_aligned() {
        let ds = Dataset::generate(Split::Train, 1, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (img, labels) = random_crop(&ds.samples[0], 16, &mut rng).unwrap();
        assert_eq!(img.shape(), &[3, 16, 16]);
        assert_eq!(labels.shape(), &[16, 16]);
        let full = random_crop(&ds.samples[0], 64, &mut rng).unwrap();
        assert_eq!(full.0, ds.samples[0].image);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { alpha: -1.0, ..tiny(1) }.validate().is_err());
        assert!(TrainConfig { stage: 3, ..tiny(1) }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..tiny(1) }.validate().is_err());
        let s2 = TrainConfig::stage2_from(&TrainConfig::stage1(8, 0));
        assert_eq!((s2.stage, s2.epochs, s2.alpha, s2.styleless_lr_multiplier), (2, 4, 0.1, 10.0));
    }

    #[test]
    fn stage2_rejects_bad_inputs() {
        let ds = Dataset::generate(Split::Train, 2, 0).unwrap();
        let mut net = LayeredNetwork::new(0).unwrap();
        net.insert_styleless(0).unwrap();
        let with_psi = Checkpoint::new(net.clone(), 1, 0, String::new());
        let cfg = TrainConfig::stage2_from(&tiny(2));
        assert!(train_stage2(&with_psi, &ds, &cfg).is_err());
        assert!(train_stage1(net, &ds, &tiny(1)).is_err());
    }
}
