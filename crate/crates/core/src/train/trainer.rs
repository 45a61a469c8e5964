//! Training loop.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, NamedTensor, TensorRole};
use super::config::RunConfig;
use super::optim::Adam;
use super::report::{evaluate_model, EvalReport};
use super::sampler::PkSampler;
use crate::error::{DropError, Result};
use crate::losses::{
    parsing_loss, pixel_accuracy, reid_ce_loss, total_loss, triplet_losses, PartTripletLoss, TripletInput,
};
use crate::memory_bank::PartsMemoryBank;
use crate::model::DropModel;
use crate::nn::scalar;
use crate::retrieval::{EmbeddingSet, RetrievalRecord};
use crate::synthetic::{augment, downsample_mask, Dataset, Sample, Split};

/// Stream salt so model init and data order use unrelated generators.
const DATA_STREAM: u64 = 0x5eed_da7a;

/// Per-epoch means of every logged quantity.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// Zero-based index of the epoch these numbers describe.
    pub epoch: usize,
    pub lr: f64,
    pub batches: usize,
    pub reid: f64,
    pub triplet: f64,
    pub parsing_ce: f64,
    pub smoothing: f64,
    pub parsing: f64,
    pub total: f64,
    pub pixel_accuracy: f64,
    /// Batches whose triplet term had no usable anchor.
    pub degenerate_batches: usize,
    /// Batches where the bank was empty before the push.
    pub skipped_triplet_batches: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub reid: f64,
    pub triplet: f64,
    pub parsing_ce: f64,
    pub smoothing: f64,
    pub parsing: f64,
    pub total: f64,
    pub pixel_accuracy: f64,
    pub degenerate: bool,
    pub skipped_triplet: bool,
}

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    #[serde(flatten)]
    pub stats: EpochStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalReport>,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub history: Vec<EpochRecord>,
    /// `(epoch, mAP)` of the best periodic evaluation under the selection mode.
    pub best: Option<(usize, f64)>,
    pub final_report: EvalReport,
}

/// Planar `u8` images to a `[B, 3, H, W]` tensor in `[0, 1]`.
pub fn image_batch(samples: &[&Sample]) -> Result<Tensor> {
    let first = samples
        .first()
        .ok_or_else(|| DropError::Dimension("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    for s in samples {
        if (s.height, s.width) != (h, w) {
            return Err(DropError::Dimension("mixed image sizes in batch".into()));
        }
        data.extend(s.image.iter().map(|&v| f32::from(v) / 255.0));
    }
    Ok(Tensor::from_vec(data, (samples.len(), 3, h, w), &Device::Cpu)?)
}

fn tensor_rows(t: &Tensor) -> Result<Vec<Vec<f32>>> {
    Ok(t.to_dtype(DType::F32)?.to_vec2::<f32>()?)
}

/// Eval-mode retrieval records (post-BN embeddings) and parsing accuracy.
pub fn embed_samples(model: &DropModel, samples: &[&Sample], batch: usize) -> Result<(Vec<RetrievalRecord>, f64)> {
    let k = model.num_parts();
    let (ph, pw) = model.config().parsing_size();
    let mut records = Vec::with_capacity(samples.len());
    let mut predicted = Vec::with_capacity(samples.len());
    let mut gt = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let out = model.forward(&image_batch(chunk)?, false)?;
        let neck = &out.heads.neck;
        let global = tensor_rows(&neck.global)?;
        let fore = tensor_rows(&neck.foreground)?;
        let parts = neck.parts.to_dtype(DType::F32)?.to_vec3::<f32>()?;
        for (i, s) in chunk.iter().enumerate() {
            records.push(RetrievalRecord {
                emb: EmbeddingSet {
                    global: global[i].clone(),
                    foreground: fore[i].clone(),
                    parts: parts[i].clone(),
                    visibility: neck.visibility[i].clone(),
                },
                identity: s.identity,
                camera: s.camera,
            });
            gt.push(downsample_mask(&s.mask, s.height, s.width, ph, pw, k + 1));
        }
        predicted.extend(out.parsing.labels()?);
    }
    Ok((records, pixel_accuracy(&predicted, &gt)))
}

pub struct Trainer {
    config: RunConfig,
    model: DropModel,
    adam: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
    bank: PartsMemoryBank,
    triplet: Box<dyn PartTripletLoss>,
    train: Vec<Sample>,
    sampler: PkSampler,
}

impl Trainer {
    pub fn new(config: &RunConfig, dataset: &Dataset) -> Result<Self> {
        config.validate()?;
        if dataset.num_parts() != config.data.num_parts {
            return Err(DropError::Config(format!(
                "dataset has {} parts, config {}",
                dataset.num_parts(),
                config.data.num_parts
            )));
        }
        let train: Vec<Sample> = dataset.split(Split::Train).into_iter().cloned().collect();
        let num_identities = dataset.num_identities();
        if let Some(s) = train.iter().find(|s| s.identity >= num_identities) {
            return Err(DropError::LabelOutOfRange {
                label: s.identity,
                classes: num_identities,
            });
        }
        let labels: Vec<usize> = train.iter().map(|s| s.identity).collect();
        let sampler = PkSampler::new(&labels, config.batch.identities, config.batch.instances)?;
        let model = DropModel::new(
            &config.model,
            config.data.num_parts,
            num_identities,
            config.loss.visibility_threshold,
            DType::F32,
            config.seed,
        )?;
        let adam = Adam::new(model.store().params(), &config.optim)?;
        let bank = PartsMemoryBank::new(
            config.bank.batches,
            config.batch.batch_size(),
            config.data.num_parts,
            config.model.reid.embedding_dim,
        )?;
        let triplet = triplet_losses().create(&config.loss.triplet, &())?;
        Ok(Self {
            config: config.clone(),
            model,
            adam,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ DATA_STREAM),
            epoch: 0,
            bank,
            triplet,
            train,
            sampler,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, dataset: &Dataset) -> Result<Self> {
        let mut t = Self::new(&ckpt.config, dataset)?;
        t.restore(ckpt)?;
        Ok(t)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn model(&self) -> &DropModel {
        &self.model
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn bank(&self) -> &PartsMemoryBank {
        &self.bank
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = Vec::new();
        let store = self.model.store();
        let mut push = |name: &str, role: TensorRole, t: &Tensor| -> Result<()> {
            tensors.push(NamedTensor {
                name: name.to_string(),
                role,
                shape: t.dims().to_vec(),
                data: t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?,
            });
            Ok(())
        };
        for (name, var) in store.params() {
            push(&name, TensorRole::Param, var.as_tensor())?;
        }
        for (name, var) in store.buffers() {
            push(&name, TensorRole::Buffer, var.as_tensor())?;
        }
        for (name, st) in &self.adam.state {
            push(name, TensorRole::AdamM, &st.m)?;
            push(name, TensorRole::AdamV, &st.v)?;
        }
        Ok(Checkpoint {
            config: self.config.clone(),
            epoch: self.epoch,
            rng: self.rng.clone(),
            adam_step: self.adam.step,
            num_identities: self.model.num_identities()?,
            tensors,
        })
    }

    fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.num_identities != self.model.num_identities()? {
            return Err(DropError::Config(format!(
                "checkpoint has {} identities, dataset {}",
                ckpt.num_identities,
                self.model.num_identities()?
            )));
        }
        let dtype = self.model.dtype();
        let load = |role: TensorRole, name: &str, like: &Tensor| -> Result<Tensor> {
            let t = ckpt
                .tensor(role, name)
                .ok_or_else(|| DropError::Format(format!("checkpoint lacks {role:?} {name}")))?;
            if t.shape != like.dims() {
                return Err(DropError::Format(format!("shape mismatch for {name}")));
            }
            Ok(Tensor::from_vec(t.data.clone(), t.shape.as_slice(), like.device())?.to_dtype(dtype)?)
        };
        let store = self.model.store();
        for (name, var) in store.params() {
            var.set(&load(TensorRole::Param, &name, var.as_tensor())?)?;
        }
        for (name, var) in store.buffers() {
            var.set(&load(TensorRole::Buffer, &name, var.as_tensor())?)?;
        }
        let names: Vec<String> = self.adam.state.keys().cloned().collect();
        for name in names {
            let st = &self.adam.state[&name];
            let m = load(TensorRole::AdamM, &name, &st.m)?;
            let v = load(TensorRole::AdamV, &name, &st.v)?;
            let st = self.adam.state.get_mut(&name).expect("known key");
            st.m = m;
            st.v = v;
        }
        self.adam.step = ckpt.adam_step;
        self.rng = ckpt.rng.clone();
        self.epoch = ckpt.epoch;
        self.bank.reset();
        Ok(())
    }

    /// Runs one epoch, optionally stopping after `max_batches`.
    pub fn train_epoch(&mut self, max_batches: Option<usize>) -> Result<EpochStats> {
        let start = Instant::now();
        let lr = self.config.optim.lr_at(self.epoch);
        if self.config.bank.reset_each_epoch {
            self.bank.reset();
        }
        let batches = self.sampler.epoch(&mut self.rng);
        let limit = max_batches.unwrap_or(usize::MAX);
        let mut stats = EpochStats {
            epoch: self.epoch,
            lr,
            ..EpochStats::default()
        };
        for (bi, idx) in batches.iter().take(limit).enumerate() {
            let b = self.train_batch(idx, lr).map_err(|e| match e {
                DropError::NonFiniteLoss { term, .. } => DropError::NonFiniteLoss { term, batch: Some(bi) },
                other => other,
            })?;
            stats.batches += 1;
            stats.reid += b.reid;
            stats.triplet += b.triplet;
            stats.parsing_ce += b.parsing_ce;
            stats.smoothing += b.smoothing;
            stats.parsing += b.parsing;
            stats.total += b.total;
            stats.pixel_accuracy += b.pixel_accuracy;
            stats.degenerate_batches += b.degenerate as usize;
            stats.skipped_triplet_batches += b.skipped_triplet as usize;
        }
        let n = stats.batches.max(1) as f64;
        for v in [
            &mut stats.reid,
            &mut stats.triplet,
            &mut stats.parsing_ce,
            &mut stats.smoothing,
            &mut stats.parsing,
            &mut stats.total,
            &mut stats.pixel_accuracy,
        ] {
            *v /= n;
        }
        stats.seconds = start.elapsed().as_secs_f64();
        self.epoch += 1;
        Ok(stats)
    }

    /// Forward, losses, backward and one optimizer step on training samples `idx`.
    pub fn train_batch(&mut self, idx: &[usize], lr: f64) -> Result<BatchStats> {
        let cfg = &self.config;
        let k = cfg.data.num_parts;
        let samples: Vec<Sample> = idx
            .iter()
            .map(|&i| augment(&self.train[i], k, &cfg.augment, &mut self.rng))
            .collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let images = image_batch(&refs)?;
        let (ph, pw) = cfg.model.parsing_size();
        let gt: Vec<Vec<u8>> = samples
            .iter()
            .map(|s| downsample_mask(&s.mask, s.height, s.width, ph, pw, k + 1))
            .collect();
        let labels: Vec<usize> = samples.iter().map(|s| s.identity).collect();

        let out = self.model.forward(&images, true)?;
        let l_reid = reid_ce_loss(&out.heads.logits, &labels, cfg.loss.epsilon_ls, cfg.loss.reid_reduction)?;
        let parts = &out.embeddings.parts;
        let visibility = &out.embeddings.visibility;
        let zero = Tensor::zeros((), parts.dtype(), parts.device())?;
        let mut skipped = false;
        let outcome = if self.triplet.uses_bank() {
            let was_empty = self.bank.is_empty();
            self.bank.push_batch(parts, visibility, &labels)?;
            if was_empty {
                skipped = true;
                None
            } else {
                let snap = self.bank.snapshot()?;
                Some(self.triplet.compute(&TripletInput::from_snapshot(&snap, &cfg.loss))?)
            }
        } else {
            Some(self.triplet.compute(&TripletInput {
                embs: parts,
                visibility,
                identities: &labels,
                anchors: 0..labels.len(),
                config: &cfg.loss,
            })?)
        };
        let degenerate = outcome.as_ref().is_some_and(|o| o.degenerate);
        let l_triplet = outcome.map(|o| o.loss).unwrap_or(zero);
        let hp = parsing_loss(&out.parsing.part_probs, &gt, &cfg.loss)?;
        let total = total_loss(&l_reid, &l_triplet, &hp.total, &cfg.loss)?;
        let grads = total.backward()?;
        self.adam.step(&grads, lr)?;
        Ok(BatchStats {
            reid: scalar(&l_reid)?,
            triplet: scalar(&l_triplet)?,
            parsing_ce: scalar(&hp.cross_entropy)?,
            smoothing: scalar(&hp.smoothing)?,
            parsing: scalar(&hp.total)?,
            total: scalar(&total)?,
            pixel_accuracy: pixel_accuracy(&out.parsing.labels()?, &gt),
            degenerate,
            skipped_triplet: skipped,
        })
    }

    pub fn evaluate(&self, dataset: &Dataset) -> Result<EvalReport> {
        evaluate_model(&self.model, dataset, &self.config.eval, self.epoch)
    }

    /// Trains the remaining epochs. With `out_dir`, appends to
    /// `metrics.jsonl` and writes `last.ckpt` and `best.ckpt`.
    pub fn fit(
        &mut self,
        dataset: &Dataset,
        out_dir: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<FitOutcome> {
        let mut history = Vec::new();
        let mut best: Option<(usize, f64)> = None;
        let mut log = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Some(OpenOptions::new().create(true).append(true).open(dir.join("metrics.jsonl"))?)
            }
            None => None,
        };
        let total = self.config.optim.epochs;
        let every = self.config.eval.every;
        let mut last_report = None;
        while self.epoch < total {
            let stats = self.train_epoch(None)?;
            let done = self.epoch;
            let eval = if (every > 0 && done % every == 0) || done == total {
                let report = self.evaluate(dataset)?;
                if let Some(row) = report.row(self.config.eval.select_mode) {
                    if best.is_none_or(|(_, m)| row.map > m) {
                        best = Some((done, row.map));
                        if let Some(dir) = out_dir {
                            self.checkpoint()?.save(&dir.join("best.ckpt"))?;
                        }
                    }
                }
                last_report = Some((done, report.clone()));
                Some(report)
            } else {
                None
            };
            let record = EpochRecord { stats, eval };
            if let Some(f) = log.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&record)?)?;
            }
            on_epoch(&record);
            history.push(record);
        }
        if let Some(dir) = out_dir {
            self.checkpoint()?.save(&dir.join("last.ckpt"))?;
        }
        let final_report = match last_report {
            Some((e, r)) if e == self.epoch => r,
            _ => self.evaluate(dataset)?,
        };
        Ok(FitOutcome {
            history,
            best,
            final_report,
        })
    }
}
