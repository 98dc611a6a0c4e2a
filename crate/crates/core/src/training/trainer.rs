use ndarray::ArrayView3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{apply_augment, draw_augment, AugmentDraw};
use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::optim::Sgd;
use super::schedule::poly_lr;
use super::subsample::subsample_labels;
use super::tta::tta_predict;
use crate::data::BiTemporalSample;
use crate::error::{Error, Result};
use crate::metrics::{ConfusionCounts, EvaluationReport};
use crate::model::{ChangeModel, SamCd};
use crate::scalar::Scalar;
use crate::semantic::ChangePrediction;
use crate::tensor::Graph;

const SHUFFLE_STREAM: usize = usize::MAX;

/// Independent random stream for `(seed, epoch, index)`.
pub fn stream_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(epoch as u64).to_le_bytes());
    key[16..24].copy_from_slice(&(index as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss_ce: f64,
    pub loss_t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps completed at the end of the epoch.
    pub step: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub loss_ce: f64,
    pub loss_t: f64,
    #[serde(rename = "val_mIoU")]
    pub val_miou: Option<f64>,
    #[serde(rename = "val_F1")]
    pub val_f1: Option<f64>,
    pub train_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S: Scalar> {
    pub model: SamCd<S>,
    pub final_checkpoint: Checkpoint,
    /// Checkpoint of the epoch with the best validation mIoU.
    pub best_checkpoint: Option<Checkpoint>,
    pub log: Vec<LogRecord>,
}

/// Stepwise SGD driver. Data order and augmentation depend only on the
/// seed, the epoch and the sample index, so a run resumed from any
/// checkpoint replays the same steps.
#[derive(Debug, Clone)]
pub struct Trainer<S: Scalar> {
    model: SamCd<S>,
    config: TrainConfig,
    optimizer: Sgd<S>,
    iteration: usize,
    train: Vec<BiTemporalSample>,
    val: Vec<BiTemporalSample>,
    best: Option<(f64, Checkpoint)>,
}

impl<S: Scalar> Trainer<S> {
    /// `train` is subsampled to `config.label_fraction` here.
    pub fn new(
        mut model: SamCd<S>,
        config: TrainConfig,
        train: Vec<BiTemporalSample>,
        val: Vec<BiTemporalSample>,
    ) -> Result<Self> {
        config.validate()?;
        model.config().encoder.validate()?;
        if train.is_empty() {
            return Err(Error::Validation("training set is empty".into()));
        }
        if let Some(c) = config.crop_size {
            if c % 32 != 0 {
                return Err(Error::Config(format!("crop size {c} must be a multiple of 32")));
            }
        }
        model.set_temperature(config.temperature)?;
        let all: Vec<usize> = (0..train.len()).collect();
        let keep = if config.label_fraction < 1.0 {
            subsample_labels(&all, config.label_fraction, config.seed)?
        } else {
            all
        };
        let subset: Vec<BiTemporalSample> = keep.iter().map(|&i| train[i].clone()).collect();
        let optimizer = Sgd::new(config.momentum, config.weight_decay);
        Ok(Self { model, config, optimizer, iteration: 0, train: subset, val, best: None })
    }

    /// Continue from a checkpoint. `train` must be the full training set the
    /// checkpointed run started from.
    pub fn resume(checkpoint: &Checkpoint, train: Vec<BiTemporalSample>, val: Vec<BiTemporalSample>) -> Result<Self> {
        let model = checkpoint.restore_model::<S>()?;
        let optimizer = checkpoint.restore_optimizer(&model)?;
        let mut trainer = Self::new(model, checkpoint.train.clone(), train, val)?;
        if trainer.train.len() != checkpoint.train_size {
            return Err(Error::Incompatible {
                field: "train_size".into(),
                detail: format!(
                    "checkpoint trained on {} samples, resumed with {}",
                    checkpoint.train_size,
                    trainer.train.len()
                ),
            });
        }
        if checkpoint.iteration > trainer.total_steps() {
            return Err(Error::Range(format!(
                "checkpoint iteration {} beyond schedule length {}",
                checkpoint.iteration,
                trainer.total_steps()
            )));
        }
        trainer.optimizer = optimizer;
        trainer.iteration = checkpoint.iteration;
        Ok(trainer)
    }

    pub fn model(&self) -> &SamCd<S> {
        &self.model
    }

    pub fn into_model(self) -> SamCd<S> {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn train_size(&self) -> usize {
        self.train.len()
    }

    pub fn train_samples(&self) -> &[BiTemporalSample] {
        &self.train
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.config.steps_per_epoch(self.train.len())
    }

    pub fn total_steps(&self) -> usize {
        self.config.epochs * self.steps_per_epoch()
    }

    pub fn is_finished(&self) -> bool {
        self.iteration >= self.total_steps()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model, &self.config, &self.optimizer, self.iteration, self.train.len())
    }

    fn batch_for(&self, iteration: usize) -> (usize, Vec<usize>) {
        let spe = self.steps_per_epoch();
        let epoch = iteration / spe;
        let within = iteration % spe;
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut stream_rng(self.config.seed, epoch, SHUFFLE_STREAM));
        let start = within * self.config.batch_size;
        let end = (start + self.config.batch_size).min(order.len());
        (epoch, order[start..end].to_vec())
    }

    fn augmented(&self, epoch: usize, index: usize) -> Result<BiTemporalSample> {
        let sample = &self.train[index];
        if self.config.crop_size.is_none() && !self.config.flip {
            return Ok(sample.clone());
        }
        let mut rng = stream_rng(self.config.seed, epoch, index);
        let draw = draw_augment(&mut rng, sample.size(), self.config.crop_size, self.config.flip)?;
        if draw == AugmentDraw::IDENTITY {
            return Ok(sample.clone());
        }
        apply_augment(sample, &draw)
    }

    /// One optimizer step on the next batch.
    pub fn step(&mut self) -> Result<StepRecord> {
        let total = self.total_steps();
        if self.iteration >= total {
            return Err(Error::Range(format!("all {total} scheduled steps are done")));
        }
        let step = self.iteration;
        let lr = poly_lr(step, total, self.config.base_lr, self.config.poly_power)?;
        let (epoch, indices) = self.batch_for(step);
        let batch = indices
            .iter()
            .map(|&i| self.augmented(epoch, i))
            .collect::<Result<Vec<_>>>()?;
        let t1: Vec<ArrayView3<f32>> = batch.iter().map(|s| s.image_t1.view()).collect();
        let t2: Vec<ArrayView3<f32>> = batch.iter().map(|s| s.image_t2.view()).collect();
        let labels: Vec<_> = batch.iter().map(|s| &s.label).collect();

        let pyramid = self.model.encode_pairs(&t1, &t2)?;
        let mut g = Graph::new(true);
        let out = self.model.forward(&mut g, &pyramid)?;
        let losses = self.model.losses(&mut g, &out, &labels, self.config.lambda_t)?;
        let (loss, loss_ce, loss_t) = (
            g.scalar(losses.total).as_f64(),
            g.scalar(losses.supervision).as_f64(),
            g.scalar(losses.temporal).as_f64(),
        );
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                message: format!("non-finite loss (L_ce = {loss_ce}, L_t = {loss_t})"),
            });
        }
        let grads = g.backward(losses.total)?;
        let observations = g.take_observations();
        let store = self.model.store_mut();
        store.apply_observations(&observations);
        self.optimizer.step(store, &grads, lr)?;
        self.iteration += 1;
        Ok(StepRecord { epoch, step, lr, loss, loss_ce, loss_t })
    }

    /// Finish the current epoch, then validate if due.
    pub fn run_epoch(&mut self, mut on_step: impl FnMut(&StepRecord)) -> Result<EpochRecord> {
        let spe = self.steps_per_epoch();
        let epoch = self.iteration / spe;
        let end = (epoch + 1) * spe;
        let (mut ce, mut lt, mut n, mut lr) = (0.0, 0.0, 0usize, 0.0);
        while self.iteration < end {
            let r = self.step()?;
            on_step(&r);
            ce += r.loss_ce;
            lt += r.loss_t;
            lr = r.lr;
            n += 1;
        }
        let last = epoch + 1 == self.config.epochs;
        let (val_miou, val_f1) = if !self.val.is_empty() && ((epoch + 1) % self.config.eval_every == 0 || last) {
            let report = evaluate(&self.model, &self.val, false)?;
            let miou = report.aggregate.miou;
            if self.best.as_ref().is_none_or(|(b, _)| miou > *b) {
                self.best = Some((miou, self.checkpoint()));
            }
            (Some(miou), Some(report.aggregate.f1))
        } else {
            (None, None)
        };
        let n = n.max(1) as f64;
        Ok(EpochRecord {
            epoch,
            step: self.iteration,
            lr,
            loss_ce: ce / n,
            loss_t: lt / n,
            val_miou,
            val_f1,
            train_size: self.train.len(),
        })
    }

    /// Train to the end of the schedule.
    pub fn fit(mut self, mut on_record: impl FnMut(&LogRecord)) -> Result<TrainOutcome<S>> {
        let mut log = Vec::new();
        while !self.is_finished() {
            let mut steps = Vec::new();
            let rec = self.run_epoch(|s| {
                let r = LogRecord::Step(*s);
                on_record(&r);
                steps.push(r);
            })?;
            log.extend(steps);
            let r = LogRecord::Epoch(rec);
            on_record(&r);
            log.push(r);
        }
        let final_checkpoint = self.checkpoint();
        Ok(TrainOutcome {
            best_checkpoint: self.best.take().map(|(_, c)| c),
            model: self.model,
            final_checkpoint,
            log,
        })
    }
}

/// Train `model` on `train`, validating on `val` after each epoch.
pub fn train<S: Scalar>(
    model: SamCd<S>,
    train: Vec<BiTemporalSample>,
    val: Vec<BiTemporalSample>,
    config: TrainConfig,
    on_record: impl FnMut(&LogRecord),
) -> Result<TrainOutcome<S>> {
    Trainer::new(model, config, train, val)?.fit(on_record)
}

/// Predict one sample, optionally with test-time augmentation.
pub fn predict_sample<S: Scalar, M: ChangeModel<S> + ?Sized>(
    model: &M,
    sample: &BiTemporalSample,
    tta: bool,
) -> Result<ChangePrediction<S>> {
    if tta {
        tta_predict(model, sample.image_t1.view(), sample.image_t2.view())
    } else {
        let p = model.predict_probability(sample.image_t1.view(), sample.image_t2.view())?;
        Ok(ChangePrediction::from_probability(p, model.threshold()))
    }
}

/// Per-image and aggregate metrics of `model` on `samples`.
pub fn evaluate<S: Scalar, M: ChangeModel<S> + ?Sized>(
    model: &M,
    samples: &[BiTemporalSample],
    tta: bool,
) -> Result<EvaluationReport> {
    let mut per_image = Vec::with_capacity(samples.len());
    for s in samples {
        let pred = predict_sample(model, s, tta)?;
        let counts = ConfusionCounts::from_maps(pred.binary.view(), s.label.changed().view())?;
        per_image.push((s.id.clone(), counts));
    }
    EvaluationReport::from_counts(per_image)
}
