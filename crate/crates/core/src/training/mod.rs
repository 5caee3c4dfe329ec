//! Mini-batch training: Adam, a two-phase learning rate, gradient clipping
//! and early stopping on validation rsum.
//!
//! Each batch holds `B` captions of distinct images. Encoders run once per
//! item and the core scores all `B^2` image-caption pairs on one tape, so an
//! epoch costs `batches * B^2` core forward passes.

mod adam;

use std::collections::{HashSet, VecDeque};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, clip_global_norm, AdamConfig, AdamState};

use crate::autodiff::Tape;
use crate::data::{Checkpoint, Dataset, RngState, TrainState};
use crate::error::{CampError, Result};
use crate::evaluation::evaluate;
use crate::model::pipeline::{prepare, score_pairs};
use crate::model::{CampParams, GateSummary, ModelConfig, Scorer};
use crate::objectives::{self, LossConfig, LossKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Learning rate for the first `phase1_epochs` epochs.
    pub lr_phase1: f64,
    /// Learning rate afterwards.
    pub lr_phase2: f64,
    pub phase1_epochs: usize,
    pub adam: AdamConfig,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Stop after this many consecutive epochs without a better validation
    /// rsum; `None` never stops early.
    pub early_stop_patience: Option<usize>,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainConfig {
    /// 40 epochs at 2e-4 for 15 epochs, then 2e-5.
    pub fn paper() -> Self {
        Self {
            batch_size: 16,
            epochs: 40,
            lr_phase1: 2e-4,
            lr_phase2: 2e-5,
            phase1_epochs: 15,
            adam: AdamConfig::default(),
            clip_norm: Some(2.0),
            early_stop_patience: Some(10),
            seed: 0,
            loss: LossConfig::default(),
        }
    }

    /// Short schedule for the synthetic benchmark.
    pub fn desk() -> Self {
        Self {
            epochs: 30,
            lr_phase1: 2e-3,
            lr_phase2: 5e-4,
            ..Self::paper()
        }
    }

    /// Learning rate of zero-based epoch `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.phase1_epochs {
            self.lr_phase1
        } else {
            self.lr_phase2
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(CampError::Config(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        for (name, lr) in [("lr_phase1", self.lr_phase1), ("lr_phase2", self.lr_phase2)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(CampError::Config(format!("{name} must be non-negative, got {lr}")));
            }
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(CampError::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(CampError::Config(
                "adam betas must lie in [0, 1) and eps be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub val_rsum: Option<f64>,
    pub mean_pos_gate: Option<f64>,
    pub mean_neg_gate: Option<f64>,
}

/// Shuffles captions and groups them into full batches whose captions all
/// describe different images. Captions that would repeat an image are
/// deferred to the next batch; leftovers that do not fill a batch are dropped.
pub fn make_batches(caption_images: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(CampError::Config("batch size must be at least 2".into()));
    }
    let distinct: HashSet<_> = caption_images.iter().collect();
    if distinct.len() < batch_size {
        return Err(CampError::Config(format!(
            "{} distinct images cannot fill a batch of {batch_size}",
            distinct.len()
        )));
    }
    let mut order: Vec<usize> = (0..caption_images.len()).collect();
    order.shuffle(rng);
    let mut queue: VecDeque<usize> = order.into();
    let mut batches = Vec::new();
    let mut batch = Vec::with_capacity(batch_size);
    let mut used = HashSet::new();
    let mut skipped = Vec::new();
    while let Some(c) = queue.pop_front() {
        if used.insert(caption_images[c]) {
            batch.push(c);
            if batch.len() == batch_size {
                batches.push(std::mem::take(&mut batch));
                used.clear();
                for s in skipped.drain(..).rev() {
                    queue.push_front(s);
                }
            }
        } else {
            skipped.push(c);
        }
    }
    Ok(batches)
}

/// Result of one batch.
pub struct BatchOutcome<S> {
    pub loss: f64,
    pub scores: Tensor<S>,
    /// Parameter gradients in canonical order (present when requested).
    pub grads: Option<Vec<Tensor<S>>>,
    pub pos_gates: GateSummary,
    pub neg_gates: GateSummary,
}

/// Builds the batch's `B x B` score matrix and its loss; with
/// `with_grads`, also backpropagates.
pub fn run_batch<S: Scalar>(
    data: &Dataset<S>,
    batch: &[usize],
    params: &CampParams<S>,
    model: &ModelConfig,
    loss_cfg: &LossConfig,
    with_grads: bool,
) -> Result<BatchOutcome<S>> {
    let b = batch.len();
    let mut tape = if with_grads { Tape::new() } else { Tape::inference() };
    let w = params.bind(&mut tape);
    let images: Vec<_> = batch.iter().map(|&c| &data.images[data.captions[c].image]).collect();
    let captions: Vec<&[usize]> = batch.iter().map(|&c| data.captions[c].tokens.as_slice()).collect();
    let prep = prepare(&mut tape, &images, &captions, &w, model)?;
    let (mut pos, mut neg) = (GateSummary::default(), GateSummary::default());
    let scores = score_pairs(&mut tape, &prep, &w.core, model, |tape, i, j, out| {
        let g = out.gate_summary(tape, prep.captions[j].mask);
        if i == j {
            pos.merge(g);
        } else {
            neg.merge(g);
        }
    })?;
    let s = tape.stack(&scores, &[b, b])?;
    debug_assert_eq!(
        objectives::hardest_negatives(tape.value(s), loss_cfg.hardest_by),
        objectives::scan_hardest(tape.value(s), loss_cfg.hardest_by),
    );
    let l = objectives::loss(&mut tape, s, loss_cfg)?;
    let loss = tape.value(l.value).item().as_f64();
    let grads = if with_grads {
        tape.backward(l.value)?;
        let named = w.named();
        let shapes = params.named();
        Some(
            named
                .iter()
                .zip(&shapes)
                .map(|((_, &v), (_, p))| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect(),
        )
    } else {
        None
    };
    Ok(BatchOutcome {
        loss,
        scores: tape.value(s).clone(),
        grads,
        pos_gates: pos,
        neg_gates: neg,
    })
}

struct Best<S> {
    rsum: f64,
    epoch: usize,
    params: CampParams<S>,
}

/// Outcome of [`Trainer::fit`].
pub struct FitOutcome<S> {
    /// Best parameters seen by this run (absent if no epoch improved on the
    /// rsum carried over from a resumed checkpoint).
    pub best: Option<Checkpoint<S>>,
    pub history: Vec<EpochStats>,
}

/// Owns the parameters, optimizer and shuffling state of a run.
pub struct Trainer<S> {
    pub model: ModelConfig,
    pub cfg: TrainConfig,
    params: CampParams<S>,
    adam: AdamState<S>,
    rng: ChaCha8Rng,
    epoch: usize,
    best: Option<Best<S>>,
    best_rsum: Option<f64>,
    best_epoch: Option<usize>,
    stale: usize,
    forward_passes: u64,
}

impl<S: Scalar> Trainer<S> {
    /// Fresh parameters drawn from `cfg.seed`.
    pub fn new(model: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        let mut init = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = CampParams::init(&model, &mut init);
        Self::with_params(model, cfg, params)
    }

    pub fn with_params(model: ModelConfig, cfg: TrainConfig, params: CampParams<S>) -> Result<Self> {
        model.validate()?;
        cfg.validate()?;
        if cfg.loss.kind != LossKind::Ranking && model.scorer != Scorer::Mlp {
            return Err(CampError::Config(format!(
                "{:?} loss needs scores in (0, 1); use the mlp scorer or the ranking loss",
                cfg.loss.kind
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self {
            adam: AdamState::new(&params),
            model,
            params,
            rng,
            epoch: 0,
            best: None,
            best_rsum: None,
            best_epoch: None,
            stale: 0,
            forward_passes: 0,
            cfg,
        })
    }

    /// Continues a run saved by [`Trainer::checkpoint`].
    pub fn resume(ckpt: Checkpoint<S>, cfg: TrainConfig) -> Result<Self> {
        let state = ckpt
            .train_state
            .ok_or_else(|| CampError::Config("checkpoint carries no training state".into()))?;
        let mut t = Self::with_params(ckpt.config, cfg, ckpt.params)?;
        if let Some(opt) = ckpt.optimizer {
            t.adam = opt;
        }
        t.rng = state.rng.restore()?;
        t.epoch = state.epoch;
        t.best_rsum = ckpt.best_val_rsum;
        t.best_epoch = state.best_epoch;
        t.stale = state.stale_epochs;
        Ok(t)
    }

    pub fn params(&self) -> &CampParams<S> {
        &self.params
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Core forward passes run by training so far.
    pub fn forward_passes(&self) -> u64 {
        self.forward_passes
    }

    /// Batches the next epoch will use, without consuming randomness.
    pub fn peek_batches(&self, data: &Dataset<S>) -> Result<Vec<Vec<usize>>> {
        make_batches(&data.caption_images(), self.cfg.batch_size, &mut self.rng.clone())
    }

    /// One pass over `data` at the scheduled learning rate.
    pub fn train_epoch(&mut self, data: &Dataset<S>) -> Result<EpochStats> {
        let lr = self.cfg.lr_at(self.epoch);
        let batches = make_batches(&data.caption_images(), self.cfg.batch_size, &mut self.rng)?;
        let (mut loss_sum, mut pos, mut neg) = (0.0, GateSummary::default(), GateSummary::default());
        for batch in &batches {
            let out = run_batch(data, batch, &self.params, &self.model, &self.cfg.loss, true)?;
            self.forward_passes += (batch.len() * batch.len()) as u64;
            let mut grads = out.grads.expect("gradients requested");
            if let Some(c) = self.cfg.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            let grads: Vec<Option<Tensor<S>>> = grads.into_iter().map(Some).collect();
            adam_step(&mut self.params, &grads, &mut self.adam, lr, &self.cfg.adam)?;
            loss_sum += out.loss;
            pos.merge(out.pos_gates);
            neg.merge(out.neg_gates);
        }
        let stats = EpochStats {
            epoch: self.epoch,
            loss: loss_sum / batches.len() as f64,
            lr,
            val_rsum: None,
            mean_pos_gate: pos.mean(),
            mean_neg_gate: neg.mean(),
        };
        self.epoch += 1;
        Ok(stats)
    }

    /// Trains until `cfg.epochs` or early stopping, evaluating on `val` after
    /// every epoch and keeping the parameters with the best rsum.
    pub fn fit(
        &mut self,
        train: &Dataset<S>,
        val: &Dataset<S>,
        mut on_epoch: impl FnMut(&EpochStats),
    ) -> Result<FitOutcome<S>> {
        let mut history = Vec::new();
        while self.epoch < self.cfg.epochs {
            if let Some(p) = self.cfg.early_stop_patience {
                if self.stale > p {
                    break;
                }
            }
            let mut stats = self.train_epoch(train)?;
            let rsum = evaluate(val, &self.params, &self.model, 1)?.rsum;
            stats.val_rsum = Some(rsum);
            if self.best_rsum.is_none_or(|b| rsum > b) {
                self.best_rsum = Some(rsum);
                self.best_epoch = Some(stats.epoch);
                self.best = Some(Best {
                    rsum,
                    epoch: stats.epoch,
                    params: self.params.clone(),
                });
                self.stale = 0;
            } else {
                self.stale += 1;
            }
            on_epoch(&stats);
            history.push(stats);
        }
        Ok(FitOutcome {
            best: self.best_checkpoint(),
            history,
        })
    }

    /// Best parameters seen so far by this trainer.
    pub fn best_checkpoint(&self) -> Option<Checkpoint<S>> {
        self.best.as_ref().map(|b| Checkpoint {
            config: self.model.clone(),
            params: b.params.clone(),
            optimizer: None,
            best_val_rsum: Some(b.rsum),
            train_state: Some(TrainState {
                epoch: b.epoch + 1,
                best_epoch: Some(b.epoch),
                stale_epochs: 0,
                rng: RngState::capture(&self.rng),
            }),
        })
    }

    /// Complete current state, suitable for [`Trainer::resume`].
    pub fn checkpoint(&self) -> Checkpoint<S> {
        Checkpoint {
            config: self.model.clone(),
            params: self.params.clone(),
            optimizer: Some(self.adam.clone()),
            best_val_rsum: self.best_rsum,
            train_state: Some(TrainState {
                epoch: self.epoch,
                best_epoch: self.best_epoch,
                stale_epochs: self.stale,
                rng: RngState::capture(&self.rng),
            }),
        }
    }
}
