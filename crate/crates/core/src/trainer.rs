//! RMSprop training loop for the Siamese verification model.
//!
//! Each step samples a balanced pair batch, runs the twin forward passes
//! over the shared parameter map, compares descriptors through the square
//! layer and head, backpropagates the verification loss and applies the
//! RMSprop update. Everything is driven by named sub-streams of one seed,
//! so a run is bit-reproducible.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::backbone::{
    apply_stat_updates, forward_features, BackboneConfig, ModelParams, StatUpdates,
};
use crate::checkpoint::export_checkpoint;
use crate::data::augment::AugmentConfig;
use crate::data::sampler::{sample_pair_batch, PairBatch, SamplerConfig};
use crate::data::IdentityDataset;
use crate::error::{ensure_contract, Error, Result};
use crate::head::{labels_to_targets, square_layer, verification_logits, PairLabel, VerificationHead};
use crate::rng::stream_rng;
use crate::tensor::ops;
use crate::tensor::tape::{GradMap, Mode, Tape};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// RMSprop decay of the squared-gradient accumulator.
    pub rho: f64,
    /// RMSprop denominator offset.
    pub epsilon: f64,
    pub dropout_p: f64,
    pub pos_ratio: f64,
    /// Steps per epoch; defaults to one pass over the positive pairs.
    pub steps_per_epoch: Option<usize>,
    /// Hard cap on total steps across all epochs.
    pub max_steps: Option<usize>,
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            epochs: 18,
            batch_size: 48,
            rho: 0.9,
            epsilon: 1e-7,
            dropout_p: 0.5,
            pos_ratio: 0.5,
            steps_per_epoch: None,
            max_steps: None,
            bn_momentum: 0.99,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "TrainConfig";
        ensure_contract!(self.learning_rate > 0.0, OP, "learning rate must be positive");
        ensure_contract!(
            self.rho > 0.0 && self.rho < 1.0,
            OP,
            "rho must be in (0, 1), got {}",
            self.rho
        );
        ensure_contract!(self.epsilon > 0.0, OP, "epsilon must be positive");
        ensure_contract!(self.epochs >= 1, OP, "epochs must be >= 1");
        ensure_contract!(self.batch_size >= 1, OP, "batch size must be >= 1");
        ensure_contract!(
            (0.0..1.0).contains(&self.dropout_p),
            OP,
            "dropout must satisfy 0 <= p < 1, got {}",
            self.dropout_p
        );
        ensure_contract!(
            (0.0..=1.0).contains(&self.pos_ratio),
            OP,
            "positive ratio must be in [0, 1]"
        );
        ensure_contract!(
            self.bn_momentum > 0.0 && self.bn_momentum < 1.0,
            OP,
            "batch-norm momentum must be in (0, 1)"
        );
        Ok(())
    }

    /// One epoch visits each positive pair about once:
    /// `ceil(positive pairs / (batch * pos_ratio))`.
    pub fn default_steps_per_epoch(&self, dataset: &IdentityDataset) -> usize {
        let positives = dataset.positive_pair_count() as f64;
        let per_batch = (self.batch_size as f64 * self.pos_ratio).max(1.0);
        (positives / per_batch).ceil().max(1.0) as usize
    }
}

/// Per-parameter squared-gradient accumulator; elementwise non-negative.
#[derive(Clone, Debug, Default)]
pub struct RmspropState<T: Element = f32> {
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Element> RmspropState<T> {
    pub fn new() -> Self {
        RmspropState { v: BTreeMap::new() }
    }

    pub fn accumulator(&self, name: &str) -> Option<&[T]> {
        self.v.get(name).map(|v| v.as_slice())
    }
}

/// One RMSprop update: `v <- rho v + (1 - rho) g^2`,
/// `p <- p - lr g / (sqrt(v) + eps)`. Running statistics never appear in the
/// gradient map, so they are untouched.
pub fn rmsprop_step<T: Element>(
    params: &mut ModelParams<T>,
    grads: &GradMap<T>,
    state: &mut RmspropState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    let rho = T::from_f64(cfg.rho);
    let one_minus_rho = T::from_f64(1.0 - cfg.rho);
    let lr = T::from_f64(cfg.learning_rate);
    let eps = T::from_f64(cfg.epsilon);

    for (name, grad) in grads {
        if !grad.all_finite() {
            return Err(Error::NonFinite {
                what: "gradient",
                name: name.clone(),
            });
        }
        let current = params.get(name)?.clone();
        ensure_contract!(
            current.shape() == grad.shape(),
            "rmsprop_step",
            "gradient shape {:?} does not match parameter {name:?} {:?}",
            grad.shape(),
            current.shape()
        );
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| vec![T::ZERO; current.numel()]);
        let mut updated = current.data().to_vec();
        for ((p, &g), acc) in updated.iter_mut().zip(grad.data()).zip(v.iter_mut()) {
            *acc = rho * *acc + one_minus_rho * g * g;
            *p = *p - lr * g / (acc.sqrt() + eps);
        }
        let requires_grad = current.requires_grad();
        params.set(
            name,
            Tensor::new(current.shape().to_vec(), updated)?.with_requires_grad(requires_grad),
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss: f64,
    pub pair_accuracy: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub rows: Vec<EpochRow>,
    pub seed: u64,
    pub checkpoint_path: Option<PathBuf>,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,loss,pair_accuracy,seconds")?;
        for row in &self.rows {
            writeln!(
                w,
                "{},{:.6},{:.6},{:.3}",
                row.epoch, row.loss, row.pair_accuracy, row.seconds
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("write to memory");
        String::from_utf8(buf).expect("csv is ascii")
    }
}

/// Outcome of one optimization step.
#[derive(Clone, Copy, Debug)]
pub struct StepMetrics {
    pub loss: f64,
    pub accuracy: f64,
}

/// One optimization step on a prepared batch: twin forward over the shared
/// parameters, square layer, head, loss, backward, running-stat fold,
/// RMSprop update.
pub fn train_on_batch(
    params: &mut ModelParams<f32>,
    config: &BackboneConfig,
    head: &VerificationHead,
    batch: &PairBatch,
    tcfg: &TrainConfig,
    state: &mut RmspropState<f32>,
    rng_dropout: &mut rand_chacha::ChaCha8Rng,
) -> Result<StepMetrics> {
    let mut tape = Tape::new();
    let im1 = tape.leaf(&batch.images1);
    let im2 = tape.leaf(&batch.images2);
    let mut stats = StatUpdates::new();
    let d1 = forward_features(&mut tape, params, config, im1, Mode::Train, &mut stats)?;
    let d2 = forward_features(&mut tape, params, config, im2, Mode::Train, &mut stats)?;
    let f_s = square_layer(&mut tape, d1, d2)?;
    let logits = verification_logits(&mut tape, params, head, f_s, Mode::Train, rng_dropout)?;
    let targets = labels_to_targets(&batch.labels);
    let (loss_id, probs) = tape.softmax_xent(logits, &targets)?;

    let loss = tape.value(loss_id).item()?.to_f64();
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            what: "loss",
            name: "verification loss".to_string(),
        });
    }
    let grads = tape.backward(loss_id)?;
    drop(tape);

    apply_stat_updates(params, &stats, tcfg.bn_momentum)?;
    rmsprop_step(params, &grads, state, tcfg)?;

    Ok(StepMetrics {
        loss,
        accuracy: accuracy_from_probs(&probs, &batch.labels),
    })
}

/// Classification accuracy at threshold 0.5 on same-probabilities; a tie at
/// exactly 0.5 counts as a "different" prediction.
pub fn accuracy_from_probs(probs: &Tensor<f32>, labels: &[PairLabel]) -> f64 {
    let n = labels.len();
    let mut correct = 0usize;
    for (i, label) in labels.iter().enumerate() {
        let predicted = if probs.data()[i * 2] > 0.5 {
            PairLabel::Same
        } else {
            PairLabel::Different
        };
        if predicted == *label {
            correct += 1;
        }
    }
    correct as f64 / n as f64
}

/// Eval-mode same-probabilities for every pair of a batch.
pub fn score_pair_batch(
    params: &ModelParams<f32>,
    config: &BackboneConfig,
    head: &VerificationHead,
    batch: &PairBatch,
) -> Result<Vec<f64>> {
    let mut tape = Tape::no_grad();
    let mut stats = StatUpdates::new();
    let im1 = tape.leaf(&batch.images1);
    let im2 = tape.leaf(&batch.images2);
    let d1 = forward_features(&mut tape, params, config, im1, Mode::Eval, &mut stats)?;
    let d2 = forward_features(&mut tape, params, config, im2, Mode::Eval, &mut stats)?;
    let f_s = ops::squared_diff(tape.value(d1), tape.value(d2))?;
    ensure_contract!(
        f_s.shape()[1] == head.descriptor_dim,
        "score_pair_batch",
        "descriptor width {} does not match head width {}",
        f_s.shape()[1],
        head.descriptor_dim
    );
    let logits = ops::linear(
        &f_s,
        params.get(crate::head::THETA_WEIGHT)?,
        Some(params.get(crate::head::THETA_BIAS)?),
    )?;
    let probs = ops::softmax_rows(&logits)?;
    Ok((0..batch.len()).map(|i| probs.data()[i * 2] as f64).collect())
}

/// Fraction of a batch classified correctly at threshold 0.5, eval mode.
pub fn evaluate_pair_accuracy(
    params: &ModelParams<f32>,
    config: &BackboneConfig,
    head: &VerificationHead,
    batch: &PairBatch,
) -> Result<f64> {
    let scores = score_pair_batch(params, config, head, batch)?;
    let mut correct = 0usize;
    for (score, label) in scores.iter().zip(&batch.labels) {
        let predicted = if *score > 0.5 {
            PairLabel::Same
        } else {
            PairLabel::Different
        };
        if predicted == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / batch.len() as f64)
}

/// Runs the training loop, mutating `params` in place.
///
/// The dropout rate applied during training is `tcfg.dropout_p` (the head's
/// configured rate governs other uses). When `out_dir` is given, a
/// checkpoint is written before the first epoch and after every epoch (so
/// on a divergence abort the last good parameters are on disk), and the
/// epoch log is written as `train_log.csv` at the end.
pub fn train(
    dataset: &IdentityDataset,
    config: &BackboneConfig,
    head: &VerificationHead,
    params: &mut ModelParams<f32>,
    tcfg: &TrainConfig,
    aug: &AugmentConfig,
    out_dir: Option<&Path>,
) -> Result<TrainLog> {
    tcfg.validate()?;
    config.validate()?;
    aug.validate()?;
    head.validate_params(params)?;

    let mut rng_sampler = stream_rng(tcfg.seed, "sampler");
    let mut rng_augment = stream_rng(tcfg.seed, "augment");
    let mut rng_dropout = stream_rng(tcfg.seed, "dropout");

    let sampler_cfg = SamplerConfig {
        batch_size: tcfg.batch_size,
        pos_ratio: tcfg.pos_ratio,
        resolution: config.resolution,
    };
    let head = VerificationHead {
        descriptor_dim: head.descriptor_dim,
        dropout_p: tcfg.dropout_p,
    };
    let steps_per_epoch = tcfg
        .steps_per_epoch
        .unwrap_or_else(|| tcfg.default_steps_per_epoch(dataset));

    let checkpoint_path = out_dir.map(|d| d.join("checkpoint.svr1"));
    if let Some(path) = &checkpoint_path {
        export_checkpoint(params, path)?;
    }

    let mut state = RmspropState::new();
    let mut log = TrainLog {
        rows: Vec::new(),
        seed: tcfg.seed,
        checkpoint_path: checkpoint_path.clone(),
    };

    let mut total_steps = 0usize;
    'epochs: for epoch in 1..=tcfg.epochs {
        let start = Instant::now();
        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        let mut steps_done = 0usize;
        for _ in 0..steps_per_epoch {
            if let Some(cap) = tcfg.max_steps {
                if total_steps >= cap {
                    break;
                }
            }
            let batch = sample_pair_batch(
                dataset,
                &sampler_cfg,
                aug,
                &mut rng_sampler,
                &mut rng_augment,
            )?;
            let metrics = train_on_batch(
                params,
                config,
                &head,
                &batch,
                tcfg,
                &mut state,
                &mut rng_dropout,
            )?;
            loss_sum += metrics.loss;
            acc_sum += metrics.accuracy;
            steps_done += 1;
            total_steps += 1;
        }
        if steps_done == 0 {
            break 'epochs;
        }
        log.rows.push(EpochRow {
            epoch,
            loss: loss_sum / steps_done as f64,
            pair_accuracy: acc_sum / steps_done as f64,
            seconds: start.elapsed().as_secs_f64(),
        });
        if let Some(path) = &checkpoint_path {
            export_checkpoint(params, path)?;
        }
    }

    if let Some(dir) = out_dir {
        let mut file = std::fs::File::create(dir.join("train_log.csv"))?;
        log.write_csv(&mut file)?;
    }
    Ok(log)
}
