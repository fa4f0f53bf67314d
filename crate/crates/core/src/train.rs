//! Dice metric and losses, the Adam optimizer, the training loop, and
//! evaluation reports.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{pad_to_multiple, stack_samples, Sample};
use crate::error::{Error, Result};
use crate::model::{Gradients, Model};
use crate::ops::Mode;
use crate::tensor::Tensor;

/// Which training loss to optimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Smoothed soft dice loss (default): directly optimizes the reported
    /// overlap metric.
    SoftDice,
    /// Equal-weight combination 0.5 * soft dice + 0.5 * binary cross-entropy.
    DiceBce,
}

/// Training hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    /// Additive smoothing constant of the soft dice loss.
    pub smooth: f32,
    /// Mask binarization threshold used for validation dice.
    pub threshold: f32,
    pub seed: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_epsilon: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            epochs: 30,
            batch_size: 8,
            loss: LossKind::SoftDice,
            smooth: 1.0,
            threshold: 0.5,
            seed: 42,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Usage(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if self.epochs < 1 {
            return Err(Error::Usage("epochs must be >= 1".to_string()));
        }
        if self.batch_size < 1 {
            return Err(Error::Usage("batch_size must be >= 1".to_string()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Usage(format!(
                "threshold must be in (0, 1), got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Dice overlap 2|A ∩ B| / (|A| + |B|) between two binary masks of equal
/// shape. Two empty masks score 1.0 by convention.
pub fn dice_score(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::Usage(format!(
            "dice_score: shapes {:?} and {:?} differ",
            pred.shape(),
            truth.shape()
        )));
    }
    let mut overlap = 0u64;
    let mut total = 0u64;
    for (p, t) in pred.data().iter().zip(truth.data()) {
        if !(*p == 0.0 || *p == 1.0) || !(*t == 0.0 || *t == 1.0) {
            return Err(Error::Usage(format!(
                "dice_score requires binary masks, found values {p} and {t}"
            )));
        }
        let (pb, tb) = (*p == 1.0, *t == 1.0);
        overlap += (pb && tb) as u64;
        total += pb as u64 + tb as u64;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * overlap as f64 / total as f64)
}

/// Soft dice loss 1 - (2 sum(p*t) + smooth) / (sum p + sum t + smooth),
/// computed per batch item and averaged over the batch, together with its
/// exact analytic gradient w.r.t. the probabilities.
pub fn soft_dice_loss(probs: &Tensor, truth: &Tensor, smooth: f32) -> Result<(f64, Tensor)> {
    if probs.shape() != truth.shape() {
        return Err(Error::Usage(format!(
            "soft_dice_loss: shapes {:?} and {:?} differ",
            probs.shape(),
            truth.shape()
        )));
    }
    let n = probs.n();
    let item = probs.len() / n;
    let mut grad = Tensor::zeros(probs.shape());
    let mut loss = 0f64;
    for b in 0..n {
        let p = &probs.data()[b * item..(b + 1) * item];
        let t = &truth.data()[b * item..(b + 1) * item];
        let mut sum_pt = 0f64;
        let mut sum_p = 0f64;
        let mut sum_t = 0f64;
        for (pv, tv) in p.iter().zip(t) {
            sum_pt += (*pv as f64) * (*tv as f64);
            sum_p += *pv as f64;
            sum_t += *tv as f64;
        }
        let num = 2.0 * sum_pt + smooth as f64;
        let den = sum_p + sum_t + smooth as f64;
        loss += 1.0 - num / den;
        let g = &mut grad.data_mut()[b * item..(b + 1) * item];
        let inv = 1.0 / (den * den * n as f64);
        for (gv, tv) in g.iter_mut().zip(t) {
            *gv = ((num - 2.0 * (*tv as f64) * den) * inv) as f32;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Mean binary cross-entropy over all elements, with probabilities clamped
/// to [1e-7, 1 - 1e-7] so log(0) cannot occur, plus its gradient.
pub fn bce_loss(probs: &Tensor, truth: &Tensor) -> Result<(f64, Tensor)> {
    if probs.shape() != truth.shape() {
        return Err(Error::Usage(format!(
            "bce_loss: shapes {:?} and {:?} differ",
            probs.shape(),
            truth.shape()
        )));
    }
    const CLAMP: f64 = 1e-7;
    let count = probs.len() as f64;
    let mut grad = Tensor::zeros(probs.shape());
    let mut loss = 0f64;
    for ((pv, tv), gv) in probs.data().iter().zip(truth.data()).zip(grad.data_mut()) {
        let p = (*pv as f64).clamp(CLAMP, 1.0 - CLAMP);
        let t = *tv as f64;
        loss -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        *gv = ((p - t) / (p * (1.0 - p) * count)) as f32;
    }
    Ok((loss / count, grad))
}

/// Loss value and gradient for the configured loss kind.
pub fn compute_loss(
    kind: LossKind,
    probs: &Tensor,
    truth: &Tensor,
    smooth: f32,
) -> Result<(f64, Tensor)> {
    match kind {
        LossKind::SoftDice => soft_dice_loss(probs, truth, smooth),
        LossKind::DiceBce => {
            let (ld, gd) = soft_dice_loss(probs, truth, smooth)?;
            let (lb, mut gb) = bce_loss(probs, truth)?;
            for (b, d) in gb.data_mut().iter_mut().zip(gd.data()) {
                *b = 0.5 * *b + 0.5 * *d;
            }
            Ok((0.5 * ld + 0.5 * lb, gb))
        }
    }
}

/// Binarize probabilities: 1 where prob >= threshold, else 0.
pub fn binarize(probs: &Tensor, threshold: f32) -> Tensor {
    let mut out = probs.clone();
    for v in out.data_mut() {
        *v = if *v >= threshold { 1.0 } else { 0.0 };
    }
    out
}

/// Per-parameter Adam moment accumulators, aligned with the model's
/// canonical parameter order.
#[derive(Debug, Clone)]
pub struct AdamState {
    names: Vec<String>,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    /// Step counter; incremented before each use.
    pub t: u64,
}

impl AdamState {
    pub fn new(model: &Model) -> AdamState {
        let mut names = Vec::new();
        let mut sizes = Vec::new();
        let mut probe = model.clone();
        probe.for_each_trainable_mut(|name, data| {
            names.push(name.to_string());
            sizes.push(data.len());
        });
        AdamState {
            names,
            m: sizes.iter().map(|s| vec![0.0; *s]).collect(),
            v: sizes.iter().map(|s| vec![0.0; *s]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update on a flat parameter slice.
pub fn adam_update_slice(
    param: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    t: u64,
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
) {
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Apply one Adam step to every trainable parameter. Aborts without
/// touching parameters or state if any gradient is non-finite.
pub fn adam_step(
    model: &mut Model,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    for e in grads.entries() {
        if !e.values.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient for {}; step aborted",
                e.name
            )));
        }
    }
    if grads.len() != state.names.len() {
        return Err(Error::Usage(format!(
            "gradient count {} does not match optimizer state {}",
            grads.len(),
            state.names.len()
        )));
    }
    state.t += 1;
    let t = state.t;
    let mut idx = 0;
    let mut mismatch = None;
    let (m, v) = (&mut state.m, &mut state.v);
    let names = &state.names;
    let entries = grads.entries();
    model.for_each_trainable_mut(|name, param| {
        if mismatch.is_some() {
            return;
        }
        let entry = &entries[idx];
        if entry.name != name || names[idx] != name || entry.values.len() != param.len() {
            mismatch = Some(name.to_string());
            return;
        }
        adam_update_slice(
            param,
            &entry.values,
            &mut m[idx],
            &mut v[idx],
            t,
            cfg.learning_rate,
            cfg.beta1,
            cfg.beta2,
            cfg.adam_epsilon,
        );
        idx += 1;
    });
    if let Some(name) = mismatch {
        return Err(Error::Usage(format!(
            "gradients are not aligned with the parameter store at {name}"
        )));
    }
    Ok(())
}

/// One row of the per-epoch training log.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean validation dice; absent when the validation set is empty.
    pub val_dice: Option<f64>,
    /// Wall-clock duration of the epoch.
    pub seconds: f64,
}

impl EpochRecord {
    /// Comma-separated `epoch,train_loss,val_dice,seconds` line; the dice
    /// field is empty when validation was skipped.
    pub fn metrics_line(&self) -> String {
        let dice = self.val_dice.map(|d| d.to_string()).unwrap_or_default();
        format!("{},{},{},{}", self.epoch, self.train_loss, dice, self.seconds)
    }
}

/// Header of the metrics log emitted by [`fit`].
pub const METRICS_HEADER: &str = "epoch,train_loss,val_dice,seconds";

/// Result of a training run.
#[derive(Debug)]
pub struct FitOutcome {
    pub records: Vec<EpochRecord>,
    /// Parameters of the epoch with the best validation dice; the final
    /// model when no validation set was given.
    pub best_model: Model,
    pub best_epoch: Option<usize>,
    pub best_val_dice: Option<f64>,
}

/// Train `model` in place: per epoch, shuffle with the seeded rng, iterate
/// mini-batches through forward / loss / backward / Adam, then evaluate on
/// the validation set. Emits one metrics line per epoch to `log` when given.
pub fn fit(
    model: &mut Model,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Usage("training set is empty".to_string()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model);
    let multiple = model.config().spatial_multiple();

    if let Some(out) = log.as_deref_mut() {
        writeln!(out, "{METRICS_HEADER}")?;
    }

    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Model)> = None;

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0f64;
        let mut item_count = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let picked: Vec<&Sample> = chunk.iter().map(|i| &train_set[*i]).collect();
            let (images, masks) = stack_samples(&picked)?;
            let (images, rec) = pad_to_multiple(&images, multiple);
            let masks = if rec.is_padded() { pad_to_multiple(&masks, multiple).0 } else { masks };

            let probs = model.forward(&images, Mode::Train)?;
            let (loss, grad) = compute_loss(cfg.loss, &probs, &masks, cfg.smooth)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, batch {batch_idx}"
                )));
            }
            let grads = model.backward(&grad)?;
            adam_step(model, &grads, &mut adam, cfg).map_err(|e| match e {
                Error::Numeric(msg) => {
                    Error::Numeric(format!("epoch {epoch}, batch {batch_idx}: {msg}"))
                }
                other => other,
            })?;

            loss_sum += loss * chunk.len() as f64;
            item_count += chunk.len();
        }
        let train_loss = loss_sum / item_count as f64;

        let val_dice = if val_set.is_empty() {
            None
        } else {
            let report = evaluate(model, val_set, cfg.threshold)?;
            Some(report.mean)
        };

        if let Some(d) = val_dice {
            let improved = best.as_ref().map(|(_, b, _)| d > *b).unwrap_or(true);
            if improved {
                best = Some((epoch, d, model.clone()));
            }
        }

        let record = EpochRecord { epoch, train_loss, val_dice, seconds: start.elapsed().as_secs_f64() };
        if let Some(out) = log.as_deref_mut() {
            writeln!(out, "{}", record.metrics_line())?;
        }
        records.push(record);
    }

    let (best_epoch, best_val_dice, best_model) = match best {
        Some((e, d, m)) => (Some(e), Some(d), m),
        None => (None, None, model.clone()),
    };
    Ok(FitOutcome { records, best_model, best_epoch, best_val_dice })
}

/// Per-image dice statistics over a dataset.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub per_image: Vec<f64>,
    pub mean: f64,
    pub max: f64,
    pub count: usize,
}

/// Evaluate a model on a dataset: per image, eval-mode forward, binarize
/// at `threshold`, dice against the ground truth. Images are padded to the
/// model's spatial multiple and predictions cropped back, so arbitrary
/// extents are accepted.
pub fn evaluate(model: &Model, dataset: &[Sample], threshold: f32) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Usage("evaluate: dataset is empty".to_string()));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Usage(format!("threshold must be in (0, 1), got {threshold}")));
    }
    let multiple = model.config().spatial_multiple();
    let mut per_image = Vec::with_capacity(dataset.len());
    for sample in dataset {
        let (padded, rec) = pad_to_multiple(&sample.image, multiple);
        let probs = model.forward_eval(&padded)?;
        let probs = crate::data::crop_back(&probs, &rec);
        let pred = binarize(&probs, threshold);
        per_image.push(dice_score(&pred, &sample.mask)?);
    }
    let mean = per_image.iter().sum::<f64>() / per_image.len() as f64;
    let max = per_image.iter().copied().fold(f64::MIN, f64::max);
    Ok(EvalReport { count: per_image.len(), per_image, mean, max })
}
