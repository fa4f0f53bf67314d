//! Latency measurement and the width-sweep harness relating parameter
//! budget to achievable dice.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{build_unet, count_flops, count_parameters, Model, ModelConfig};
use crate::tensor::Tensor;
use crate::train::{compute_loss, fit, TrainConfig};

/// Wall-clock timings of repeated eval-mode forwards; warmup iterations are
/// run untimed and excluded from every aggregate.
#[derive(Debug, Clone)]
pub struct LatencyStats {
    pub warmup: usize,
    pub iters: usize,
    pub samples_ms: Vec<f64>,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
}

/// Time `iters` eval-mode forwards of `model` on a fixed seeded input of
/// `input_shape`, after `warmup` untimed runs. Model construction and
/// input generation are excluded from the timings.
pub fn measure_latency(
    model: &Model,
    input_shape: [usize; 4],
    warmup: usize,
    iters: usize,
) -> Result<LatencyStats> {
    if iters < 1 {
        return Err(Error::Usage("latency measurement needs iters >= 1".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xB1_7E5);
    let input = Tensor::uniform(input_shape, 0.0, 1.0, &mut rng);

    for _ in 0..warmup {
        model.forward_eval(&input)?;
    }
    let mut samples_ms = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t0 = Instant::now();
        model.forward_eval(&input)?;
        samples_ms.push(t0.elapsed().as_secs_f64() * 1e3);
    }

    let mut sorted = samples_ms.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mean_ms = sorted.iter().sum::<f64>() / sorted.len() as f64;
    let median_ms = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    // nearest-rank percentile
    let p95_idx = ((0.95 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    let p95_ms = sorted[p95_idx];

    Ok(LatencyStats { warmup, iters, samples_ms, mean_ms, median_ms, p95_ms })
}

/// One row of the width sweep. Stage 1 is the largest width.
#[derive(Debug, Clone)]
pub struct StageRecord {
    pub stage: usize,
    pub width: usize,
    pub params: u64,
    pub macs: u64,
    /// Maximum dice coefficient on validation across training.
    pub mdc: f64,
    /// Validation loss of the final trained model.
    pub val_loss: f64,
    pub latency_ms: f64,
}

/// Sweep configuration beyond the shared training config.
#[derive(Debug, Clone)]
pub struct SweepOptions {
    /// Input shape used for MAC accounting and latency timing.
    pub probe_shape: [usize; 4],
    pub warmup: usize,
    pub iters: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions { probe_shape: [1, 1, 128, 128], warmup: 1, iters: 3 }
    }
}

/// Train one model per width (largest width = stage 1) with a shared config
/// and seed, recording parameters, MACs, best validation dice, final
/// validation loss and mean latency per stage. Stages run sequentially so
/// timings stay comparable.
///
/// If `csv_out` is given, the CSV is rewritten after every completed stage,
/// so an aborted sweep leaves the finished stages on disk.
pub fn run_stage_sweep(
    widths: &[usize],
    train_set: &[Sample],
    val_set: &[Sample],
    base_config: &ModelConfig,
    train_cfg: &TrainConfig,
    options: &SweepOptions,
    csv_out: Option<&Path>,
) -> Result<Vec<StageRecord>> {
    if widths.is_empty() {
        return Err(Error::Usage("sweep needs at least one width".to_string()));
    }
    if widths.windows(2).any(|p| p[0] >= p[1]) {
        return Err(Error::Usage(format!(
            "sweep widths must be strictly ascending, got {widths:?}"
        )));
    }
    if val_set.is_empty() {
        return Err(Error::Usage("sweep needs a non-empty validation set".to_string()));
    }

    let mut records: Vec<StageRecord> = Vec::with_capacity(widths.len());
    // stage 1 = largest width
    for (stage_idx, width) in widths.iter().rev().enumerate() {
        let stage = stage_idx + 1;
        let result = run_one_stage(stage, *width, train_set, val_set, base_config, train_cfg, options);
        match result {
            Ok(record) => {
                records.push(record);
                if let Some(path) = csv_out {
                    emit_csv(&records, path)?;
                }
            }
            Err(e) => {
                // flush what we have before propagating
                if let Some(path) = csv_out {
                    if !records.is_empty() {
                        let _ = emit_csv(&records, path);
                    }
                }
                return Err(e);
            }
        }
    }
    Ok(records)
}

fn run_one_stage(
    stage: usize,
    width: usize,
    train_set: &[Sample],
    val_set: &[Sample],
    base_config: &ModelConfig,
    train_cfg: &TrainConfig,
    options: &SweepOptions,
) -> Result<StageRecord> {
    let config = ModelConfig { base_width: width, ..base_config.clone() };
    let mut model = build_unet(&config, train_cfg.seed)?;
    let params = count_parameters(&model).trainable_total;
    let macs = count_flops(&config, options.probe_shape)?.total_macs;

    let outcome = fit(&mut model, train_set, val_set, train_cfg, None)?;
    let mdc = outcome.best_val_dice.unwrap_or(0.0);
    let val_loss = validation_loss(&model, val_set, train_cfg)?;
    let latency = measure_latency(&model, options.probe_shape, options.warmup, options.iters)?;

    Ok(StageRecord { stage, width, params, macs, mdc, val_loss, latency_ms: latency.mean_ms })
}

/// Mean per-image loss of the model on a dataset, eval mode.
fn validation_loss(model: &Model, dataset: &[Sample], cfg: &TrainConfig) -> Result<f64> {
    let multiple = model.config().spatial_multiple();
    let mut total = 0f64;
    for sample in dataset {
        let (padded, rec) = crate::data::pad_to_multiple(&sample.image, multiple);
        let probs = model.forward_eval(&padded)?;
        let probs = crate::data::crop_back(&probs, &rec);
        let (loss, _) = compute_loss(cfg.loss, &probs, &sample.mask, cfg.smooth)?;
        total += loss;
    }
    Ok(total / dataset.len() as f64)
}

/// Write the sweep CSV: header `stage,width,params,macs,mdc,val_loss,latency_ms`
/// then one row per record. Floats are printed in shortest round-trip form
/// (decimal point, no thousands separators). The file is written atomically
/// via a temp file and rename; returns the byte count.
pub fn emit_csv(records: &[StageRecord], path: &Path) -> Result<u64> {
    if records.is_empty() {
        return Err(Error::Usage("emit_csv: no records".to_string()));
    }
    let mut out = String::from("stage,width,params,macs,mdc,val_loss,latency_ms\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.stage, r.width, r.params, r.macs, r.mdc, r.val_loss, r.latency_ms
        ));
    }
    let tmp = path.with_extension("csv.tmp");
    fs::write(&tmp, out.as_bytes())?;
    fs::rename(&tmp, path)?;
    Ok(out.len() as u64)
}
