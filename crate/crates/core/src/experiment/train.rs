use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use crate::data::{split, Dataset, Split, SplitSpec};
use crate::error::{Error, Result};
use crate::losses::{hybrid_loss, LossBreakdown};
use crate::metrics::{mae, pcc, srcc, MetricsReport};
use crate::model::{collect_grads, forward, init_params, predict, SfcNextParams};
use crate::tensor::{OptimizerState, Tape};

const EVAL_BATCH: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Sample-weighted mean of the per-batch breakdowns.
    pub train: LossBreakdown,
    /// Breakdown over the whole validation set as one batch.
    pub val: LossBreakdown,
    pub val_mae: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScatterRow {
    pub id: String,
    pub true_age: f64,
    pub pred_age: f64,
}

/// Outcome of one training run on one split.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub repeat: usize,
    pub config_echo: String,
    pub history: Vec<EpochRecord>,
    /// Zero-based epoch whose parameters were kept.
    pub best_epoch: usize,
    /// Test metrics of the kept parameters. Correlations are NaN when the
    /// predictions are constant.
    pub test: MetricsReport,
    /// MAE of predicting the training-set mean age for every test subject.
    pub baseline_mae: f64,
    pub scatter: Vec<ScatterRow>,
    pub wall_clock_secs: f64,
    pub params: SfcNextParams,
}

/// Deterministic per-repeat seed derived from the configured seed.
pub(crate) fn derive_seed(seed: u64, repeat: usize, salt: u64) -> u64 {
    let mut x = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (repeat as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 31;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 29)
}

pub fn predict_indices(params: &SfcNextParams, data: &Dataset, idx: &[usize]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let (v, s) = data.batch(chunk)?;
        out.extend(predict(params, v, s)?);
    }
    Ok(out)
}

fn metrics_lenient(pred: &[f64], truth: &[f64]) -> Result<MetricsReport> {
    Ok(MetricsReport {
        mae: mae(pred, truth)?,
        pcc: pcc(pred, truth).unwrap_or(f64::NAN),
        srcc: srcc(pred, truth).unwrap_or(f64::NAN),
        n: pred.len(),
    })
}

fn accumulate(sum: &mut LossBreakdown, b: &LossBreakdown) {
    let w = b.batch_size as f64;
    sum.mse += w * b.mse;
    sum.diff += w * b.diff;
    sum.rank += w * b.rank;
    sum.total += w * b.total;
    sum.batch_size += b.batch_size;
}

/// Trains on the split given by `spec` and evaluates the checkpoint with the
/// best validation MAE on the test subset.
pub fn train(config: &TrainConfig, data: &Dataset, spec: &SplitSpec) -> Result<RunReport> {
    config.validate()?;
    if data.dims != config.model.input_dims {
        return Err(Error::Config(format!(
            "dataset dims {:?} differ from model input_dims {:?}",
            data.dims, config.model.input_dims
        )));
    }
    let started = Instant::now();
    let Split {
        mut train,
        val,
        test,
    } = split(data.len(), spec)?;
    let ages = |idx: &[usize]| idx.iter().map(|&i| data.ages[i]).collect::<Vec<f64>>();
    let train_ages = ages(&train);
    let n = train_ages.len() as f64;
    let mean = train_ages.iter().sum::<f64>() / n;
    let std = (train_ages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();

    let mut params = init_params(&config.model, derive_seed(config.seed, spec.repeat, 1))?;
    params.target_mean = mean;
    params.target_std = if std > 0.0 { std } else { 1.0 };
    let mut opt = OptimizerState::new(config.optimizer, config.ilr)?
        .with_weight_decay(config.effective_weight_decay());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, spec.repeat, 2));

    let val_ages = ages(&val);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, SfcNextParams)> = None;
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        opt.lr = lr;
        train.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        for (step, batch) in train.chunks(config.batch_size).enumerate() {
            let diverged = |detail: String| Error::Diverged {
                epoch,
                step,
                detail,
            };
            let (v, s) = data.batch(batch)?;
            let mut tape = Tape::<f32>::new();
            let fwd = forward(&mut tape, &params, v, s, true)?;
            let pred = tape.value(fwd.output).to_f64_vec();
            if pred.iter().any(|p| !p.is_finite()) {
                return Err(diverged("non-finite prediction".into()));
            }
            let (breakdown, grad) = hybrid_loss(
                &pred,
                &ages(batch),
                config.weights,
                config.softrank,
                config.primary_loss,
            )?;
            if !breakdown.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(diverged(format!("loss {}", breakdown.total)));
            }
            let loss = tape.scalar_loss(fwd.output, breakdown.total, grad)?;
            tape.backward(loss)?;
            collect_grads(&tape, &fwd.params, &mut params.store)?;
            opt.step(params.store.tensors_mut())
                .map_err(|e| diverged(e.to_string()))?;
            accumulate(&mut sum, &breakdown);
        }
        let w = sum.batch_size as f64;
        let train_mean = LossBreakdown {
            mse: sum.mse / w,
            diff: sum.diff / w,
            rank: sum.rank / w,
            total: sum.total / w,
            batch_size: sum.batch_size,
        };
        let val_pred = predict_indices(&params, data, &val)?;
        if val_pred.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged {
                epoch,
                step: train.len().div_ceil(config.batch_size),
                detail: "non-finite validation prediction".into(),
            });
        }
        let (val_loss, _) = hybrid_loss(
            &val_pred,
            &val_ages,
            config.weights,
            config.softrank,
            config.primary_loss,
        )?;
        let val_mae = mae(&val_pred, &val_ages)?;
        history.push(EpochRecord {
            epoch,
            lr,
            train: train_mean,
            val: val_loss,
            val_mae,
        });
        match &best {
            Some((b, _, _)) if val_mae >= *b => {}
            _ => best = Some((val_mae, epoch, params.clone())),
        }
        let best_epoch = best.as_ref().map(|b| b.1).unwrap_or(0);
        if epoch - best_epoch >= config.patience.max(1) {
            break;
        }
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch ran");

    let test_ages = ages(&test);
    let test_pred = predict_indices(&best_params, data, &test)?;
    let test_metrics = metrics_lenient(&test_pred, &test_ages)?;
    let baseline_mae = test_ages.iter().map(|a| (a - mean).abs()).sum::<f64>() / test_ages.len() as f64;
    let scatter = test
        .iter()
        .zip(test_pred.iter().zip(&test_ages))
        .map(|(&i, (&p, &t))| ScatterRow {
            id: data.ids[i].clone(),
            true_age: t,
            pred_age: p,
        })
        .collect();
    Ok(RunReport {
        repeat: spec.repeat,
        config_echo: config.to_string(),
        history,
        best_epoch,
        test: test_metrics,
        baseline_mae,
        scatter,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        params: best_params,
    })
}
