//! MAE, Pearson and Spearman correlation, all accumulated in `f64`.

use crate::error::{Error, Result};
use crate::softrank::hard_rank;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub mae: f64,
    pub pcc: f64,
    pub srcc: f64,
    pub n: usize,
}

fn check(pred: &[f64], target: &[f64], min: usize) -> Result<usize> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.len() < min {
        return Err(Error::InvalidArgument(format!(
            "need at least {min} samples, got {}",
            pred.len()
        )));
    }
    if pred.iter().chain(target).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("metric input".into()));
    }
    Ok(pred.len())
}

pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    let n = check(pred, target, 1)?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / n as f64)
}

/// Pearson correlation. Errors when either input has zero variance.
pub fn pcc(pred: &[f64], target: &[f64]) -> Result<f64> {
    let n = check(pred, target, 2)? as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mt = target.iter().sum::<f64>() / n;
    let (mut cov, mut vp, mut vt) = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(target) {
        let (a, b) = (p - mp, t - mt);
        cov += a * b;
        vp += a * a;
        vt += b * b;
    }
    if vp == 0.0 {
        return Err(Error::UndefinedCorrelation("predictions have zero variance"));
    }
    if vt == 0.0 {
        return Err(Error::UndefinedCorrelation("targets have zero variance"));
    }
    Ok(cov / (vp.sqrt() * vt.sqrt()))
}

/// Spearman correlation: Pearson correlation of the descending hard ranks.
/// Ties keep index order, matching [`hard_rank`].
pub fn srcc(pred: &[f64], target: &[f64]) -> Result<f64> {
    check(pred, target, 2)?;
    if pred.iter().all(|&v| v == pred[0]) {
        return Err(Error::UndefinedCorrelation("predictions are constant"));
    }
    if target.iter().all(|&v| v == target[0]) {
        return Err(Error::UndefinedCorrelation("targets are constant"));
    }
    let rp: Vec<f64> = hard_rank(pred)?.into_iter().map(|r| r as f64).collect();
    let rt: Vec<f64> = hard_rank(target)?.into_iter().map(|r| r as f64).collect();
    pcc(&rp, &rt)
}

pub fn evaluate(pred: &[f64], target: &[f64]) -> Result<MetricsReport> {
    Ok(MetricsReport {
        mae: mae(pred, target)?,
        pcc: pcc(pred, target)?,
        srcc: srcc(pred, target)?,
        n: pred.len(),
    })
}
