//! Hybrid ranking loss: a point-wise fit term, the pairwise age-difference
//! term and the soft-rank term, combined as
//! `L = L_fit + lambda1 * L_diff + lambda2 * L_rank`.
//!
//! All functions take predictions and targets as `f64` slices of equal length
//! and return gradients with respect to the predictions.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::softrank::{hard_rank, soft_rank, soft_rank_vjp, SoftRankConfig};

/// Weights of the difference and rank terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    lambda1: f64,
    lambda2: f64,
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        if !(lambda1 >= 0.0 && lambda2 >= 0.0 && lambda1.is_finite() && lambda2.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be non-negative, got ({lambda1}, {lambda2})"
            )));
        }
        Ok(LossWeights { lambda1, lambda2 })
    }

    /// Both auxiliary terms switched off.
    pub fn fit_only() -> Self {
        LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
        }
    }

    pub fn lambda1(&self) -> f64 {
        self.lambda1
    }

    pub fn lambda2(&self) -> f64 {
        self.lambda2
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.1,
            lambda2: 1.0,
        }
    }
}

/// Point-wise fit term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum PrimaryLoss {
    #[default]
    Mse,
    Mae,
}

impl fmt::Display for PrimaryLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PrimaryLoss::Mse => "mse",
            PrimaryLoss::Mae => "mae",
        })
    }
}

impl FromStr for PrimaryLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(PrimaryLoss::Mse),
            "mae" => Ok(PrimaryLoss::Mae),
            other => Err(Error::Config(format!("unknown primary loss {other:?}"))),
        }
    }
}

/// The three loss terms of one batch and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LossBreakdown {
    /// Point-wise fit term (mean absolute error when the primary loss is MAE).
    pub mse: f64,
    pub diff: f64,
    pub rank: f64,
    pub total: f64,
    pub batch_size: usize,
}

fn check_pair(pred: &[f64], target: &[f64]) -> Result<usize> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Empty("loss batch"));
    }
    if pred.iter().chain(target).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("loss input".into()));
    }
    Ok(pred.len())
}

pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    let n = check_pair(pred, target)?;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n as f64)
}

pub fn mse_loss_grad(pred: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    let n = check_pair(pred, target)? as f64;
    Ok(pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / n).collect())
}

pub fn mae_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    let n = check_pair(pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / n as f64)
}

/// Subgradient of [`mae_loss`]; zero where prediction equals target.
pub fn mae_loss_grad(pred: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    let n = check_pair(pred, target)? as f64;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect())
}

/// `(1/N) * sum_{i,j} ((p_i - p_j) - (t_i - t_j))^2` over all ordered pairs.
///
/// With `d = p - t` the double sum equals `2N * sum (d_i - mean(d))^2`, which
/// is evaluated in linear time.
pub fn age_difference_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    let n = check_pair(pred, target)?;
    let d: Vec<f64> = pred.iter().zip(target).map(|(p, t)| p - t).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    Ok(2.0 * d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>())
}

pub fn age_difference_loss_grad(pred: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    let n = check_pair(pred, target)?;
    let d: Vec<f64> = pred.iter().zip(target).map(|(p, t)| p - t).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    Ok(d.iter().map(|v| 4.0 * (v - mean)).collect())
}

/// Sum of squared hard-rank differences. Piecewise constant, so it is only
/// reported, never differentiated.
pub fn srcc_rank_loss_hard(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    let rp = hard_rank(pred)?;
    let rt = hard_rank(target)?;
    Ok(rp
        .iter()
        .zip(&rt)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum())
}

fn soft_rank_term(pred: &[f64], target: &[f64], config: SoftRankConfig) -> Result<(f64, Vec<f64>)> {
    let n = check_pair(pred, target)?;
    let result = soft_rank(pred, config)?;
    let truth = hard_rank(target)?;
    let resid: Vec<f64> = result
        .ranks()
        .iter()
        .zip(&truth)
        .map(|(r, &t)| r - t as f64)
        .collect();
    let value = resid.iter().map(|r| r * r).sum::<f64>() / n as f64;
    let upstream: Vec<f64> = resid.iter().map(|r| 2.0 * r / n as f64).collect();
    let grad = soft_rank_vjp(&result, &upstream)?;
    Ok((value, grad))
}

/// `(1/N) * sum (soft_rank(pred)_i - hard_rank(target)_i)^2`.
pub fn soft_rank_loss(pred: &[f64], target: &[f64], config: SoftRankConfig) -> Result<f64> {
    soft_rank_term(pred, target, config).map(|(v, _)| v)
}

/// Gradient of [`soft_rank_loss`]; the target ranks are constants.
pub fn soft_rank_loss_grad(pred: &[f64], target: &[f64], config: SoftRankConfig) -> Result<Vec<f64>> {
    soft_rank_term(pred, target, config).map(|(_, g)| g)
}

/// Total loss with the MSE fit term.
pub fn total_loss(
    pred: &[f64],
    target: &[f64],
    weights: LossWeights,
    config: SoftRankConfig,
) -> Result<LossBreakdown> {
    hybrid_loss(pred, target, weights, config, PrimaryLoss::Mse).map(|(b, _)| b)
}

/// All terms and the gradient of the weighted total, each computed once.
/// Terms with zero weight are still reported.
pub fn hybrid_loss(
    pred: &[f64],
    target: &[f64],
    weights: LossWeights,
    config: SoftRankConfig,
    primary: PrimaryLoss,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let n = check_pair(pred, target)?;
    let (fit, fit_grad) = match primary {
        PrimaryLoss::Mse => (mse_loss(pred, target)?, mse_loss_grad(pred, target)?),
        PrimaryLoss::Mae => (mae_loss(pred, target)?, mae_loss_grad(pred, target)?),
    };
    let diff = age_difference_loss(pred, target)?;
    let diff_grad = age_difference_loss_grad(pred, target)?;
    let (rank, rank_grad) = soft_rank_term(pred, target, config)?;
    let total = fit + weights.lambda1 * diff + weights.lambda2 * rank;
    let grad = (0..n)
        .map(|i| fit_grad[i] + weights.lambda1 * diff_grad[i] + weights.lambda2 * rank_grad[i])
        .collect();
    Ok((
        LossBreakdown {
            mse: fit,
            diff,
            rank,
            total,
            batch_size: n,
        },
        grad,
    ))
}
