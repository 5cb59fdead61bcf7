//! Central finite-difference checks of every backward rule, the loss
//! gradients, the soft-rank VJP and the full model.
//!
//! Errors are normwise: `max_i |analytic_i - numeric_i| / max(max_i |numeric_i|, 1e-6)`.
//! The floor keeps rounding noise from dominating where the true gradient is zero.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::losses::{
    age_difference_loss, age_difference_loss_grad, hybrid_loss, mae_loss, mae_loss_grad, mse_loss,
    mse_loss_grad, soft_rank_loss, soft_rank_loss_grad, LossWeights, PrimaryLoss,
};
use crate::model::{collect_grads, forward, init_params, ModelConfig, SfcNextParams};
use crate::softrank::{soft_rank, soft_rank_vjp, SoftRankConfig};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const OPS_TOL: f64 = 1e-3;
pub const MODEL_TOL: f64 = 1e-2;
const ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scope {
    Ops,
    Softrank,
    Model,
}

impl Scope {
    pub const ALL: [Scope; 3] = [Scope::Ops, Scope::Softrank, Scope::Model];
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Ops => "ops",
            Scope::Softrank => "softrank",
            Scope::Model => "model",
        })
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Scope::Ops),
            "softrank" => Ok(Scope::Softrank),
            "model" => Ok(Scope::Model),
            other => Err(Error::Config(format!("unknown gradcheck scope {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub scope: Scope,
    pub name: String,
    pub worst_rel_error: f64,
    pub tolerance: f64,
    /// Random cases evaluated.
    pub cases: usize,
    /// Cases dropped because they sat on a non-differentiable boundary.
    pub skipped: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst_rel_error < self.tolerance
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    /// The check with the largest error relative to its tolerance.
    pub fn worst(&self) -> Option<&CheckResult> {
        self.results.iter().max_by(|a, b| {
            (a.worst_rel_error / a.tolerance).total_cmp(&(b.worst_rel_error / b.tolerance))
        })
    }
}

/// Normwise relative error of `analytic` against `numeric`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = numeric.iter().map(|n| n.abs()).fold(0.0, f64::max);
    diff / scale.max(ERROR_FLOOR)
}

/// Central differences of a scalar function.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut x = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x)?;
        x[i] = orig - h;
        let fm = f(&x)?;
        x[i] = orig;
        g.push((fp - fm) / (2.0 * h));
    }
    Ok(g)
}

fn randn(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Operators under test with their input shapes.
const OPS: &[(&str, &[&[usize]])] = &[
    ("conv3d", &[&[2, 2, 5, 4, 5], &[3, 2, 3, 3, 3], &[3]]),
    ("conv3d_strided", &[&[1, 2, 7, 6, 5], &[4, 2, 3, 3, 3], &[4]]),
    ("conv3d_grouped", &[&[1, 4, 4, 4, 4], &[6, 2, 3, 3, 3]]),
    ("depthwise_conv3d", &[&[2, 3, 4, 5, 4], &[3, 1, 3, 3, 3], &[3]]),
    ("depthwise_conv1d", &[&[2, 5, 3], &[3, 3], &[3]]),
    ("layer_norm", &[&[3, 4, 6], &[6], &[6]]),
    ("linear", &[&[2, 3, 4], &[5, 4], &[5]]),
    ("gelu", &[&[3, 7]]),
    ("add", &[&[2, 3], &[2, 3]]),
    ("mul", &[&[2, 3], &[2, 3]]),
    ("mul_scalar", &[&[4]]),
    ("add_scalar", &[&[4]]),
    ("concat", &[&[2, 3, 2], &[2, 1, 2]]),
    ("mean_axis", &[&[2, 3, 4]]),
    ("mean_pool_spatial", &[&[2, 3, 2, 2, 3]]),
    ("softmax", &[&[2, 3, 5]]),
    ("softmax_mid_axis", &[&[2, 4, 3]]),
    ("permute", &[&[2, 3, 4, 2, 3]]),
    ("reshape", &[&[2, 6]]),
    ("batch_matmul", &[&[2, 3, 4], &[2, 4, 5]]),
    ("batch_matmul_trans_b", &[&[2, 3, 4], &[2, 5, 4]]),
    ("sum", &[&[3, 3]]),
];

/// Names of the operators covered by the ops scope.
pub fn op_names() -> Vec<&'static str> {
    OPS.iter().map(|(n, _)| *n).collect()
}

fn apply_op<T: Real>(name: &str, t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
    match name {
        "conv3d" => t.conv3d(v[0], v[1], Some(v[2]), 1, 1, 1),
        "conv3d_strided" => t.conv3d(v[0], v[1], Some(v[2]), 2, 1, 1),
        "conv3d_grouped" => t.conv3d(v[0], v[1], None, 1, 0, 2),
        "depthwise_conv3d" => t.depthwise_conv3d(v[0], v[1], Some(v[2])),
        "depthwise_conv1d" => t.depthwise_conv1d(v[0], v[1], v[2]),
        "layer_norm" => t.layer_norm(v[0], v[1], v[2], 1e-6),
        "linear" => t.linear(v[0], v[1], Some(v[2])),
        "gelu" => t.gelu(v[0]),
        "add" => t.add(v[0], v[1]),
        "mul" => t.mul(v[0], v[1]),
        "mul_scalar" => t.mul_scalar(v[0], -1.7),
        "add_scalar" => t.add_scalar(v[0], 2.5),
        "concat" => t.concat(&[v[0], v[1]], 1),
        "mean_axis" => t.mean_axis(v[0], 1),
        "mean_pool_spatial" => t.mean_pool_spatial(v[0]),
        "softmax" => t.softmax(v[0], 2),
        "softmax_mid_axis" => t.softmax(v[0], 1),
        "permute" => t.permute(v[0], &[0, 2, 3, 4, 1]),
        "reshape" => t.reshape(v[0], vec![3, 4]),
        "batch_matmul" => t.batch_matmul(v[0], v[1], false),
        "batch_matmul_trans_b" => t.batch_matmul(v[0], v[1], true),
        "sum" => t.sum(v[0]),
        other => Err(Error::InvalidArgument(format!("unknown op {other:?}"))),
    }
}

/// Records `sum(op(inputs) * r)` on `tape`; returns the loss and the input leaves.
fn op_objective<T: Real>(
    name: &str,
    shapes: &[&[usize]],
    inputs: &[Vec<f64>],
    tape: &mut Tape<T>,
) -> Result<(Var, Vec<Var>)> {
    let vars = inputs
        .iter()
        .zip(shapes)
        .map(|(v, s)| Ok(tape.leaf(Tensor::from_f64(s.to_vec(), v)?.with_requires_grad(true))))
        .collect::<Result<Vec<_>>>()?;
    let out = apply_op(name, tape, &vars)?;
    let shape = tape.shape(out).to_vec();
    let r: Vec<f64> = (0..tape.value(out).numel())
        .map(|i| 0.5 + ((i * 7919) % 13) as f64 / 13.0)
        .collect();
    let rv = tape.constant(Tensor::from_f64(shape, &r)?);
    let prod = tape.mul(out, rv)?;
    Ok((tape.sum(prod)?, vars))
}

/// 32-bit analytic gradients against central differences (h = 1e-3) of a
/// 64-bit re-evaluation, on `cases` random inputs.
pub fn check_op(name: &str, cases: usize, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let shapes = OPS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, s)| *s)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown op {name:?}")))?;
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        // Inputs are rounded to f32 so both evaluations see the same point.
        let inputs: Vec<Vec<f64>> = shapes
            .iter()
            .map(|s| {
                randn(s.iter().product(), rng)
                    .into_iter()
                    .map(|v| v as f32 as f64)
                    .collect()
            })
            .collect();
        let mut tape = Tape::<f32>::new();
        let (loss, vars) = op_objective(name, shapes, &inputs, &mut tape)?;
        tape.backward(loss)?;
        for (k, var) in vars.iter().enumerate() {
            let analytic: Vec<f64> = match tape.grad(*var) {
                Some(g) => g.iter().map(|&x| x as f64).collect(),
                None => vec![0.0; inputs[k].len()],
            };
            let numeric = numeric_gradient(&inputs[k], 1e-3, |x| {
                let mut vals = inputs.clone();
                vals[k] = x.to_vec();
                let mut t = Tape::<f64>::new();
                let (l, _) = op_objective(name, shapes, &vals, &mut t)?;
                Ok(t.value(l).values()[0])
            })?;
            worst = worst.max(relative_error(&analytic, &numeric));
        }
    }
    Ok(CheckResult {
        scope: Scope::Ops,
        name: name.into(),
        worst_rel_error: worst,
        tolerance: OPS_TOL,
        cases,
        skipped: 0,
    })
}

fn check_ops(cases: usize, rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (name, _) in OPS {
        out.push(check_op(name, cases, rng)?);
    }
    out.extend(check_losses(rng)?);
    Ok(out)
}

fn distinct_ages(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    // Random permutation of a 1.5-year grid plus jitter keeps values distinct.
    let mut base: Vec<f64> = (0..n).map(|i| 20.0 + 1.5 * i as f64).collect();
    for i in (1..n).rev() {
        base.swap(i, rng.random_range(0..=i));
    }
    base.iter().map(|b| b + rng.random_range(-0.3..0.3)).collect()
}

type LossFns = (fn(&[f64], &[f64]) -> Result<f64>, fn(&[f64], &[f64]) -> Result<Vec<f64>>);

fn check_losses(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let cases = 100;
    let cfg = SoftRankConfig::new(1.0)?;
    let weights = LossWeights::default();
    let plain: [(&str, LossFns); 3] = [
        ("mse_loss", (mse_loss, mse_loss_grad)),
        ("age_difference_loss", (age_difference_loss, age_difference_loss_grad)),
        ("mae_loss", (mae_loss, mae_loss_grad)),
    ];
    let mut worst = [0.0f64; 5];
    for _ in 0..cases {
        let n = rng.random_range(2..=16);
        let y = distinct_ages(n, rng);
        let p: Vec<f64> = y.iter().map(|v| v + 3.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)).collect();
        for (k, (_, (f, g))) in plain.iter().enumerate() {
            let num = numeric_gradient(&p, 1e-6, |x| f(x, &y))?;
            worst[k] = worst[k].max(relative_error(&g(&p, &y)?, &num));
        }
        // Unit-scale scores, so that blocks pool and the gradient is not zero.
        let q: Vec<f64> = p.iter().map(|v| v / 10.0).collect();
        let num = numeric_gradient(&q, 1e-6, |x| soft_rank_loss(x, &y, cfg))?;
        worst[3] = worst[3].max(relative_error(&soft_rank_loss_grad(&q, &y, cfg)?, &num));
        let (_, g) = hybrid_loss(&p, &y, weights, cfg, PrimaryLoss::Mse)?;
        let num = numeric_gradient(&p, 1e-6, |x| {
            hybrid_loss(x, &y, weights, cfg, PrimaryLoss::Mse).map(|(b, _)| b.total)
        })?;
        worst[4] = worst[4].max(relative_error(&g, &num));
    }
    let names = ["mse_loss", "age_difference_loss", "mae_loss", "soft_rank_loss", "total_loss"];
    Ok(names
        .iter()
        .zip(worst)
        .map(|(name, w)| CheckResult {
            scope: Scope::Ops,
            name: (*name).into(),
            worst_rel_error: w,
            tolerance: OPS_TOL,
            cases,
            skipped: 0,
        })
        .collect())
}

/// Soft-rank VJP against differences of `<u, soft_rank(theta)>`. Points whose
/// pooled-block structure changes within the difference step are resampled.
pub fn check_softrank(cases: usize, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut skipped = 0;
    let mut done = 0;
    while done < cases {
        let n = rng.random_range(2..=24);
        let eps = [0.1, 0.5, 1.0, 3.0][rng.random_range(0..4)];
        let cfg = SoftRankConfig::new(eps)?;
        let theta = randn(n, rng);
        let u = randn(n, rng);
        let base = soft_rank(&theta, cfg)?;
        let mut stable = true;
        let num = numeric_gradient(&theta, h, |x| {
            let r = soft_rank(x, cfg)?;
            if r.blocks() != base.blocks() || r.order() != base.order() {
                stable = false;
            }
            Ok(r.ranks().iter().zip(&u).map(|(a, b)| a * b).sum())
        })?;
        if !stable {
            skipped += 1;
            continue;
        }
        let err = if base.blocks().len() == n {
            // A vertex: the map is locally constant and the gradient exactly zero.
            num.iter().map(|g| g.abs()).fold(0.0, f64::max)
        } else {
            relative_error(&soft_rank_vjp(&base, &u)?, &num)
        };
        worst = worst.max(err);
        done += 1;
    }
    Ok(CheckResult {
        scope: Scope::Softrank,
        name: "soft_rank_vjp".into(),
        worst_rel_error: worst,
        tolerance: OPS_TOL,
        cases,
        skipped,
    })
}

/// Moves every parameter away from its initial value so that zero-initialized
/// projections do not mask gradients elsewhere.
pub fn perturb_params(params: &mut SfcNextParams, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in params.store.tensors_mut() {
        for v in t.values_mut() {
            *v += (scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)) as f32;
        }
    }
}

/// Model configuration small enough for finite differences.
pub fn gradcheck_model_config() -> ModelConfig {
    ModelConfig::tiny()
}

/// Hybrid loss of the model on a fixed random batch: analytic gradients from
/// the 32-bit tape, differences from 64-bit forward re-evaluation, on a random
/// subsample of `samples` parameter scalars.
pub fn check_model(samples: usize, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let config = gradcheck_model_config();
    let mut params = init_params(&config, rng.random())?;
    perturb_params(&mut params, 0.05, rng.random());
    params.target_mean = 40.0;
    params.target_std = 10.0;
    let n = 4;
    let [d, h, w] = config.input_dims;
    let vol = randn(n * d * h * w, rng);
    let sex: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
    let ages = distinct_ages(n, rng);
    let weights = LossWeights::default();
    let cfg = SoftRankConfig::default();

    let loss_of = |pred: &[f64]| hybrid_loss(pred, &ages, weights, cfg, PrimaryLoss::Mse);
    let vshape = vec![n, 1, d, h, w];
    let mut tape = Tape::<f32>::new();
    let fwd = forward(
        &mut tape,
        &params,
        Tensor::from_f64(vshape.clone(), &vol)?,
        Tensor::from_f64(vec![n, 1], &sex)?,
        true,
    )?;
    let pred = tape.value(fwd.output).to_f64_vec();
    let (b, g) = loss_of(&pred)?;
    let loss = tape.scalar_loss(fwd.output, b.total, g)?;
    tape.backward(loss)?;
    collect_grads(&tape, &fwd.params, &mut params.store)?;

    let total: usize = params.store.tensors().iter().map(|t| t.numel()).sum();
    let picks = sample(rng, total, samples.min(total)).into_vec();
    let mut locate = Vec::with_capacity(picks.len());
    for p in picks {
        let mut rest = p;
        for (ti, t) in params.store.tensors().iter().enumerate() {
            if rest < t.numel() {
                locate.push((ti, rest));
                break;
            }
            rest -= t.numel();
        }
    }
    let analytic: Vec<f64> = locate
        .iter()
        .map(|&(ti, j)| params.store.tensors()[ti].grad().unwrap()[j] as f64)
        .collect();

    let eval64 = |p: &SfcNextParams| -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let fwd = forward(
            &mut tape,
            p,
            Tensor::new(vshape.clone(), vol.clone())?,
            Tensor::new(vec![n, 1], sex.clone())?,
            false,
        )?;
        let pred = tape.value(fwd.output).to_f64_vec();
        Ok(loss_of(&pred)?.0.total)
    };
    let step = 1e-3f32;
    let mut probe = params.clone();
    let mut numeric = Vec::with_capacity(locate.len());
    for &(ti, j) in &locate {
        let orig = probe.store.tensors()[ti].values()[j];
        let (up, down) = (orig + step, orig - step);
        probe.store.tensors_mut()[ti].values_mut()[j] = up;
        let fp = eval64(&probe)?;
        probe.store.tensors_mut()[ti].values_mut()[j] = down;
        let fm = eval64(&probe)?;
        probe.store.tensors_mut()[ti].values_mut()[j] = orig;
        numeric.push((fp - fm) / (up as f64 - down as f64));
    }
    Ok(CheckResult {
        scope: Scope::Model,
        name: "sfcnext_hybrid_loss".into(),
        worst_rel_error: relative_error(&analytic, &numeric),
        tolerance: MODEL_TOL,
        cases: locate.len(),
        skipped: 0,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub scopes: Vec<Scope>,
    /// Random inputs per tape operator.
    pub ops_cases: usize,
    pub softrank_cases: usize,
    pub model_samples: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            scopes: Scope::ALL.to_vec(),
            ops_cases: 100,
            softrank_cases: 1_000,
            model_samples: 32,
            seed: 0,
        }
    }
}

pub fn gradcheck(config: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut results = Vec::new();
    for scope in &config.scopes {
        match scope {
            Scope::Ops => results.extend(check_ops(config.ops_cases, &mut rng)?),
            Scope::Softrank => results.push(check_softrank(config.softrank_cases, &mut rng)?),
            Scope::Model => results.push(check_model(config.model_samples, &mut rng)?),
        }
    }
    Ok(GradcheckReport { results })
}
