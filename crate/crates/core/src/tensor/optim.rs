//! Adam, AdamW and Adamax.

use std::fmt;
use std::str::FromStr;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    Adam,
    AdamW,
    Adamax,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 3] = [OptimizerKind::Adam, OptimizerKind::AdamW, OptimizerKind::Adamax];

    /// Weight decay applied when none is configured. AdamW decays by default.
    pub fn default_weight_decay(self) -> f64 {
        match self {
            OptimizerKind::AdamW => 0.01,
            _ => 0.0,
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::AdamW => "adamw",
            OptimizerKind::Adamax => "adamax",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "adamw" => Ok(OptimizerKind::AdamW),
            "adamax" => Ok(OptimizerKind::Adamax),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

/// Moment estimates and hyperparameters for one set of parameters.
///
/// `second` holds the squared-gradient average for Adam/AdamW and the
/// infinity-norm accumulator `u` for Adamax.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
        }
        Ok(OptimizerState {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: kind.default_weight_decay(),
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.second
    }

    /// Applies one update to every parameter from its gradient slot.
    /// Parameters without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut [Tensor<f32>]) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.second = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.first.len() != params.len()
            || self.first.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel())
        {
            return Err(Error::Shape(
                "optimizer state does not match the parameter set".into(),
            ));
        }
        for (i, p) in params.iter().enumerate() {
            if let Some(g) = p.grad() {
                if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "gradient of parameter {i} at element {j}"
                    )));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, lr, wd) = (self.beta1, self.beta2, self.eps, self.lr, self.weight_decay);
        for ((p, m), s) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let grad: Vec<f64> = match p.grad() {
                Some(g) => g.iter().map(|&v| v as f64).collect(),
                None => vec![0.0; p.numel()],
            };
            for (j, v) in p.values_mut().iter_mut().enumerate() {
                let mut w = *v as f64;
                let mut g = grad[j];
                match self.kind {
                    OptimizerKind::Adam | OptimizerKind::Adamax => g += wd * w,
                    OptimizerKind::AdamW => w -= lr * wd * w,
                }
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                match self.kind {
                    OptimizerKind::Adam | OptimizerKind::AdamW => {
                        s[j] = b2 * s[j] + (1.0 - b2) * g * g;
                        let mhat = m[j] / bc1;
                        let vhat = s[j] / bc2;
                        w -= lr * mhat / (vhat.sqrt() + eps);
                    }
                    OptimizerKind::Adamax => {
                        s[j] = (b2 * s[j]).max(g.abs());
                        w -= (lr / bc1) * m[j] / (s[j] + eps);
                    }
                }
                *v = w as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: &[f32], grad: &[f32]) -> Tensor<f32> {
        let mut t = Tensor::new(vec![values.len()], values.to_vec())
            .unwrap()
            .with_requires_grad(true);
        t.set_grad(Some(grad.to_vec())).unwrap();
        t
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        for kind in OptimizerKind::ALL {
            let mut opt = OptimizerState::new(kind, 1e-3).unwrap().with_weight_decay(0.0);
            let mut ps = vec![param(&[0.5, -1.25, 3.0], &[0.0, 0.0, 0.0])];
            for _ in 0..5 {
                opt.step(&mut ps).unwrap();
            }
            assert_eq!(ps[0].values(), &[0.5, -1.25, 3.0], "{kind}");
            assert_eq!(opt.step_count(), 5);
        }
    }

    #[test]
    fn adamax_first_step_moves_by_lr() {
        let mut opt = OptimizerState::new(OptimizerKind::Adamax, 0.001).unwrap();
        let mut ps = vec![param(&[1.0], &[1.0])];
        opt.step(&mut ps).unwrap();
        // m = 0.1, u = 1, bias correction 1/(1 - 0.9)
        let moved = 1.0 - ps[0].values()[0] as f64;
        assert!((moved - 0.001).abs() < 1e-7, "moved {moved}");
    }

    #[test]
    fn adamw_zero_gradient_decays_multiplicatively() {
        let (lr, wd) = (0.01, 0.1);
        let mut opt = OptimizerState::new(OptimizerKind::AdamW, lr).unwrap().with_weight_decay(wd);
        let mut ps = vec![param(&[2.0, -4.0], &[0.0, 0.0])];
        opt.step(&mut ps).unwrap();
        let f = 1.0 - lr * wd;
        assert!((ps[0].values()[0] as f64 - 2.0 * f).abs() < 1e-6);
        assert!((ps[0].values()[1] as f64 + 4.0 * f).abs() < 1e-6);
    }

    #[test]
    fn adamax_accumulator_is_monotone_for_constant_magnitude() {
        let mut opt = OptimizerState::new(OptimizerKind::Adamax, 1e-3).unwrap();
        let mut ps = vec![param(&[0.0, 0.0], &[0.5, -0.5])];
        let mut prev = vec![0.0, 0.0];
        for _ in 0..20 {
            opt.step(&mut ps).unwrap();
            let u = &opt.second_moments()[0];
            for (a, b) in u.iter().zip(&prev) {
                assert!(*a >= 0.0 && a >= b);
            }
            prev = u.clone();
        }
    }

    #[test]
    fn nan_gradient_is_an_error() {
        let mut opt = OptimizerState::new(OptimizerKind::Adam, 1e-3).unwrap();
        let mut ps = vec![param(&[1.0], &[f32::NAN])];
        assert!(matches!(opt.step(&mut ps), Err(Error::NonFinite(_))));
        assert_eq!(ps[0].values(), &[1.0]);
        assert!(OptimizerState::new(OptimizerKind::Adam, 0.0).is_err());
    }
}
