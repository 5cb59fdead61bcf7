use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::{LossWeights, PrimaryLoss};
use crate::model::ModelConfig;
use crate::softrank::SoftRankConfig;
use crate::tensor::OptimizerKind;

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the initial rate to zero over all epochs.
    #[default]
    Cosine,
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        })
    }
}

impl std::str::FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            other => Err(Error::Config(format!("unknown lr schedule {other:?}"))),
        }
    }
}

/// Everything one training run depends on.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub ilr: f64,
    pub lr_schedule: LrSchedule,
    pub optimizer: OptimizerKind,
    /// `None` uses the optimizer's default.
    pub weight_decay: Option<f64>,
    pub epochs: usize,
    /// Epochs without a validation MAE improvement before stopping.
    pub patience: usize,
    pub repeats: usize,
    pub seed: u64,
    pub primary_loss: PrimaryLoss,
    pub weights: LossWeights,
    pub softrank: SoftRankConfig,
    pub model: ModelConfig,
    pub deterministic: bool,
    /// Worker threads for repeats and sweep cells; ignored when deterministic.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            ilr: 1e-3,
            lr_schedule: LrSchedule::default(),
            optimizer: OptimizerKind::Adamax,
            weight_decay: None,
            epochs: 30,
            patience: 10,
            repeats: 10,
            seed: 0,
            primary_loss: PrimaryLoss::Mse,
            weights: LossWeights::default(),
            softrank: SoftRankConfig::default(),
            model: ModelConfig::tiny(),
            deterministic: false,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.ilr > 0.0 && self.ilr.is_finite()) {
            return Err(Error::Config(format!("ilr must be positive, got {}", self.ilr)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        self.model.validate()
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "batch_size" => self.batch_size = parse(key, value)?,
            "ilr" => self.ilr = parse(key, value)?,
            "lr_schedule" => self.lr_schedule = value.parse()?,
            "optimizer" => self.optimizer = value.parse()?,
            "weight_decay" => {
                self.weight_decay = match value {
                    "default" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "epochs" => self.epochs = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "repeats" => self.repeats = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "primary_loss" => self.primary_loss = value.parse()?,
            "lambda1" => self.weights = LossWeights::new(parse(key, value)?, self.weights.lambda2())?,
            "lambda2" => self.weights = LossWeights::new(self.weights.lambda1(), parse(key, value)?)?,
            "epsilon" => self.softrank = SoftRankConfig::new(parse(key, value)?)?,
            "deterministic" => self.deterministic = parse(key, value)?,
            "workers" => self.workers = parse(key, value)?,
            k => {
                if !self.model.set(k, value)? {
                    return Err(Error::Config(format!("unknown key {k:?}")));
                }
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {raw:?}", lineno + 1))
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = TrainConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn effective_weight_decay(&self) -> f64 {
        self.weight_decay
            .unwrap_or_else(|| self.optimizer.default_weight_decay())
    }

    /// Learning rate for a zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.ilr,
            LrSchedule::Cosine => {
                let t = epoch as f64 / self.epochs as f64;
                0.5 * self.ilr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

impl fmt::Display for TrainConfig {
    /// Canonical echo; parsing it back yields an equal config.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "ilr = {:e}", self.ilr)?;
        writeln!(f, "lr_schedule = {}", self.lr_schedule)?;
        writeln!(f, "optimizer = {}", self.optimizer)?;
        match self.weight_decay {
            Some(w) => writeln!(f, "weight_decay = {w}")?,
            None => writeln!(f, "weight_decay = default")?,
        }
        writeln!(f, "epochs = {}", self.epochs)?;
        writeln!(f, "patience = {}", self.patience)?;
        writeln!(f, "repeats = {}", self.repeats)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "primary_loss = {}", self.primary_loss)?;
        writeln!(f, "lambda1 = {}", self.weights.lambda1())?;
        writeln!(f, "lambda2 = {}", self.weights.lambda2())?;
        writeln!(f, "epsilon = {}", self.softrank.epsilon())?;
        writeln!(f, "deterministic = {}", self.deterministic)?;
        writeln!(f, "workers = {}", self.workers)?;
        write!(f, "{}", self.model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut cfg = TrainConfig::default();
        cfg.apply_text("optimizer = adamw\nlambda1 = 0.5 # comment\nstage_blocks = 3,3,9,3\n")
            .unwrap();
        let mut back = TrainConfig::default();
        back.apply_text(&cfg.to_string()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(back.model.stage_blocks, [3, 3, 9, 3]);
    }

    #[test]
    fn rejects_bad_settings() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.set("nonsense", "1").is_err());
        assert!(cfg.set("epsilon", "0").is_err());
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
    }
}
