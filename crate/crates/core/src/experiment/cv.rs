use std::sync::Mutex;

use super::config::TrainConfig;
use super::train::{train, RunReport};
use crate::data::{Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::losses::PrimaryLoss;
use crate::model::param_count;
use crate::tensor::OptimizerKind;

/// Mean and population standard deviation of each test metric.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub mae_mean: f64,
    pub mae_std: f64,
    pub pcc_mean: f64,
    pub pcc_std: f64,
    pub srcc_mean: f64,
    pub srcc_std: f64,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl Aggregate {
    pub fn from_runs(runs: &[RunReport]) -> Self {
        let col = |f: fn(&RunReport) -> f64| mean_std(&runs.iter().map(f).collect::<Vec<_>>());
        let (mae_mean, mae_std) = col(|r| r.test.mae);
        let (pcc_mean, pcc_std) = col(|r| r.test.pcc);
        let (srcc_mean, srcc_std) = col(|r| r.test.srcc);
        Aggregate {
            mae_mean,
            mae_std,
            pcc_mean,
            pcc_std,
            srcc_mean,
            srcc_std,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CvReport {
    /// One report per repeat, in repeat order.
    pub runs: Vec<RunReport>,
    pub aggregate: Aggregate,
}

/// Runs `f` for every index and returns the results in index order.
/// Work is spread over up to `workers` threads.
fn run_indexed<R: Send>(count: usize, workers: usize, f: impl Fn(usize) -> R + Sync) -> Vec<R> {
    let workers = workers.clamp(1, count.max(1));
    if workers == 1 {
        return (0..count).map(&f).collect();
    }
    let next = Mutex::new(0usize);
    let slots: Vec<Mutex<Option<R>>> = (0..count).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = {
                    let mut n = next.lock().unwrap();
                    let i = *n;
                    *n += 1;
                    i
                };
                if i >= count {
                    break;
                }
                let r = f(i);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().expect("every slot filled"))
        .collect()
}

fn worker_count(config: &TrainConfig) -> usize {
    if config.deterministic {
        1
    } else {
        config.workers.max(1)
    }
}

/// `config.repeats` independent random re-splits, each trained from scratch.
pub fn cross_validate(config: &TrainConfig, data: &Dataset) -> Result<CvReport> {
    config.validate()?;
    let runs = run_indexed(config.repeats, worker_count(config), |r| {
        train(config, data, &SplitSpec::new(config.seed, r))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let aggregate = Aggregate::from_runs(&runs);
    Ok(CvReport { runs, aggregate })
}

/// One hyperparameter axis of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub enum Axis {
    Loss(Vec<PrimaryLoss>),
    BatchSize(Vec<usize>),
    Ilr(Vec<f64>),
    Optimizer(Vec<OptimizerKind>),
    Heads(Vec<usize>),
    Blocks(Vec<usize>),
}

impl Axis {
    fn len(&self) -> usize {
        match self {
            Axis::Loss(v) => v.len(),
            Axis::BatchSize(v) | Axis::Heads(v) | Axis::Blocks(v) => v.len(),
            Axis::Ilr(v) => v.len(),
            Axis::Optimizer(v) => v.len(),
        }
    }

    fn apply(&self, i: usize, cfg: &mut TrainConfig) {
        match self {
            Axis::Loss(v) => cfg.primary_loss = v[i],
            Axis::BatchSize(v) => cfg.batch_size = v[i],
            Axis::Ilr(v) => cfg.ilr = v[i],
            Axis::Optimizer(v) => cfg.optimizer = v[i],
            Axis::Heads(v) => cfg.model.attention_heads = v[i],
            Axis::Blocks(v) => cfg.model.conformer_blocks = v[i],
        }
    }

    fn parse(key: &str, values: &str) -> Result<Axis> {
        fn list<V: std::str::FromStr>(key: &str, values: &str) -> Result<Vec<V>> {
            values
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad {key} value {s:?}")))
                })
                .collect()
        }
        Ok(match key {
            "loss" | "primary_loss" => Axis::Loss(list(key, values)?),
            "batch" | "batch_size" => Axis::BatchSize(list(key, values)?),
            "ilr" => Axis::Ilr(list(key, values)?),
            "optimizer" => Axis::Optimizer(list(key, values)?),
            "heads" | "attention_heads" => Axis::Heads(list(key, values)?),
            "blocks" | "conformer_blocks" => Axis::Blocks(list(key, values)?),
            other => return Err(Error::Config(format!("unknown sweep axis {other:?}"))),
        })
    }
}

/// Cartesian product of a few axes; every other setting comes from the base config.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPart {
    pub name: String,
    pub axes: Vec<Axis>,
}

/// A union of parts, each a Cartesian product of axes.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepGrid {
    pub parts: Vec<SweepPart>,
}

impl SweepGrid {
    /// Loss x batch size; learning rate x optimizer; heads x blocks.
    pub fn standard() -> Self {
        use OptimizerKind::*;
        SweepGrid {
            parts: vec![
                SweepPart {
                    name: "loss_batch".into(),
                    axes: vec![
                        Axis::Loss(vec![PrimaryLoss::Mae, PrimaryLoss::Mse]),
                        Axis::BatchSize(vec![4, 8, 20]),
                    ],
                },
                SweepPart {
                    name: "ilr_optimizer".into(),
                    axes: vec![
                        Axis::Optimizer(vec![Adam, AdamW, Adamax]),
                        Axis::Ilr(vec![1e-4, 1e-3, 2e-3, 4e-3]),
                    ],
                },
                SweepPart {
                    name: "heads_blocks".into(),
                    axes: vec![Axis::Heads(vec![2]), Axis::Blocks(vec![1, 2, 3])],
                },
                SweepPart {
                    name: "heads_blocks".into(),
                    axes: vec![Axis::Heads(vec![4]), Axis::Blocks(vec![3])],
                },
            ],
        }
    }

    /// One part per non-empty line, e.g. `loss=mae,mse batch=4,8,20`.
    /// A leading `name:` labels the part.
    pub fn parse(text: &str) -> Result<Self> {
        let mut parts = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (name, body) = match line.split_once(':') {
                Some((n, b)) => (n.trim().to_string(), b),
                None => (format!("part{i}"), line),
            };
            let axes = body
                .split_whitespace()
                .map(|tok| {
                    let (k, v) = tok
                        .split_once('=')
                        .ok_or_else(|| Error::Config(format!("bad sweep token {tok:?}")))?;
                    Axis::parse(k, v)
                })
                .collect::<Result<Vec<_>>>()?;
            parts.push(SweepPart { name, axes });
        }
        if parts.is_empty() {
            return Err(Error::Config("sweep grid is empty".into()));
        }
        Ok(SweepGrid { parts })
    }

    /// Every cell's config, in part order then row-major over the axes.
    pub fn cells(&self, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
        let mut out = Vec::new();
        for part in &self.parts {
            let total: usize = part.axes.iter().map(Axis::len).product();
            for idx in 0..total {
                let mut k = idx;
                let mut cfg = base.clone();
                for axis in part.axes.iter().rev() {
                    axis.apply(k % axis.len(), &mut cfg);
                    k /= axis.len();
                }
                out.push((part.name.clone(), cfg));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CellStatus {
    Ok,
    Diverged(String),
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub part: String,
    pub config: TrainConfig,
    pub status: CellStatus,
    /// NaN for diverged cells.
    pub aggregate: Aggregate,
}

fn nan_aggregate() -> Aggregate {
    Aggregate {
        mae_mean: f64::NAN,
        mae_std: f64::NAN,
        pcc_mean: f64::NAN,
        pcc_std: f64::NAN,
        srcc_mean: f64::NAN,
        srcc_std: f64::NAN,
    }
}

fn run_cell(cfg: &TrainConfig, data: &Dataset) -> Result<(CellStatus, Aggregate)> {
    let mut serial = cfg.clone();
    serial.workers = 1;
    match cross_validate(&serial, data) {
        Ok(r) => Ok((CellStatus::Ok, r.aggregate)),
        Err(e @ Error::Diverged { .. }) => Ok((CellStatus::Diverged(e.to_string()), nan_aggregate())),
        Err(e) => Err(e),
    }
}

/// Cross-validates every cell. A diverged cell is recorded, not fatal.
pub fn sweep(base: &TrainConfig, grid: &SweepGrid, data: &Dataset) -> Result<Vec<SweepRow>> {
    let cells = grid.cells(base);
    if cells.is_empty() {
        return Err(Error::Config("sweep grid has no cells".into()));
    }
    for (_, cfg) in &cells {
        cfg.validate()?;
    }
    run_indexed(cells.len(), worker_count(base), |i| run_cell(&cells[i].1, data))
        .into_iter()
        .zip(cells)
        .map(|(r, (part, config))| {
            let (status, aggregate) = r?;
            Ok(SweepRow {
                part,
                config,
                status,
                aggregate,
            })
        })
        .collect()
}

/// The base model and three variants that each change one field.
pub fn ablation_variants(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let mut no_sex = base.clone();
    no_sex.model.use_sex_branch = false;
    let mut no_conformer = base.clone();
    no_conformer.model.use_conformer = false;
    let mut deep = base.clone();
    deep.model.stage_blocks = [3, 3, 9, 3];
    vec![
        ("full".into(), base.clone()),
        ("no_sex".into(), no_sex),
        ("no_conformer".into(), no_conformer),
        ("stages_3_3_9_3".into(), deep),
    ]
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: String,
    pub config: TrainConfig,
    pub param_count: usize,
    pub status: CellStatus,
    pub aggregate: Aggregate,
}

/// Cross-validates the four variants on identical seeds and splits.
pub fn ablate(base: &TrainConfig, data: &Dataset) -> Result<Vec<AblationRow>> {
    let variants = ablation_variants(base);
    run_indexed(variants.len(), worker_count(base), |i| run_cell(&variants[i].1, data))
        .into_iter()
        .zip(variants)
        .map(|(r, (variant, config))| {
            let (status, aggregate) = r?;
            Ok(AblationRow {
                param_count: param_count(&config.model)?,
                variant,
                config,
                status,
                aggregate,
            })
        })
        .collect()
}
