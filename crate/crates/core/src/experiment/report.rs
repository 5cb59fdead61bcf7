//! CSV writers. Every file has a fixed header; floats use the shortest
//! representation that round-trips, so identical runs give identical bytes.
//! Wall-clock times only go to `timing.csv`.

use std::fs;
use std::path::Path;

use super::cv::{Aggregate, AblationRow, CellStatus, CvReport, SweepRow};
use super::train::{RunReport, ScatterRow};
use crate::error::{Error, Result};

pub const HISTORY_HEADER: [&str; 11] = [
    "epoch", "lr", "train_mse", "train_diff", "train_rank", "train_total", "val_mse", "val_diff",
    "val_rank", "val_total", "val_mae",
];
pub const SCATTER_HEADER: [&str; 3] = ["id", "true_age", "pred_age"];
pub const REPEATS_HEADER: [&str; 8] = [
    "repeat", "best_epoch", "epochs_run", "test_mae", "test_pcc", "test_srcc", "baseline_mae",
    "n_test",
];
pub const AGGREGATE_HEADER: [&str; 6] =
    ["mae_mean", "mae_std", "pcc_mean", "pcc_std", "srcc_mean", "srcc_std"];
pub const SWEEP_HEADER: [&str; 15] = [
    "cell", "part", "primary_loss", "batch_size", "ilr", "optimizer", "attention_heads",
    "conformer_blocks", "status", "mae_mean", "mae_std", "pcc_mean", "pcc_std", "srcc_mean",
    "srcc_std",
];
pub const ABLATION_HEADER: [&str; 9] = [
    "variant", "param_count", "status", "mae_mean", "mae_std", "pcc_mean", "pcc_std", "srcc_mean",
    "srcc_std",
];
pub const TIMING_HEADER: [&str; 2] = ["label", "seconds"];

fn write_rows(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn aggregate_cells(a: &Aggregate) -> Vec<String> {
    [a.mae_mean, a.mae_std, a.pcc_mean, a.pcc_std, a.srcc_mean, a.srcc_std]
        .iter()
        .map(f64::to_string)
        .collect()
}

fn status_cell(s: &CellStatus) -> String {
    match s {
        CellStatus::Ok => "ok".into(),
        CellStatus::Diverged(_) => "diverged".into(),
    }
}

pub fn write_history(path: &Path, run: &RunReport) -> Result<()> {
    let rows = run
        .history
        .iter()
        .map(|e| {
            let mut r = vec![e.epoch.to_string(), e.lr.to_string()];
            for b in [&e.train, &e.val] {
                r.extend([b.mse, b.diff, b.rank, b.total].iter().map(f64::to_string));
            }
            r.push(e.val_mae.to_string());
            r
        })
        .collect();
    write_rows(path, &HISTORY_HEADER, rows)
}

pub fn write_scatter(path: &Path, rows: &[ScatterRow]) -> Result<()> {
    let rows = rows
        .iter()
        .map(|s| vec![s.id.clone(), s.true_age.to_string(), s.pred_age.to_string()])
        .collect();
    write_rows(path, &SCATTER_HEADER, rows)
}

pub fn write_repeats(path: &Path, runs: &[RunReport]) -> Result<()> {
    let rows = runs
        .iter()
        .map(|r| {
            vec![
                r.repeat.to_string(),
                r.best_epoch.to_string(),
                r.history.len().to_string(),
                r.test.mae.to_string(),
                r.test.pcc.to_string(),
                r.test.srcc.to_string(),
                r.baseline_mae.to_string(),
                r.test.n.to_string(),
            ]
        })
        .collect();
    write_rows(path, &REPEATS_HEADER, rows)
}

pub fn write_aggregate(path: &Path, cv: &CvReport) -> Result<()> {
    write_rows(path, &AGGREGATE_HEADER, vec![aggregate_cells(&cv.aggregate)])
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let rows = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let c = &r.config;
            let mut out = vec![
                i.to_string(),
                r.part.clone(),
                c.primary_loss.to_string(),
                c.batch_size.to_string(),
                format!("{:e}", c.ilr),
                c.optimizer.to_string(),
                c.model.attention_heads.to_string(),
                c.model.conformer_blocks.to_string(),
                status_cell(&r.status),
            ];
            out.extend(aggregate_cells(&r.aggregate));
            out
        })
        .collect();
    write_rows(path, &SWEEP_HEADER, rows)
}

pub fn write_ablation(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let rows = rows
        .iter()
        .map(|r| {
            let mut out = vec![
                r.variant.clone(),
                r.param_count.to_string(),
                status_cell(&r.status),
            ];
            out.extend(aggregate_cells(&r.aggregate));
            out
        })
        .collect();
    write_rows(path, &ABLATION_HEADER, rows)
}

pub fn write_timing(path: &Path, rows: &[(String, f64)]) -> Result<()> {
    let rows = rows
        .iter()
        .map(|(l, s)| vec![l.clone(), s.to_string()])
        .collect();
    write_rows(path, &TIMING_HEADER, rows)
}

/// Writes arbitrary rows under `header`; used by the gradient check and the
/// rank benchmark.
pub fn write_table(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    write_rows(path, header, rows)
}
