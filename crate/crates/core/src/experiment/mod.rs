//! Training, repeated-split cross-validation, hyperparameter sweeps and
//! ablations, plus their CSV reports.

mod config;
mod cv;
pub mod report;
mod train;

pub use config::{LrSchedule, TrainConfig};
pub use cv::{
    ablate, ablation_variants, cross_validate, mean_std, sweep, AblationRow, Aggregate, Axis,
    CellStatus, CvReport, SweepGrid, SweepPart, SweepRow,
};
pub use train::{predict_indices, train, EpochRecord, RunReport, ScatterRow};
