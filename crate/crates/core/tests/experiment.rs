use std::collections::HashSet;

use sfcnext::data::{generate_synthetic, split, Dataset, GeneratorParams, SplitSpec};
use sfcnext::experiment::report::{
    write_aggregate, write_history, write_scatter, AGGREGATE_HEADER, HISTORY_HEADER,
};
use sfcnext::experiment::{
    ablation_variants, cross_validate, mean_std, sweep, train, CellStatus, LrSchedule, SweepGrid,
    TrainConfig,
};
use sfcnext::losses::PrimaryLoss;
use sfcnext::metrics::mae;
use sfcnext::tensor::OptimizerKind;
use sfcnext::Error;

fn dataset(n: usize) -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic(n, [24; 3], 7, &GeneratorParams::default(), dir.path()).unwrap();
    let ds = Dataset::open(&dir.path().join("manifest.csv")).unwrap();
    (dir, ds)
}

fn quick() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.epochs = 2;
    c.repeats = 2;
    c.batch_size = 4;
    c.deterministic = true;
    c
}

#[test]
fn config_validation_and_parsing() {
    let mut c = TrainConfig::default();
    c.validate().unwrap();
    c.epochs = 0;
    assert!(matches!(c.validate(), Err(Error::Config(_))));

    let mut c = TrainConfig::default();
    c.apply_text("# comment\nepochs = 3\nilr=2e-3 # trailing\noptimizer = adamw\nattention_heads = 4\nprimary_loss = mae\n")
        .unwrap();
    assert_eq!(c.epochs, 3);
    assert_eq!(c.ilr, 2e-3);
    assert_eq!(c.optimizer, OptimizerKind::AdamW);
    assert_eq!(c.model.attention_heads, 4);
    assert_eq!(c.primary_loss, PrimaryLoss::Mae);
    assert!(c.apply_text("no_such_key = 1").is_err());
    assert!(c.apply_text("epochs").is_err());
    assert!(c.apply_text("lambda1 = -1").is_err());
    assert!(c.apply_text("epsilon = 0").is_err());

    let mut c = TrainConfig::default();
    c.batch_size = 0;
    assert!(c.validate().is_err());
}

#[test]
fn weight_decay_defaults_follow_the_optimizer() {
    let mut c = TrainConfig::default();
    c.optimizer = OptimizerKind::AdamW;
    assert_eq!(c.effective_weight_decay(), 0.01);
    c.optimizer = OptimizerKind::Adamax;
    assert_eq!(c.effective_weight_decay(), 0.0);
    c.weight_decay = Some(0.5);
    assert_eq!(c.effective_weight_decay(), 0.5);
}

#[test]
fn cosine_schedule_decays_from_the_initial_rate() {
    let mut c = TrainConfig::default();
    c.epochs = 10;
    assert_eq!(c.lr_at(0), c.ilr);
    let lrs: Vec<f64> = (0..10).map(|e| c.lr_at(e)).collect();
    assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    assert!(lrs[9] > 0.0);
    c.lr_schedule = LrSchedule::Constant;
    assert!((0..10).all(|e| c.lr_at(e) == c.ilr));
}

#[test]
fn aggregate_uses_population_std() {
    let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(m, 2.5);
    assert!((s - 1.25f64.sqrt()).abs() < 1e-15);
    let (m, s) = mean_std(&[7.0]);
    assert_eq!((m, s), (7.0, 0.0));
}

#[test]
fn run_report_is_consistent_with_its_split() {
    let (_dir, ds) = dataset(30);
    let cfg = quick();
    let spec = SplitSpec::new(cfg.seed, 1);
    let run = train(&cfg, &ds, &spec).unwrap();
    let s = split(ds.len(), &spec).unwrap();

    let ids: Vec<&str> = run.scatter.iter().map(|r| r.id.as_str()).collect();
    let want: Vec<&str> = s.test.iter().map(|&i| ds.ids[i].as_str()).collect();
    assert_eq!(ids, want);

    let truth: Vec<f64> = run.scatter.iter().map(|r| r.true_age).collect();
    let pred: Vec<f64> = run.scatter.iter().map(|r| r.pred_age).collect();
    assert!((run.test.mae - mae(&pred, &truth).unwrap()).abs() < 1e-12);

    let train_mean = s.train.iter().map(|&i| ds.ages[i]).sum::<f64>() / s.train.len() as f64;
    let base = truth.iter().map(|t| (t - train_mean).abs()).sum::<f64>() / truth.len() as f64;
    assert!((run.baseline_mae - base).abs() < 1e-9);

    assert!(!run.history.is_empty() && run.history.len() <= cfg.epochs);
    assert!(run.best_epoch < run.history.len());
    let best = run.history[run.best_epoch].val_mae;
    assert!(run.history.iter().all(|h| h.val_mae >= best));
}

#[test]
fn deterministic_training_is_reproducible() {
    let (_dir, ds) = dataset(20);
    let cfg = quick();
    let a = train(&cfg, &ds, &SplitSpec::new(0, 0)).unwrap();
    let b = train(&cfg, &ds, &SplitSpec::new(0, 0)).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.scatter, b.scatter);
    assert_eq!(a.config_echo, b.config_echo);

    let out = tempfile::tempdir().unwrap();
    let bytes = |run: &sfcnext::experiment::RunReport, tag: &str| {
        let h = out.path().join(format!("h{tag}.csv"));
        let s = out.path().join(format!("s{tag}.csv"));
        write_history(&h, run).unwrap();
        write_scatter(&s, &run.scatter).unwrap();
        (std::fs::read(h).unwrap(), std::fs::read(s).unwrap())
    };
    let (ha, sa) = bytes(&a, "a");
    assert_eq!((ha.clone(), sa), bytes(&b, "b"));
    let header = String::from_utf8(ha).unwrap();
    assert_eq!(header.lines().next().unwrap(), HISTORY_HEADER.join(","));
}

#[test]
fn repeats_use_distinct_test_partitions() {
    let (_dir, ds) = dataset(20);
    let mut cfg = quick();
    cfg.epochs = 1;
    cfg.repeats = 10;
    let cv = cross_validate(&cfg, &ds).unwrap();
    assert_eq!(cv.runs.len(), 10);
    let sets: HashSet<Vec<String>> = cv
        .runs
        .iter()
        .map(|r| r.scatter.iter().map(|s| s.id.clone()).collect())
        .collect();
    assert_eq!(sets.len(), 10);
    for (i, r) in cv.runs.iter().enumerate() {
        assert_eq!(r.repeat, i);
    }
    let (m, s) = mean_std(&cv.runs.iter().map(|r| r.test.mae).collect::<Vec<_>>());
    assert_eq!((cv.aggregate.mae_mean, cv.aggregate.mae_std), (m, s));

    let out = tempfile::tempdir().unwrap();
    let p = out.path().join("agg.csv");
    write_aggregate(&p, &cv).unwrap();
    let text = std::fs::read_to_string(p).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], AGGREGATE_HEADER.join(","));
    assert_eq!(lines.len(), 2);
}

#[test]
fn standard_grid_shape() {
    let grid = SweepGrid::standard();
    let base = TrainConfig::default();
    let cells = grid.cells(&base);
    assert!(cells.len() >= 18);
    let top: Vec<_> = cells.iter().filter(|(p, _)| p == &grid.parts[0].name).collect();
    assert_eq!(top.len(), 6);
    let combos: HashSet<(String, usize)> = top
        .iter()
        .map(|(_, c)| (c.primary_loss.to_string(), c.batch_size))
        .collect();
    assert_eq!(combos.len(), 6);
    for (_, c) in &top {
        let mut back = c.clone();
        back.primary_loss = base.primary_loss;
        back.batch_size = base.batch_size;
        assert_eq!(back, base);
    }
}

#[test]
fn grid_text_parses() {
    let g = SweepGrid::parse("a: loss=mae,mse batch=4,8\n\n# skip\nilr=1e-3,2e-3 optimizer=adam").unwrap();
    assert_eq!(g.parts.len(), 2);
    assert_eq!(g.parts[0].name, "a");
    assert_eq!(g.cells(&TrainConfig::default()).len(), 6);
    assert!(SweepGrid::parse("").is_err());
    assert!(SweepGrid::parse("bogus=1").is_err());
    assert!(SweepGrid::parse("batch=x").is_err());
}

#[test]
fn singleton_sweep_equals_cross_validation() {
    let (_dir, ds) = dataset(20);
    let cfg = quick();
    let grid = SweepGrid::parse("only: batch=4").unwrap();
    let rows = sweep(&cfg, &grid, &ds).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].status, CellStatus::Ok);
    let cv = cross_validate(&cfg, &ds).unwrap();
    assert_eq!(rows[0].aggregate, cv.aggregate);
}

#[test]
fn diverged_cell_is_recorded() {
    let (_dir, ds) = dataset(20);
    let mut cfg = quick();
    cfg.repeats = 1;
    cfg.lr_schedule = LrSchedule::Constant;
    let grid = SweepGrid::parse("lr: optimizer=adam ilr=1e-3,1e30").unwrap();
    let rows = sweep(&cfg, &grid, &ds).unwrap();
    assert_eq!(rows[0].status, CellStatus::Ok);
    assert!(rows[0].aggregate.mae_mean.is_finite());
    assert!(matches!(rows[1].status, CellStatus::Diverged(_)));
    assert!(rows[1].aggregate.mae_mean.is_nan());
}

#[test]
fn ablation_variants_change_one_field_each() {
    let base = TrainConfig::default();
    let v = ablation_variants(&base);
    assert_eq!(v.len(), 4);
    assert_eq!(v[0].1, base);
    for (name, cfg) in &v[1..] {
        let m = &cfg.model;
        let b = &base.model;
        let changed = [
            m.use_sex_branch != b.use_sex_branch,
            m.use_conformer != b.use_conformer,
            m.stage_blocks != b.stage_blocks,
        ];
        assert_eq!(changed.iter().filter(|&&c| c).count(), 1, "{name}");
        let mut restored = cfg.clone();
        restored.model.use_sex_branch = b.use_sex_branch;
        restored.model.use_conformer = b.use_conformer;
        restored.model.stage_blocks = b.stage_blocks;
        assert_eq!(restored, base, "{name}");
    }
    assert_eq!(v[3].1.model.stage_blocks, [3, 3, 9, 3]);
}
