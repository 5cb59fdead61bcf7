use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sfcnext::data::{generate_synthetic, split, Dataset, GeneratorParams, SplitSpec};
use sfcnext::experiment::report::{
    write_ablation, write_aggregate, write_history, write_repeats, write_scatter, write_sweep,
    write_table, write_timing,
};
use sfcnext::experiment::{ablate, cross_validate, sweep, train, SweepGrid, TrainConfig};
use sfcnext::gradcheck::{gradcheck, GradcheckConfig, Scope};
use sfcnext::model::save_checkpoint;
use sfcnext::rankbench::{rankbench, RankbenchConfig};

#[derive(Parser)]
#[command(name = "sfcnext", version, about = "Soft-rank brain-age regression toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded, bit-reproducible run.
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(long, alias = "out", global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Override one configuration key, e.g. `--set epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Args)]
struct DataArg {
    /// Dataset manifest written by `generate`.
    #[arg(long, default_value = "data/manifest.csv")]
    data: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Generate {
        #[arg(long, default_value_t = 400)]
        n: usize,
        /// `D,H,W` or a single edge length.
        #[arg(long, default_value = "24")]
        dims: String,
        #[command(flatten)]
        common: Common,
    },
    /// Train on one split and evaluate on its test subset.
    Train {
        #[command(flatten)]
        data: DataArg,
        #[arg(long, default_value_t = 0)]
        repeat: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Repeated random re-splits with mean and std of the test metrics.
    Cv {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        common: Common,
    },
    /// Cross-validate every cell of a hyperparameter grid.
    Sweep {
        #[command(flatten)]
        data: DataArg,
        /// Grid file, one part per line such as `lr: optimizer=adam,adamw ilr=1e-3,2e-3`.
        /// Defaults to the built-in 22-cell grid.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Cross-validate the full model and its three ablations.
    Ablate {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// ops, softrank or model. Repeatable; all scopes when omitted.
        #[arg(long)]
        scope: Vec<Scope>,
        /// Random inputs per tape operator.
        #[arg(long, default_value_t = 100)]
        ops_cases: usize,
        #[arg(long, default_value_t = 1000)]
        softrank_cases: usize,
        #[arg(long, default_value_t = 32)]
        model_samples: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Soft rank against the pairwise baseline, plus projection checks.
    Rankbench {
        #[arg(long, value_delimiter = ',', default_values_t = [1_000usize, 10_000, 100_000])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 11)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        pairwise_trials: usize,
        #[arg(long, default_value_t = 1000)]
        certificate_cases: usize,
        #[command(flatten)]
        common: Common,
    },
}

fn parse_dims(s: &str) -> Result<[usize; 3]> {
    let v = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .with_context(|| format!("bad --dims {s:?}"))?;
    match v.as_slice() {
        [e] => Ok([*e; 3]),
        [d, h, w] => Ok([*d, *h, *w]),
        _ => bail!("--dims takes one or three values, got {s:?}"),
    }
}

impl Common {
    fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::from_file(p)?,
            None => TrainConfig::default(),
        };
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got {o:?}"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if self.deterministic {
            cfg.deterministic = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn seed_or(&self, default: u64) -> Result<u64> {
        match (self.seed, &self.config) {
            (Some(s), _) => Ok(s),
            (None, Some(_)) => Ok(self.train_config()?.seed),
            (None, None) => Ok(default),
        }
    }

    fn out(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out_dir)
            .with_context(|| format!("creating {}", self.out_dir.display()))?;
        Ok(&self.out_dir)
    }
}

fn load(data: &DataArg, cfg: &TrainConfig) -> Result<Dataset> {
    let ds = Dataset::open(&data.data)
        .with_context(|| format!("loading dataset {}", data.data.display()))?;
    if ds.dims != cfg.model.input_dims {
        bail!(
            "dataset dims {:?} differ from model input_dims {:?}; pass --set input_dims=...",
            ds.dims,
            cfg.model.input_dims
        );
    }
    Ok(ds)
}

fn write_echo(out: &Path, cfg: &TrainConfig) -> Result<()> {
    let p = out.join("config-echo.txt");
    fs::write(&p, cfg.to_string()).with_context(|| format!("writing {}", p.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { n, dims, common } => {
            let dims = parse_dims(&dims)?;
            let seed = common.seed_or(0)?;
            let out = common.out()?;
            let m = generate_synthetic(n, dims, seed, &GeneratorParams::default(), out)?;
            let ages = m.ages();
            let mean = ages.iter().sum::<f64>() / ages.len() as f64;
            println!(
                "wrote {} subjects ({}x{}x{}) to {}; mean age {mean:.2}",
                m.rows.len(),
                dims[0],
                dims[1],
                dims[2],
                out.join("manifest.csv").display()
            );
        }
        Command::Train {
            data,
            repeat,
            common,
        } => {
            let cfg = common.train_config()?;
            let ds = load(&data, &cfg)?;
            let out = common.out()?;
            let spec = SplitSpec::new(cfg.seed, repeat);
            let parts = split(ds.len(), &spec)?;
            println!(
                "split {}/{}/{} (repeat {repeat})",
                parts.train.len(),
                parts.val.len(),
                parts.test.len()
            );
            let r = train(&cfg, &ds, &spec)?;
            write_echo(out, &cfg)?;
            write_repeats(&out.join("report.csv"), std::slice::from_ref(&r))?;
            write_history(&out.join("history.csv"), &r)?;
            write_scatter(&out.join("scatter.csv"), &r.scatter)?;
            save_checkpoint(&out.join("checkpoint.sfxc"), &r.params)?;
            write_timing(&out.join("timing.csv"), &[("train".into(), r.wall_clock_secs)])?;
            println!(
                "best epoch {}: test MAE {:.3} (baseline {:.3}), PCC {:.3}, SRCC {:.3}",
                r.best_epoch, r.test.mae, r.baseline_mae, r.test.pcc, r.test.srcc
            );
        }
        Command::Cv { data, common } => {
            let cfg = common.train_config()?;
            let ds = load(&data, &cfg)?;
            let out = common.out()?;
            let cv = cross_validate(&cfg, &ds)?;
            write_echo(out, &cfg)?;
            write_aggregate(&out.join("report.csv"), &cv)?;
            write_repeats(&out.join("repeats.csv"), &cv.runs)?;
            for r in &cv.runs {
                write_scatter(&out.join(format!("scatter-{}.csv", r.repeat)), &r.scatter)?;
            }
            if let Some(first) = cv.runs.first() {
                write_scatter(&out.join("scatter.csv"), &first.scatter)?;
                save_checkpoint(&out.join("checkpoint.sfxc"), &first.params)?;
            }
            let timing: Vec<(String, f64)> = cv
                .runs
                .iter()
                .map(|r| (format!("repeat{}", r.repeat), r.wall_clock_secs))
                .collect();
            write_timing(&out.join("timing.csv"), &timing)?;
            let a = &cv.aggregate;
            println!(
                "{} repeats: MAE {:.3} ± {:.3}, PCC {:.3} ± {:.3}, SRCC {:.3} ± {:.3}",
                cv.runs.len(),
                a.mae_mean,
                a.mae_std,
                a.pcc_mean,
                a.pcc_std,
                a.srcc_mean,
                a.srcc_std
            );
        }
        Command::Sweep { data, grid, common } => {
            let cfg = common.train_config()?;
            let grid = match grid {
                Some(p) => {
                    let text = fs::read_to_string(&p)
                        .with_context(|| format!("reading {}", p.display()))?;
                    SweepGrid::parse(&text)?
                }
                None => SweepGrid::standard(),
            };
            let ds = load(&data, &cfg)?;
            let out = common.out()?;
            let rows = sweep(&cfg, &grid, &ds)?;
            write_echo(out, &cfg)?;
            write_sweep(&out.join("report.csv"), &rows)?;
            let diverged = rows
                .iter()
                .filter(|r| r.status != sfcnext::experiment::CellStatus::Ok)
                .count();
            println!("{} cells, {diverged} diverged", rows.len());
        }
        Command::Ablate { data, common } => {
            let cfg = common.train_config()?;
            let ds = load(&data, &cfg)?;
            let out = common.out()?;
            let rows = ablate(&cfg, &ds)?;
            write_echo(out, &cfg)?;
            write_ablation(&out.join("report.csv"), &rows)?;
            for r in &rows {
                println!(
                    "{:<16} params {:>9}  MAE {:.3} ± {:.3}",
                    r.variant, r.param_count, r.aggregate.mae_mean, r.aggregate.mae_std
                );
            }
        }
        Command::Gradcheck {
            scope,
            ops_cases,
            softrank_cases,
            model_samples,
            common,
        } => {
            let gc = GradcheckConfig {
                scopes: if scope.is_empty() {
                    Scope::ALL.to_vec()
                } else {
                    scope
                },
                ops_cases,
                softrank_cases,
                model_samples,
                seed: common.seed_or(0)?,
            };
            let out = common.out()?;
            let report = gradcheck(&gc)?;
            let rows = report
                .results
                .iter()
                .map(|r| {
                    vec![
                        r.scope.to_string(),
                        r.name.clone(),
                        r.worst_rel_error.to_string(),
                        r.tolerance.to_string(),
                        r.cases.to_string(),
                        r.skipped.to_string(),
                        r.passed().to_string(),
                    ]
                })
                .collect();
            write_table(
                &out.join("report.csv"),
                &["scope", "name", "worst_rel_error", "tolerance", "cases", "skipped", "passed"],
                rows,
            )?;
            let failed = report.results.iter().filter(|r| !r.passed()).count();
            if let Some(w) = report.worst() {
                println!(
                    "{} checks, {failed} failed; worst {} {} at {:.2e} (tol {:.0e})",
                    report.results.len(),
                    w.scope,
                    w.name,
                    w.worst_rel_error,
                    w.tolerance
                );
            }
        }
        Command::Rankbench {
            sizes,
            trials,
            pairwise_trials,
            certificate_cases,
            common,
        } => {
            let rc = RankbenchConfig {
                pairwise_max_n: sizes.iter().copied().max().unwrap_or(0),
                sizes,
                trials,
                pairwise_trials,
                certificate_cases,
                seed: common.seed_or(0)?,
                ..RankbenchConfig::default()
            };
            let out = common.out()?;
            let report = rankbench(&rc)?;
            let checks = report
                .checks
                .iter()
                .map(|c| {
                    vec![
                        c.n.to_string(),
                        c.check.to_string(),
                        c.cases.to_string(),
                        c.passed.to_string(),
                        c.worst.to_string(),
                    ]
                })
                .collect();
            write_table(
                &out.join("report.csv"),
                &["n", "check", "cases", "passed", "worst"],
                checks,
            )?;
            let timings = report
                .timings
                .iter()
                .map(|t| {
                    vec![
                        t.n.to_string(),
                        t.soft_rank_secs.to_string(),
                        t.pairwise_secs.to_string(),
                        t.soft_rank_growth.to_string(),
                        t.pairwise_growth.to_string(),
                    ]
                })
                .collect();
            write_table(
                &out.join("timing.csv"),
                &["n", "soft_rank_secs", "pairwise_secs", "soft_rank_growth", "pairwise_growth"],
                timings,
            )?;
            for t in &report.timings {
                println!(
                    "n {:>7}: soft rank {:.3e} s (x{:.1}), pairwise {:.3e} s (x{:.1})",
                    t.n, t.soft_rank_secs, t.soft_rank_growth, t.pairwise_secs, t.pairwise_growth
                );
            }
            println!("certificate pass rate {:.4}", report.certificate_pass_rate());
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    run(Cli::parse())
}
