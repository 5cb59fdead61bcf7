//! Generates a synthetic cohort, trains the tiny model on one split and
//! prints the per-epoch history and test metrics.
//!
//! Usage: `cargo run --release --example train -- [n] [epochs] [lambda1] [lambda2]`

use sfcnext::data::{generate_synthetic, Dataset, GeneratorParams, SplitSpec};
use sfcnext::experiment::{train, TrainConfig};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: &str| args.get(i).cloned().unwrap_or_else(|| default.to_string());
    let n: usize = arg(0, "400").parse()?;
    let mut config = TrainConfig::default();
    config.epochs = arg(1, "30").parse()?;
    config.set("lambda1", &arg(2, "0.1"))?;
    config.set("lambda2", &arg(3, "1.0"))?;
    let repeat: usize = arg(4, "0").parse()?;

    let dir = tempfile::tempdir()?;
    let manifest = generate_synthetic(n, config.model.input_dims, 11, &GeneratorParams::default(), dir.path())?;
    let data = Dataset::open(&dir.path().join("manifest.csv"))?;
    println!("generated {} subjects", manifest.rows.len());

    let run = train(&config, &data, &SplitSpec::new(config.seed, repeat))?;
    for e in &run.history {
        println!(
            "epoch {:2} lr {:.2e} train total {:9.3} (mse {:8.3}) val mae {:6.3}",
            e.epoch, e.lr, e.train.total, e.train.mse, e.val_mae
        );
    }
    println!(
        "best epoch {}: test MAE {:.3} (mean predictor {:.3}), PCC {:.3}, SRCC {:.3}, {:.0} s",
        run.best_epoch, run.test.mae, run.baseline_mae, run.test.pcc, run.test.srcc, run.wall_clock_secs
    );
    Ok(())
}
