//! Repeated random re-splits on a small cohort with a short schedule.
//!
//! Usage: `cargo run --release --example cv -- [n] [epochs] [repeats]`

use sfcnext::data::{generate_synthetic, Dataset, GeneratorParams};
use sfcnext::experiment::{cross_validate, TrainConfig};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let get = |i: usize, d: usize| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let mut config = TrainConfig::default();
    config.epochs = get(1, 3);
    config.repeats = get(2, 3);
    config.workers = std::thread::available_parallelism().map_or(1, |n| n.get());

    let dir = tempfile::tempdir()?;
    generate_synthetic(get(0, 60), config.model.input_dims, 5, &GeneratorParams::default(), dir.path())?;
    let data = Dataset::open(&dir.path().join("manifest.csv"))?;
    let cv = cross_validate(&config, &data)?;
    for r in &cv.runs {
        println!(
            "repeat {}: test MAE {:.3} (baseline {:.3}) SRCC {:.3}",
            r.repeat, r.test.mae, r.baseline_mae, r.test.srcc
        );
    }
    let a = cv.aggregate;
    println!(
        "MAE {:.3} ± {:.3}  PCC {:.3} ± {:.3}  SRCC {:.3} ± {:.3}",
        a.mae_mean, a.mae_std, a.pcc_mean, a.pcc_std, a.srcc_mean, a.srcc_std
    );
    Ok(())
}
