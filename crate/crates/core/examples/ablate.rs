//! The full model against its three ablations, with parameter counts.

use sfcnext::data::{generate_synthetic, Dataset, GeneratorParams};
use sfcnext::experiment::{ablate, TrainConfig};

fn main() -> anyhow::Result<()> {
    let mut base = TrainConfig::default();
    base.epochs = 2;
    base.repeats = 2;
    let dir = tempfile::tempdir()?;
    generate_synthetic(40, base.model.input_dims, 4, &GeneratorParams::default(), dir.path())?;
    let data = Dataset::open(&dir.path().join("manifest.csv"))?;
    for row in ablate(&base, &data)? {
        println!(
            "{:<16} {:>8} params  MAE {:.3} ± {:.3}  SRCC {:.3}",
            row.variant, row.param_count, row.aggregate.mae_mean, row.aggregate.mae_std, row.aggregate.srcc_mean
        );
    }
    Ok(())
}
