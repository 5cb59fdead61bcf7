//! A hyperparameter grid from text, run with one epoch per cell. The large
//! learning rate cell is expected to diverge and is reported as such.

use sfcnext::data::{generate_synthetic, Dataset, GeneratorParams};
use sfcnext::experiment::{sweep, SweepGrid, TrainConfig};

const GRID: &str = "
loss: loss=mae,mse batch=4,8
lr: optimizer=adam ilr=1e-3,1e30
";

fn main() -> anyhow::Result<()> {
    let mut base = TrainConfig::default();
    base.epochs = 1;
    base.repeats = 2;
    let dir = tempfile::tempdir()?;
    generate_synthetic(30, base.model.input_dims, 2, &GeneratorParams::default(), dir.path())?;
    let data = Dataset::open(&dir.path().join("manifest.csv"))?;

    let grid = SweepGrid::parse(GRID)?;
    println!("built-in grid has {} cells", SweepGrid::standard().cells(&base).len());
    for row in sweep(&base, &grid, &data)? {
        let c = &row.config;
        println!(
            "{:<5} {} batch {:>2} {} ilr {:e}: {:?} MAE {:.3}",
            row.part, c.primary_loss, c.batch_size, c.optimizer, c.ilr, row.status, row.aggregate.mae_mean
        );
    }
    Ok(())
}
