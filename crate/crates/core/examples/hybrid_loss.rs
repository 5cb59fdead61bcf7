//! The three loss terms and their weighted total on a toy batch.

use sfcnext::losses::{hybrid_loss, srcc_rank_loss_hard, LossWeights, PrimaryLoss};
use sfcnext::metrics::evaluate;
use sfcnext::softrank::SoftRankConfig;

fn main() -> anyhow::Result<()> {
    let age = [24.0, 31.5, 47.0, 52.0, 66.0];
    let pred = [27.0, 29.0, 45.5, 58.0, 61.0];
    // A wide epsilon, so that ranks several years apart still interact.
    let soft = SoftRankConfig::new(10.0)?;
    for (name, weights) in [
        ("fit only", LossWeights::fit_only()),
        ("default", LossWeights::default()),
        ("rank heavy", LossWeights::new(0.1, 10.0)?),
    ] {
        for primary in [PrimaryLoss::Mse, PrimaryLoss::Mae] {
            let (b, grad) = hybrid_loss(&pred, &age, weights, soft, primary)?;
            println!(
                "{name:<10} {primary}: fit {:.3} diff {:.3} rank {:.4} total {:.3}  grad {:?}",
                b.mse,
                b.diff,
                b.rank,
                b.total,
                grad.iter().map(|g| (g * 1e3).round() / 1e3).collect::<Vec<_>>()
            );
        }
    }
    println!("hard rank loss {:.4}", srcc_rank_loss_hard(&pred, &age)?);
    let m = evaluate(&pred, &age)?;
    println!("MAE {:.3} PCC {:.4} SRCC {:.4}", m.mae, m.pcc, m.srcc);
    Ok(())
}
