//! Timing of the sort-based soft rank against the pairwise baseline.
//!
//! Usage: `cargo run --release --example rankbench -- [max_n]`

use sfcnext::rankbench::{rankbench, RankbenchConfig};

fn main() -> anyhow::Result<()> {
    let max_n: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(10_000);
    let mut sizes = vec![100];
    while *sizes.last().unwrap() < max_n {
        sizes.push(sizes.last().unwrap() * 10);
    }
    let config = RankbenchConfig {
        pairwise_max_n: max_n,
        sizes,
        certificate_cases: 200,
        ..RankbenchConfig::default()
    };
    let report = rankbench(&config)?;
    for t in &report.timings {
        println!(
            "n {:>7}: soft rank {:>10.3e} s (x{:>5.1})  pairwise {:>10.3e} s (x{:>6.1})",
            t.n, t.soft_rank_secs, t.soft_rank_growth, t.pairwise_secs, t.pairwise_growth
        );
    }
    for c in &report.checks {
        println!("{:<18} n {:>6}: {}/{} worst {:.2e}", c.check, c.n, c.passed, c.cases, c.worst);
    }
    Ok(())
}
