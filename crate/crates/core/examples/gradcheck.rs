//! Finite-difference checks of every backward rule, the soft-rank VJP and the
//! full model. Optional argument: scope (ops, softrank or model).

use sfcnext::gradcheck::{gradcheck, GradcheckConfig, Scope};

fn main() -> anyhow::Result<()> {
    let mut config = GradcheckConfig::default();
    if let Some(scope) = std::env::args().nth(1) {
        config.scopes = vec![scope.parse::<Scope>()?];
    }
    let report = gradcheck(&config)?;
    for r in &report.results {
        println!(
            "{:<9} {:<24} err {:.2e}  tol {:.0e}  cases {:>5}  skipped {:>3}  {}",
            r.scope.to_string(),
            r.name,
            r.worst_rel_error,
            r.tolerance,
            r.cases,
            r.skipped,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    anyhow::ensure!(report.all_passed(), "gradient check failed");
    Ok(())
}
