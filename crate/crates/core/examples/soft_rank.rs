//! Soft ranks of a small score vector across regularization strengths, the
//! VJP, and the projection onto the permutahedron.

use sfcnext::softrank::{
    hard_rank, project_permutahedron, soft_rank, soft_rank_vjp, Permutahedron, SoftRankConfig,
};

fn main() -> anyhow::Result<()> {
    let theta = [2.9, 0.1, 1.2, 1.0, -0.4];
    println!("theta      {theta:?}");
    println!("hard ranks {:?}", hard_rank(&theta)?);
    for eps in [0.01, 0.1, 1.0, 10.0] {
        let r = soft_rank(&theta, SoftRankConfig::new(eps)?)?;
        let ranks: Vec<String> = r.ranks().iter().map(|v| format!("{v:.3}")).collect();
        println!("eps {eps:>5}: [{}]  blocks {:?}", ranks.join(", "), r.blocks());
    }

    let r = soft_rank(&theta, SoftRankConfig::new(1.0)?)?;
    let grad = soft_rank_vjp(&r, &[1.0, 0.0, 0.0, 0.0, 0.0])?;
    println!("d rank_0 / d theta at eps 1: {grad:?}");

    let anchor = Permutahedron::new(3).anchor();
    let mu = project_permutahedron(&[2.0, 2.0, 0.0], &anchor)?;
    println!("projection of (2, 2, 0) onto the permutahedron of {anchor:?}: {mu:?}");
    Ok(())
}
