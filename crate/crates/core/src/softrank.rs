//! Fast differentiable ranking.
//!
//! Soft ranks are the Euclidean projection of `-theta / epsilon` onto the
//! permutahedron spanned by the rank vector `(1, ..., n)`. The projection
//! reduces to one sort plus an isotonic regression solved by
//! pool-adjacent-violators, so the forward pass is `O(n log n)`. The pooled
//! blocks returned by the isotonic step make the Jacobian piecewise constant,
//! which gives an exact `O(n)` vector-Jacobian product.
//!
//! Ranks are descending throughout: the largest score receives rank 1.

use std::ops::Range;

use crate::error::{Error, Result};

/// Regularization strength of the soft rank. The regularizer itself is fixed
/// to the quadratic, so the operator is a Euclidean projection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftRankConfig {
    epsilon: f64,
}

impl SoftRankConfig {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "soft rank epsilon must be in (0, inf), got {epsilon}"
            )));
        }
        Ok(SoftRankConfig { epsilon })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
}

impl Default for SoftRankConfig {
    fn default() -> Self {
        SoftRankConfig { epsilon: 1.0 }
    }
}

/// Convex hull of all permutations of the anchor `(1, 2, ..., n)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Permutahedron {
    n: usize,
}

impl Permutahedron {
    pub fn new(n: usize) -> Self {
        Permutahedron { n }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn anchor(&self) -> Vec<f64> {
        (1..=self.n).map(|r| r as f64).collect()
    }

    /// Sum shared by every point of the permutahedron.
    pub fn coordinate_sum(&self) -> f64 {
        (self.n * (self.n + 1)) as f64 / 2.0
    }

    /// All `n!` vertices. Only sensible for small `n`.
    pub fn vertices(&self) -> Vec<Vec<f64>> {
        permutations(&self.anchor())
    }
}

/// Soft ranks together with the structure needed for the backward pass.
#[derive(Clone, Debug)]
pub struct SoftRankResult {
    ranks: Vec<f64>,
    order: Vec<usize>,
    blocks: Vec<Range<usize>>,
    epsilon: f64,
}

impl SoftRankResult {
    pub fn ranks(&self) -> &[f64] {
        &self.ranks
    }

    pub fn into_ranks(self) -> Vec<f64> {
        self.ranks
    }

    /// Indices of the input in sorted (descending `-theta`) order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Pooled blocks as ranges of positions in [`order`](Self::order).
    pub fn blocks(&self) -> &[Range<usize>] {
        &self.blocks
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what} at index {i}")));
    }
    Ok(())
}

/// Integer ranks, largest value first; ties go to the smaller index first.
pub fn hard_rank(values: &[f64]) -> Result<Vec<usize>> {
    if values.is_empty() {
        return Err(Error::Empty("hard_rank input"));
    }
    check_finite(values, "hard_rank input")?;
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut ranks = vec![0; values.len()];
    for (pos, &i) in idx.iter().enumerate() {
        ranks[i] = pos + 1;
    }
    Ok(ranks)
}

/// Least-squares non-increasing fit to `y` by pool-adjacent-violators.
///
/// Returns the fitted values and the pooled blocks (contiguous index ranges
/// that share one value). Adjacent blocks have strictly decreasing values.
pub fn isotonic_regression(y: &[f64]) -> Result<(Vec<f64>, Vec<Range<usize>>)> {
    if y.is_empty() {
        return Err(Error::Empty("isotonic_regression input"));
    }
    check_finite(y, "isotonic_regression input")?;
    // (sum, count, start)
    let mut stack: Vec<(f64, usize, usize)> = Vec::with_capacity(y.len());
    for (i, &v) in y.iter().enumerate() {
        let mut cur = (v, 1usize, i);
        while let Some(&(sum, count, start)) = stack.last() {
            if sum / count as f64 <= cur.0 / cur.1 as f64 {
                stack.pop();
                cur = (sum + cur.0, count + cur.1, start);
            } else {
                break;
            }
        }
        stack.push(cur);
    }
    let mut solution = Vec::with_capacity(y.len());
    let mut blocks = Vec::with_capacity(stack.len());
    for (sum, count, start) in stack {
        let mean = sum / count as f64;
        solution.extend(std::iter::repeat_n(mean, count));
        blocks.push(start..start + count);
    }
    Ok((solution, blocks))
}

struct Projection {
    point: Vec<f64>,
    order: Vec<usize>,
    blocks: Vec<Range<usize>>,
}

fn project(z: &[f64], anchor: &[f64]) -> Result<Projection> {
    if z.len() != anchor.len() {
        return Err(Error::Shape(format!(
            "projection point has length {}, anchor {}",
            z.len(),
            anchor.len()
        )));
    }
    if z.is_empty() {
        return Err(Error::Empty("projection input"));
    }
    check_finite(z, "projection input")?;
    check_finite(anchor, "anchor")?;
    // Sorting (value, index) pairs keeps the comparisons cache-friendly.
    let mut pairs: Vec<(f64, usize)> = z.iter().copied().zip(0..).collect();
    pairs.sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let (sorted, order): (Vec<f64>, Vec<usize>) = pairs.into_iter().unzip();
    let mut w = anchor.to_vec();
    w.sort_unstable_by(|a, b| b.total_cmp(a));
    let residual: Vec<f64> = sorted.iter().zip(&w).map(|(s, w)| s - w).collect();
    let (fit, blocks) = isotonic_regression(&residual)?;
    let mut point = vec![0.0; z.len()];
    for (pos, &i) in order.iter().enumerate() {
        // Equal to sorted - fit; singleton blocks land exactly on the anchor.
        point[i] = w[pos] + (residual[pos] - fit[pos]);
    }
    Ok(Projection {
        point,
        order,
        blocks,
    })
}

/// Euclidean projection of `z` onto the permutahedron of `anchor`.
pub fn project_permutahedron(z: &[f64], anchor: &[f64]) -> Result<Vec<f64>> {
    project(z, anchor).map(|p| p.point)
}

/// Soft ranks `P(-theta / epsilon, (1, ..., n))`.
pub fn soft_rank(theta: &[f64], config: SoftRankConfig) -> Result<SoftRankResult> {
    if theta.is_empty() {
        return Err(Error::Empty("soft_rank input"));
    }
    let eps = config.epsilon;
    let z: Vec<f64> = theta.iter().map(|t| -t / eps).collect();
    let p = project(&z, &Permutahedron::new(theta.len()).anchor())?;
    Ok(SoftRankResult {
        ranks: p.point,
        order: p.order,
        blocks: p.blocks,
        epsilon: eps,
    })
}

/// Gradient of `<upstream, soft_rank(theta)>` with respect to `theta`.
///
/// In sorted coordinates the Jacobian of the projection is `I - B`, with `B`
/// averaging within each pooled block; the chain rule through `-theta/epsilon`
/// contributes `-1/epsilon`.
pub fn soft_rank_vjp(result: &SoftRankResult, upstream: &[f64]) -> Result<Vec<f64>> {
    let n = result.ranks.len();
    if upstream.len() != n {
        return Err(Error::Shape(format!(
            "upstream gradient has length {}, expected {n}",
            upstream.len()
        )));
    }
    let scale = -1.0 / result.epsilon;
    let mut grad = vec![0.0; n];
    for block in &result.blocks {
        let idx = &result.order[block.clone()];
        let mean = idx.iter().map(|&i| upstream[i]).sum::<f64>() / idx.len() as f64;
        for &i in idx {
            grad[i] = scale * (upstream[i] - mean);
        }
    }
    Ok(grad)
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Quadratic-time smooth ranks `1 + sum_{j != i} logistic((theta_j - theta_i) / tau)`.
///
/// Used as a baseline for timing and ordering comparisons.
pub fn pairwise_rank_approx(theta: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    if theta.is_empty() {
        return Err(Error::Empty("pairwise_rank_approx input"));
    }
    check_finite(theta, "pairwise_rank_approx input")?;
    let inv = 1.0 / tau;
    Ok(theta
        .iter()
        .enumerate()
        .map(|(i, &ti)| {
            1.0 + theta
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &tj)| logistic((tj - ti) * inv))
                .sum::<f64>()
        })
        .collect())
}

/// Largest `<z - mu, v - mu>` over all vertices `v` of the permutahedron of
/// `anchor`. A projection `mu` of `z` is correct iff this is `<= 0`.
pub fn vertex_certificate(z: &[f64], anchor: &[f64], mu: &[f64]) -> Result<f64> {
    if z.len() != anchor.len() || mu.len() != anchor.len() {
        return Err(Error::Shape("certificate vectors differ in length".into()));
    }
    if anchor.len() > 9 {
        return Err(Error::InvalidArgument(
            "vertex enumeration is limited to n <= 9".into(),
        ));
    }
    let resid: Vec<f64> = z.iter().zip(mu).map(|(a, b)| a - b).collect();
    Ok(permutations(anchor)
        .iter()
        .map(|v| {
            resid
                .iter()
                .zip(v.iter().zip(mu))
                .map(|(r, (vi, m))| r * (vi - m))
                .sum::<f64>()
        })
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Heap's algorithm.
fn permutations(items: &[f64]) -> Vec<Vec<f64>> {
    let mut a = items.to_vec();
    let n = a.len();
    let mut out = vec![a.clone()];
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                a.swap(0, i);
            } else {
                a.swap(c[i], i);
            }
            out.push(a.clone());
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn hard_rank_examples() {
        assert_eq!(hard_rank(&[5.0, 3.0, 1.0]).unwrap(), vec![1, 2, 3]);
        assert_eq!(hard_rank(&[0.2, 3.1, 2.5]).unwrap(), vec![3, 1, 2]);
        assert_eq!(hard_rank(&[1.0, 1.0]).unwrap(), vec![1, 2]);
        assert!(matches!(hard_rank(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn isotonic_examples() {
        let (v, b) = isotonic_regression(&[3.0, 2.0, -1.0]).unwrap();
        assert_eq!(v, vec![3.0, 2.0, -1.0]);
        assert_eq!(b, vec![0..1, 1..2, 2..3]);
        let (v, b) = isotonic_regression(&[4.0, 5.0]).unwrap();
        assert_eq!(v, vec![4.5, 4.5]);
        assert_eq!(b, vec![0..2]);
        let (v, _) = isotonic_regression(&[2.0, 1.0, 3.0]).unwrap();
        assert!(close(&v, &[2.0, 2.0, 2.0], 1e-12));
    }

    #[test]
    fn projection_examples() {
        let rho = [1.0, 2.0, 3.0];
        assert!(close(
            &project_permutahedron(&[3.0, 1.0, 2.0], &rho).unwrap(),
            &[3.0, 1.0, 2.0],
            1e-12
        ));
        assert!(close(
            &project_permutahedron(&[0.0, 0.0, 0.0], &rho).unwrap(),
            &[2.0, 2.0, 2.0],
            1e-12
        ));
        assert!(close(
            &project_permutahedron(&[-0.25, -0.5], &[1.0, 2.0]).unwrap(),
            &[1.625, 1.375],
            1e-12
        ));
        assert!(project_permutahedron(&[1.0], &rho).is_err());
    }

    #[test]
    fn soft_rank_examples() {
        let r = soft_rank(&[1.0, 2.0], SoftRankConfig::new(4.0).unwrap()).unwrap();
        assert!(close(r.ranks(), &[1.625, 1.375], 1e-12));
        let r = soft_rank(&[1.0, 2.0], SoftRankConfig::new(0.01).unwrap()).unwrap();
        assert!(close(r.ranks(), &[2.0, 1.0], 1e-6));
        for theta in [-3.0, 0.0, 17.5] {
            let r = soft_rank(&[theta], SoftRankConfig::new(0.3).unwrap()).unwrap();
            assert_eq!(r.ranks(), &[1.0]);
        }
        assert!(SoftRankConfig::new(0.0).is_err());
        assert!(SoftRankConfig::new(-1.0).is_err());
    }

    #[test]
    fn vjp_of_a_pooled_pair() {
        let eps = 4.0;
        let r = soft_rank(&[1.0, 2.0], SoftRankConfig::new(eps).unwrap()).unwrap();
        assert_eq!(r.blocks().len(), 1);
        // r_1 = 1.5 + (theta_2 - theta_1) / (2 eps)
        let g = soft_rank_vjp(&r, &[1.0, 0.0]).unwrap();
        assert!(close(&g, &[-0.5 / eps, 0.5 / eps], 1e-12));
        assert_eq!(soft_rank_vjp(&r, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert!(soft_rank_vjp(&r, &[1.0]).is_err());
    }

    #[test]
    fn pairwise_examples() {
        assert_eq!(pairwise_rank_approx(&[3.0], 0.5).unwrap(), vec![1.0]);
        assert!(close(
            &pairwise_rank_approx(&[0.0, 10.0], 0.01).unwrap(),
            &[2.0, 1.0],
            1e-4
        ));
        assert!(close(
            &pairwise_rank_approx(&[0.0, 0.0], 3.0).unwrap(),
            &[1.5, 1.5],
            1e-12
        ));
        assert!(pairwise_rank_approx(&[1.0], 0.0).is_err());
    }

    #[test]
    fn heap_permutations_are_complete() {
        let mut p = permutations(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(p.len(), 24);
        p.sort_by(|a, b| a.partial_cmp(b).unwrap());
        p.dedup();
        assert_eq!(p.len(), 24);
        assert_eq!(Permutahedron::new(3).vertices().len(), 6);
    }
}
