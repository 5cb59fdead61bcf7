//! Timing of the sort-based soft rank against the quadratic pairwise
//! baseline, plus brute-force correctness checks of the projection.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::softrank::{
    hard_rank, pairwise_rank_approx, project_permutahedron, soft_rank, vertex_certificate,
    Permutahedron, SoftRankConfig,
};

#[derive(Clone, Debug, PartialEq)]
pub struct RankbenchConfig {
    pub sizes: Vec<usize>,
    pub trials: usize,
    /// Trials for the quadratic baseline, which dominates the runtime.
    pub pairwise_trials: usize,
    /// Sizes above this skip the baseline.
    pub pairwise_max_n: usize,
    pub certificate_cases: usize,
    pub certificate_max_n: usize,
    pub epsilon: f64,
    pub tau: f64,
    pub seed: u64,
}

impl Default for RankbenchConfig {
    fn default() -> Self {
        RankbenchConfig {
            sizes: vec![1_000, 10_000, 100_000],
            trials: 11,
            pairwise_trials: 1,
            pairwise_max_n: 100_000,
            certificate_cases: 1_000,
            certificate_max_n: 6,
            epsilon: 1.0,
            tau: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingRow {
    pub n: usize,
    pub soft_rank_secs: f64,
    /// NaN when the baseline was skipped.
    pub pairwise_secs: f64,
    /// Ratio to the previous size; NaN for the first.
    pub soft_rank_growth: f64,
    pub pairwise_growth: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub n: usize,
    pub check: &'static str,
    pub cases: usize,
    pub passed: usize,
    /// Largest certificate value, or largest rank deviation.
    pub worst: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankbenchReport {
    pub timings: Vec<TimingRow>,
    pub checks: Vec<CheckRow>,
}

impl RankbenchReport {
    pub fn certificate_pass_rate(&self) -> f64 {
        let (p, c) = self
            .checks
            .iter()
            .filter(|r| r.check == "vertex_certificate")
            .fold((0, 0), |(p, c), r| (p + r.passed, c + r.cases));
        if c == 0 {
            f64::NAN
        } else {
            p as f64 / c as f64
        }
    }
}

/// Certificate values above this count as failures.
pub const CERTIFICATE_TOL: f64 = 1e-6;

fn normal_vec(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect::<Vec<f64>>()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn time<F: FnMut() -> Result<()>>(trials: usize, mut f: F) -> Result<f64> {
    let mut t = Vec::with_capacity(trials);
    for _ in 0..trials.max(1) {
        let start = Instant::now();
        f()?;
        t.push(start.elapsed().as_secs_f64());
    }
    Ok(median(t))
}

/// Brute-force check of the projection on `cases` random points for each
/// `n` in `2..=max_n`.
pub fn certificate_checks(cases: usize, max_n: usize, seed: u64) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for n in 2..=max_n {
        let anchor = Permutahedron::new(n).anchor();
        let mut passed = 0;
        let mut worst = f64::NEG_INFINITY;
        for _ in 0..cases {
            let z = normal_vec(n, 3.0, &mut rng);
            let mu = project_permutahedron(&z, &anchor)?;
            let c = vertex_certificate(&z, &anchor, &mu)?;
            worst = worst.max(c);
            if c <= CERTIFICATE_TOL {
                passed += 1;
            }
        }
        rows.push(CheckRow {
            n,
            check: "vertex_certificate",
            cases,
            passed,
            worst,
        });
    }
    Ok(rows)
}

pub fn rankbench(config: &RankbenchConfig) -> Result<RankbenchReport> {
    if let Some(&n) = config.sizes.iter().find(|&&n| n < 2) {
        return Err(Error::InvalidArgument(format!("benchmark sizes must be >= 2, got {n}")));
    }
    let soft_cfg = SoftRankConfig::new(config.epsilon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut timings: Vec<TimingRow> = Vec::new();
    let mut checks = certificate_checks(config.certificate_cases, config.certificate_max_n, config.seed)?;
    for &n in &config.sizes {
        let theta = normal_vec(n, 1.0, &mut rng);
        let soft = time(config.trials, || soft_rank(&theta, soft_cfg).map(|_| ()))?;
        let pair = if n <= config.pairwise_max_n {
            time(config.pairwise_trials, || {
                pairwise_rank_approx(&theta, config.tau).map(|_| ())
            })?
        } else {
            f64::NAN
        };
        let (sg, pg) = match timings.last() {
            Some(prev) => (soft / prev.soft_rank_secs, pair / prev.pairwise_secs),
            None => (f64::NAN, f64::NAN),
        };
        timings.push(TimingRow {
            n,
            soft_rank_secs: soft,
            pairwise_secs: pair,
            soft_rank_growth: sg,
            pairwise_growth: pg,
        });

        // Distinct scores with unit gaps; a tiny epsilon must give hard ranks.
        let limit = SoftRankConfig::new(1e-3)?;
        let hard = hard_rank(&theta)?;
        let spread: Vec<f64> = hard.iter().map(|&r| -(r as f64)).collect();
        let soft_limit = soft_rank(&spread, limit)?;
        let worst = soft_limit
            .ranks()
            .iter()
            .zip(&hard)
            .map(|(s, &h)| (s - h as f64).abs())
            .fold(0.0, f64::max);
        checks.push(CheckRow {
            n,
            check: "hard_rank_limit",
            cases: 1,
            passed: usize::from(worst < 1e-4),
            worst,
        });
    }
    Ok(RankbenchReport { timings, checks })
}
