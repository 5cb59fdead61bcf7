//! End-to-end acceptance criteria 1-9. Runs sequentially in one test so the
//! timing criteria are not disturbed by other tests, and prints one
//! PASS/FAIL line per criterion (also written to `acceptance.txt` in the
//! cargo target tmp dir).
//!
//! Criteria 6 and 7 train 20 models on 400 volumes and take most of an hour
//! on a single core. `ACCEPTANCE_ONLY=1,2,5` runs a subset; the others print
//! SKIP.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfcnext::data::{generate_synthetic, Dataset, GeneratorParams};
use sfcnext::experiment::report::{ABLATION_HEADER, SWEEP_HEADER};
use sfcnext::experiment::{cross_validate, CvReport, TrainConfig};
use sfcnext::gradcheck::{gradcheck, GradcheckConfig};
use sfcnext::losses::{age_difference_loss, LossWeights};
use sfcnext::metrics::srcc;
use sfcnext::rankbench::{certificate_checks, rankbench, RankbenchConfig};
use sfcnext::softrank::{hard_rank, soft_rank, SoftRankConfig};

type Outcome = Result<(bool, String), String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn cores() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let rows = certificate_checks(1000, 6, 1).map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    let cases: usize = rows.iter().map(|r| r.cases).sum();
    let passed: usize = rows.iter().map(|r| r.passed).sum();
    let worst = rows.iter().map(|r| r.worst).fold(f64::NEG_INFINITY, f64::max);
    let ok = rows.len() == 5 && rows.iter().all(|r| r.cases == 1000) && passed == cases && secs < 60.0;
    Ok((ok, format!("{passed}/{cases} certificates <= 1e-6 (worst {worst:.2e}), {secs:.1} s")))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut bad = 0;
    for _ in 0..500 {
        let n = rng.random_range(2..=64);
        let (theta, delta) = loop {
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
            let mut s = v.clone();
            s.sort_by(f64::total_cmp);
            let d = s.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
            if d > 1e-9 {
                break (v, d);
            }
        };
        let cfg = SoftRankConfig::new(delta / 100.0).map_err(err)?;
        let soft = soft_rank(&theta, cfg).map_err(err)?;
        let hard = hard_rank(&theta).map_err(err)?;
        let dev = soft
            .ranks()
            .iter()
            .zip(&hard)
            .map(|(s, &h)| (s - h as f64).abs())
            .fold(0.0, f64::max);
        worst = worst.max(dev);
        bad += usize::from(dev > 1e-4);
    }
    Ok((bad == 0, format!("500 vectors, worst |soft - hard| {worst:.2e}")))
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let report = gradcheck(&GradcheckConfig::default()).map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<String> = report
        .results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{}:{} {:.2e}", r.scope, r.name, r.worst_rel_error))
        .collect();
    let worst = report
        .worst()
        .map(|r| format!("{}:{} {:.2e}", r.scope, r.name, r.worst_rel_error))
        .unwrap_or_default();
    let ok = failed.is_empty() && secs < 600.0;
    Ok((
        ok,
        format!(
            "{} checks, worst {worst}, failures [{}], {secs:.0} s",
            report.results.len(),
            failed.join(", ")
        ),
    ))
}

fn criterion_4() -> Outcome {
    let cfg = RankbenchConfig {
        sizes: vec![10_000, 100_000],
        certificate_cases: 10,
        ..RankbenchConfig::default()
    };
    let report = rankbench(&cfg).map_err(err)?;
    let t = &report.timings[1];
    let ok = t.soft_rank_growth < 15.0 && t.pairwise_growth > 50.0;
    Ok((
        ok,
        format!(
            "soft_rank ratio {:.1} (< 15), pairwise ratio {:.1} (> 50)",
            t.soft_rank_growth, t.pairwise_growth
        ),
    ))
}

fn ranks_ascending(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    for (pos, &i) in idx.iter().enumerate() {
        r[i] = (pos + 1) as f64;
    }
    r
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_srcc = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(3..=100);
        let mut a: Vec<f64> = (0..n).map(|i| i as f64 + rng.random::<f64>() * 0.5).collect();
        let mut b = a.clone();
        a.shuffle(&mut rng);
        b.shuffle(&mut rng);
        let (ra, rb) = (ranks_ascending(&a), ranks_ascending(&b));
        let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y).powi(2)).sum();
        let nf = n as f64;
        let closed = 1.0 - 6.0 * d2 / (nf * (nf * nf - 1.0));
        worst_srcc = worst_srcc.max((srcc(&a, &b).map_err(err)? - closed).abs());
    }
    let mut worst_diff = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..=32);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(19.0..72.0)).collect();
        let p: Vec<f64> = y.iter().map(|v| v + rng.random_range(-15.0..15.0)).collect();
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                s += ((p[i] - p[j]) - (y[i] - y[j])).powi(2);
            }
        }
        let literal = s / n as f64;
        worst_diff = worst_diff.max((age_difference_loss(&p, &y).map_err(err)? - literal).abs());
    }
    Ok((
        worst_srcc <= 1e-9 && worst_diff <= 1e-6,
        format!("srcc vs closed form {worst_srcc:.1e} (<= 1e-9), age difference vs double loop {worst_diff:.1e} (<= 1e-6)"),
    ))
}

struct Learning {
    hrl: CvReport,
    mse: CvReport,
    hrl_secs: f64,
}

fn learning_runs(dir: &Path) -> Result<Learning, String> {
    generate_synthetic(400, [24; 3], 2024, &GeneratorParams::default(), dir).map_err(err)?;
    let data = Dataset::open(&dir.join("manifest.csv")).map_err(err)?;
    let mut cfg = TrainConfig {
        seed: 6,
        workers: cores(),
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let hrl = cross_validate(&cfg, &data).map_err(err)?;
    let hrl_secs = start.elapsed().as_secs_f64();
    cfg.weights = LossWeights::new(0.0, 0.0).map_err(err)?;
    let mse = cross_validate(&cfg, &data).map_err(err)?;
    Ok(Learning { hrl, mse, hrl_secs })
}

fn criterion_6(l: &Learning) -> Outcome {
    let budget = 20.0 * 60.0 * 4.0 / cores().min(4) as f64;
    let mut lines = Vec::new();
    let mut good = 0;
    for r in &l.hrl.runs {
        let pass = r.test.mae <= 0.6 * r.baseline_mae && r.test.srcc >= 0.8;
        good += usize::from(pass);
        lines.push(format!(
            "r{} mae {:.2}/{:.2} srcc {:.3}",
            r.repeat, r.test.mae, r.baseline_mae, r.test.srcc
        ));
    }
    let ok = l.hrl.runs.len() == 10 && good >= 8 && l.hrl_secs < budget;
    Ok((
        ok,
        format!(
            "{good}/10 repeats meet MAE <= 0.6 x baseline and SRCC >= 0.8; {:.0} s (budget {:.0} s on {} core(s)); {}",
            l.hrl_secs,
            budget,
            cores(),
            lines.join("; ")
        ),
    ))
}

fn criterion_7(l: &Learning) -> Outcome {
    let same_splits = l
        .hrl
        .runs
        .iter()
        .zip(&l.mse.runs)
        .all(|(a, b)| a.scatter.iter().map(|s| &s.id).eq(b.scatter.iter().map(|s| &s.id)));
    let (h, m) = (l.hrl.aggregate.srcc_mean, l.mse.aggregate.srcc_mean);
    Ok((
        same_splits && h >= m - 0.01,
        format!("mean test SRCC hybrid {h:.4} vs pure MSE {m:.4} (ties within 0.01)"),
    ))
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sfcnext"))
}

fn run(args: &[&str]) -> Result<(), String> {
    let out = bin().args(args).output().map_err(err)?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_table(path: &Path, header: &[&str]) -> Result<Vec<csv::StringRecord>, String> {
    let mut rdr = csv::Reader::from_path(path).map_err(err)?;
    let h = rdr.headers().map_err(err)?.clone();
    if h.iter().ne(header.iter().copied()) {
        return Err(format!("{} header {:?}", path.display(), h));
    }
    rdr.records().collect::<Result<Vec<_>, _>>().map_err(err)
}

fn numeric(row: &csv::StringRecord, cols: std::ops::Range<usize>) -> bool {
    cols.into_iter().all(|i| row[i].parse::<f64>().is_ok())
}

fn criterion_8(root: &Path) -> Outcome {
    let data = root.join("data");
    run(&["generate", "--n", "40", "--dims", "24", "--seed", "8", "--out-dir", s(&data)])?;
    let manifest = data.join("manifest.csv");
    let small = ["--set", "epochs=1", "--set", "repeats=2", "--seed", "8"];

    let sweep_out = root.join("sweep");
    let mut args = vec!["sweep", "--data", s(&manifest), "--out-dir", s(&sweep_out)];
    args.extend(small);
    run(&args)?;
    let rows = read_table(&sweep_out.join("report.csv"), &SWEEP_HEADER)?;
    let distinct = |col: usize| {
        let mut v: Vec<&str> = rows.iter().map(|r| r.get(col).unwrap()).collect();
        v.sort_unstable();
        v.dedup();
        v.len()
    };
    let axes = [(2, 2), (3, 3), (4, 4), (5, 3), (6, 2), (7, 3)];
    let axes_ok = axes.iter().all(|&(c, k)| distinct(c) >= k);
    let status_ok = rows
        .iter()
        .all(|r| r[8] == *"ok" || r[8].starts_with("diverged"));
    let sweep_ok = rows.len() >= 18 && axes_ok && status_ok && rows.iter().all(|r| numeric(r, 9..15));

    let ablate_out = root.join("ablate");
    let mut args = vec!["ablate", "--data", s(&manifest), "--out-dir", s(&ablate_out)];
    args.extend(small);
    run(&args)?;
    let arows = read_table(&ablate_out.join("report.csv"), &ABLATION_HEADER)?;
    let names: Vec<&str> = arows.iter().map(|r| r.get(0).unwrap()).collect();
    let count = |i: usize| arows[i][1].parse::<usize>().unwrap_or(0);
    let ablate_ok = arows.len() == 4
        && names == ["full", "no_sex", "no_conformer", "stages_3_3_9_3"]
        && count(3) > count(0)
        && arows.iter().all(|r| numeric(r, 3..9));
    Ok((
        sweep_ok && ablate_ok,
        format!(
            "sweep {} cells over 6 axes (axes {}, schema {}), ablate {} rows {:?}",
            rows.len(),
            if axes_ok { "ok" } else { "missing" },
            if status_ok { "ok" } else { "bad" },
            arows.len(),
            names
        ),
    ))
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "timing.csv" {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_9(root: &Path) -> Outcome {
    let data = root.join("data");
    run(&["generate", "--n", "20", "--dims", "24", "--seed", "9", "--out-dir", s(&data)])?;
    let manifest = data.join("manifest.csv");
    let grid = root.join("grid.txt");
    fs::write(&grid, "b: batch=4,8\n").map_err(err)?;
    let m = s(&manifest);
    let quick = ["--set", "epochs=1", "--set", "repeats=2", "--set", "batch_size=4"];
    let commands: Vec<(&str, Vec<&str>)> = vec![
        ("generate", vec!["--n", "12", "--dims", "24"]),
        ("train", [&["--data", m][..], &quick].concat()),
        ("cv", [&["--data", m][..], &quick].concat()),
        ("sweep", [&["--data", m, "--grid", s(&grid)][..], &quick].concat()),
        ("ablate", [&["--data", m][..], &quick].concat()),
        (
            "gradcheck",
            vec!["--ops-cases", "3", "--softrank-cases", "50", "--model-samples", "4"],
        ),
        ("rankbench", vec!["--sizes", "100,1000", "--trials", "3", "--certificate-cases", "50"]),
    ];
    let mut differing = Vec::new();
    for (cmd, extra) in &commands {
        let dirs = ["a", "b"].map(|t| root.join(format!("{cmd}-{t}")));
        for d in &dirs {
            let mut args = vec![*cmd, "--deterministic", "--seed", "9", "--out-dir", s(d)];
            args.extend(extra.iter().copied());
            run(&args)?;
        }
        let (fa, fb) = (files(&dirs[0]), files(&dirs[1]));
        if fa.is_empty() || fa != fb {
            differing.push(*cmd);
        }
    }
    Ok((
        differing.is_empty(),
        format!(
            "{} commands run twice; differing outputs: {:?}",
            commands.len(),
            differing
        ),
    ))
}

#[test]
fn acceptance_criteria() {
    let tmp = tempfile::tempdir().unwrap();
    let log_path = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance.txt");
    let mut log = fs::File::create(&log_path).unwrap();
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |id: usize| only.as_ref().is_none_or(|o| o.contains(&id));
    let mut all = true;
    let mut emit = |id: usize, outcome: Option<Outcome>| {
        let line = match outcome {
            None => format!("criterion {id}: SKIP\n"),
            Some(o) => {
                let (pass, detail) = o.unwrap_or_else(|e| (false, format!("error: {e}")));
                all &= pass;
                format!("criterion {id}: {} {detail}\n", if pass { "PASS" } else { "FAIL" })
            }
        };
        // Bypasses the test harness capture so the lines always show.
        std::io::stdout().write_all(line.as_bytes()).unwrap();
        log.write_all(line.as_bytes()).unwrap();
    };

    emit(1, wanted(1).then(criterion_1));
    emit(2, wanted(2).then(criterion_2));
    emit(3, wanted(3).then(criterion_3));
    emit(4, wanted(4).then(criterion_4));
    emit(5, wanted(5).then(criterion_5));
    if wanted(6) || wanted(7) {
        match learning_runs(&tmp.path().join("learning")) {
            Ok(l) => {
                emit(6, wanted(6).then(|| criterion_6(&l)));
                emit(7, wanted(7).then(|| criterion_7(&l)));
            }
            Err(e) => {
                emit(6, Some(Err(e.clone())));
                emit(7, Some(Err(e)));
            }
        }
    } else {
        emit(6, None);
        emit(7, None);
    }
    emit(8, wanted(8).then(|| criterion_8(&tmp.path().join("protocol"))));
    emit(9, wanted(9).then(|| criterion_9(&tmp.path().join("determinism"))));
    assert!(all, "acceptance failures; see {}", log_path.display());
}
