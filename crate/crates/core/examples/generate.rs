//! Writes a synthetic cohort and prints its age statistics and one volume's
//! central slice profile.
//!
//! Usage: `cargo run --release --example generate -- [out_dir] [n] [edge]`

use std::path::PathBuf;

use sfcnext::data::{generate_synthetic, read_volume, GeneratorParams};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = PathBuf::from(args.first().map(String::as_str).unwrap_or("synthetic"));
    let n: usize = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(400);
    let edge: usize = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(24);
    let params = GeneratorParams::default();
    let m = generate_synthetic(n, [edge; 3], 0, &params, &out)?;

    let ages = m.ages();
    let mean = ages.iter().sum::<f64>() / n as f64;
    let std = (ages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let male = m.rows.iter().filter(|r| r.sex == 1).count();
    println!("{n} subjects in {}: age {mean:.2} ± {std:.2}, {male} coded 1", out.display());
    for age in [20.0, 40.0, 60.0] {
        println!(
            "age {age}: shell {:.3}, ventricle radius {:.3}",
            params.shell_thickness(age),
            params.ventricle_radius(age)
        );
    }

    let row = &m.rows[0];
    let v = read_volume(&m.resolve(row), Some([edge; 3]))?;
    let mid = edge / 2;
    let line: String = (0..edge)
        .map(|x| {
            let i = (mid * edge + mid) * edge + x;
            match v[i] {
                t if t == 0.0 => ' ',
                t if t < 0.4 => '.',
                t if t < 0.7 => 'o',
                _ => '#',
            }
        })
        .collect();
    println!("{} (age {:.1}) centre line |{line}|", row.id, row.age);
    Ok(())
}
