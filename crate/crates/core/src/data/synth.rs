//! Synthetic "brains": a noisy ellipsoid whose cortical shell thins and whose
//! central ventricle grows linearly with age.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::format::{write_manifest, write_volume, DatasetManifest, ManifestRow, MANIFEST_VERSION};
use crate::error::{Error, Result};

pub const AGE_MIN: f64 = 19.0;
pub const AGE_MAX: f64 = 72.0;

const GRAY: f64 = 0.6;
const WHITE: f64 = 1.0;
const CSF: f64 = 0.2;
const SITES: [&str; 3] = ["site0", "site1", "site2"];

/// Knobs of the generative law. Radii and thicknesses are fractions of the
/// brain radius.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorParams {
    /// Noise standard deviation as a fraction of the intensity range.
    pub noise: f64,
    pub shell_young: f64,
    pub shell_old: f64,
    pub ventricle_young: f64,
    pub ventricle_old: f64,
    /// Relative lateral stretch of one hemisphere, sign set by sex.
    pub asymmetry: f64,
    /// Width of the smooth tissue transitions.
    pub edge: f64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            noise: 0.05,
            shell_young: 0.35,
            shell_old: 0.15,
            ventricle_young: 0.12,
            ventricle_old: 0.40,
            asymmetry: 0.04,
            edge: 0.06,
        }
    }
}

impl GeneratorParams {
    fn fraction(age: f64) -> f64 {
        ((age - AGE_MIN) / (AGE_MAX - AGE_MIN)).clamp(0.0, 1.0)
    }

    pub fn shell_thickness(&self, age: f64) -> f64 {
        let t = Self::fraction(age);
        self.shell_young + (self.shell_old - self.shell_young) * t
    }

    pub fn ventricle_radius(&self, age: f64) -> f64 {
        let t = Self::fraction(age);
        self.ventricle_young + (self.ventricle_old - self.ventricle_young) * t
    }
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Renders one subject. Voxels outside the brain are exactly zero; noise is
/// added inside only.
pub fn synthesize_volume(
    age: f64,
    sex: u8,
    dims: [usize; 3],
    params: &GeneratorParams,
    rng: &mut impl Rng,
) -> Vec<f32> {
    let [d, h, w] = dims;
    let shell = params.shell_thickness(age);
    let vent = params.ventricle_radius(age);
    let side = if sex == 1 { 1.0 } else { -1.0 };
    let noise = Normal::new(0.0, params.noise.max(f64::MIN_POSITIVE)).unwrap();
    let e = params.edge;
    let mut out = Vec::with_capacity(d * h * w);
    for z in 0..d {
        let cz = (2.0 * z as f64 + 1.0) / d as f64 - 1.0;
        for y in 0..h {
            let cy = (2.0 * y as f64 + 1.0) / h as f64 - 1.0;
            for x in 0..w {
                let cx = (2.0 * x as f64 + 1.0) / w as f64 - 1.0;
                let ax = 0.80 * (1.0 + side * params.asymmetry * cx.signum());
                let rho = ((cx / ax).powi(2) + (cy / 0.85).powi(2) + (cz / 0.80).powi(2)).sqrt();
                if rho >= 1.0 {
                    out.push(0.0);
                    continue;
                }
                let white_in = smoothstep((rho - vent) / e + 0.5);
                let gray_in = smoothstep((rho - (1.0 - shell)) / e + 0.5);
                let mut v = CSF + (WHITE - CSF) * white_in + (GRAY - WHITE) * gray_in;
                v *= smoothstep((1.0 - rho) / e);
                if params.noise > 0.0 {
                    v += noise.sample(rng);
                }
                out.push(v as f32);
            }
        }
    }
    out
}

/// Draws `n` ages from a two-component mixture on `[19, 72]` with mean near
/// 37.6 and standard deviation near 14.3.
pub fn sample_ages(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let young = Normal::new(26.3, 5.0).unwrap();
    let old = Normal::new(53.3, 10.0).unwrap();
    (0..n)
        .map(|_| loop {
            let a = if rng.random::<f64>() < 0.6 {
                young.sample(rng)
            } else {
                old.sample(rng)
            };
            if (AGE_MIN..=AGE_MAX).contains(&a) {
                break a;
            }
        })
        .collect()
}

/// Writes `n` subjects and a `manifest.csv` into `out_dir`.
pub fn generate_synthetic(
    n: usize,
    dims: [usize; 3],
    seed: u64,
    params: &GeneratorParams,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if n < 10 {
        return Err(Error::InvalidArgument(format!("need at least 10 subjects, got {n}")));
    }
    if let Some(&d) = dims.iter().find(|&&d| d < 16) {
        return Err(Error::InvalidArgument(format!("volume dims must be >= 16, got {d}")));
    }
    let vol_dir = out_dir.join("volumes");
    fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ages = sample_ages(n, &mut rng);
    let mut rows = Vec::with_capacity(n);
    for (i, &age) in ages.iter().enumerate() {
        let sex = rng.random_range(0..2u8);
        let site = SITES[rng.random_range(0..SITES.len())].to_string();
        let mut vrng = ChaCha8Rng::seed_from_u64(seed);
        vrng.set_stream(i as u64 + 1);
        let volume = synthesize_volume(age, sex, dims, params, &mut vrng);
        let id = format!("sub-{i:04}");
        let rel = format!("volumes/{id}.sfxv");
        write_volume(&out_dir.join(&rel), dims, &volume)?;
        rows.push(ManifestRow {
            id,
            path: rel,
            age,
            sex,
            site,
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        dims,
        seed,
        root: out_dir.to_path_buf(),
        rows,
    };
    write_manifest(&out_dir.join("manifest.csv"), &manifest)?;
    Ok(manifest)
}
