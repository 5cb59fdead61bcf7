//! Synthetic volumes with a known age law, the volume and manifest file
//! formats, intensity normalization and the repeated random split protocol.

mod format;
mod synth;

pub use format::{
    load_manifest, read_volume, write_manifest, write_volume, DatasetManifest, ManifestRow,
    MANIFEST_VERSION, VOLUME_MAGIC, VOLUME_VERSION,
};
pub use synth::{
    generate_synthetic, sample_ages, synthesize_volume, AGE_MAX, AGE_MIN, GeneratorParams,
};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One subject: a `[1, D, H, W]` volume with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSample {
    pub id: String,
    pub volume: Tensor<f32>,
    pub age: f64,
    pub sex: u8,
    pub site: String,
}

/// Source of samples for manifest rows. Real-data readers plug in here.
pub trait SampleReader {
    fn read(&self, manifest: &DatasetManifest, row: &ManifestRow) -> Result<VolumeSample>;
}

/// Reads the binary volume files written by [`generate_synthetic`].
#[derive(Clone, Copy, Debug, Default)]
pub struct VolumeFileReader;

impl SampleReader for VolumeFileReader {
    fn read(&self, manifest: &DatasetManifest, row: &ManifestRow) -> Result<VolumeSample> {
        let path = manifest.resolve(row);
        let values = read_volume(&path, Some(manifest.dims))?;
        let [d, h, w] = manifest.dims;
        Ok(VolumeSample {
            id: row.id.clone(),
            volume: Tensor::new(vec![1, d, h, w], values)?,
            age: row.age,
            sex: row.sex,
            site: row.site.clone(),
        })
    }
}

/// Z-scores the brain voxels, i.e. those whose value differs from the corner
/// (background) voxel, and sets the background to zero.
///
/// Affine maps `a * v + b` with `a > 0` give the same output, and the output
/// is a fixed point of this function.
pub fn normalize_volume(v: &[f32]) -> Result<Vec<f32>> {
    let background = *v.first().ok_or(Error::Empty("volume"))?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("volume".into()));
    }
    let (mut n, mut sum) = (0usize, 0.0f64);
    for &x in v.iter().filter(|&&x| x != background) {
        n += 1;
        sum += x as f64;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("cannot normalize a constant volume".into()));
    }
    let mean = sum / n as f64;
    let var = v
        .iter()
        .filter(|&&x| x != background)
        .map(|&x| (x as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    if var == 0.0 {
        return Err(Error::InvalidArgument(
            "cannot normalize a volume with constant brain intensity".into(),
        ));
    }
    let inv = 1.0 / var.sqrt();
    Ok(v.iter()
        .map(|&x| {
            if x == background {
                0.0
            } else {
                ((x as f64 - mean) * inv) as f32
            }
        })
        .collect())
}

/// One random train/validation/test partition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub repeat: usize,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(seed: u64, repeat: usize) -> Self {
        SplitSpec {
            train_fraction: 0.8,
            val_fraction: 0.1,
            repeat,
            seed,
        }
    }
}

/// Row indices of each subset, each sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Smallest dataset that can be split.
pub const MIN_SPLIT_SIZE: usize = 10;

/// Shuffles `0..n` with a generator keyed by `(seed, repeat)` and cuts it into
/// `floor(0.8 n)`, `floor(0.1 n)` and the remainder.
pub fn split(n: usize, spec: &SplitSpec) -> Result<Split> {
    if n < MIN_SPLIT_SIZE {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_SPLIT_SIZE} samples to split, got {n}"
        )));
    }
    let (tf, vf) = (spec.train_fraction, spec.val_fraction);
    if !(tf > 0.0 && vf > 0.0 && tf + vf < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split fractions {tf}/{vf} leave no test set"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(spec.repeat as u64 + 1);
    idx.shuffle(&mut rng);
    let n_train = (tf * n as f64).floor() as usize;
    let n_val = (vf * n as f64).floor() as usize;
    let mut train = idx[..n_train].to_vec();
    let mut val = idx[n_train..n_train + n_val].to_vec();
    let mut test = idx[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, val, test })
}

/// Normalized volumes and labels held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dims: [usize; 3],
    pub ids: Vec<String>,
    pub volumes: Vec<Vec<f32>>,
    pub ages: Vec<f64>,
    pub sexes: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Normalizes each sample's volume; all volumes must share `dims`.
    pub fn from_samples(dims: [usize; 3], samples: Vec<VolumeSample>) -> Result<Self> {
        let mut ds = Dataset {
            dims,
            ids: Vec::with_capacity(samples.len()),
            volumes: Vec::with_capacity(samples.len()),
            ages: Vec::with_capacity(samples.len()),
            sexes: Vec::with_capacity(samples.len()),
        };
        for s in samples {
            if s.volume.shape()[1..] != dims {
                return Err(Error::Shape(format!(
                    "sample {} has shape {:?}, expected {dims:?}",
                    s.id,
                    s.volume.shape()
                )));
            }
            if s.sex > 1 {
                return Err(Error::InvalidArgument(format!("sample {} has sex {}", s.id, s.sex)));
            }
            ds.volumes.push(normalize_volume(s.volume.values())?);
            ds.ids.push(s.id);
            ds.ages.push(s.age);
            ds.sexes.push(s.sex);
        }
        Ok(ds)
    }

    pub fn load(manifest: &DatasetManifest, reader: &impl SampleReader) -> Result<Self> {
        let samples = manifest
            .rows
            .iter()
            .map(|row| reader.read(manifest, row))
            .collect::<Result<Vec<_>>>()?;
        Self::from_samples(manifest.dims, samples)
    }

    /// Loads a manifest and its volume files.
    pub fn open(manifest_path: &Path) -> Result<Self> {
        let manifest = load_manifest(manifest_path)?;
        Self::load(&manifest, &VolumeFileReader)
    }

    /// Stacks the given samples into model inputs `[N, 1, D, H, W]` and `[N, 1]`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let [d, h, w] = self.dims;
        let mut vol = Vec::with_capacity(indices.len() * d * h * w);
        let mut sex = Vec::with_capacity(indices.len());
        for &i in indices {
            vol.extend_from_slice(&self.volumes[i]);
            sex.push(self.sexes[i] as f32);
        }
        Ok((
            Tensor::new(vec![indices.len(), 1, d, h, w], vol)?,
            Tensor::new(vec![indices.len(), 1], sex)?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_for_one_hundred() {
        let s = split(100, &SplitSpec::new(3, 0)).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
        let t = split(100, &SplitSpec::new(3, 1)).unwrap();
        assert_ne!(s.test, t.test);
        assert!(split(9, &SplitSpec::new(3, 0)).is_err());
    }

    #[test]
    fn normalization_rejects_constant_volume() {
        assert!(normalize_volume(&[0.5; 8]).is_err());
        let v = normalize_volume(&[0.0, 1.0, 3.0, 0.0]).unwrap();
        assert_eq!(v, vec![0.0, -1.0, 1.0, 0.0]);
    }
}
