//! Volume files: `"SFXV"`, u32 version, u32 D, H, W, then `D*H*W` f32 values,
//! all little-endian.
//!
//! Manifests: `#`-prefixed metadata lines (`version`, `dims`, `seed`,
//! `count`), then CSV with the header `id,path,age,sex,site`. Paths are
//! relative to the manifest's directory.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VOLUME_MAGIC: &[u8; 4] = b"SFXV";
pub const VOLUME_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

pub fn write_volume(path: &Path, dims: [usize; 3], values: &[f32]) -> Result<()> {
    if dims.iter().product::<usize>() != values.len() {
        return Err(Error::Shape(format!(
            "dims {dims:?} for {} values",
            values.len()
        )));
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * values.len());
    buf.extend_from_slice(VOLUME_MAGIC);
    buf.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
    for d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a volume file. With `expected` set, the header dims must match it.
pub fn read_volume(path: &Path, expected: Option<[usize; 3]>) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let truncated = |want: usize| Error::Truncated {
        path: path.to_path_buf(),
        expected: want,
        found: bytes.len(),
    };
    if bytes.len() < 4 || &bytes[..4] != VOLUME_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "SFXV",
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(truncated(HEADER_LEN));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    if word(1) != VOLUME_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: word(1),
        });
    }
    let dims = [word(2) as usize, word(3) as usize, word(4) as usize];
    if let Some(want) = expected {
        if want != dims {
            return Err(Error::DimMismatch {
                path: path.to_path_buf(),
                expected: want,
                found: dims,
            });
        }
    }
    let want = HEADER_LEN + 4 * dims.iter().product::<usize>();
    if bytes.len() < want {
        return Err(truncated(want));
    }
    if bytes.len() > want {
        return Err(Error::Integrity(format!(
            "{} has {} bytes after the volume data",
            path.display(),
            bytes.len() - want
        )));
    }
    Ok(bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub path: String,
    pub age: f64,
    pub sex: u8,
    pub site: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub dims: [usize; 3],
    pub seed: u64,
    /// Directory that row paths are relative to.
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl DatasetManifest {
    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        self.root.join(&row.path)
    }

    pub fn ages(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.age).collect()
    }
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let mut buf = Vec::new();
    let [d, h, w] = manifest.dims;
    writeln!(buf, "# version={}", manifest.version).unwrap();
    writeln!(buf, "# dims={d},{h},{w}").unwrap();
    writeln!(buf, "# seed={}", manifest.seed).unwrap();
    writeln!(buf, "# count={}", manifest.rows.len()).unwrap();
    {
        let mut wtr = csv::Writer::from_writer(&mut buf);
        for row in &manifest.rows {
            wtr.serialize(row)?;
        }
        wtr.flush().map_err(|e| Error::io(path, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Parses a manifest and checks that ids are unique, the row count matches
/// the declared count and every volume file exists.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (mut version, mut dims, mut seed, mut count) = (None, None, None, None);
    let mut body_start = 0;
    for line in text.lines() {
        let Some(meta) = line.strip_prefix('#') else {
            break;
        };
        body_start += line.len() + 1;
        let Some((k, v)) = meta.trim().split_once('=') else {
            continue;
        };
        let bad = || Error::Integrity(format!("bad manifest metadata {line:?}"));
        let v = v.trim();
        match k.trim() {
            "version" => version = Some(v.parse::<u32>().map_err(|_| bad())?),
            "seed" => seed = Some(v.parse::<u64>().map_err(|_| bad())?),
            "count" => count = Some(v.parse::<usize>().map_err(|_| bad())?),
            "dims" => {
                let parts: Vec<usize> = v
                    .split(',')
                    .map(|s| s.trim().parse().map_err(|_| bad()))
                    .collect::<Result<_>>()?;
                dims = Some(<[usize; 3]>::try_from(parts).map_err(|_| bad())?);
            }
            _ => {}
        }
    }
    let missing = |what: &str| Error::Integrity(format!("manifest lacks {what}"));
    let version = version.ok_or_else(|| missing("version"))?;
    if version != MANIFEST_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
        });
    }
    let dims = dims.ok_or_else(|| missing("dims"))?;
    let count = count.ok_or_else(|| missing("count"))?;
    let body = text.get(body_start.min(text.len())..).unwrap_or("");
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["id", "path", "age", "sex", "site"] {
        return Err(Error::Integrity(format!("unexpected manifest header {header:?}")));
    }
    let rows: Vec<ManifestRow> = rdr.deserialize().collect::<Result<_, _>>()?;
    if rows.len() != count {
        return Err(Error::Integrity(format!(
            "manifest declares {count} rows but has {}",
            rows.len()
        )));
    }
    let mut seen = HashSet::new();
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    for row in &rows {
        if !seen.insert(row.id.as_str()) {
            return Err(Error::Integrity(format!("duplicate id {}", row.id)));
        }
        if row.sex > 1 {
            return Err(Error::Integrity(format!("row {} has sex {}", row.id, row.sex)));
        }
        if !row.age.is_finite() {
            return Err(Error::Integrity(format!("row {} has age {}", row.id, row.age)));
        }
        if !root.join(&row.path).is_file() {
            return Err(Error::Integrity(format!(
                "volume {} for {} does not exist",
                row.path, row.id
            )));
        }
    }
    Ok(DatasetManifest {
        version,
        dims,
        seed: seed.unwrap_or(0),
        root,
        rows,
    })
}
