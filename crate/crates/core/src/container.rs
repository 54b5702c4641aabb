//! Binary container: `u64` little-endian header length, a JSON header, then
//! the declared `f64` arrays back to back in little-endian order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bundle::TrajectoryBundle;
use crate::error::IoError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            shape,
            data,
        }
    }

    pub fn matrix(name: impl Into<String>, a: &Array2<f64>) -> Self {
        Self::new(name, vec![a.nrows(), a.ncols()], a.iter().copied().collect())
    }

    pub fn to_matrix(&self) -> Result<Array2<f64>, IoError> {
        if self.shape.len() != 2 {
            return Err(IoError::Format(format!("array {} is not a matrix", self.name)));
        }
        Array2::from_shape_vec((self.shape[0], self.shape[1]), self.data.clone())
            .map_err(|e| IoError::Format(e.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
struct Envelope<H> {
    meta: H,
    arrays: Vec<ArraySpec>,
}

pub fn write_container<H: Serialize>(path: &Path, meta: &H, arrays: &[NamedArray]) -> Result<(), IoError> {
    for a in arrays {
        if a.shape.iter().product::<usize>() != a.data.len() {
            return Err(IoError::Format(format!(
                "array {} has {} values for shape {:?}",
                a.name,
                a.data.len(),
                a.shape
            )));
        }
    }
    let env = Envelope {
        meta,
        arrays: arrays
            .iter()
            .map(|a| ArraySpec {
                name: a.name.clone(),
                shape: a.shape.clone(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&env)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for a in arrays {
        for v in &a.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_container<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<NamedArray>), IoError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 30 {
        return Err(IoError::Format(format!("implausible header length {len}")));
    }
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)?;
    let env: Envelope<H> = serde_json::from_slice(&header)?;
    let mut arrays = Vec::with_capacity(env.arrays.len());
    let mut buf = [0u8; 8];
    for spec in env.arrays {
        let n: usize = spec.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf)
                .map_err(|_| IoError::Format(format!("truncated array {}", spec.name)))?;
            data.push(f64::from_le_bytes(buf));
        }
        arrays.push(NamedArray {
            name: spec.name,
            shape: spec.shape,
            data,
        });
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(IoError::Format(format!("{} trailing bytes", rest.len())));
    }
    Ok((env.meta, arrays))
}

/// Header of a stored trajectory bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub kind: String,
    pub theta: Vec<f64>,
    pub k: usize,
    pub n_u: usize,
    pub n_t: usize,
    pub grid: serde_json::Value,
    pub seed: u64,
    pub times: Vec<f64>,
}

pub fn save_bundle(path: &Path, bundle: &TrajectoryBundle, kind: &str, grid: serde_json::Value, seed: u64) -> Result<(), IoError> {
    let meta = DatasetMeta {
        kind: kind.to_string(),
        theta: bundle.theta.clone(),
        k: bundle.k(),
        n_u: bundle.n_u(),
        n_t: bundle.frame_count(),
        grid,
        seed,
        times: bundle.times.clone(),
    };
    let arrays: Vec<NamedArray> = bundle
        .channels
        .iter()
        .enumerate()
        .map(|(k, c)| NamedArray::matrix(format!("channel{k}"), c))
        .collect();
    write_container(path, &meta, &arrays)
}

pub fn load_bundle(path: &Path) -> Result<(DatasetMeta, TrajectoryBundle), IoError> {
    let (meta, arrays): (DatasetMeta, _) = read_container(path)?;
    if arrays.len() != meta.k {
        return Err(IoError::Format(format!("expected {} channels, found {}", meta.k, arrays.len())));
    }
    let channels = arrays.iter().map(NamedArray::to_matrix).collect::<Result<Vec<_>, _>>()?;
    let bundle = TrajectoryBundle::new(meta.theta.clone(), meta.times.clone(), channels)
        .map_err(|e| IoError::Format(e.to_string()))?;
    Ok((meta, bundle))
}

/// Sweep listing written next to the per-parameter files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub kind: String,
    pub entries: Vec<IndexEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub theta: Vec<f64>,
    pub file: String,
}

impl DatasetIndex {
    pub const FILE: &'static str = "index.json";

    pub fn save(&self, dir: &Path) -> Result<(), IoError> {
        std::fs::create_dir_all(dir)?;
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join(Self::FILE), s)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, IoError> {
        let s = std::fs::read_to_string(dir.join(Self::FILE))?;
        Ok(serde_json::from_str(&s)?)
    }

    /// File for `theta` (exact match), if listed.
    pub fn find(&self, dir: &Path, theta: &[f64]) -> Option<PathBuf> {
        self.entries
            .iter()
            .find(|e| e.theta.len() == theta.len() && e.theta.iter().zip(theta).all(|(a, b)| (a - b).abs() <= 1e-12 * a.abs().max(1.0)))
            .map(|e| dir.join(&e.file))
    }
}
