//! Multiview datasets: manifest loading, matrix file formats, min-max
//! normalization, a synthetic generator and mini-batch splitting.
//!
//! Matrix files are either CSV (header optional) or a raw binary layout:
//!
//! ```text
//! b"HCNDENSE" | version u64 = 1 | rows u64 | cols u64 | rows*cols f64
//! ```
//!
//! with every integer and real little-endian and the reals row-major.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{HcnError, Result};
use crate::numerics::DenseMatrix;
use crate::rng::{stream_rng, Stream};

pub const BINARY_MAGIC: &[u8; 8] = b"HCNDENSE";
pub const BINARY_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MatrixFormat {
    #[default]
    Csv,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub path: PathBuf,
    #[serde(default)]
    pub format: MatrixFormat,
    /// Expected `[rows, cols]`, checked against the file when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelsEntry {
    pub path: PathBuf,
}

/// Manifest file contents. Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub views: Vec<ViewEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<LabelsEntry>,
}

impl DatasetManifest {
    pub fn from_file(path: &Path) -> Result<(Self, PathBuf)> {
        if !path.exists() {
            return Err(HcnError::MissingFile {
                what: "manifest".into(),
                path: path.to_path_buf(),
            });
        }
        let text = fs::read_to_string(path).map_err(|e| HcnError::io(path, e))?;
        let manifest: DatasetManifest =
            toml::from_str(&text).map_err(|e| HcnError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((manifest, base))
    }
}

/// Per-feature range of the raw data, used for min-max scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRange {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiviewDataset {
    pub name: String,
    views: Vec<DenseMatrix>,
    labels: Option<Vec<usize>>,
    ranges: Vec<FeatureRange>,
}

impl MultiviewDataset {
    /// Checks alignment and label density; does not rescale.
    pub fn new(name: impl Into<String>, views: Vec<DenseMatrix>, labels: Option<Vec<usize>>) -> Result<Self> {
        let name = name.into();
        if views.len() < 2 {
            return Err(HcnError::TooFewViews(views.len()));
        }
        let n = views[0].rows();
        for (v, m) in views.iter().enumerate() {
            if m.rows() != n {
                return Err(HcnError::MisalignedViews {
                    view: v,
                    expected: n,
                    found: m.rows(),
                });
            }
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(HcnError::InvalidArgument(format!(
                    "{} labels for {n} samples",
                    l.len()
                )));
            }
        }
        let ranges = views.iter().map(feature_range).collect();
        Ok(MultiviewDataset {
            name,
            views,
            labels,
            ranges,
        })
    }

    /// Like [`MultiviewDataset::new`], then scales every feature to `[0, 1]`.
    pub fn normalized(name: impl Into<String>, views: Vec<DenseMatrix>, labels: Option<Vec<usize>>) -> Result<Self> {
        let mut ds = Self::new(name, views, labels)?;
        for (m, r) in ds.views.iter_mut().zip(&ds.ranges) {
            min_max_apply(m, r);
        }
        Ok(ds)
    }

    pub fn n_samples(&self) -> usize {
        self.views[0].rows()
    }

    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn view_dims(&self) -> Vec<usize> {
        self.views.iter().map(|m| m.cols()).collect()
    }

    pub fn views(&self) -> &[DenseMatrix] {
        &self.views
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Number of ground-truth classes, if labeled.
    pub fn k_true(&self) -> Option<usize> {
        self.labels.as_ref().map(|l| l.iter().max().map_or(0, |m| m + 1))
    }

    /// Raw per-feature ranges seen before normalization.
    pub fn feature_ranges(&self) -> &[FeatureRange] {
        &self.ranges
    }

    /// Rows `indices` of every view, in that order.
    pub fn batch(&self, indices: &[usize]) -> Vec<DenseMatrix> {
        self.views.iter().map(|m| m.select_rows(indices)).collect()
    }

    /// Reorders or subsets samples; views and labels move together.
    pub fn select(&self, indices: &[usize]) -> MultiviewDataset {
        MultiviewDataset {
            name: self.name.clone(),
            views: self.batch(indices),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            ranges: self.ranges.clone(),
        }
    }
}

fn feature_range(m: &DenseMatrix) -> FeatureRange {
    let mut min = vec![f64::INFINITY; m.cols()];
    let mut max = vec![f64::NEG_INFINITY; m.cols()];
    for row in m.row_iter() {
        for (j, &x) in row.iter().enumerate() {
            min[j] = min[j].min(x);
            max[j] = max[j].max(x);
        }
    }
    FeatureRange { min, max }
}

fn min_max_apply(m: &mut DenseMatrix, r: &FeatureRange) {
    for i in 0..m.rows() {
        for (j, x) in m.row_mut(i).iter_mut().enumerate() {
            let span = r.max[j] - r.min[j];
            *x = if span > 0.0 { (*x - r.min[j]) / span } else { 0.0 };
        }
    }
}

/// Per-feature min-max scaling to `[0, 1]`; constant features become 0.
pub fn min_max_normalize(m: &DenseMatrix) -> DenseMatrix {
    let mut out = m.clone();
    min_max_apply(&mut out, &feature_range(m));
    out
}

/// Loads every view and the labels named by a manifest, then normalizes.
pub fn load_dataset(manifest_path: &Path) -> Result<MultiviewDataset> {
    let (manifest, base) = DatasetManifest::from_file(manifest_path)?;
    load_from_manifest(&manifest, &base)
}

pub fn load_from_manifest(manifest: &DatasetManifest, base: &Path) -> Result<MultiviewDataset> {
    let mut views = Vec::with_capacity(manifest.views.len());
    for (v, entry) in manifest.views.iter().enumerate() {
        let path = base.join(&entry.path);
        let what = format!("view {v} ({})", path.display());
        if !path.exists() {
            return Err(HcnError::MissingFile { what, path });
        }
        let m = match entry.format {
            MatrixFormat::Csv => read_matrix_csv(&path, &what)?,
            MatrixFormat::Binary => read_matrix_binary(&path, &what)?,
        };
        if let Some([rows, cols]) = entry.dims {
            if (rows, cols) != m.shape() {
                return Err(HcnError::DimensionMismatch {
                    what,
                    declared: (rows, cols),
                    found: m.shape(),
                });
            }
        }
        views.push(m);
    }
    let labels = match &manifest.labels {
        Some(entry) => {
            let path = base.join(&entry.path);
            if !path.exists() {
                return Err(HcnError::MissingFile {
                    what: "labels".into(),
                    path,
                });
            }
            Some(dense_labels(&read_labels_csv(&path)?))
        }
        None => None,
    };
    MultiviewDataset::normalized(manifest.name.clone(), views, labels)
}

/// Maps arbitrary integer labels onto `0..k` in ascending order of value.
pub fn dense_labels(raw: &[i64]) -> Vec<usize> {
    let distinct: Vec<i64> = raw.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    raw.iter().map(|l| distinct.binary_search(l).unwrap()).collect()
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => HcnError::io(path, io),
            other => HcnError::InvalidArgument(format!("{}: {other:?}", path.display())),
        })
}

/// Reads numeric CSV. A first record with no numeric field is taken as a header.
pub fn read_matrix_csv(path: &Path, what: &str) -> Result<DenseMatrix> {
    let mut reader = csv_reader(path)?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| HcnError::Parse {
            what: what.into(),
            row: line,
            message: e.to_string(),
        })?;
        if line == 0 && record.iter().all(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        if cols.is_none() {
            cols = Some(record.len());
        }
        if Some(record.len()) != cols {
            return Err(HcnError::Parse {
                what: what.into(),
                row: line,
                message: format!("expected {} fields, found {}", cols.unwrap(), record.len()),
            });
        }
        for field in record.iter() {
            let x: f64 = field.parse().map_err(|_| HcnError::Parse {
                what: what.into(),
                row: line,
                message: format!("non-numeric value {field:?}"),
            })?;
            if !x.is_finite() {
                return Err(HcnError::Parse {
                    what: what.into(),
                    row: line,
                    message: format!("non-finite value {field:?}"),
                });
            }
            data.push(x);
        }
        rows += 1;
    }
    DenseMatrix::from_vec(rows, cols.unwrap_or(0), data)
}

/// Reads one integer label per row (first column), header optional.
pub fn read_labels_csv(path: &Path) -> Result<Vec<i64>> {
    let what = format!("labels ({})", path.display());
    let mut reader = csv_reader(path)?;
    let mut labels = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| HcnError::Parse {
            what: what.clone(),
            row: line,
            message: e.to_string(),
        })?;
        let field = record.get(0).unwrap_or("");
        match field.parse::<i64>() {
            Ok(l) => labels.push(l),
            Err(_) if line == 0 && field.parse::<f64>().is_err() => continue,
            Err(_) => {
                return Err(HcnError::Parse {
                    what: what.clone(),
                    row: line,
                    message: format!("non-integer label {field:?}"),
                })
            }
        }
    }
    Ok(labels)
}

pub fn write_matrix_csv(m: &DenseMatrix, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| HcnError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(|x| x.to_string()).collect();
        writeln!(out, "{}", line.join(",")).map_err(|e| HcnError::io(path, e))?;
    }
    out.flush().map_err(|e| HcnError::io(path, e))
}

pub fn write_labels_csv(labels: &[usize], path: &Path) -> Result<()> {
    let mut text = String::with_capacity(labels.len() * 2);
    for l in labels {
        text.push_str(&l.to_string());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| HcnError::io(path, e))
}

pub fn write_matrix_binary(m: &DenseMatrix, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(32 + 8 * m.as_slice().len());
    bytes.extend_from_slice(BINARY_MAGIC);
    for v in [BINARY_VERSION, m.rows() as u64, m.cols() as u64] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for x in m.as_slice() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| HcnError::io(path, e))
}

pub fn read_matrix_binary(path: &Path, what: &str) -> Result<DenseMatrix> {
    let bytes = fs::read(path).map_err(|e| HcnError::io(path, e))?;
    let parse_err = |message: String| HcnError::Parse {
        what: what.into(),
        row: 0,
        message,
    };
    if bytes.len() < 32 || &bytes[..8] != BINARY_MAGIC {
        return Err(parse_err("missing binary matrix header".into()));
    }
    let word = |k: usize| u64::from_le_bytes(bytes[8 + 8 * k..16 + 8 * k].try_into().unwrap());
    let (version, rows, cols) = (word(0), word(1) as usize, word(2) as usize);
    if version != BINARY_VERSION {
        return Err(parse_err(format!("unsupported binary matrix version {version}")));
    }
    let body = &bytes[32..];
    let expected = rows.checked_mul(cols).and_then(|c| c.checked_mul(8));
    if expected != Some(body.len()) {
        return Err(parse_err(format!(
            "header declares {rows}x{cols} but the body holds {} bytes",
            body.len()
        )));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for (k, chunk) in body.chunks_exact(8).enumerate() {
        let x = f64::from_le_bytes(chunk.try_into().unwrap());
        if !x.is_finite() {
            return Err(HcnError::Parse {
                what: what.into(),
                row: k / cols.max(1),
                message: "non-finite value".into(),
            });
        }
        data.push(x);
    }
    DenseMatrix::from_vec(rows, cols, data)
}

/// Writes each view, the labels and a manifest into `dir`; returns the manifest path.
pub fn write_dataset(ds: &MultiviewDataset, dir: &Path, format: MatrixFormat) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| HcnError::io(dir, e))?;
    let mut views = Vec::new();
    for (v, m) in ds.views.iter().enumerate() {
        let file = match format {
            MatrixFormat::Csv => format!("view{v}.csv"),
            MatrixFormat::Binary => format!("view{v}.bin"),
        };
        let path = dir.join(&file);
        match format {
            MatrixFormat::Csv => write_matrix_csv(m, &path)?,
            MatrixFormat::Binary => write_matrix_binary(m, &path)?,
        }
        views.push(ViewEntry {
            path: file.into(),
            format,
            dims: Some([m.rows(), m.cols()]),
        });
    }
    let labels = match &ds.labels {
        Some(l) => {
            write_labels_csv(l, &dir.join("labels.csv"))?;
            Some(LabelsEntry {
                path: "labels.csv".into(),
            })
        }
        None => None,
    };
    let manifest = DatasetManifest {
        name: ds.name.clone(),
        views,
        labels,
    };
    let path = dir.join("manifest.toml");
    let text = toml::to_string(&manifest).map_err(|e| HcnError::Config(e.to_string()))?;
    fs::write(&path, text).map_err(|e| HcnError::io(&path, e))?;
    Ok(path)
}

// Generator shape. The shared latent carries the clusters; each view also
// sees a private nuisance factor that is independent across views. Every
// per-sample perturbation is proportional to `noise_sigma`.
const LATENT_DIM: usize = 8;
const CENTER_SCALE: f64 = 4.0;
const SHARED_JITTER: f64 = 4.0;
const NUISANCE_DIM: usize = 4;
const NUISANCE_GROUPS: usize = 3;
const NUISANCE_GAIN: f64 = 30.0;

/// Seeded multiview data with `k_true` clusters in a shared latent space.
///
/// Cluster centers `μ_c` are orthogonal with a common norm. Sample `i` in
/// cluster `c` has latent `μ_c + σ·s·ε_i`. View `v` maps it
/// through `tanh(latent·A_v + σ·g·η_i^v·B_v + b_v)` and adds `σ·N(0, 1)`,
/// where `η_i^v` is one of a few view-private nuisance centers drawn
/// independently per sample and view. Each view is then min-max normalized.
pub fn make_synthetic(
    n: usize,
    k_true: usize,
    view_dims: &[usize],
    noise_sigma: f64,
    seed: u64,
) -> Result<MultiviewDataset> {
    if k_true < 2 || n < k_true {
        return Err(HcnError::InvalidArgument(format!(
            "need n >= k_true >= 2, got n={n}, k_true={k_true}"
        )));
    }
    if view_dims.len() < 2 {
        return Err(HcnError::TooFewViews(view_dims.len()));
    }
    if view_dims.contains(&0) {
        return Err(HcnError::InvalidArgument("view widths must be positive".into()));
    }
    if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
        return Err(HcnError::InvalidArgument(format!(
            "noise_sigma must be finite and nonnegative, got {noise_sigma}"
        )));
    }
    let mut rng = stream_rng(seed, Stream::Synthetic, 0);
    let normal = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

    // orthonormalized Gaussian directions: every pair of centers is equally far apart
    let latent_dim = LATENT_DIM.max(k_true);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k_true);
    while centers.len() < k_true {
        let mut c: Vec<f64> = (0..latent_dim).map(|_| normal(&mut rng)).collect();
        for prev in &centers {
            let dot: f64 = c.iter().zip(prev).map(|(a, b)| a * b).sum::<f64>() / (CENTER_SCALE * CENTER_SCALE);
            c.iter_mut().zip(prev).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = c.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            centers.push(c.iter().map(|a| CENTER_SCALE * a / norm).collect());
        }
    }
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k_true)).collect();
    let latent: Vec<Vec<f64>> = labels
        .iter()
        .map(|&c| {
            centers[c]
                .iter()
                .map(|&mu| mu + noise_sigma * SHARED_JITTER * normal(&mut rng))
                .collect()
        })
        .collect();

    let mut views = Vec::with_capacity(view_dims.len());
    for &d in view_dims {
        let map_scale = 1.0 / CENTER_SCALE;
        let a: Vec<f64> = (0..latent_dim * d).map(|_| map_scale * normal(&mut rng)).collect();
        let bias: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
        let nuisance_scale = 1.0 / (NUISANCE_DIM as f64).sqrt();
        let b: Vec<f64> = (0..NUISANCE_DIM * d).map(|_| nuisance_scale * normal(&mut rng)).collect();
        let groups: Vec<Vec<f64>> = (0..NUISANCE_GROUPS)
            .map(|_| (0..NUISANCE_DIM).map(|_| normal(&mut rng)).collect())
            .collect();

        let mut data = Vec::with_capacity(n * d);
        for z in &latent {
            let g = &groups[rng.random_range(0..NUISANCE_GROUPS)];
            for j in 0..d {
                let mut pre = bias[j];
                for (l, zl) in z.iter().enumerate() {
                    pre += zl * a[l * d + j];
                }
                for (l, gl) in g.iter().enumerate() {
                    pre += noise_sigma * NUISANCE_GAIN * gl * b[l * d + j];
                }
                data.push(pre.tanh() + noise_sigma * normal(&mut rng));
            }
        }
        views.push(DenseMatrix::from_vec(n, d, data)?);
    }
    MultiviewDataset::normalized("synthetic", views, Some(labels))
}

/// Seeded shuffle of `0..n` for `(seed, epoch)`, cut into consecutive chunks
/// of `b`; the last chunk may be shorter. Panics if `b == 0`.
pub fn split_batches(n: usize, b: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(b >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Shuffle, epoch));
    order.chunks(b).map(<[usize]>::to_vec).collect()
}
