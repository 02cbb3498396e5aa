//! Multi-view datasets: construction, synthetic generation, delimited-text
//! IO, per-view normalization and minibatching.
//!
//! File formats:
//! - matrix: one sample per line, comma-separated decimal floats, no header;
//! - labels: one integer per line (any integer alphabet, remapped to `0..K`
//!   in ascending order);
//! - manifest: `key = value` lines `view.1 = path`, `view.2 = path`, ... and
//!   optionally `labels = path`. Relative paths resolve against the
//!   manifest's directory.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{DataError, Error, Result};
use crate::kv;

/// `M ≥ 2` feature matrices over the same `N ≥ 1` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewDataset {
    views: Vec<Array2<f64>>,
    labels: Option<Vec<usize>>,
}

impl MultiViewDataset {
    pub fn new(views: Vec<Array2<f64>>, labels: Option<Vec<usize>>) -> Result<Self, DataError> {
        if views.len() < 2 {
            return Err(DataError::Invalid(format!(
                "need at least 2 views, got {}",
                views.len()
            )));
        }
        let n = views[0].nrows();
        if n == 0 {
            return Err(DataError::Invalid("views have no samples".into()));
        }
        for (m, v) in views.iter().enumerate() {
            if v.nrows() != n {
                return Err(DataError::RowMismatch {
                    view: m + 1,
                    expected: n,
                    actual: v.nrows(),
                });
            }
            if v.ncols() == 0 {
                return Err(DataError::Invalid(format!("view {} has no features", m + 1)));
            }
            if !v.iter().all(|x| x.is_finite()) {
                return Err(DataError::Invalid(format!(
                    "view {} contains non-finite values",
                    m + 1
                )));
            }
        }
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(DataError::Invalid(format!(
                    "{} labels for {n} samples",
                    labels.len()
                )));
            }
            let k = labels.iter().max().map_or(0, |&m| m + 1);
            let mut seen = vec![false; k];
            for &l in labels {
                seen[l] = true;
            }
            if let Some(missing) = seen.iter().position(|s| !s) {
                return Err(DataError::Invalid(format!(
                    "class {missing} of 0..{k} has no members"
                )));
            }
        }
        Ok(Self { views, labels })
    }

    pub fn n_samples(&self) -> usize {
        self.views[0].nrows()
    }

    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.views.iter().map(|v| v.ncols()).collect()
    }

    pub fn views(&self) -> &[Array2<f64>] {
        &self.views
    }

    pub fn view(&self, m: usize) -> &Array2<f64> {
        &self.views[m]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Number of ground-truth classes, when labels are present.
    pub fn n_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().max().map_or(0, |&m| m + 1))
    }

    /// Rows `indices` of every view.
    pub fn batch(&self, indices: &[usize]) -> Vec<Array2<f64>> {
        self.views
            .iter()
            .map(|v| v.select(Axis(0), indices))
            .collect()
    }

    /// All views side by side.
    pub fn concatenated(&self) -> Array2<f64> {
        let parts: Vec<_> = self.views.iter().map(|v| v.view()).collect();
        ndarray::concatenate(Axis(1), &parts).expect("views share row count")
    }
}

/// Gaussian-mixture latent points pushed through random per-view projections.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub n_clusters: usize,
    pub latent_dim: usize,
    pub view_dims: Vec<usize>,
    /// Minimum pairwise distance between cluster means.
    pub cluster_separation: f64,
    pub noise_sigmas: Vec<f64>,
    pub seed: u64,
    /// Use the identity instead of a random projection (requires `view_dims[m] == latent_dim`).
    pub identity_projection: bool,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| Err(DataError::InvalidSpec(msg));
        if self.n_samples == 0 || self.n_clusters == 0 {
            return bad("n_samples and n_clusters must be positive".into());
        }
        if self.n_clusters > self.n_samples {
            return bad(format!(
                "{} clusters exceed {} samples",
                self.n_clusters, self.n_samples
            ));
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be at least 1".into());
        }
        if self.view_dims.len() < 2 {
            return bad("at least two views are required".into());
        }
        if self.view_dims.iter().any(|&d| d == 0) {
            return bad("view dimensions must be positive".into());
        }
        if self.noise_sigmas.len() != self.view_dims.len() {
            return bad(format!(
                "{} noise sigmas for {} views",
                self.noise_sigmas.len(),
                self.view_dims.len()
            ));
        }
        if self.noise_sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return bad("noise sigmas must be finite and non-negative".into());
        }
        if !(self.cluster_separation.is_finite() && self.cluster_separation > 0.0) {
            return bad("cluster_separation must be positive".into());
        }
        if self.identity_projection && self.view_dims.iter().any(|&d| d != self.latent_dim) {
            return bad("identity projection needs every view_dim equal to latent_dim".into());
        }
        Ok(())
    }
}

/// Generates the dataset described by `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<MultiViewDataset> {
    generate_with_latent(spec).map(|(ds, _)| ds)
}

/// Like [`generate_synthetic`] but also returns the `N×latent_dim` latent points.
pub fn generate_with_latent(spec: &SyntheticSpec) -> Result<(MultiViewDataset, Array2<f64>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (n, k, l) = (spec.n_samples, spec.n_clusters, spec.latent_dim);

    let means = cluster_means(k, l, spec.cluster_separation, &mut rng);

    // balanced assignment guarantees every cluster is populated
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(&mut rng);

    let latent = Array2::from_shape_fn((n, l), |(i, j)| {
        means[[labels[i], j]] + rng.sample::<f64, _>(StandardNormal)
    });

    let mut views = Vec::with_capacity(spec.view_dims.len());
    for (&dim, &sigma) in spec.view_dims.iter().zip(&spec.noise_sigmas) {
        let mut view = if spec.identity_projection {
            latent.clone()
        } else {
            // entries N(0, 1/dim) keep expected squared distances unchanged
            let scale = 1.0 / (dim as f64).sqrt();
            let proj = Array2::from_shape_simple_fn((l, dim), || {
                scale * rng.sample::<f64, _>(StandardNormal)
            });
            latent.dot(&proj)
        };
        if sigma > 0.0 {
            view.mapv_inplace(|x| x + sigma * rng.sample::<f64, _>(StandardNormal));
        }
        views.push(view);
    }
    let ds = MultiViewDataset::new(views, Some(labels))?;
    Ok((ds, latent))
}

/// `k` means in `R^l` whose minimum pairwise distance equals `separation`.
///
/// With `l ≥ k` the means are scaled orthonormal directions (a regular
/// simplex, all pairwise distances equal); otherwise random Gaussian
/// points are rescaled.
fn cluster_means<R: Rng>(k: usize, l: usize, separation: f64, rng: &mut R) -> Array2<f64> {
    let mut means = Array2::from_shape_simple_fn((k, l), || rng.sample::<f64, _>(StandardNormal));
    if k == 1 {
        means.fill(0.0);
        return means;
    }
    if l >= k {
        for i in 0..k {
            for j in 0..i {
                let prev = means.row(j).to_owned();
                let proj = means.row(i).dot(&prev);
                let mut row = means.row_mut(i);
                row.scaled_add(-proj, &prev);
            }
            let norm = means.row(i).dot(&means.row(i)).sqrt();
            means.row_mut(i).mapv_inplace(|x| x / norm);
        }
        means *= separation / std::f64::consts::SQRT_2;
    } else {
        let mut min_dist = f64::INFINITY;
        for i in 0..k {
            for j in 0..i {
                let d = &means.row(i) - &means.row(j);
                min_dist = min_dist.min(d.dot(&d).sqrt());
            }
        }
        means *= separation / min_dist;
    }
    means
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Normalization {
    #[default]
    MinMax,
    ZScore,
    None,
}

impl Normalization {
    pub fn name(self) -> &'static str {
        match self {
            Normalization::MinMax => "min-max",
            Normalization::ZScore => "z-score",
            Normalization::None => "none",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "min-max" | "minmax" => Some(Normalization::MinMax),
            "z-score" | "zscore" => Some(Normalization::ZScore),
            "none" => Some(Normalization::None),
            _ => None,
        }
    }
}

/// Column-wise normalization of every view. Constant columns become 0.
pub fn normalize_views(ds: &MultiViewDataset, mode: Normalization) -> MultiViewDataset {
    let views = ds
        .views
        .iter()
        .map(|v| {
            let mut out = v.clone();
            for mut col in out.columns_mut() {
                match mode {
                    Normalization::None => {}
                    Normalization::MinMax => {
                        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let range = hi - lo;
                        if range > 0.0 {
                            col.mapv_inplace(|x| (x - lo) / range);
                        } else {
                            col.fill(0.0);
                        }
                    }
                    Normalization::ZScore => {
                        let n = col.len() as f64;
                        let mean = col.sum() / n;
                        let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                        let std = var.sqrt();
                        if std > 0.0 {
                            col.mapv_inplace(|x| (x - mean) / std);
                        } else {
                            col.fill(0.0);
                        }
                    }
                }
            }
            out
        })
        .collect();
    MultiViewDataset {
        views,
        labels: ds.labels.clone(),
    }
}

/// A seeded permutation of `0..n` cut into consecutive chunks of `batch_size`.
///
/// Each `(seed, epoch)` pair yields its own permutation.
pub fn minibatch_indices(
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > n {
        return Err(Error::InvalidArgument(format!(
            "batch size {batch_size} must be in 1..={n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let text = read_file(path)?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut count = 0;
        for (j, cell) in line.split(',').enumerate() {
            let cell = cell.trim();
            match cell.parse::<f64>() {
                Ok(x) if x.is_finite() => data.push(x),
                _ => {
                    return Err(DataError::NonNumeric {
                        path: path.to_path_buf(),
                        line: i + 1,
                        column: j + 1,
                        cell: cell.to_string(),
                    }
                    .into())
                }
            }
            count += 1;
        }
        match cols {
            None => cols = Some(count),
            Some(c) if c != count => {
                return Err(DataError::RaggedRow {
                    path: path.to_path_buf(),
                    line: i + 1,
                    expected: c,
                    actual: count,
                }
                .into())
            }
            _ => {}
        }
        rows += 1;
    }
    let cols = cols.unwrap_or(0);
    Ok(Array2::from_shape_vec((rows, cols), data).expect("rows × cols cells"))
}

pub fn write_matrix(path: &Path, m: &Array2<f64>) -> Result<()> {
    let mut out = Vec::with_capacity(m.len() * 12);
    for row in m.rows() {
        for (j, x) in row.iter().enumerate() {
            if j > 0 {
                out.push(b',');
            }
            write!(out, "{x}")?;
        }
        out.push(b'\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads integer labels and remaps them to `0..K` in ascending order.
pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = read_file(path)?;
    let mut raw = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let cell = line.trim();
        if cell.is_empty() {
            continue;
        }
        let v: i64 = cell.parse().map_err(|_| DataError::BadLabel {
            path: path.to_path_buf(),
            line: i + 1,
            cell: cell.to_string(),
        })?;
        raw.push(v);
    }
    let mut alphabet: BTreeMap<i64, usize> = raw.iter().map(|&v| (v, 0)).collect();
    for (i, slot) in alphabet.values_mut().enumerate() {
        *slot = i;
    }
    Ok(raw.iter().map(|v| alphabet[v]).collect())
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut out = String::with_capacity(labels.len() * 3);
    for l in labels {
        out.push_str(&l.to_string());
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Loads the dataset described by a manifest file.
pub fn load_dataset(manifest: &Path) -> Result<MultiViewDataset> {
    let text = read_file(manifest)?;
    let manifest_err = |message: String| DataError::Manifest {
        path: manifest.to_path_buf(),
        message,
    };
    let entries = kv::parse(&text).map_err(|(line, msg)| manifest_err(format!("line {line}: {msg}")))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let resolve = |p: &str| -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };

    let mut view_paths: BTreeMap<usize, PathBuf> = BTreeMap::new();
    let mut labels_path = None;
    for e in &entries {
        if e.key == "labels" {
            labels_path = Some(resolve(&e.value));
        } else if let Some(idx) = e.key.strip_prefix("view.") {
            let idx: usize = idx
                .parse()
                .ok()
                .filter(|&i| i >= 1)
                .ok_or_else(|| manifest_err(format!("bad view key {:?}", e.key)))?;
            view_paths.insert(idx, resolve(&e.value));
        } else {
            return Err(manifest_err(format!("unknown key {:?}", e.key)).into());
        }
    }
    if let Some(pos) = view_paths.keys().enumerate().position(|(p, &i)| i != p + 1) {
        return Err(manifest_err(format!("view.{} is missing", pos + 1)).into());
    }

    let mut views = Vec::with_capacity(view_paths.len());
    for (m, path) in view_paths.values().enumerate() {
        let v = read_matrix(path)?;
        if let Some(first) = views.first() {
            let first: &Array2<f64> = first;
            if v.nrows() != first.nrows() {
                return Err(DataError::RowMismatch {
                    view: m + 1,
                    expected: first.nrows(),
                    actual: v.nrows(),
                }
                .into());
            }
        }
        views.push(v);
    }
    let labels = labels_path.map(|p| read_labels(&p)).transpose()?;
    Ok(MultiViewDataset::new(views, labels)?)
}

/// Writes `view{m}.csv`, optional `labels.txt` and `manifest.txt` into `dir`.
pub fn write_dataset(ds: &MultiViewDataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (m, v) in ds.views().iter().enumerate() {
        let name = format!("view{}.csv", m + 1);
        write_matrix(&dir.join(&name), v)?;
        manifest.push_str(&format!("view.{} = {name}\n", m + 1));
    }
    if let Some(labels) = ds.labels() {
        write_labels(&dir.join("labels.txt"), labels)?;
        manifest.push_str("labels = labels.txt\n");
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest)?;
    Ok(path)
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DataError::MissingFile {
            path: path.to_path_buf(),
        }
        .into(),
        _ => Error::Io(e),
    })
}
